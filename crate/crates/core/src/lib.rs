//! Merging independently trained feed-forward networks into one multi-task
//! network by layer-wise neuron sharing.
//!
//! The crate is `no_std` with `alloc`. File formats, IDX loading and the
//! command line live in the companion `mtz` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod data;
pub mod error;
pub mod hessian;
pub mod linalg;
pub mod model;
pub mod trainer;
pub mod zipper;

use alloc::string::String;
use core::fmt;

pub use error::{Error, Result};

/// Name of an inference task (one per original network).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(name: impl Into<String>) -> Self {
        TaskId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId::new(s)
    }
}

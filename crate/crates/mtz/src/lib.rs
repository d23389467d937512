//! File formats, dataset loading and the command-line interface around
//! `mtz-core`.

pub mod cli;
pub mod datasets;
pub mod format;
pub mod report;

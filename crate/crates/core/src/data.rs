//! Datasets, IDX parsing, synthetic correlated tasks, batching and metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure_dim, Error, Result};
use crate::hessian::CalibrationSet;
use crate::linalg::Matrix;
use crate::model::{Network, ZippedModel};
use crate::TaskId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Supervision attached to each sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One class per sample.
    Labels { labels: Vec<usize>, classes: usize },
    /// Independent binary attributes (0 or 1) per sample.
    Attributes(Matrix),
    /// Real-valued regression targets.
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels { labels, .. } => labels.len(),
            Targets::Attributes(m) | Targets::Values(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of the network output these targets expect.
    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Labels { classes, .. } => *classes,
            Targets::Attributes(m) | Targets::Values(m) => m.cols(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Attributes(m) => Targets::Attributes(m.select_rows(idx)),
            Targets::Values(m) => Targets::Values(m.select_rows(idx)),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Targets::Labels { labels, classes } => {
                if *classes == 0 || labels.iter().any(|&l| l >= *classes) {
                    return Err(Error::InvalidConfig("label outside class range".into()));
                }
            }
            Targets::Attributes(m) => {
                if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidConfig("attributes must be 0 or 1".into()));
                }
            }
            Targets::Values(m) => {
                if !m.is_finite() {
                    return Err(Error::NonFinite("regression targets"));
                }
            }
        }
        Ok(())
    }
}

/// Samples as rows of `inputs` plus their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    targets: Targets,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets, split: Split) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::EmptyData);
        }
        ensure_dim("targets per sample", inputs.rows(), targets.len())?;
        if !inputs.is_finite() {
            return Err(Error::NonFinite("dataset inputs"));
        }
        targets.validate()?;
        Ok(Dataset { inputs, targets, split })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn batch(&self, idx: &[usize]) -> (Matrix, Targets) {
        (self.inputs.select_rows(idx), self.targets.select(idx))
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (inputs, targets) = self.batch(&idx);
        Dataset {
            inputs,
            targets,
            split: self.split,
        }
    }
}

/// Epoch-wise shuffled mini-batches with a private seeded stream.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyData);
        }
        if batch == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(BatchSampler {
            order,
            pos: 0,
            batch: batch.min(n),
            rng,
        })
    }

    /// Indices of the next batch; reshuffles when an epoch runs out.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// `n` distinct training samples drawn with a fixed seed.
pub fn calibration_set(ds: &Dataset, n: usize, seed: u64, task: TaskId) -> Result<CalibrationSet> {
    if ds.split != Split::Train {
        return Err(Error::InvalidConfig("calibration samples come from the training split".into()));
    }
    if n == 0 {
        return Err(Error::EmptyCalibration);
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n.min(ds.len()));
    idx.sort_unstable();
    CalibrationSet::new(ds.inputs.select_rows(&idx), task)
}

/// Misclassification rate of raw network outputs.
///
/// Labels use the argmax rule (first maximum wins); attributes count a wrong
/// sign of the logit per attribute. Regression targets have no error rate.
pub fn error_rate(outputs: &Matrix, targets: &Targets) -> Result<f64> {
    ensure_dim("outputs per sample", targets.len(), outputs.rows())?;
    ensure_dim("output width", targets.output_dim(), outputs.cols())?;
    if targets.is_empty() {
        return Err(Error::EmptyData);
    }
    match targets {
        Targets::Labels { labels, .. } => {
            let wrong = labels
                .iter()
                .enumerate()
                .filter(|(i, &l)| argmax(outputs.row(*i)) != l)
                .count();
            Ok(wrong as f64 / labels.len() as f64)
        }
        Targets::Attributes(t) => {
            let wrong = outputs
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .filter(|(o, t)| (**o > 0.0) != (**t == 1.0))
                .count();
            Ok(wrong as f64 / t.as_slice().len() as f64)
        }
        Targets::Values(_) => Err(Error::InvalidConfig("error rate needs class or attribute targets".into())),
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Test error of a single network.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<f64> {
    ensure_dim("dataset input", net.input_dim(), ds.input_dim())?;
    let out = predict_chunked(|x| net.predict(x), &ds.inputs)?;
    error_rate(&out, &ds.targets)
}

/// Test error of one task of a joint model.
pub fn evaluate_task(zm: &ZippedModel, task: usize, ds: &Dataset) -> Result<f64> {
    let net = zm.task_network(task)?;
    evaluate(&net, ds)
}

fn predict_chunked(f: impl Fn(&Matrix) -> Result<Matrix>, x: &Matrix) -> Result<Matrix> {
    const CHUNK: usize = 1000;
    if x.rows() <= CHUNK {
        return f(x);
    }
    let mut data = Vec::new();
    let mut cols = 0;
    let mut start = 0;
    while start < x.rows() {
        let end = (start + CHUNK).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let out = f(&x.select_rows(&idx))?;
        cols = out.cols();
        data.extend_from_slice(out.as_slice());
        start = end;
    }
    Matrix::from_vec(x.rows(), cols, data)
}

/// Magic number of IDX unsigned-byte tensors with 3 dimensions (images).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic number of IDX unsigned-byte tensors with 1 dimension (labels).
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parsed IDX image file: `count × rows × cols` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IdxError {
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    Magic { expected: u32, found: u32 },
    #[error("IDX data truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

fn be_u32(bytes: &[u8], at: usize) -> core::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            have: bytes.len(),
        })
}

pub fn parse_idx_images(bytes: &[u8]) -> core::result::Result<IdxImages, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::Magic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..needed].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> core::result::Result<Vec<u8>, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::Magic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(IdxError::Truncated {
            needed: 8 + n,
            have: bytes.len(),
        });
    }
    Ok(bytes[8..8 + n].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a 10-class dataset from parsed IDX images and labels, scaling
/// pixels by 1/255.
pub fn idx_dataset(images: &IdxImages, labels: &[u8], split: Split) -> Result<Dataset> {
    let n = images.count();
    if n != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{}",
            IdxError::CountMismatch {
                images: n,
                labels: labels.len()
            }
        )));
    }
    let dim = images.rows * images.cols;
    let inputs = Matrix::from_vec(
        n,
        dim,
        images.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    Dataset::new(
        inputs,
        Targets::Labels {
            labels: labels.iter().map(|&l| l as usize).collect(),
            classes,
        },
        split,
    )
}

/// A classification task generated by a random teacher network.
///
/// Tasks with the same `trunk_seed` (and widths) share the teacher's hidden
/// layers and differ only in their output heads, which makes them correlated.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    pub trunk_seed: u64,
    pub input_dim: usize,
    pub classes: usize,
    pub trunk: Vec<usize>,
    pub label_noise: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl SyntheticTaskSpec {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 || self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::InvalidConfig("synthetic task needs inputs, ≥2 classes and samples".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::InvalidConfig("label noise must lie in [0, 1]".into()));
        }
        if self.trunk.contains(&0) {
            return Err(Error::InvalidConfig("teacher widths must be positive".into()));
        }
        Ok(())
    }
}

/// Train and test split of one synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Generates every task of `specs` deterministically from its seeds.
///
/// Inputs are uniform in `[0, 1]`. The teacher trunk is a relu network drawn
/// from `trunk_seed`; its features are standardized over the task's samples
/// before a task-specific linear head picks the label by argmax, so classes
/// come out roughly balanced.
pub fn gen_correlated_tasks(specs: &[SyntheticTaskSpec]) -> Result<Vec<TaskData>> {
    specs.iter().map(gen_task).collect()
}

fn gen_task(spec: &SyntheticTaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let mut trunk_rng = ChaCha8Rng::seed_from_u64(spec.trunk_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    let mut width = spec.input_dim;
    for &h in &spec.trunk {
        let normal = Normal::new(0.0, libm::sqrt(2.0 / width as f64)).expect("positive scale");
        let w = Matrix::from_fn(width, h, |_, _| normal.sample(&mut trunk_rng));
        let b: Vec<f64> = (0..h).map(|_| trunk_rng.random_range(-0.5..0.5)).collect();
        layers.push((w, b));
        width = h;
    }
    let normal = Normal::new(0.0, 1.0).expect("unit scale");
    let head = Matrix::from_fn(width, spec.classes, |_, _| normal.sample(&mut rng));
    let n = spec.train_samples + spec.test_samples;
    let x = Matrix::from_fn(n, spec.input_dim, |_, _| rng.random_range(0.0..1.0));
    let mut feats = x.clone();
    for (w, b) in &layers {
        feats = feats.matmul(w)?;
        for r in 0..n {
            for (v, bb) in feats.row_mut(r).iter_mut().zip(b) {
                *v = (*v + bb).max(0.0);
            }
        }
    }
    standardize_columns(&mut feats);
    let logits = feats.matmul(&head)?;
    let mut labels: Vec<usize> = (0..n).map(|r| argmax(logits.row(r))).collect();
    for l in labels.iter_mut() {
        if spec.label_noise > 0.0 && rng.random_bool(spec.label_noise) {
            *l = rng.random_range(0..spec.classes);
        }
    }
    let train_idx: Vec<usize> = (0..spec.train_samples).collect();
    let test_idx: Vec<usize> = (spec.train_samples..n).collect();
    let make = |idx: &[usize], split| {
        Dataset::new(
            x.select_rows(idx),
            Targets::Labels {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: spec.classes,
            },
            split,
        )
    };
    Ok(TaskData {
        train: make(&train_idx, Split::Train)?,
        test: make(&test_idx, Split::Test)?,
    })
}

fn standardize_columns(m: &mut Matrix) {
    let (n, c) = (m.rows(), m.cols());
    for j in 0..c {
        let mean = (0..n).map(|i| m.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| { let d = m.get(i, j) - mean; d * d }).sum::<f64>() / n as f64;
        let sd = libm::sqrt(var).max(1e-12);
        for i in 0..n {
            m.set(i, j, (m.get(i, j) - mean) / sd);
        }
    }
}

/// Class histogram of a labelled dataset.
pub fn class_counts(ds: &Dataset) -> Vec<usize> {
    match &ds.targets {
        Targets::Labels { labels, classes } => {
            let mut counts = vec![0; *classes];
            for &l in labels {
                counts[l] += 1;
            }
            counts
        }
        _ => Vec::new(),
    }
}

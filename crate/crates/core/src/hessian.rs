//! Layer-wise Hessians of the pre-activation error from calibration data.
//!
//! For a layer with incoming weight vector `w` (one column of the weight
//! matrix) and inputs `x` augmented with a constant 1 for the bias, the error
//! `E(w) = (weight / 2n) Σ ‖(w − w₀)ᵀ x‖²` has Hessian `(weight / n) Σ x xᵀ`,
//! independent of which unit the column belongs to. Conv layers sum over
//! output positions, with `x` a flattened input patch.

use alloc::vec::Vec;

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{Matrix, SpdMatrix};
use crate::model::{conv, LayerKind, Network, ZippedModel};
use crate::TaskId;

/// Samples processed per Gram update; bounds the patch buffer of conv layers.
const CHUNK: usize = 256;

/// `weight · mean`, where `mean = (1/n) Σ x xᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianEstimate {
    mean: SpdMatrix,
    n_samples: usize,
    weight: f64,
    task: TaskId,
}

impl HessianEstimate {
    pub fn new(mean: SpdMatrix, n_samples: usize, weight: f64, task: TaskId) -> Result<Self> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidConfig("hessian weight must be finite and nonnegative".into()));
        }
        Ok(HessianEstimate {
            mean,
            n_samples,
            weight,
            task,
        })
    }

    /// The weighted Hessian.
    pub fn matrix(&self) -> SpdMatrix {
        self.mean.scaled(self.weight)
    }

    /// The unweighted second-moment matrix `(1/n) Σ x xᵀ`.
    pub fn mean(&self) -> &SpdMatrix {
        &self.mean
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn task(&self) -> &TaskId {
        &self.task
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    pub(crate) fn set_weight(&mut self, weight: f64) {
        self.weight = weight;
    }

    /// Re-expresses the estimate in new coordinates: coordinate `k` takes old
    /// coordinate `map[k]`, or is identically zero for `None`.
    pub fn remap(&self, map: &[Option<usize>]) -> HessianEstimate {
        let n = map.len();
        let mut m = Matrix::zeros(n, n);
        for (i, oi) in map.iter().enumerate() {
            let Some(oi) = oi else { continue };
            for (j, oj) in map.iter().enumerate() {
                if let Some(oj) = oj {
                    m.set(i, j, self.mean.get(*oi, *oj));
                }
            }
        }
        HessianEstimate {
            mean: SpdMatrix::from_matrix(m).expect("principal rearrangement stays symmetric"),
            n_samples: self.n_samples,
            weight: self.weight,
            task: self.task.clone(),
        }
    }

    /// Principal submatrix on the given coordinates.
    pub fn restrict(&self, idx: &[usize]) -> HessianEstimate {
        HessianEstimate {
            mean: self.mean.principal_submatrix(idx),
            n_samples: self.n_samples,
            weight: self.weight,
            task: self.task.clone(),
        }
    }
}

/// Training-split samples used to estimate Hessians for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    inputs: Matrix,
    task: TaskId,
}

impl CalibrationSet {
    pub fn new(inputs: Matrix, task: TaskId) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::EmptyCalibration);
        }
        if !inputs.is_finite() {
            return Err(Error::NonFinite("calibration inputs"));
        }
        Ok(CalibrationSet { inputs, task })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn task(&self) -> &TaskId {
        &self.task
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// `(weight / n) Σ x xᵀ` over the rows of `x`, optionally augmenting every
/// row with a trailing constant 1.
pub fn hessian_from_inputs(x: &Matrix, weight: f64, with_bias: bool, task: TaskId) -> Result<HessianEstimate> {
    if x.rows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    let n = x.rows();
    let mut acc = Accumulator::new(x.cols(), with_bias);
    acc.add(x)?;
    HessianEstimate::new(acc.finish(n), n, weight, task)
}

/// Gram accumulator over augmented inputs.
struct Accumulator {
    sum: SpdMatrix,
    with_bias: bool,
}

impl Accumulator {
    fn new(dim: usize, with_bias: bool) -> Self {
        Accumulator {
            sum: SpdMatrix::zeros(dim + with_bias as usize),
            with_bias,
        }
    }

    fn add(&mut self, x: &Matrix) -> Result<()> {
        if self.with_bias {
            let c = x.cols();
            let aug = Matrix::from_fn(x.rows(), c + 1, |r, k| if k < c { x.get(r, k) } else { 1.0 });
            self.sum.accumulate_gram(&aug, 1.0)
        } else {
            self.sum.accumulate_gram(x, 1.0)
        }
    }

    fn finish(self, n: usize) -> SpdMatrix {
        self.sum.scaled(1.0 / n as f64)
    }
}

/// Rows that multiply `layers[i]`'s weight matrix for a batch of layer inputs:
/// the activations themselves, or im2col patches for conv layers.
pub(crate) fn weight_inputs(net: &Network, i: usize, acts: &Matrix) -> Matrix {
    match net.layers()[i].kind() {
        LayerKind::Conv(g) => conv::im2col(acts, g),
        _ => acts.clone(),
    }
}

/// Hessian of hidden layer `l` (1-based, `1 ≤ l < L`) over all of its weight
/// rows plus the bias coordinate.
pub fn layer_hessian(net: &Network, l: usize, calib: &CalibrationSet, weight: f64) -> Result<HessianEstimate> {
    if l == 0 || l >= net.depth() {
        return Err(Error::LayerOutOfRange {
            index: l,
            max: net.depth().saturating_sub(1),
        });
    }
    estimate_layer(net, l - 1, calib, weight)
}

fn estimate_layer(net: &Network, i: usize, calib: &CalibrationSet, weight: f64) -> Result<HessianEstimate> {
    ensure_dim("calibration input", net.input_dim(), calib.inputs.cols())?;
    let x = calib.inputs();
    let n = x.rows();
    let dim = net.layers()[i].weights().rows();
    let mut acc = Accumulator::new(dim, true);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let acts = net.layer_input(&x.select_rows(&idx), i)?;
        acc.add(&weight_inputs(net, i, &acts))?;
        start = end;
    }
    HessianEstimate::new(acc.finish(n), n, weight, calib.task().clone())
}

/// Hessian of task `t` for joint layer `layers[i]`, over every joint weight
/// row of that layer plus the bias; rows the task does not use are zero.
pub fn joint_layer_hessian(
    zm: &ZippedModel,
    i: usize,
    t: usize,
    calib: &CalibrationSet,
    weight: f64,
) -> Result<HessianEstimate> {
    if i + 1 >= zm.depth() {
        return Err(Error::LayerOutOfRange {
            index: i + 1,
            max: zm.depth().saturating_sub(1),
        });
    }
    let view = zm.task_view(t)?;
    let local = estimate_layer(view.network(), i, calib, weight)?;
    let joint_rows = zm.layers()[i].weights.rows();
    let mut map: Vec<Option<usize>> = alloc::vec![None; joint_rows + 1];
    for (k, &r) in view.rows(i).iter().enumerate() {
        map[r] = Some(k);
    }
    map[joint_rows] = Some(view.rows(i).len());
    Ok(local.remap(&map))
}

/// Combines two estimates of the same coordinates. The result's mean is the
/// weight-averaged mean, its weight the total, so its matrix is the sum of
/// both weighted matrices.
pub fn merge_hessians(existing: &HessianEstimate, incoming: &HessianEstimate) -> Result<HessianEstimate> {
    ensure_dim("merge_hessians", existing.dim(), incoming.dim())?;
    if incoming.weight == 0.0 {
        return Ok(existing.clone());
    }
    if existing.weight == 0.0 {
        return Ok(HessianEstimate {
            task: existing.task.clone(),
            ..incoming.clone()
        });
    }
    let total = existing.weight + incoming.weight;
    let mean = existing
        .mean
        .scaled(existing.weight / total)
        .sum(&incoming.mean.scaled(incoming.weight / total))?;
    HessianEstimate::new(mean, existing.n_samples + incoming.n_samples, total, existing.task.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::Architecture;
    use crate::model::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t() -> TaskId {
        TaskId::new("t")
    }

    #[test]
    fn single_outer_product() {
        let x = Matrix::from_vec(1, 2, alloc::vec![1.0, 2.0]).unwrap();
        let h = hessian_from_inputs(&x, 1.0, false, t()).unwrap();
        assert_eq!(h.matrix().as_slice(), &[1.0, 2.0, 2.0, 4.0]);
        let half = hessian_from_inputs(&x, 0.5, false, t()).unwrap();
        assert_eq!(half.matrix().as_slice(), &[0.5, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn duplication_leaves_estimate_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::from_fn(13, 4, |_, _| rng.random_range(-1.0..1.0));
        let rows: Vec<usize> = (0..13).chain(0..13).collect();
        let a = hessian_from_inputs(&x, 0.7, true, t()).unwrap().matrix();
        let b = hessian_from_inputs(&x.select_rows(&rows), 0.7, true, t()).unwrap().matrix();
        assert!(a.to_matrix().max_abs_diff(&b.to_matrix()) <= 1e-12);
    }

    #[test]
    fn estimates_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let h = hessian_from_inputs(&x, 1.0, true, t()).unwrap().matrix();
        for _ in 0..1000 {
            let v: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(h.quadratic_form(&v).unwrap() >= -1e-10);
        }
    }

    #[test]
    fn merge_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let h = hessian_from_inputs(&x, 0.5, true, t()).unwrap();
        let zero = HessianEstimate::new(SpdMatrix::identity(4), 9, 0.0, t()).unwrap();
        assert_eq!(merge_hessians(&h, &zero).unwrap(), h);
        let hh = merge_hessians(&h, &h).unwrap();
        assert!(hh.mean().to_matrix().max_abs_diff(&h.mean().to_matrix()) <= 1e-15);
        assert!(merge_hessians(&h, &hessian_from_inputs(&x, 1.0, false, t()).unwrap()).is_err());
    }

    #[test]
    fn layer_range_and_empty_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Architecture::mlp(&[4])
            .build(t(), Shape::Flat(3), 2, &mut rng)
            .unwrap();
        let calib = CalibrationSet::new(Matrix::from_fn(4, 3, |i, j| (i + j) as f64), t()).unwrap();
        assert!(layer_hessian(&net, 0, &calib, 1.0).is_err());
        assert!(layer_hessian(&net, 2, &calib, 1.0).is_err());
        assert_eq!(layer_hessian(&net, 1, &calib, 1.0).unwrap().dim(), 3 + 1);
        assert!(matches!(CalibrationSet::new(Matrix::zeros(0, 3), t()), Err(Error::EmptyCalibration)));
    }
}

//! Layer-wise neuron sharing between networks with Hessian-optimal updates.
//!
//! Two units `a` and `b` with incoming weights `w_a`, `w_b` (over the inputs
//! both sides read, plus the bias) are replaced by one unit. The updates
//! `δ_a`, `δ_b` minimising `½ δ_aᵀ H_a δ_a + ½ δ_bᵀ H_b δ_b` subject to
//! `w_a + δ_a = w_b + δ_b` are
//!
//! ```text
//! δ_a = (H_a + H_b)⁻¹ H_b (w_b − w_a),   δ_b = (H_a + H_b)⁻¹ H_a (w_a − w_b)
//! ```
//!
//! and the minimum, the functional difference of the pair, is
//! `½ uᵀ H_a (H_a + H_b)⁻¹ H_b u` with `u = w_a − w_b`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{evaluate, evaluate_task, Dataset};
use crate::error::{ensure_dim, Error, Result};
use crate::hessian::{joint_layer_hessian, CalibrationSet, HessianEstimate};
use crate::linalg::{dot, gemm, Cholesky, Matrix, SpdMatrix};
use crate::model::{LayerKind, MergedUnit, Network, TaskSet, ZippedModel};
use crate::trainer::{retrain_joint, RetrainSchedule, TrainConfig};
use crate::TaskId;

/// How many units of a layer to share.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShareTarget {
    Count(usize),
    /// Fraction of the smaller side's candidate units, rounded to nearest.
    Fraction(f64),
    Full,
    /// Every pair whose functional difference is at most this value.
    Threshold(f64),
    /// Threshold selection that must reach at least `min_count` pairs.
    Combined { min_count: usize, threshold: f64 },
}

impl ShareTarget {
    fn validate(&self) -> Result<()> {
        match *self {
            ShareTarget::Fraction(f) if !(0.0..=1.0).contains(&f) => {
                Err(Error::InvalidConfig(format!("share fraction {f} outside [0, 1]")))
            }
            ShareTarget::Threshold(t) | ShareTarget::Combined { threshold: t, .. } if !(t >= 0.0) => {
                Err(Error::InvalidConfig(format!("threshold {t} must be nonnegative")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchingPolicy {
    /// Repeatedly take the cheapest remaining pair.
    Greedy,
    /// Minimum total difference for the requested count; at most 16 units on
    /// the second side.
    Exhaustive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMethod {
    /// Difference-ranked pairs with optimal weight updates.
    Hessian,
    /// Random disjoint pairs; each merged unit keeps one side's weights.
    Random { seed: u64 },
}

/// Everything that controls one zipping run.
#[derive(Clone, Debug, PartialEq)]
pub struct MergePlan {
    /// One target per hidden layer.
    pub targets: Vec<ShareTarget>,
    /// Loss weight of the first side; the second side gets `1 − alpha`.
    pub alpha: f64,
    pub policy: MatchingPolicy,
    pub method: MergeMethod,
    pub retrain: RetrainSchedule,
    /// Learning rate, batch size, loss and seed for retraining. Its
    /// `iterations` field is ignored in favour of the schedule.
    pub train: TrainConfig,
}

impl MergePlan {
    pub fn new(targets: Vec<ShareTarget>) -> Self {
        let n = targets.len();
        MergePlan {
            targets,
            alpha: 0.5,
            policy: MatchingPolicy::Greedy,
            method: MergeMethod::Hessian,
            retrain: RetrainSchedule::none(n),
            train: TrainConfig::default(),
        }
    }

    /// Shares every hidden unit without retraining.
    pub fn full(hidden_layers: usize) -> Self {
        MergePlan::new(vec![ShareTarget::Full; hidden_layers])
    }

    /// Shares nothing.
    pub fn none(hidden_layers: usize) -> Self {
        MergePlan::new(vec![ShareTarget::Count(0); hidden_layers])
    }

    pub fn validate(&self, hidden_layers: usize) -> Result<()> {
        ensure_dim("share targets per hidden layer", hidden_layers, self.targets.len())?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        for t in &self.targets {
            t.validate()?;
        }
        if self.retrain.total() > 0 {
            self.train.validate()?;
        }
        Ok(())
    }
}

/// Per-task inputs of a zipping run. Calibration data is needed for every
/// task without cached Hessians; training data only when retraining.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaskInputs<'a> {
    pub calibration: Option<&'a CalibrationSet>,
    pub train: Option<&'a Dataset>,
    pub eval: Option<&'a Dataset>,
}

/// Result of merging one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMerge {
    pub merged: Vec<f64>,
    pub delta_a: Vec<f64>,
    pub delta_b: Vec<f64>,
    /// Functional difference: the minimum of the constrained cost.
    pub difference: f64,
    /// Total damping added to `H_a + H_b`, split evenly between both sides.
    pub damping: f64,
}

/// Factorization of `H_a + H_b` shared by every pair of one layer.
pub struct PairSolver {
    ha: SpdMatrix,
    hb: SpdMatrix,
    chol: Cholesky,
    equal: bool,
}

impl PairSolver {
    pub fn new(ha: &SpdMatrix, hb: &SpdMatrix) -> Result<Self> {
        ensure_dim("paired hessians", ha.dim(), hb.dim())?;
        let sum = ha.sum(hb)?;
        let chol = sum.factor()?;
        let extra = (chol.damping() - sum.damping()).max(0.0);
        let ha = ha.clone().with_damping(ha.damping() + extra / 2.0);
        let hb = hb.clone().with_damping(hb.damping() + extra / 2.0);
        let equal = ha == hb;
        Ok(PairSolver { ha, hb, chol, equal })
    }

    pub fn dim(&self) -> usize {
        self.ha.dim()
    }

    /// Damping added on top of the inputs' own damping, summed over both sides.
    pub fn damping(&self) -> f64 {
        self.chol.damping()
    }

    /// `L⁻¹ H_a u` and `L⁻¹ H_b u` where `L Lᵀ = H_a + H_b`.
    fn whitened(&self, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut y = self.ha.mul_vec(u)?;
        let mut z = self.hb.mul_vec(u)?;
        self.chol.forward_solve(&mut y);
        self.chol.forward_solve(&mut z);
        Ok((y, z))
    }

    pub fn difference(&self, wa: &[f64], wb: &[f64]) -> Result<f64> {
        ensure_dim("pair weights", wa.len(), wb.len())?;
        let u: Vec<f64> = wa.iter().zip(wb).map(|(a, b)| a - b).collect();
        let (y, z) = self.whitened(&u)?;
        Ok((0.5 * dot(&y, &z)).max(0.0))
    }

    pub fn merge(&self, wa: &[f64], wb: &[f64]) -> Result<PairMerge> {
        ensure_dim("pair weights", self.dim(), wa.len())?;
        ensure_dim("pair weights", self.dim(), wb.len())?;
        let u: Vec<f64> = wa.iter().zip(wb).map(|(a, b)| a - b).collect();
        let (y, mut z) = self.whitened(&u)?;
        let difference = (0.5 * dot(&y, &z)).max(0.0);
        let merged: Vec<f64> = if self.equal {
            wa.iter().zip(wb).map(|(a, b)| 0.5 * (a + b)).collect()
        } else {
            self.chol.backward_solve(&mut z);
            wa.iter().zip(&z).map(|(a, s)| a - s).collect()
        };
        let delta_a = merged.iter().zip(wa).map(|(m, a)| m - a).collect();
        let delta_b = merged.iter().zip(wb).map(|(m, b)| m - b).collect();
        Ok(PairMerge {
            merged,
            delta_a,
            delta_b,
            difference,
            damping: self.damping(),
        })
    }

    /// Differences of every pair of columns, `wa` is `dim × na`, `wb` is
    /// `dim × nb`; the result is `na × nb`.
    pub fn score_all(&self, wa: &Matrix, wb: &Matrix) -> Result<Matrix> {
        ensure_dim("candidate rows", self.dim(), wa.rows())?;
        ensure_dim("candidate rows", self.dim(), wb.rows())?;
        let n = self.dim();
        let mut ya = self.ha.damped_matrix();
        let mut yb = self.hb.damped_matrix();
        self.chol.forward_solve_mat(&mut ya)?;
        self.chol.forward_solve_mat(&mut yb)?;
        let mut k = Matrix::zeros(n, n);
        gemm(1.0, ya.view().t(), yb.view(), 0.0, &mut k);
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (k.get(i, j) + k.get(j, i));
                k.set(i, j, s);
                k.set(j, i, s);
            }
        }
        let mut ka = Matrix::zeros(n, wa.cols());
        gemm(1.0, k.view(), wa.view(), 0.0, &mut ka);
        let mut kb = Matrix::zeros(n, wb.cols());
        gemm(1.0, k.view(), wb.view(), 0.0, &mut kb);
        let mut cross = Matrix::zeros(wa.cols(), wb.cols());
        gemm(1.0, wa.view().t(), kb.view(), 0.0, &mut cross);
        let qa: Vec<f64> = (0..wa.cols()).map(|c| column_dot(wa, &ka, c)).collect();
        let qb: Vec<f64> = (0..wb.cols()).map(|c| column_dot(wb, &kb, c)).collect();
        Ok(Matrix::from_fn(wa.cols(), wb.cols(), |i, j| {
            (0.5 * (qa[i] + qb[j] - 2.0 * cross.get(i, j))).max(0.0)
        }))
    }
}

fn column_dot(a: &Matrix, b: &Matrix, c: usize) -> f64 {
    (0..a.rows()).map(|r| a.get(r, c) * b.get(r, c)).sum()
}

/// Functional difference of one pair.
pub fn functional_difference(wa: &[f64], wb: &[f64], ha: &SpdMatrix, hb: &SpdMatrix) -> Result<f64> {
    PairSolver::new(ha, hb)?.difference(wa, wb)
}

/// Optimal merged weights and updates of one pair.
pub fn optimal_merge(wa: &[f64], wb: &[f64], ha: &SpdMatrix, hb: &SpdMatrix) -> Result<PairMerge> {
    PairSolver::new(ha, hb)?.merge(wa, wb)
}

/// Mask of a merged sparse unit: the input with more connections wins, the
/// first on ties.
pub fn merge_mask<'m>(mask_a: &'m [f64], mask_b: &'m [f64]) -> &'m [f64] {
    let ones = |m: &[f64]| m.iter().filter(|v| **v != 0.0).count();
    if ones(mask_b) > ones(mask_a) {
        mask_b
    } else {
        mask_a
    }
}

/// Optimal merge restricted to the winning mask (bias last, always kept).
pub fn merge_sparse(
    wa: &[f64],
    wb: &[f64],
    mask_a: &[f64],
    mask_b: &[f64],
    solver: &PairSolver,
) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_dim("sparse mask", wa.len(), mask_a.len() + 1)?;
    ensure_dim("sparse mask", mask_a.len(), mask_b.len())?;
    let mask = merge_mask(mask_a, mask_b).to_vec();
    let mut merged = solver.merge(wa, wb)?.merged;
    for (w, m) in merged.iter_mut().zip(&mask) {
        if *m == 0.0 {
            *w = 0.0;
        }
    }
    Ok((merged, mask))
}

/// Picks disjoint pairs from an `na × nb` cost matrix. Infinite entries are
/// never chosen. Returns `(i, j)` pairs in selection order.
pub fn select_pairs(
    cost: &Matrix,
    target: ShareTarget,
    policy: MatchingPolicy,
    layer: usize,
) -> Result<Vec<(usize, usize)>> {
    target.validate()?;
    let (na, nb) = (cost.rows(), cost.cols());
    let available = na.min(nb);
    let (count, threshold, min_count) = match target {
        ShareTarget::Count(k) => (Some(k), None, 0),
        ShareTarget::Fraction(f) => (Some(libm::round(f * available as f64) as usize), None, 0),
        ShareTarget::Full => (Some(available), None, 0),
        ShareTarget::Threshold(t) => (None, Some(t), 0),
        ShareTarget::Combined { min_count, threshold } => (None, Some(threshold), min_count),
    };
    if let Some(k) = count {
        if k > available {
            return Err(Error::InfeasibleTarget {
                layer,
                requested: k,
                available,
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        if policy == MatchingPolicy::Exhaustive {
            return exhaustive(cost, k, layer);
        }
    }
    let mut order: Vec<(f64, usize, usize)> = Vec::with_capacity(na * nb);
    for i in 0..na {
        for j in 0..nb {
            let d = cost.get(i, j);
            if d.is_finite() && threshold.is_none_or(|t| d <= t) {
                order.push((d, i, j));
            }
        }
    }
    order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let limit = count.unwrap_or(available);
    let mut used_a = vec![false; na];
    let mut used_b = vec![false; nb];
    let mut pairs = Vec::new();
    for (_, i, j) in order {
        if pairs.len() == limit {
            break;
        }
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    let required = count.unwrap_or(min_count);
    if pairs.len() < required {
        return Err(Error::InfeasibleTarget {
            layer,
            requested: required,
            available: pairs.len(),
        });
    }
    Ok(pairs)
}

const EXHAUSTIVE_MAX_B: usize = 16;
const EXHAUSTIVE_MAX_A: usize = 64;

fn exhaustive(cost: &Matrix, k: usize, layer: usize) -> Result<Vec<(usize, usize)>> {
    let (na, nb) = (cost.rows(), cost.cols());
    if nb > EXHAUSTIVE_MAX_B || na > EXHAUSTIVE_MAX_A {
        return Err(Error::InvalidConfig(format!(
            "exhaustive matching supports at most {EXHAUSTIVE_MAX_A}×{EXHAUSTIVE_MAX_B} candidates, got {na}×{nb}"
        )));
    }
    let states = 1usize << nb;
    // best[i][mask]: cheapest assignment of the first i A units using B set mask.
    let mut best = vec![vec![f64::INFINITY; states]; na + 1];
    // choice[i][mask]: B unit paired with A unit i - 1, or nb for none.
    let mut choice = vec![vec![nb; states]; na + 1];
    best[0][0] = 0.0;
    for i in 0..na {
        for mask in 0..states {
            let base = best[i][mask];
            if !base.is_finite() {
                continue;
            }
            if base < best[i + 1][mask] {
                best[i + 1][mask] = base;
                choice[i + 1][mask] = nb;
            }
            if mask.count_ones() as usize >= k {
                continue;
            }
            for j in 0..nb {
                let c = cost.get(i, j);
                if mask & (1 << j) != 0 || !c.is_finite() {
                    continue;
                }
                let next = mask | (1 << j);
                if base + c < best[i + 1][next] {
                    best[i + 1][next] = base + c;
                    choice[i + 1][next] = j;
                }
            }
        }
    }
    let mut end = None;
    for mask in 0..states {
        if mask.count_ones() as usize == k && best[na][mask].is_finite() {
            match end {
                Some(m) if best[na][m] <= best[na][mask] => {}
                _ => end = Some(mask),
            }
        }
    }
    let mut mask = end.ok_or(Error::InfeasibleTarget {
        layer,
        requested: k,
        available: 0,
    })?;
    let mut pairs = Vec::with_capacity(k);
    for i in (1..=na).rev() {
        let j = choice[i][mask];
        if j < nb {
            pairs.push((i - 1, j));
            mask &= !(1 << j);
        }
    }
    pairs.reverse();
    Ok(pairs)
}

/// What happened at one hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    /// 1-based hidden layer index.
    pub layer: usize,
    pub kind: &'static str,
    pub candidates_a: usize,
    pub candidates_b: usize,
    pub shared: usize,
    pub d_min: f64,
    pub d_median: f64,
    pub d_max: f64,
    /// Sum of the differences of the merged pairs.
    pub delta_e: f64,
    /// Per-task error after this layer (and its retraining), if evaluated.
    pub errors: Vec<Option<f64>>,
    pub params_saved: usize,
    /// No input is read by both sides; pairs were scored on the bias alone.
    pub degenerate: bool,
    pub damping: f64,
    pub retrain_iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZipReport {
    pub tasks: Vec<TaskId>,
    pub errors_before: Vec<Option<f64>>,
    pub layers: Vec<LayerReport>,
    pub params_before: usize,
    pub params_after: usize,
}

fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::from("nan")
    } else {
        format!("{v:.6e}")
    }
}

impl fmt::Display for ZipReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            write!(
                f,
                "layer={} kind={} candidates_a={} candidates_b={} shared={} d_min={} d_median={} d_max={} delta_e={}",
                l.layer,
                l.kind,
                l.candidates_a,
                l.candidates_b,
                l.shared,
                fmt_opt(l.d_min),
                fmt_opt(l.d_median),
                fmt_opt(l.d_max),
                fmt_opt(l.delta_e)
            )?;
            for (t, e) in self.tasks.iter().zip(&self.errors_before) {
                if let Some(e) = e {
                    write!(f, " err_pre_{t}={e:.4}")?;
                }
            }
            for (t, e) in self.tasks.iter().zip(&l.errors) {
                if let Some(e) = e {
                    write!(f, " err_post_{t}={e:.4}")?;
                }
            }
            writeln!(
                f,
                " params_saved={} degenerate={} damping={:.3e} retrain={}",
                l.params_saved, l.degenerate, l.damping, l.retrain_iterations
            )?;
        }
        write!(f, "summary tasks=")?;
        for (k, t) in self.tasks.iter().enumerate() {
            write!(f, "{}{t}", if k > 0 { "," } else { "" })?;
        }
        write!(
            f,
            " params_before={} params_after={} shared={}",
            self.params_before,
            self.params_after,
            self.layers.iter().map(|l| l.shared).sum::<usize>()
        )?;
        let last = self.layers.last().map(|l| &l.errors);
        for (k, t) in self.tasks.iter().enumerate() {
            if let Some(e) = self.errors_before[k] {
                write!(f, " err_pre_{t}={e:.4}")?;
            }
            if let Some(Some(e)) = last.and_then(|v| v.get(k)) {
                write!(f, " err_post_{t}={e:.4}")?;
            }
        }
        writeln!(f)
    }
}

/// Zips two networks into a joint model.
///
/// Layers are processed from the input upwards; the output layer stays
/// task-specific.
pub fn zip_models(
    a: &Network,
    b: &Network,
    inputs: [TaskInputs<'_>; 2],
    plan: &MergePlan,
) -> Result<(ZippedModel, ZipReport)> {
    let mut zm = ZippedModel::from_networks(a, b)?;
    plan.validate(zm.depth() - 1)?;
    zm.set_task_weights(vec![plan.alpha, 1.0 - plan.alpha])?;
    let errors_before = vec![
        inputs[0].eval.map(|d| evaluate(a, d)).transpose()?,
        inputs[1].eval.map(|d| evaluate(b, d)).transpose()?,
    ];
    let params_before = a.parameter_count() + b.parameter_count();
    zip_groups(zm, TaskSet::single(0), TaskSet::single(1), &inputs, plan, errors_before, params_before)
}

/// Adds one more network to a joint model and zips it with all existing
/// tasks. `inputs` holds one entry per existing task followed by the new one.
///
/// Existing tasks without calibration data reuse the Hessians cached by the
/// previous zipping run.
pub fn zip_additional(
    zm: &ZippedModel,
    c: &Network,
    inputs: &[TaskInputs<'_>],
    plan: &MergePlan,
) -> Result<(ZippedModel, ZipReport)> {
    let existing = zm.num_tasks();
    ensure_dim("task inputs", existing + 1, inputs.len())?;
    let mut errors_before = (0..existing)
        .map(|t| inputs[t].eval.map(|d| evaluate_task(zm, t, d)).transpose())
        .collect::<Result<Vec<_>>>()?;
    errors_before.push(inputs[existing].eval.map(|d| evaluate(c, d)).transpose()?);
    let params_before = zm.parameter_count() + c.parameter_count();
    let old_weights = zm.task_weights().to_vec();
    let mut zm = zm.clone();
    let new = zm.add_network(c)?;
    plan.validate(zm.depth() - 1)?;
    let mut weights: Vec<f64> = old_weights.iter().map(|w| w * plan.alpha).collect();
    weights.push(1.0 - plan.alpha);
    zm.set_task_weights(weights)?;
    zip_groups(
        zm,
        TaskSet::first(existing),
        TaskSet::single(new),
        inputs,
        plan,
        errors_before,
        params_before,
    )
}

fn zip_groups(
    mut zm: ZippedModel,
    ga: TaskSet,
    gb: TaskSet,
    inputs: &[TaskInputs<'_>],
    plan: &MergePlan,
    errors_before: Vec<Option<f64>>,
    params_before: usize,
) -> Result<(ZippedModel, ZipReport)> {
    let mut layers = Vec::with_capacity(zm.depth() - 1);
    for i in 0..zm.depth() - 1 {
        let mut report = zip_layer(&mut zm, i, ga, gb, inputs, plan).map_err(|e| e.at_layer(i + 1))?;
        let iters = plan.retrain.after_layer(i + 1);
        if iters > 0 {
            let data = inputs
                .iter()
                .map(|t| t.train.ok_or_else(|| Error::InvalidConfig("retraining needs training data for every task".into())))
                .collect::<Result<Vec<_>>>()?;
            let cfg = TrainConfig {
                iterations: iters,
                seed: plan.train.seed.wrapping_add(i as u64),
                ..plan.train.clone()
            };
            zm = retrain_joint(&zm, &data, &cfg, &mut |_| {})?;
        }
        report.retrain_iterations = iters;
        report.errors = (0..zm.num_tasks())
            .map(|t| inputs[t].eval.map(|d| evaluate_task(&zm, t, d)).transpose())
            .collect::<Result<Vec<_>>>()?;
        layers.push(report);
    }
    let report = ZipReport {
        tasks: zm.tasks().to_vec(),
        errors_before,
        layers,
        params_before,
        params_after: zm.parameter_count(),
    };
    Ok((zm, report))
}

fn pad_calibration(calib: &CalibrationSet, features: usize) -> Result<CalibrationSet> {
    let x = calib.inputs();
    if x.cols() == features {
        return Ok(calib.clone());
    }
    if x.cols() > features {
        return Err(Error::DimensionMismatch {
            context: "calibration input",
            expected: features,
            actual: x.cols(),
        });
    }
    let padded = Matrix::from_fn(x.rows(), features, |r, c| if c < x.cols() { x.get(r, c) } else { 0.0 });
    CalibrationSet::new(padded, calib.task().clone())
}

/// Hessian of task `t` at `layers[i]`, from calibration data when given and
/// from the cache otherwise. The result is written back to the cache.
fn task_hessian(zm: &mut ZippedModel, i: usize, t: usize, inputs: &[TaskInputs<'_>]) -> Result<HessianEstimate> {
    let dim = zm.layers()[i].weights.rows() + 1;
    let est = match inputs.get(t).and_then(|x| x.calibration) {
        Some(calib) => {
            let calib = pad_calibration(calib, zm.input_shape().features())?;
            joint_layer_hessian(zm, i, t, &calib, zm.task_weights()[t])?
        }
        None => zm.cached_hessian(i, t).cloned().ok_or(Error::EmptyCalibration)?,
    };
    ensure_dim("cached hessian", dim, est.dim())?;
    zm.store_hessian(i, t, est.clone());
    Ok(est)
}

fn group_hessian(ests: &[(usize, HessianEstimate)], group: TaskSet, coords: &[usize]) -> Result<SpdMatrix> {
    let mut acc = SpdMatrix::zeros(coords.len());
    for (t, est) in ests {
        if group.contains(*t) {
            acc = acc.sum(&est.matrix().principal_submatrix(coords))?;
        }
    }
    Ok(acc)
}

/// Index of the layer whose units feed the residual shortcut of the block
/// containing `layers[i]`, if `layers[i]` is part of a block.
fn block_source(zm: &ZippedModel, i: usize) -> Option<usize> {
    match zm.layers()[i].kind {
        LayerKind::ResidualEntry => Some(i),
        LayerKind::ResidualExit { .. } => Some(i - 1),
        _ => None,
    }
}

fn zip_layer(
    zm: &mut ZippedModel,
    i: usize,
    ga: TaskSet,
    gb: TaskSet,
    inputs: &[TaskInputs<'_>],
    plan: &MergePlan,
) -> Result<LayerReport> {
    let layer_no = i + 1;
    let target = plan.targets[i];
    let kind = zm.layers()[i].kind.name();
    let units = &zm.layers()[i].units;
    let cand_a: Vec<usize> = (0..units.len()).filter(|&u| units[u].users == ga).collect();
    let cand_b: Vec<usize> = (0..units.len()).filter(|&u| units[u].users == gb).collect();
    let rpu = zm.rows_per_unit(i);
    let joint_rows = zm.layers()[i].weights.rows();
    let shared_prev: Vec<usize> = zm
        .prev_units(i)
        .iter()
        .enumerate()
        .filter(|(_, u)| u.users.intersects(ga) && u.users.intersects(gb))
        .map(|(k, _)| k)
        .collect();
    let mut coords: Vec<usize> = shared_prev.iter().flat_map(|&u| u * rpu..(u + 1) * rpu).collect();
    coords.push(joint_rows);
    let degenerate = shared_prev.is_empty();

    let mut report = LayerReport {
        layer: layer_no,
        kind,
        candidates_a: cand_a.len(),
        candidates_b: cand_b.len(),
        shared: 0,
        d_min: f64::NAN,
        d_median: f64::NAN,
        d_max: f64::NAN,
        delta_e: 0.0,
        errors: Vec::new(),
        params_saved: 0,
        degenerate,
        damping: 0.0,
        retrain_iterations: 0,
    };
    let wants_none = matches!(target, ShareTarget::Count(0) | ShareTarget::Fraction(0.0));
    if wants_none {
        return Ok(report);
    }

    let mut ests = Vec::new();
    for t in ga.union(gb).iter() {
        ests.push((t, task_hessian(zm, i, t, inputs)?));
    }
    let ha = group_hessian(&ests, ga, &coords)?;
    let hb = group_hessian(&ests, gb, &coords)?;
    let solver = PairSolver::new(&ha, &hb)?;
    report.damping = solver.damping();

    let jl = &zm.layers()[i];
    let vectors = |cands: &[usize]| {
        Matrix::from_fn(coords.len(), cands.len(), |r, c| {
            let u = cands[c];
            if r + 1 == coords.len() {
                jl.bias[u]
            } else {
                jl.weights.get(coords[r], u)
            }
        })
    };
    let wa = vectors(&cand_a);
    let wb = vectors(&cand_b);
    let shortcut = match &jl.kind {
        LayerKind::ResidualExit { shortcut } => Some(shortcut.clone()),
        _ => None,
    };
    let forbidden = |a: usize, b: usize| shortcut.as_ref().is_some_and(|s| s[cand_a[a]] != s[cand_b[b]]);

    let pairs = match plan.method {
        MergeMethod::Hessian => {
            let mut cost = solver.score_all(&wa, &wb)?;
            for a in 0..cand_a.len() {
                for b in 0..cand_b.len() {
                    if forbidden(a, b) {
                        cost.set(a, b, f64::INFINITY);
                    }
                }
            }
            select_pairs(&cost, target, plan.policy, layer_no)?
        }
        MergeMethod::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((layer_no as u64) << 32));
            let k = match target {
                ShareTarget::Count(k) => k,
                ShareTarget::Fraction(f) => libm::round(f * cand_a.len().min(cand_b.len()) as f64) as usize,
                ShareTarget::Full => cand_a.len().min(cand_b.len()),
                _ => {
                    return Err(Error::InvalidConfig("random sharing needs a count, fraction or full target".into()));
                }
            };
            let mut all: Vec<(usize, usize)> = (0..cand_a.len())
                .flat_map(|a| (0..cand_b.len()).map(move |b| (a, b)))
                .filter(|&(a, b)| !forbidden(a, b))
                .collect();
            all.shuffle(&mut rng);
            let mut used_a = BTreeSet::new();
            let mut used_b = BTreeSet::new();
            let mut pairs = Vec::new();
            for (a, b) in all {
                if pairs.len() == k {
                    break;
                }
                if !used_a.contains(&a) && !used_b.contains(&b) {
                    used_a.insert(a);
                    used_b.insert(b);
                    pairs.push((a, b));
                }
            }
            if pairs.len() < k {
                return Err(Error::InfeasibleTarget {
                    layer: layer_no,
                    requested: k,
                    available: pairs.len(),
                });
            }
            pairs
        }
    };
    if pairs.is_empty() {
        return Ok(report);
    }

    if let Some(src) = block_source(zm, i) {
        if src > 0 {
            let one_sided = zm.layers()[src - 1]
                .units
                .iter()
                .any(|u| u.users.intersects(ga) != u.users.intersects(gb));
            if one_sided {
                return Err(Error::ResidualPrecondition { layer: layer_no });
            }
        }
    }

    let mut rng = match plan.method {
        MergeMethod::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed.wrapping_add(layer_no as u64))),
        MergeMethod::Hessian => None,
    };
    let jl = &zm.layers()[i];
    let shared_row = {
        let mut s = vec![false; joint_rows];
        for &r in &coords[..coords.len() - 1] {
            s[r] = true;
        }
        s
    };
    let mut merged_units = Vec::with_capacity(pairs.len());
    let mut diffs = Vec::with_capacity(pairs.len());
    for &(pa, pb) in &pairs {
        let (ua, ub) = (cand_a[pa], cand_b[pb]);
        let va = wa.column(pa);
        let vb = wb.column(pb);
        let (mut vec_m, d) = match rng.as_mut() {
            None => {
                let m = solver.merge(&va, &vb)?;
                (m.merged, m.difference)
            }
            Some(rng) => {
                let d = solver.difference(&va, &vb)?;
                (if rng.random_bool(0.5) { va.clone() } else { vb.clone() }, d)
            }
        };
        diffs.push(d);
        let mut mask_col = None;
        if let Some(mask) = &jl.mask {
            let ma: Vec<f64> = coords[..coords.len() - 1].iter().map(|&r| mask.get(r, ua)).collect();
            let mb: Vec<f64> = coords[..coords.len() - 1].iter().map(|&r| mask.get(r, ub)).collect();
            let keep = merge_mask(&ma, &mb).to_vec();
            for (w, m) in vec_m.iter_mut().zip(&keep) {
                if *m == 0.0 {
                    *w = 0.0;
                }
            }
            let mut full = vec![0.0; joint_rows];
            for (k, &r) in coords[..coords.len() - 1].iter().enumerate() {
                full[r] = keep[k];
            }
            for (r, f) in full.iter_mut().enumerate() {
                if !shared_row[r] {
                    *f = mask.get(r, ua).max(mask.get(r, ub));
                }
            }
            mask_col = Some(full);
        }
        let mut column: Vec<f64> = (0..joint_rows)
            .map(|r| if shared_row[r] { 0.0 } else { jl.weights.get(r, ua) + jl.weights.get(r, ub) })
            .collect();
        for (k, &r) in coords[..coords.len() - 1].iter().enumerate() {
            column[r] = vec_m[k];
        }
        merged_units.push(MergedUnit {
            a: ua,
            b: ub,
            column,
            bias: vec_m[coords.len() - 1],
            mask: mask_col,
        });
    }
    zm.apply_merge(i, merged_units)?;

    let mut sorted = diffs.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    report.shared = n;
    report.d_min = sorted[0];
    report.d_max = sorted[n - 1];
    report.d_median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    report.delta_e = diffs.iter().sum();
    report.params_saved = n * (shared_prev.len() * rpu + 1);
    Ok(report)
}

/// Largest absolute difference between a network's outputs and the joint
/// model's outputs for the same task.
pub fn output_drift(original: &Network, zm: &ZippedModel, t: usize, x: &Matrix) -> Result<f64> {
    let joint = zm.predict_task(t, x)?;
    let own = original.predict(x)?;
    Ok(own.max_abs_diff(&joint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::data::Targets;
    use crate::model::arch::Architecture;
    use crate::model::Shape;
    use crate::linalg::Permutation;
    use alloc::string::ToString;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_spd(n: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
        let x = Matrix::from_fn(n + 3, n, |_, _| rng.random_range(-1.0..1.0));
        let mut h = SpdMatrix::zeros(n);
        h.accumulate_gram(&x, 1.0).unwrap();
        h
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn identity_hessians_give_midpoint() {
        let h = SpdMatrix::identity(2);
        let m = optimal_merge(&[0.0, 0.0], &[2.0, 4.0], &h, &h).unwrap();
        assert_eq!(m.merged, vec![1.0, 2.0]);
        assert!((m.difference - 5.0).abs() < 1e-12);
    }

    #[test]
    fn scaled_hessians_weight_the_merge() {
        // H_a = 3I, H_b = I: the merged weight sits three quarters toward w_a.
        let ha = SpdMatrix::identity(1).scaled(3.0);
        let hb = SpdMatrix::identity(1);
        let m = optimal_merge(&[0.0], &[4.0], &ha, &hb).unwrap();
        assert!((m.merged[0] - 1.0).abs() < 1e-12);
        assert!((m.difference - 6.0).abs() < 1e-12);
    }

    #[test]
    fn identical_weights_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ha = rand_spd(4, &mut rng);
        let hb = rand_spd(4, &mut rng);
        let w = rand_vec(4, &mut rng);
        let m = optimal_merge(&w, &w, &ha, &hb).unwrap();
        assert_eq!(m.difference, 0.0);
        assert_eq!(m.merged, w);
    }

    #[test]
    fn singular_sum_is_damped() {
        let ha = SpdMatrix::zeros(2);
        let hb = SpdMatrix::from_diagonal(&[1.0, 0.0]);
        let m = optimal_merge(&[1.0, 1.0], &[0.0, 0.0], &ha, &hb).unwrap();
        assert!(m.damping > 0.0);
        assert!(m.merged.iter().all(|v| v.is_finite()));
        assert!(matches!(
            optimal_merge(&[1.0], &[0.0], &SpdMatrix::zeros(1), &SpdMatrix::zeros(1)),
            Err(Error::FactorizationFailed { .. })
        ));
    }

    #[test]
    fn batch_scores_match_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ha = rand_spd(5, &mut rng);
        let hb = rand_spd(5, &mut rng);
        let wa = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let wb = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let s = PairSolver::new(&ha, &hb).unwrap();
        let all = s.score_all(&wa, &wb).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let d = s.difference(&wa.column(i), &wb.column(j)).unwrap();
                assert!((all.get(i, j) - d).abs() <= 1e-10 * (1.0 + d));
            }
        }
    }

    #[test]
    fn greedy_and_exhaustive_selection() {
        let cost = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 100.0]).unwrap();
        let g = select_pairs(&cost, ShareTarget::Full, MatchingPolicy::Greedy, 1).unwrap();
        assert_eq!(g, vec![(0, 0), (1, 1)]);
        let e = select_pairs(&cost, ShareTarget::Full, MatchingPolicy::Exhaustive, 1).unwrap();
        assert_eq!(e, vec![(0, 1), (1, 0)]);
        let t = select_pairs(&cost, ShareTarget::Threshold(1.5), MatchingPolicy::Greedy, 1).unwrap();
        assert_eq!(t, vec![(0, 0)]);
        assert!(matches!(
            select_pairs(&cost, ShareTarget::Count(3), MatchingPolicy::Greedy, 1),
            Err(Error::InfeasibleTarget { requested: 3, available: 2, .. })
        ));
        assert!(matches!(
            select_pairs(&cost, ShareTarget::Combined { min_count: 2, threshold: 1.5 }, MatchingPolicy::Greedy, 1),
            Err(Error::InfeasibleTarget { .. })
        ));
        let mut forb = cost.clone();
        forb.set(1, 1, f64::INFINITY);
        forb.set(0, 1, f64::INFINITY);
        assert!(select_pairs(&forb, ShareTarget::Full, MatchingPolicy::Greedy, 1).is_err());
        assert_eq!(select_pairs(&cost, ShareTarget::Fraction(0.5), MatchingPolicy::Greedy, 1).unwrap().len(), 1);
    }

    #[test]
    fn sparse_merge_keeps_larger_mask() {
        let h = SpdMatrix::identity(4);
        let s = PairSolver::new(&h, &h).unwrap();
        let (w, m) = merge_sparse(&[1.0, 0.0, 3.0, 1.0], &[1.0, 2.0, 0.0, 1.0], &[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0], &s).unwrap();
        assert_eq!(m, vec![1.0, 0.0, 1.0]);
        assert_eq!(w, vec![1.0, 0.0, 1.5, 1.0]);
        let (_, m) = merge_sparse(&[0.0; 4], &[0.0; 4], &[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0], &s).unwrap();
        assert_eq!(m, vec![1.0, 1.0, 0.0]);
    }

    fn toy_data(n: usize, seed: u64) -> (CalibrationSet, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|r| usize::from(x.get(r, 0) + x.get(r, 1) > 0.0)).collect();
        let ds = Dataset::new(x.clone(), Targets::Labels { labels, classes: 2 }, Split::Train).unwrap();
        (CalibrationSet::new(x, TaskId::new("c")).unwrap(), ds)
    }

    #[test]
    fn self_zip_with_permuted_copy_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Architecture::mlp(&[6, 5]).build(TaskId::new("a"), Shape::Flat(4), 2, &mut rng).unwrap();
        let mut b = a.clone();
        b.set_task(TaskId::new("b"));
        b.permute_units(1, &Permutation::random(6, &mut rng)).unwrap();
        b.permute_units(2, &Permutation::random(5, &mut rng)).unwrap();
        let (calib, _) = toy_data(50, 4);
        let inp = TaskInputs { calibration: Some(&calib), ..Default::default() };
        let (zm, report) = zip_models(&a, &b, [inp, inp], &MergePlan::full(2)).unwrap();
        assert_eq!(zm.shared_units(1), 6);
        assert_eq!(zm.shared_units(2), 5);
        assert!(report.layers.iter().all(|l| l.delta_e <= 1e-12));
        let x = Matrix::from_fn(20, 4, |_, _| rng.random_range(-1.0..1.0));
        assert!(output_drift(&a, &zm, 0, &x).unwrap() <= 1e-10);
        assert!(output_drift(&b, &zm, 1, &x).unwrap() <= 1e-10);
    }

    #[test]
    fn zero_sharing_is_exact_and_counts_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Architecture::mlp(&[6, 5]).build(TaskId::new("a"), Shape::Flat(4), 2, &mut rng).unwrap();
        let b = Architecture::mlp(&[6, 5]).build(TaskId::new("b"), Shape::Flat(4), 2, &mut rng).unwrap();
        let (zm, report) = zip_models(&a, &b, [TaskInputs::default(); 2], &MergePlan::none(2)).unwrap();
        assert_eq!(report.params_after, a.parameter_count() + b.parameter_count());
        let x = Matrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(zm.predict_task(0, &x).unwrap(), a.predict(&x).unwrap());
        assert_eq!(zm.predict_task(1, &x).unwrap(), b.predict(&x).unwrap());
    }

    #[test]
    fn partial_zip_then_additional_and_retrain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let nets: Vec<Network> = ["a", "b", "c"]
            .iter()
            .map(|t| Architecture::mlp(&[8, 6]).build(TaskId::new(*t), Shape::Flat(4), 2, &mut rng).unwrap())
            .collect();
        let (calib, ds) = toy_data(64, 7);
        let inp = TaskInputs { calibration: Some(&calib), train: Some(&ds), eval: Some(&ds) };
        let mut plan = MergePlan::new(vec![ShareTarget::Count(4), ShareTarget::Fraction(0.5)]);
        plan.retrain = RetrainSchedule::uniform(2, 5);
        plan.train.batch_size = 16;
        let (zm, report) = zip_models(&nets[0], &nets[1], [inp, inp], &plan).unwrap();
        assert_eq!(zm.shared_units(1), 4);
        assert_eq!(zm.shared_units(2), 3);
        assert!(report.params_after < report.params_before);
        assert!(report.to_string().contains("layer=2 kind=dense"));
        // The third task reuses cached Hessians for the first two.
        let old = TaskInputs { calibration: None, ..inp };
        let (z3, r3) = zip_additional(&zm, &nets[2], &[old, old, inp], &MergePlan::new(vec![ShareTarget::Count(2); 2])).unwrap();
        assert_eq!(z3.num_tasks(), 3);
        assert_eq!(r3.layers[0].shared, 2);
        assert!(ZippedModel::from_parts(z3.to_parts()).is_ok());
        let missing = TaskInputs::default();
        assert!(matches!(
            zip_additional(&ZippedModel::from_network(&nets[0]), &nets[1], &[missing, inp], &MergePlan::full(2)),
            Err(Error::AtLayer { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn merge_satisfies_constraint_and_cost(seed in 0u64..10_000, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ha = rand_spd(n, &mut rng);
            let hb = rand_spd(n, &mut rng);
            let wa = rand_vec(n, &mut rng);
            let wb = rand_vec(n, &mut rng);
            let m = optimal_merge(&wa, &wb, &ha, &hb).unwrap();
            for k in 0..n {
                prop_assert!((wa[k] + m.delta_a[k] - wb[k] - m.delta_b[k]).abs() <= 1e-8);
            }
            let cost = 0.5 * (ha.quadratic_form(&m.delta_a).unwrap() + hb.quadratic_form(&m.delta_b).unwrap());
            prop_assert!((cost - m.difference).abs() <= 1e-8 * (1.0 + cost));
            // Symmetric in the two sides.
            let r = optimal_merge(&wb, &wa, &hb, &ha).unwrap();
            prop_assert!((r.difference - m.difference).abs() <= 1e-8 * (1.0 + cost));
        }
    }
}

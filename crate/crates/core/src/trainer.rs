//! Backpropagation and plain SGD for single networks and joint models.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::{BatchSampler, Dataset, Targets};
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::model::{conv, LayerKind, Network, ZippedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Loss {
    SoftmaxCrossEntropy,
    SigmoidPerAttribute,
    /// `½‖y − t‖²` per sample.
    MeanSquared,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::SoftmaxCrossEntropy => "softmax-cross-entropy",
            Loss::SigmoidPerAttribute => "sigmoid-per-attribute",
            Loss::MeanSquared => "mean-squared",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub loss: Loss,
    /// Emit a log event every this many iterations (0 disables logging).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 64,
            iterations: 1000,
            seed: 0,
            loss: Loss::SoftmaxCrossEntropy,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Retraining iterations after zipping each hidden layer.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RetrainSchedule {
    pub per_layer: Vec<usize>,
}

impl RetrainSchedule {
    pub fn none(layers: usize) -> Self {
        RetrainSchedule {
            per_layer: vec![0; layers],
        }
    }

    pub fn uniform(layers: usize, iterations: usize) -> Self {
        RetrainSchedule {
            per_layer: vec![iterations; layers],
        }
    }

    /// Iterations after hidden layer `l` (1-based); missing entries mean none.
    pub fn after_layer(&self, l: usize) -> usize {
        self.per_layer.get(l.wrapping_sub(1)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.per_layer.iter().sum()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainEvent {
    pub iteration: usize,
    pub loss: f64,
}

impl fmt::Display for TrainEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iteration={} loss={:.6}", self.iteration, self.loss)
    }
}

/// Per-layer parameter gradients (same shapes as the layers).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Mean loss over the batch and its gradient with respect to the outputs.
pub fn loss_and_output_grad(out: &Matrix, targets: &Targets, loss: Loss) -> Result<(f64, Matrix)> {
    let b = out.rows();
    if b == 0 {
        return Err(Error::EmptyData);
    }
    ensure_dim("targets per sample", b, targets.len())?;
    ensure_dim("output width", targets.output_dim(), out.cols())?;
    let inv = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, out.cols());
    let mut total = 0.0;
    match (loss, targets) {
        (Loss::SoftmaxCrossEntropy, Targets::Labels { labels, .. }) => {
            for r in 0..b {
                let z = out.row(r);
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = z.iter().map(|v| libm::exp(v - m)).sum();
                let lse = m + libm::log(s);
                total += lse - z[labels[r]];
                let g = grad.row_mut(r);
                for (k, (gv, zv)) in g.iter_mut().zip(z).enumerate() {
                    let p = libm::exp(zv - lse);
                    *gv = (p - if k == labels[r] { 1.0 } else { 0.0 }) * inv;
                }
            }
        }
        (Loss::SigmoidPerAttribute, Targets::Attributes(t)) => {
            for (k, (z, y)) in out.as_slice().iter().zip(t.as_slice()).enumerate() {
                total += z.max(0.0) - z * y + libm::log1p(libm::exp(-libm::fabs(*z)));
                let p = 1.0 / (1.0 + libm::exp(-z));
                grad.as_mut_slice()[k] = (p - y) * inv;
            }
        }
        (Loss::MeanSquared, Targets::Values(t)) => {
            for (k, (z, y)) in out.as_slice().iter().zip(t.as_slice()).enumerate() {
                total += 0.5 * (z - y) * (z - y);
                grad.as_mut_slice()[k] = (z - y) * inv;
            }
        }
        (loss, _) => {
            return Err(Error::InvalidConfig(format!(
                "loss {} does not fit the target type",
                loss.name()
            )));
        }
    }
    Ok((total * inv, grad))
}

/// Mean batch loss.
pub fn batch_loss(net: &Network, x: &Matrix, targets: &Targets, loss: Loss) -> Result<f64> {
    let out = net.predict(x)?;
    Ok(loss_and_output_grad(&out, targets, loss)?.0)
}

/// Gradients of the mean batch loss; masked weights get exactly zero.
pub fn gradient(net: &Network, x: &Matrix, targets: &Targets, loss: Loss) -> Result<Gradients> {
    Ok(loss_and_gradient(net, x, targets, loss)?.1)
}

pub fn loss_and_gradient(net: &Network, x: &Matrix, targets: &Targets, loss: Loss) -> Result<(f64, Gradients)> {
    if x.rows() == 0 {
        return Err(Error::EmptyData);
    }
    let trace = net.forward_batch(x)?;
    let (value, out_grad) = loss_and_output_grad(trace.output(), targets, loss)?;
    let depth = net.depth();
    let batch = x.rows();
    let layers = net.layers();
    let mut post_grads: Vec<Option<Matrix>> = vec![None; depth + 1];
    let mut weights: Vec<Matrix> = Vec::with_capacity(depth);
    let mut biases: Vec<Vec<f64>> = Vec::with_capacity(depth);
    let mut delta = out_grad;
    for i in (0..depth).rev() {
        let layer = &layers[i];
        if i + 1 < depth {
            let mut g = post_grads[i + 1]
                .take()
                .unwrap_or_else(|| Matrix::zeros(batch, trace.pre[i].cols()));
            let act = layer.activation();
            for (gv, p) in g.as_mut_slice().iter_mut().zip(trace.pre[i].as_slice()) {
                *gv *= act.derivative(*p);
            }
            delta = g;
        }
        let input = &trace.post[i];
        let w = layer.weights();
        let (mut gw, gb, dx) = match layer.kind() {
            LayerKind::Conv(g) => {
                let positions = g.positions();
                let dp = conv::maps_to_positions(&delta, batch, positions);
                let patches = conv::im2col(input, g);
                let mut gw = Matrix::zeros(w.rows(), w.cols());
                gemm(1.0, patches.view().t(), dp.view(), 0.0, &mut gw);
                let gb = column_sums(&dp);
                let dx = if i > 0 {
                    let mut dpatch = Matrix::zeros(dp.rows(), w.rows());
                    gemm(1.0, dp.view(), w.view().t(), 0.0, &mut dpatch);
                    Some(conv::col2im(&dpatch, g, batch))
                } else {
                    None
                };
                (gw, gb, dx)
            }
            _ => {
                let mut gw = Matrix::zeros(w.rows(), w.cols());
                gemm(1.0, input.view().t(), delta.view(), 0.0, &mut gw);
                let gb = column_sums(&delta);
                let dx = if i > 0 {
                    let mut dx = Matrix::zeros(batch, w.rows());
                    gemm(1.0, delta.view(), w.view().t(), 0.0, &mut dx);
                    Some(dx)
                } else {
                    None
                };
                (gw, gb, dx)
            }
        };
        if let Some(m) = layer.mask() {
            for (g, mv) in gw.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *g *= mv;
            }
        }
        if let Some(dx) = dx {
            add_into(&mut post_grads[i], dx);
        }
        if let LayerKind::ResidualExit { shortcut } = layer.kind() {
            let src_cols = trace.post[i - 1].cols();
            let mut ds = Matrix::zeros(batch, src_cols);
            for r in 0..batch {
                let d = delta.row(r);
                let out = ds.row_mut(r);
                for (u, &s) in shortcut.iter().enumerate() {
                    out[s] += d[u];
                }
            }
            if i >= 2 {
                add_into(&mut post_grads[i - 1], ds);
            }
        }
        weights.push(gw);
        biases.push(gb);
    }
    weights.reverse();
    biases.reverse();
    Ok((value, Gradients { weights, biases }))
}

fn add_into(slot: &mut Option<Matrix>, m: Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(m),
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (a, b) in s.iter_mut().zip(m.row(r)) {
            *a += b;
        }
    }
    s
}

/// `θ ← θ − lr · g`, keeping masked weights at zero.
pub fn apply_gradients(net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
    ensure_dim("gradient layers", net.depth(), grads.weights.len())?;
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        let (w, b, mask) = layer.params_mut();
        ensure_dim("gradient rows", w.rows(), grads.weights[i].rows())?;
        ensure_dim("gradient cols", w.cols(), grads.weights[i].cols())?;
        for (wv, g) in w.as_mut_slice().iter_mut().zip(grads.weights[i].as_slice()) {
            *wv -= lr * g;
        }
        if let Some(m) = mask {
            for (wv, mv) in w.as_mut_slice().iter_mut().zip(m.as_slice()) {
                if *mv == 0.0 {
                    *wv = 0.0;
                }
            }
        }
        for (bv, g) in b.iter_mut().zip(&grads.biases[i]) {
            *bv -= lr * g;
        }
    }
    Ok(())
}

fn check_data(net_in: usize, net_out: usize, data: &Dataset) -> Result<()> {
    ensure_dim("dataset input", net_in, data.input_dim())?;
    ensure_dim("dataset targets", net_out, data.targets().output_dim())
}

/// Trains with plain minibatch SGD. Deterministic for a fixed seed.
pub fn train(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<Network> {
    train_logged(net, data, cfg, &mut |_| {})
}

pub fn train_logged(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<Network> {
    cfg.validate()?;
    check_data(net.input_dim(), net.output_dim(), data)?;
    let mut net = net.clone();
    if cfg.iterations == 0 {
        return Ok(net);
    }
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.seed)?;
    for it in 0..cfg.iterations {
        let idx = sampler.next_batch();
        let (x, t) = data.batch(&idx);
        let (loss, grads) = loss_and_gradient(&net, &x, &t, cfg.loss)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it, loss });
        }
        apply_gradients(&mut net, &grads, cfg.learning_rate)?;
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
            log(&TrainEvent { iteration: it, loss });
        }
    }
    Ok(net)
}

/// Gradient of `Σ_t w_t L_t` with respect to the joint parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Weighted joint loss and its gradient for one batch per task.
///
/// Each task's gradient is computed on its own sub-network and scattered back
/// into the joint matrices, so shared parameters collect the weighted sum of
/// all tasks' contributions.
pub fn joint_loss_and_gradient(
    zm: &ZippedModel,
    batches: &[(Matrix, Targets)],
    loss: Loss,
) -> Result<(f64, JointGradients)> {
    ensure_dim("batches per task", zm.num_tasks(), batches.len())?;
    let mut weights: Vec<Matrix> = zm
        .layers()
        .iter()
        .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
        .collect();
    let mut biases: Vec<Vec<f64>> = zm.layers().iter().map(|l| vec![0.0; l.bias.len()]).collect();
    let mut total = 0.0;
    for (t, (x, targets)) in batches.iter().enumerate() {
        let wt = zm.task_weights()[t];
        let view = zm.task_view(t)?;
        let (l, g) = loss_and_gradient(view.network(), x, targets, loss)?;
        total += wt * l;
        scatter(&view, &g, wt, &mut weights, &mut biases);
    }
    Ok((total, JointGradients { weights, biases }))
}

fn scatter(
    view: &crate::model::TaskView,
    g: &Gradients,
    scale: f64,
    weights: &mut [Matrix],
    biases: &mut [Vec<f64>],
) {
    for i in 0..weights.len() {
        let cols = view.cols(i);
        for (a, &r) in view.rows(i).iter().enumerate() {
            let dst = weights[i].row_mut(r);
            for (&c, gv) in cols.iter().zip(g.weights[i].row(a)) {
                dst[c] += scale * gv;
            }
        }
        for (&c, gv) in cols.iter().zip(&g.biases[i]) {
            biases[i][c] += scale * gv;
        }
    }
}

/// Fine-tunes every block of a joint model on the weighted sum of task losses.
///
/// `data[t]` is task `t`'s training set. Each task draws its own batches from
/// a stream seeded by `cfg.seed` and the task index.
pub fn retrain_joint(
    zm: &ZippedModel,
    data: &[&Dataset],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<ZippedModel> {
    cfg.validate()?;
    ensure_dim("datasets per task", zm.num_tasks(), data.len())?;
    let mut zm = zm.clone();
    if cfg.iterations == 0 {
        return Ok(zm);
    }
    let mut views = (0..zm.num_tasks())
        .map(|t| zm.task_view(t))
        .collect::<Result<Vec<_>>>()?;
    for (view, ds) in views.iter().zip(data) {
        check_data(view.network().input_dim(), view.network().output_dim(), ds)?;
    }
    let mut samplers = data
        .iter()
        .enumerate()
        .map(|(t, ds)| BatchSampler::new(ds.len(), cfg.batch_size, cfg.seed.wrapping_add(0x9e37_79b9 * (t as u64 + 1))))
        .collect::<Result<Vec<_>>>()?;
    let weights_t: Vec<f64> = zm.task_weights().to_vec();
    for it in 0..cfg.iterations {
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(views.len());
        for (t, view) in views.iter().enumerate() {
            let idx = samplers[t].next_batch();
            let (x, targets) = data[t].batch(&idx);
            let (l, g) = loss_and_gradient(view.network(), &x, &targets, cfg.loss)?;
            total += weights_t[t] * l;
            grads.push(g);
        }
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: total,
            });
        }
        let lr = cfg.learning_rate;
        for (t, (view, g)) in views.iter().zip(&grads).enumerate() {
            let s = -lr * weights_t[t];
            let layers = zm.layers_mut();
            for (i, jl) in layers.iter_mut().enumerate() {
                let cols = view.cols(i);
                for (a, &r) in view.rows(i).iter().enumerate() {
                    let dst = jl.weights.row_mut(r);
                    for (&c, gv) in cols.iter().zip(g.weights[i].row(a)) {
                        dst[c] += s * gv;
                    }
                }
                for (&c, gv) in cols.iter().zip(&g.biases[i]) {
                    jl.bias[c] += s * gv;
                }
            }
        }
        for jl in zm.layers_mut() {
            if let Some(m) = &jl.mask {
                for (w, mv) in jl.weights.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    if *mv == 0.0 {
                        *w = 0.0;
                    }
                }
            }
        }
        for view in views.iter_mut() {
            view.refresh(&zm);
        }
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
            log(&TrainEvent {
                iteration: it,
                loss: total,
            });
        }
    }
    Ok(zm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::{Architecture, ConvSpec};
    use crate::model::{Activation, Layer, Shape};
    use crate::TaskId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Targets {
        Targets::Labels {
            labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
            classes,
        }
    }

    /// Central differences on every weight and bias; returns the max relative error.
    fn fd_check(net: &Network, x: &Matrix, t: &Targets, loss: Loss) -> f64 {
        let g = gradient(net, x, t, loss).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..net.depth() {
            let (rows, cols) = (net.layers()[i].weights().rows(), net.layers()[i].weights().cols());
            for r in 0..rows {
                for c in 0..cols {
                    if net.layers()[i].mask().is_some_and(|m| m.get(r, c) == 0.0) {
                        assert_eq!(g.weights[i].get(r, c), 0.0);
                        continue;
                    }
                    let mut p = net.clone();
                    let w0 = p.layers()[i].weights().get(r, c);
                    p.layer_mut(i).weights_mut().set(r, c, w0 + h);
                    let lp = batch_loss(&p, x, t, loss).unwrap();
                    p.layer_mut(i).weights_mut().set(r, c, w0 - h);
                    let lm = batch_loss(&p, x, t, loss).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let an = g.weights[i].get(r, c);
                    worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-4));
                }
            }
        }
        worst
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Architecture::mlp(&[5, 4])
            .build(TaskId::new("t"), Shape::Flat(3), 3, &mut rng)
            .unwrap();
        let x = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let t = labels(6, 3, &mut rng);
        assert!(fd_check(&net, &x, &t, Loss::SoftmaxCrossEntropy) <= 1e-4);
        let attrs = Targets::Attributes(Matrix::from_fn(6, 3, |_, _| rng.random_range(0..2) as f64));
        assert!(fd_check(&net, &x, &attrs, Loss::SigmoidPerAttribute) <= 1e-4);
    }

    #[test]
    fn conv_and_residual_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cnn = Architecture::Cnn {
            convs: vec![
                ConvSpec { channels: 2, kernel: 3, stride: 1, padding: 1 },
                ConvSpec { channels: 3, kernel: 3, stride: 2, padding: 1 },
            ],
            hidden: vec![4],
        }
        .build(TaskId::new("c"), Shape::Image { channels: 1, h: 5, w: 5 }, 3, &mut rng)
        .unwrap();
        let x = Matrix::from_fn(3, 25, |_, _| rng.random_range(0.0..1.0));
        let t = labels(3, 3, &mut rng);
        assert!(fd_check(&cnn, &x, &t, Loss::SoftmaxCrossEntropy) <= 1e-4);

        let res = Architecture::ResidualMlp { width: 4, hidden: 3, blocks: 2 }
            .build(TaskId::new("r"), Shape::Flat(3), 3, &mut rng)
            .unwrap();
        let x = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let t = labels(5, 3, &mut rng);
        assert!(fd_check(&res, &x, &t, Loss::SoftmaxCrossEntropy) <= 1e-4);
    }

    #[test]
    fn masked_entries_get_zero_gradient_and_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let mask = Matrix::from_fn(4, 3, |r, c| ((r + c) % 2) as f64);
        let l1 = Layer::dense(w, vec![0.1; 3], Activation::Relu).unwrap().with_mask(mask.clone()).unwrap();
        let l2 = Layer::dense(Matrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0)), vec![0.0; 2], Activation::Identity).unwrap();
        let net = Network::new(TaskId::new("m"), Shape::Flat(4), vec![l1, l2]).unwrap();
        let x = Matrix::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0));
        let t = labels(8, 2, &mut rng);
        assert!(fd_check(&net, &x, &t, Loss::SoftmaxCrossEntropy) <= 1e-4);
        let ds = Dataset::new(x, t, crate::data::Split::Train).unwrap();
        let cfg = TrainConfig { iterations: 50, batch_size: 4, ..TrainConfig::default() };
        let trained = train(&net, &ds, &cfg).unwrap();
        let w = trained.layers()[0].weights();
        for (v, m) in w.as_slice().iter().zip(mask.as_slice()) {
            if *m == 0.0 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn zero_head_blocks_hidden_gradient() {
        // Nothing flows back through a zero head; balanced labels also zero its bias gradient.
        let l1 = Layer::dense(Matrix::from_fn(2, 3, |r, c| (r + c) as f64), vec![0.0; 3], Activation::Relu).unwrap();
        let l2 = Layer::dense(Matrix::zeros(3, 2), vec![0.0; 2], Activation::Identity).unwrap();
        let net = Network::new(TaskId::new("z"), Shape::Flat(2), vec![l1, l2]).unwrap();
        let x = Matrix::from_fn(2, 2, |r, c| (r * 2 + c) as f64);
        let t = Targets::Labels { labels: vec![0, 1], classes: 2 };
        let g = gradient(&net, &x, &t, Loss::SoftmaxCrossEntropy).unwrap();
        assert!(g.weights[0].as_slice().iter().all(|v| *v == 0.0));
        assert!(g.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        assert!(g.weights[1].as_slice().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn linear_regression_converges() {
        let l = Layer::dense(Matrix::zeros(1, 1), vec![0.0], Activation::Identity).unwrap();
        let net = Network::new(TaskId::new("lin"), Shape::Flat(1), vec![l]).unwrap();
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 10.0 - 1.0).collect();
        let x = Matrix::from_vec(20, 1, xs.clone()).unwrap();
        let y = Matrix::from_vec(20, 1, xs.iter().map(|v| 2.0 * v).collect()).unwrap();
        let ds = Dataset::new(x, Targets::Values(y), crate::data::Split::Train).unwrap();
        let cfg = TrainConfig { iterations: 500, batch_size: 20, loss: Loss::MeanSquared, ..TrainConfig::default() };
        let trained = train(&net, &ds, &cfg).unwrap();
        assert!((trained.layers()[0].weights().get(0, 0) - 2.0).abs() <= 0.01);
        let cfg0 = TrainConfig { iterations: 0, ..cfg.clone() };
        assert_eq!(train(&net, &ds, &cfg0).unwrap(), net);
        // Same seed, same result.
        assert_eq!(train(&net, &ds, &cfg).unwrap(), trained);
    }

    #[test]
    fn divergence_reports_iteration() {
        let l = Layer::dense(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), vec![0.0], Activation::Identity).unwrap();
        let net = Network::new(TaskId::new("d"), Shape::Flat(1), vec![l]).unwrap();
        let x = Matrix::from_vec(2, 1, vec![1e100, -1e100]).unwrap();
        let y = Matrix::from_vec(2, 1, vec![0.0, 0.0]).unwrap();
        let ds = Dataset::new(x, Targets::Values(y), crate::data::Split::Train).unwrap();
        let cfg = TrainConfig { iterations: 10, batch_size: 2, loss: Loss::MeanSquared, learning_rate: 1.0, ..TrainConfig::default() };
        assert!(matches!(train(&net, &ds, &cfg), Err(Error::Diverged { .. }) | Err(Error::NonFiniteActivation { .. })));
    }
}

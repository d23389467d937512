//! Single-task networks, their forward pass, and the joint multi-task model.
//!
//! Layer `l` (1-based, as in the zipping literature) is `layers[l - 1]`; layer
//! 0 is the input. Every layer maps a batch of row vectors `B × rows` to
//! `B × (units · spatial)`, where `units` is the number of neurons (dense) or
//! channels (conv). Each input unit owns a contiguous group of weight rows:
//! one row for a dense-after-dense layer, `k²` rows for a conv layer, and
//! `h·w` rows for a dense layer that consumes a flattened feature map.

pub mod arch;
pub mod conv;
mod zipped;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use conv::ConvGeometry;
pub use zipped::{JointLayer, SharedLayer, TaskSet, TaskView, UnitInfo, ZippedModel, ZippedParts, MAX_TASKS};
pub(crate) use zipped::MergedUnit;

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::TaskId;

/// Shape of the activations flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Flat(usize),
    Image { channels: usize, h: usize, w: usize },
}

impl Shape {
    /// Neurons or channels.
    pub fn units(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image { channels, .. } => channels,
        }
    }

    pub fn spatial(&self) -> usize {
        match *self {
            Shape::Flat(_) => 1,
            Shape::Image { h, w, .. } => h * w,
        }
    }

    pub fn features(&self) -> usize {
        self.units() * self.spatial()
    }

}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Identity => v,
        }
    }

    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense,
    Conv(ConvGeometry),
    /// First dense layer of a residual block; its input is the shortcut source.
    ResidualEntry,
    /// Second dense layer of a residual block. Output unit `u` adds shortcut
    /// unit `shortcut[u]` before the activation.
    ResidualExit { shortcut: Vec<usize> },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv(_) => "conv",
            LayerKind::ResidualEntry => "residual-entry",
            LayerKind::ResidualExit { .. } => "residual-exit",
        }
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, LayerKind::ResidualEntry | LayerKind::ResidualExit { .. })
    }
}

/// One affine layer plus nonlinearity, optionally sparse.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    kind: LayerKind,
    weights: Matrix,
    bias: Vec<f64>,
    mask: Option<Matrix>,
    activation: Activation,
}

impl Layer {
    /// Checks local invariants: bias length, finiteness, and that the mask is
    /// binary and zero exactly where weights are forced to zero.
    pub fn new(
        kind: LayerKind,
        weights: Matrix,
        bias: Vec<f64>,
        mask: Option<Matrix>,
        activation: Activation,
    ) -> Result<Self> {
        ensure_dim("bias length", weights.cols(), bias.len())?;
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer parameters"));
        }
        if let LayerKind::Conv(g) = &kind {
            g.validate()?;
            ensure_dim("conv weight rows", g.in_channels * g.patch_len(), weights.rows())?;
        }
        if let LayerKind::ResidualExit { shortcut } = &kind {
            ensure_dim("shortcut map length", weights.cols(), shortcut.len())?;
        }
        if let Some(m) = &mask {
            check_mask(&weights, m)?;
        }
        Ok(Layer {
            kind,
            weights,
            bias,
            mask,
            activation,
        })
    }

    pub fn dense(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        Layer::new(LayerKind::Dense, weights, bias, None, activation)
    }

    /// Zeroes weights outside the mask and attaches it.
    pub fn with_mask(mut self, mask: Matrix) -> Result<Self> {
        ensure_dim("mask rows", self.weights.rows(), mask.rows())?;
        ensure_dim("mask cols", self.weights.cols(), mask.cols())?;
        for (w, m) in self.weights.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            if *m == 0.0 {
                *w = 0.0;
            }
        }
        check_mask(&self.weights, &mask)?;
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn mask(&self) -> Option<&Matrix> {
        self.mask.as_ref()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn units(&self) -> usize {
        self.weights.cols()
    }

    /// Mutable parameter access for training. Callers must re-apply the mask.
    pub(crate) fn params_mut(&mut self) -> (&mut Matrix, &mut Vec<f64>, Option<&Matrix>) {
        (&mut self.weights, &mut self.bias, self.mask.as_ref())
    }

    /// Test hook: mutable access to the raw weights.
    #[doc(hidden)]
    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    /// Number of weight rows owned by each input unit.
    pub fn rows_per_unit(&self, input: Shape) -> usize {
        match &self.kind {
            LayerKind::Conv(g) => g.patch_len(),
            _ => input.spatial(),
        }
    }

    /// Output shape for the given input shape, or an error if they don't fit.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match &self.kind {
            LayerKind::Conv(g) => {
                let Shape::Image { channels, h, w } = input else {
                    return Err(Error::InvalidNetwork("conv layer needs an image input".into()));
                };
                if g.in_channels != channels || g.in_h != h || g.in_w != w {
                    return Err(Error::InvalidNetwork(format!(
                        "conv geometry {}x{}x{} does not match input {}x{}x{}",
                        g.in_channels, g.in_h, g.in_w, channels, h, w
                    )));
                }
                Ok(Shape::Image {
                    channels: self.units(),
                    h: g.out_h(),
                    w: g.out_w(),
                })
            }
            _ => {
                ensure_dim("dense layer input features", self.weights.rows(), input.features())?;
                Ok(Shape::Flat(self.units()))
            }
        }
    }

    /// Affine part of the layer, `y = x·W + b (+ shortcut)`.
    pub(crate) fn pre_activation(&self, x: &Matrix, shortcut_src: Option<&Matrix>) -> Result<Matrix> {
        let batch = x.rows();
        match &self.kind {
            LayerKind::Conv(g) => {
                ensure_dim("conv input features", g.in_features(), x.cols())?;
                let patches = conv::im2col(x, g);
                let mut yp = Matrix::zeros(patches.rows(), self.units());
                gemm(1.0, patches.view(), self.weights.view(), 0.0, &mut yp);
                let positions = g.positions();
                let mut y = conv::positions_to_maps(&yp, batch, positions);
                for b in 0..batch {
                    let row = y.row_mut(b);
                    for (c, &bias) in self.bias.iter().enumerate() {
                        row[c * positions..(c + 1) * positions]
                            .iter_mut()
                            .for_each(|v| *v += bias);
                    }
                }
                Ok(y)
            }
            kind => {
                ensure_dim("dense input features", self.weights.rows(), x.cols())?;
                let mut y = Matrix::zeros(batch, self.units());
                gemm(1.0, x.view(), self.weights.view(), 0.0, &mut y);
                for b in 0..batch {
                    for (v, &bias) in y.row_mut(b).iter_mut().zip(&self.bias) {
                        *v += bias;
                    }
                }
                if let LayerKind::ResidualExit { shortcut } = kind {
                    let src = shortcut_src.ok_or_else(|| {
                        Error::InvalidNetwork("residual exit without shortcut source".into())
                    })?;
                    for b in 0..batch {
                        let s = src.row(b);
                        for (v, &u) in y.row_mut(b).iter_mut().zip(shortcut) {
                            *v += s[u];
                        }
                    }
                }
                Ok(y)
            }
        }
    }

    pub(crate) fn activate(&self, pre: &Matrix) -> Matrix {
        let mut post = pre.clone();
        if self.activation != Activation::Identity {
            post.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = self.activation.apply(*v));
        }
        post
    }

    /// Weights plus biases.
    pub fn parameter_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    /// Unmasked weights plus biases.
    pub fn connection_count(&self) -> usize {
        let w = match &self.mask {
            Some(m) => m.as_slice().iter().filter(|v| **v != 0.0).count(),
            None => self.weights.rows() * self.weights.cols(),
        };
        w + self.bias.len()
    }
}

fn check_mask(weights: &Matrix, mask: &Matrix) -> Result<()> {
    ensure_dim("mask rows", weights.rows(), mask.rows())?;
    ensure_dim("mask cols", weights.cols(), mask.cols())?;
    for (w, m) in weights.as_slice().iter().zip(mask.as_slice()) {
        if *m != 0.0 && *m != 1.0 {
            return Err(Error::MaskInconsistent("mask entries must be 0 or 1".into()));
        }
        if *m == 0.0 && *w != 0.0 {
            return Err(Error::MaskInconsistent("nonzero weight at masked position".into()));
        }
    }
    Ok(())
}

/// Per-layer values from one batched forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `pre[i]` is the pre-activation output of `layers[i]`.
    pub pre: Vec<Matrix>,
    /// `post[0]` is the input; `post[i + 1]` is the activation of `layers[i]`.
    pub post: Vec<Matrix>,
}

impl Trace {
    /// Network output, i.e. the final pre-activation.
    pub fn output(&self) -> &Matrix {
        self.pre.last().expect("network has at least one layer")
    }
}

/// Result of a single-sample forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// A single-task feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    task: TaskId,
    input: Shape,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(task: TaskId, input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let net = Network { task, input, layers };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        let shapes = self.compute_shapes()?;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.kind() {
                LayerKind::ResidualEntry => {
                    if !matches!(
                        self.layers.get(i + 1).map(Layer::kind),
                        Some(LayerKind::ResidualExit { .. })
                    ) {
                        return Err(Error::InvalidNetwork(format!(
                            "residual entry at layer {} not followed by an exit",
                            i + 1
                        )));
                    }
                    if !matches!(shapes[i], Shape::Flat(_)) {
                        return Err(Error::InvalidNetwork("residual blocks must be dense".into()));
                    }
                }
                LayerKind::ResidualExit { shortcut } => {
                    if i == 0 || !matches!(self.layers[i - 1].kind(), LayerKind::ResidualEntry) {
                        return Err(Error::InvalidNetwork(format!(
                            "residual exit at layer {} not preceded by an entry",
                            i + 1
                        )));
                    }
                    let src_units = shapes[i - 1].units();
                    ensure_dim("residual block width", src_units, layer.units())?;
                    crate::linalg::Permutation::new(shortcut.clone())?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn compute_shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = vec![self.input];
        for (i, layer) in self.layers.iter().enumerate() {
            let s = layer
                .output_shape(shapes[i])
                .map_err(|e| e.at_layer(i + 1))?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn task(&self) -> &TaskId {
        &self.task
    }

    pub fn set_task(&mut self, task: TaskId) {
        self.task = task;
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn input_dim(&self) -> usize {
        self.input.features()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Test hook for perturbing weights directly.
    #[doc(hidden)]
    pub fn layer_mut(&mut self, index: usize) -> &mut Layer {
        &mut self.layers[index]
    }

    /// Number of layers `L` (the output layer is layer `L`).
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Activation shapes: index 0 is the input, index `l` the output of layer `l`.
    pub fn shapes(&self) -> Vec<Shape> {
        self.compute_shapes().expect("validated on construction")
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::units).unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    pub fn connection_count(&self) -> usize {
        self.layers.iter().map(Layer::connection_count).sum()
    }

    /// Batched forward pass keeping every intermediate.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Trace> {
        ensure_dim("network input", self.input_dim(), x.cols())?;
        if !x.is_finite() {
            return Err(Error::NonFinite("network input"));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let shortcut = if matches!(layer.kind(), LayerKind::ResidualExit { .. }) {
                Some(&post[i - 1])
            } else {
                None
            };
            let y = layer.pre_activation(&post[i], shortcut)?;
            if !y.is_finite() {
                return Err(Error::NonFiniteActivation { layer: i + 1 });
            }
            post.push(layer.activate(&y));
            pre.push(y);
        }
        Ok(Trace { pre, post })
    }

    /// Batched forward pass returning only the output (final pre-activation).
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        ensure_dim("network input", self.input_dim(), x.cols())?;
        let mut acts: Vec<Matrix> = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let shortcut = if matches!(layer.kind(), LayerKind::ResidualExit { .. }) {
                Some(&acts[i - 1])
            } else {
                None
            };
            let y = layer.pre_activation(&cur, shortcut)?;
            if !y.is_finite() {
                return Err(Error::NonFiniteActivation { layer: i + 1 });
            }
            if i + 1 == self.layers.len() {
                return Ok(y);
            }
            let next = layer.activate(&y);
            acts.push(core::mem::replace(&mut cur, next));
        }
        unreachable!("network has at least one layer")
    }

    /// Activations entering `layers[i]` (the input when `i == 0`).
    pub fn layer_input(&self, x: &Matrix, i: usize) -> Result<Matrix> {
        ensure_dim("network input", self.input_dim(), x.cols())?;
        if i >= self.layers.len() {
            return Err(Error::LayerOutOfRange {
                index: i + 1,
                max: self.layers.len(),
            });
        }
        let mut acts: Vec<Matrix> = Vec::with_capacity(i + 1);
        acts.push(x.clone());
        for (k, layer) in self.layers[..i].iter().enumerate() {
            let shortcut = if matches!(layer.kind(), LayerKind::ResidualExit { .. }) {
                Some(&acts[k - 1])
            } else {
                None
            };
            let y = layer.pre_activation(&acts[k], shortcut)?;
            if !y.is_finite() {
                return Err(Error::NonFiniteActivation { layer: k + 1 });
            }
            acts.push(layer.activate(&y));
        }
        Ok(acts.pop().expect("at least the input"))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let trace = self.forward_batch(&Matrix::from_vec(1, x.len(), x.to_vec())?)?;
        let activations = trace.post[1..].iter().map(|m| m.row(0).to_vec()).collect();
        let pre_activations: Vec<Vec<f64>> = trace.pre.iter().map(|m| m.row(0).to_vec()).collect();
        let output = pre_activations.last().cloned().unwrap_or_default();
        Ok(Forward {
            activations,
            pre_activations,
            output,
        })
    }

    /// Reorders the units of hidden layer `l` (1-based) and the matching input
    /// rows of layer `l + 1` so the function computed is unchanged.
    ///
    /// `perm` gathers: new unit `i` is old unit `perm[i]`.
    pub fn permute_units(&mut self, l: usize, perm: &crate::linalg::Permutation) -> Result<()> {
        if l == 0 || l >= self.layers.len() {
            return Err(Error::LayerOutOfRange {
                index: l,
                max: self.layers.len().saturating_sub(1),
            });
        }
        ensure_dim("permutation length", self.layers[l - 1].units(), perm.len())?;
        let shapes = self.shapes();
        let p = perm.as_slice();
        let inv = perm.inverse();
        {
            let layer = &mut self.layers[l - 1];
            layer.weights = layer.weights.select_cols(p);
            layer.bias = perm.apply(&layer.bias)?;
            layer.mask = layer.mask.as_ref().map(|m| m.select_cols(p));
            if let LayerKind::ResidualExit { shortcut } = &mut layer.kind {
                *shortcut = perm.apply(shortcut)?;
            }
        }
        let rpu = self.layers[l].rows_per_unit(shapes[l]);
        let rows: Vec<usize> = p
            .iter()
            .flat_map(|&u| (u * rpu)..((u + 1) * rpu))
            .collect();
        {
            let next = &mut self.layers[l];
            next.weights = next.weights.select_rows(&rows);
            next.mask = next.mask.as_ref().map(|m| m.select_rows(&rows));
            if let LayerKind::Conv(g) = &next.kind {
                debug_assert_eq!(g.in_channels, perm.len());
            }
        }
        // A residual exit two layers up reads these units through its shortcut.
        if l + 1 < self.layers.len() {
            if let LayerKind::ResidualExit { shortcut } = &mut self.layers[l + 1].kind {
                for s in shortcut.iter_mut() {
                    *s = inv.as_slice()[*s];
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Permutation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn task() -> TaskId {
        TaskId::new("t")
    }

    fn random_dense(rows: usize, cols: usize, act: Activation, rng: &mut ChaCha8Rng) -> Layer {
        let w = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let b = (0..cols).map(|_| rng.random_range(-0.5..0.5)).collect();
        Layer::dense(w, b, act).unwrap()
    }

    #[test]
    fn identity_layer_relu() {
        let layer = Layer::dense(Matrix::identity(2), vec![0.0; 2], Activation::Relu).unwrap();
        let net = Network::new(task(), Shape::Flat(2), vec![layer]).unwrap();
        let f = net.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(f.pre_activations[0], vec![1.0, -1.0]);
        assert_eq!(f.activations[0], vec![1.0, 0.0]);
        assert_eq!(f.output, vec![1.0, -1.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let l1 = Layer::dense(Matrix::zeros(3, 2), vec![0.5, -0.25], Activation::Relu).unwrap();
        let l2 = Layer::dense(Matrix::zeros(2, 2), vec![1.5, 2.5], Activation::Identity).unwrap();
        let net = Network::new(task(), Shape::Flat(3), vec![l1, l2]).unwrap();
        assert_eq!(net.forward(&[9.0, -3.0, 1.0]).unwrap().output, vec![1.5, 2.5]);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l1 = random_dense(5, 4, Activation::Relu, &mut rng);
        let l2 = random_dense(4, 3, Activation::Identity, &mut rng);
        let net = Network::new(task(), Shape::Flat(5), vec![l1.clone(), l2.clone()]).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let naive = |l: &Layer, v: &[f64]| -> Vec<f64> {
            (0..l.units())
                .map(|j| {
                    let mut s = l.bias()[j];
                    for (i, vi) in v.iter().enumerate() {
                        s += vi * l.weights().get(i, j);
                    }
                    s
                })
                .collect()
        };
        let h: Vec<f64> = naive(&l1, &x).into_iter().map(|v| v.max(0.0)).collect();
        let out = naive(&l2, &h);
        let got = net.forward(&x).unwrap().output;
        for (a, b) in got.iter().zip(&out) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(task(), Shape::Flat(3), vec![random_dense(3, 2, Activation::Identity, &mut rng)]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(net.forward(&[f64::NAN, 0.0, 0.0]).is_err());
        let mut big = net.clone();
        big.layer_mut(0).weights_mut().set(0, 0, 1e308);
        assert!(matches!(
            big.forward(&[1e308, 0.0, 0.0]),
            Err(Error::NonFiniteActivation { layer: 1 })
        ));
    }

    #[test]
    fn masked_weights_must_be_zero() {
        let w = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let m = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        assert!(Layer::new(LayerKind::Dense, w.clone(), vec![0.0], Some(m.clone()), Activation::Relu).is_err());
        let l = Layer::dense(w, vec![0.0], Activation::Relu).unwrap().with_mask(m).unwrap();
        assert_eq!(l.weights().as_slice(), &[1.0, 0.0]);
        assert_eq!(l.connection_count(), 2);
    }

    #[test]
    fn permute_units_preserves_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layers = vec![
            random_dense(4, 6, Activation::Relu, &mut rng),
            random_dense(6, 5, Activation::Relu, &mut rng),
            random_dense(5, 3, Activation::Identity, &mut rng),
        ];
        let net = Network::new(task(), Shape::Flat(4), layers).unwrap();
        let mut p = net.clone();
        p.permute_units(1, &Permutation::random(6, &mut rng)).unwrap();
        p.permute_units(2, &Permutation::random(5, &mut rng)).unwrap();
        let x = Matrix::from_fn(7, 4, |_, _| rng.random_range(-1.0..1.0));
        let a = net.predict(&x).unwrap();
        let b = p.predict(&x).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
        assert!(p.permute_units(3, &Permutation::identity(3)).is_err());
    }

    #[test]
    fn predict_equals_trace_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = arch::Architecture::ResidualMlp {
            width: 6,
            hidden: 5,
            blocks: 2,
        }
        .build(task(), Shape::Flat(3), 4, &mut rng)
        .unwrap();
        let x = Matrix::from_fn(5, 3, |_, _| rng.random_range(0.0..1.0));
        assert_eq!(&net.predict(&x).unwrap(), net.forward_batch(&x).unwrap().output());
    }
}

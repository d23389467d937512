//! Architecture descriptions and seeded random initialization.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use super::{Activation, ConvGeometry, Layer, LayerKind, Network, Shape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::TaskId;

/// One convolution stage of a [`Architecture::Cnn`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Fully connected relu layers followed by a linear head.
    Mlp { hidden: Vec<usize> },
    /// Conv relu stages, then fully connected relu layers, then a linear head.
    Cnn { convs: Vec<ConvSpec>, hidden: Vec<usize> },
    /// Dense stem of `width` units, `blocks` residual blocks
    /// (`width → hidden → width` with identity shortcut), linear head.
    ResidualMlp { width: usize, hidden: usize, blocks: usize },
}

impl Architecture {
    /// 784-300-100-10 style MLP.
    pub fn mlp(hidden: &[usize]) -> Self {
        Architecture::Mlp {
            hidden: hidden.to_vec(),
        }
    }

    /// Two stride-2 5×5 conv stages (8 and 16 channels) and one FC layer of 100.
    pub fn small_cnn() -> Self {
        Architecture::Cnn {
            convs: vec![
                ConvSpec {
                    channels: 8,
                    kernel: 5,
                    stride: 2,
                    padding: 2,
                },
                ConvSpec {
                    channels: 16,
                    kernel: 5,
                    stride: 2,
                    padding: 2,
                },
            ],
            hidden: vec![100],
        }
    }

    /// [`Self::build`] with a ChaCha8 stream seeded by `seed`.
    pub fn build_seeded(&self, task: TaskId, input: Shape, outputs: usize, seed: u64) -> Result<Network> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.build(task, input, outputs, &mut rng)
    }

    /// Builds a network with He-normal weights (variance 2/fan-in) for relu
    /// layers, variance 1/fan-in for the head, and zero biases.
    pub fn build<R: Rng + ?Sized>(
        &self,
        task: TaskId,
        input: Shape,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Network> {
        if outputs == 0 {
            return Err(Error::InvalidConfig("network needs at least one output".into()));
        }
        let mut layers = Vec::new();
        let mut shape = input;
        let push = |layers: &mut Vec<Layer>, shape: &mut Shape, layer: Layer| -> Result<()> {
            *shape = layer.output_shape(*shape)?;
            layers.push(layer);
            Ok(())
        };
        match self {
            Architecture::Mlp { hidden } => {
                for &h in hidden {
                    let l = dense(shape.features(), h, Activation::Relu, rng)?;
                    push(&mut layers, &mut shape, l)?;
                }
            }
            Architecture::Cnn { convs, hidden } => {
                for c in convs {
                    let Shape::Image { channels, h, w } = shape else {
                        return Err(Error::InvalidConfig("conv stage needs an image input".into()));
                    };
                    let g = ConvGeometry {
                        in_channels: channels,
                        in_h: h,
                        in_w: w,
                        kernel: c.kernel,
                        stride: c.stride,
                        padding: c.padding,
                    };
                    g.validate()?;
                    let fan_in = channels * g.patch_len();
                    let weights = he_matrix(fan_in, c.channels, 2.0, rng)?;
                    let l = Layer::new(
                        LayerKind::Conv(g),
                        weights,
                        vec![0.0; c.channels],
                        None,
                        Activation::Relu,
                    )?;
                    push(&mut layers, &mut shape, l)?;
                }
                for &h in hidden {
                    let l = dense(shape.features(), h, Activation::Relu, rng)?;
                    push(&mut layers, &mut shape, l)?;
                }
            }
            Architecture::ResidualMlp {
                width,
                hidden,
                blocks,
            } => {
                let stem = dense(shape.features(), *width, Activation::Relu, rng)?;
                push(&mut layers, &mut shape, stem)?;
                for _ in 0..*blocks {
                    let entry = Layer::new(
                        LayerKind::ResidualEntry,
                        he_matrix(*width, *hidden, 2.0, rng)?,
                        vec![0.0; *hidden],
                        None,
                        Activation::Relu,
                    )?;
                    push(&mut layers, &mut shape, entry)?;
                    // Second layer starts small so each block begins near identity.
                    let exit = Layer::new(
                        LayerKind::ResidualExit {
                            shortcut: (0..*width).collect(),
                        },
                        he_matrix(*hidden, *width, 0.5, rng)?,
                        vec![0.0; *width],
                        None,
                        Activation::Relu,
                    )?;
                    push(&mut layers, &mut shape, exit)?;
                }
            }
        }
        let head = dense(shape.features(), outputs, Activation::Identity, rng)?;
        layers.push(head);
        Network::new(task, input, layers)
    }
}

fn he_matrix<R: Rng + ?Sized>(fan_in: usize, cols: usize, gain: f64, rng: &mut R) -> Result<Matrix> {
    let std = libm::sqrt(gain / fan_in.max(1) as f64);
    let normal = Normal::new(0.0, std).map_err(|_| Error::InvalidConfig("bad init scale".into()))?;
    Ok(Matrix::from_fn(fan_in, cols, |_, _| normal.sample(rng)))
}

fn dense<R: Rng + ?Sized>(fan_in: usize, units: usize, act: Activation, rng: &mut R) -> Result<Layer> {
    let gain = if act == Activation::Relu { 2.0 } else { 1.0 };
    Layer::dense(he_matrix(fan_in, units, gain, rng)?, vec![0.0; units], act)
}

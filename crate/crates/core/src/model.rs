//! Desk-scale analogues of the two benchmark architectures and the
//! trace-recording forward/backward passes that drive training, energy
//! accounting and benchmarking.
//!
//! `m1-micronet` stacks depthwise-separable blocks (the MobileNet-style
//! structure); `m2-miniresnet` stacks residual blocks behind a conv stem.
//! Neither uses batch norm: careful He initialization keeps them trainable
//! and avoids training-state that is orthogonal to the sponge mechanism.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    self, softmax_cross_entropy, Gradient, Tensor, TensorError,
};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer} ({kind}): {detail}")]
    BadLayer {
        layer: usize,
        kind: String,
        detail: String,
    },
    #[error("batch shape {got:?} does not match model input {expected:?}")]
    BatchShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameters do not match spec at layer {layer}")]
    ParamMismatch { layer: usize },
    #[error("model must end in [classes] logits, got {got:?}")]
    BadOutput { got: Vec<usize> },
}

/// One layer of the network. Dimensional parameters are per kind; shapes of
/// consecutive layers must compose (checked by [`ModelSpec::validate`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// 1x1 convolution mixing channels at each position.
    PointwiseConv {
        in_channels: usize,
        out_channels: usize,
    },
    /// conv -> relu -> conv with an identity skip and a relu after the add.
    /// Kernel is odd; stride 1 and same-padding keep the skip shape equal.
    ResidualBlock {
        channels: usize,
        kernel: usize,
    },
    Relu,
    GlobalAvgPool,
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::DepthwiseConv { .. } => "depthwise_conv",
            LayerSpec::PointwiseConv { .. } => "pointwise_conv",
            LayerSpec::ResidualBlock { .. } => "residual_block",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Shape of the value flowing between layers (per sample).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueShape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl ValueShape {
    pub fn elements(&self) -> usize {
        match self {
            ValueShape::Chw(c, h, w) => c * h * w,
            ValueShape::Flat(n) => *n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape `[c, h, w]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ModelSpec {
    /// Propagate shapes through every layer; errors carry the failing layer.
    pub fn layer_shapes(&self) -> Result<Vec<ValueShape>, ModelError> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let [c, h, w] = self.input_shape;
        let mut cur = ValueShape::Chw(c, h, w);
        shapes.push(cur.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |detail: String| ModelError::BadLayer {
                layer: i,
                kind: layer.kind().to_string(),
                detail,
            };
            cur = match (layer, &cur) {
                (LayerSpec::Dense { inputs, outputs }, ValueShape::Flat(n)) => {
                    if n != inputs {
                        return Err(bad(format!("expects {inputs} inputs, gets {n}")));
                    }
                    ValueShape::Flat(*outputs)
                }
                (
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    ValueShape::Chw(c, h, w),
                ) => {
                    if c != in_channels {
                        return Err(bad(format!("expects {in_channels} channels, gets {c}")));
                    }
                    let oh = conv_extent(*h, *kernel, *stride, *padding)
                        .ok_or_else(|| bad(format!("non-integral output for h={h}")))?;
                    let ow = conv_extent(*w, *kernel, *stride, *padding)
                        .ok_or_else(|| bad(format!("non-integral output for w={w}")))?;
                    ValueShape::Chw(*out_channels, oh, ow)
                }
                (
                    LayerSpec::DepthwiseConv {
                        channels,
                        kernel,
                        stride,
                        padding,
                    },
                    ValueShape::Chw(c, h, w),
                ) => {
                    if c != channels {
                        return Err(bad(format!("expects {channels} channels, gets {c}")));
                    }
                    let oh = conv_extent(*h, *kernel, *stride, *padding)
                        .ok_or_else(|| bad(format!("non-integral output for h={h}")))?;
                    let ow = conv_extent(*w, *kernel, *stride, *padding)
                        .ok_or_else(|| bad(format!("non-integral output for w={w}")))?;
                    ValueShape::Chw(*channels, oh, ow)
                }
                (
                    LayerSpec::PointwiseConv {
                        in_channels,
                        out_channels,
                    },
                    ValueShape::Chw(c, h, w),
                ) => {
                    if c != in_channels {
                        return Err(bad(format!("expects {in_channels} channels, gets {c}")));
                    }
                    ValueShape::Chw(*out_channels, *h, *w)
                }
                (LayerSpec::ResidualBlock { channels, kernel }, ValueShape::Chw(c, h, w)) => {
                    if c != channels {
                        return Err(bad(format!("expects {channels} channels, gets {c}")));
                    }
                    if kernel % 2 == 0 {
                        return Err(bad("kernel must be odd for same-padding".into()));
                    }
                    // Same padding keeps the skip path aligned with the main path.
                    ValueShape::Chw(*channels, *h, *w)
                }
                (LayerSpec::Relu, s) => s.clone(),
                (LayerSpec::GlobalAvgPool, ValueShape::Chw(c, _, _)) => ValueShape::Flat(*c),
                (LayerSpec::Flatten, s) => ValueShape::Flat(s.elements()),
                (l, s) => {
                    return Err(bad(format!("cannot apply {} to {s:?}", l.kind())));
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let shapes = self.layer_shapes()?;
        match shapes.last() {
            Some(ValueShape::Flat(n)) if *n == self.classes => Ok(()),
            Some(s) => Err(ModelError::BadOutput {
                got: match s {
                    ValueShape::Chw(c, h, w) => vec![*c, *h, *w],
                    ValueShape::Flat(n) => vec![*n],
                },
            }),
            None => Err(ModelError::BadOutput { got: vec![] }),
        }
    }

    /// Total trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => out_channels * in_channels * kernel * kernel + out_channels,
                LayerSpec::DepthwiseConv {
                    channels, kernel, ..
                } => channels * kernel * kernel + channels,
                LayerSpec::PointwiseConv {
                    in_channels,
                    out_channels,
                } => out_channels * in_channels + out_channels,
                LayerSpec::ResidualBlock { channels, kernel } => {
                    2 * (channels * channels * kernel * kernel + channels)
                }
                _ => 0,
            })
            .sum()
    }

    /// Post-ReLU activation elements per sample, summed over all ReLU points.
    pub fn relu_elements_per_sample(&self) -> Result<usize, ModelError> {
        Ok(self.trace_points()?.iter().map(|p| p.elements).sum())
    }

    /// The ReLU points of the model in execution order. A residual block
    /// contributes two: its internal ReLU (`sub` 0) and the post-add ReLU
    /// (`sub` 1).
    pub fn trace_points(&self) -> Result<Vec<TracePoint>, ModelError> {
        let shapes = self.layer_shapes()?;
        let mut points = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Relu => points.push(TracePoint {
                    layer: i,
                    sub: 0,
                    elements: shapes[i + 1].elements(),
                }),
                LayerSpec::ResidualBlock { .. } => {
                    let n = shapes[i + 1].elements();
                    points.push(TracePoint {
                        layer: i,
                        sub: 0,
                        elements: n,
                    });
                    points.push(TracePoint {
                        layer: i,
                        sub: 1,
                        elements: n,
                    });
                }
                _ => {}
            }
        }
        Ok(points)
    }

    /// The multiply-accumulate units of the model in execution order, with
    /// the geometry and activation source the energy model needs. A residual
    /// block contributes two conv units.
    pub fn mac_units(&self) -> Result<Vec<MacUnit>, ModelError> {
        let shapes = self.layer_shapes()?;
        let mut units = Vec::new();
        let mut trace_idx = 0usize;
        // Source of the value currently flowing: raw input, a trace point,
        // or an opaque mix (pooled values are averages, not activations).
        let mut source = ValueSource::RawInput;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { inputs, outputs } => {
                    units.push(MacUnit {
                        layer: i,
                        sub: 0,
                        geometry: MacGeometry::Dense {
                            inputs: *inputs,
                            outputs: *outputs,
                        },
                        source,
                    });
                    source = ValueSource::Opaque;
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (h, w) = match &shapes[i] {
                        ValueShape::Chw(_, h, w) => (*h, *w),
                        _ => unreachable!("validated by layer_shapes"),
                    };
                    units.push(MacUnit {
                        layer: i,
                        sub: 0,
                        geometry: MacGeometry::Conv {
                            in_channels: *in_channels,
                            out_channels: *out_channels,
                            in_h: h,
                            in_w: w,
                            kernel: *kernel,
                            stride: *stride,
                            padding: *padding,
                        },
                        source,
                    });
                    source = ValueSource::Opaque;
                }
                LayerSpec::DepthwiseConv {
                    channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (h, w) = match &shapes[i] {
                        ValueShape::Chw(_, h, w) => (*h, *w),
                        _ => unreachable!(),
                    };
                    units.push(MacUnit {
                        layer: i,
                        sub: 0,
                        geometry: MacGeometry::Depthwise {
                            channels: *channels,
                            in_h: h,
                            in_w: w,
                            kernel: *kernel,
                            stride: *stride,
                            padding: *padding,
                        },
                        source,
                    });
                    source = ValueSource::Opaque;
                }
                LayerSpec::PointwiseConv {
                    in_channels,
                    out_channels,
                } => {
                    let (h, w) = match &shapes[i] {
                        ValueShape::Chw(_, h, w) => (*h, *w),
                        _ => unreachable!(),
                    };
                    units.push(MacUnit {
                        layer: i,
                        sub: 0,
                        geometry: MacGeometry::Conv {
                            in_channels: *in_channels,
                            out_channels: *out_channels,
                            in_h: h,
                            in_w: w,
                            kernel: 1,
                            stride: 1,
                            padding: 0,
                        },
                        source,
                    });
                    source = ValueSource::Opaque;
                }
                LayerSpec::ResidualBlock { channels, kernel } => {
                    let (h, w) = match &shapes[i] {
                        ValueShape::Chw(_, h, w) => (*h, *w),
                        _ => unreachable!(),
                    };
                    let geometry = MacGeometry::Conv {
                        in_channels: *channels,
                        out_channels: *channels,
                        in_h: h,
                        in_w: w,
                        kernel: *kernel,
                        stride: 1,
                        padding: kernel / 2,
                    };
                    // conv1 consumes the block input; conv2 consumes the
                    // internal ReLU, which is the trace point emitted first.
                    units.push(MacUnit {
                        layer: i,
                        sub: 0,
                        geometry: geometry.clone(),
                        source,
                    });
                    units.push(MacUnit {
                        layer: i,
                        sub: 1,
                        geometry,
                        source: ValueSource::Trace(trace_idx),
                    });
                    trace_idx += 2;
                    // Block output is the post-add relu.
                    source = ValueSource::Trace(trace_idx - 1);
                }
                LayerSpec::Relu => {
                    source = ValueSource::Trace(trace_idx);
                    trace_idx += 1;
                }
                LayerSpec::GlobalAvgPool => {
                    source = ValueSource::Opaque;
                }
                // Flatten preserves element identity, so zeros survive it.
                LayerSpec::Flatten => {}
            }
        }
        Ok(units)
    }
}

/// Where a MAC unit's input values come from, for skip accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueSource {
    /// Raw pixels (the stem): never skippable.
    RawInput,
    /// Output of the ReLU recorded at this trace index: skippable.
    Trace(usize),
    /// Mixed values (pooled averages, pre-activations): not activations.
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MacGeometry {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Depthwise {
        channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

#[derive(Debug, Clone)]
pub struct MacUnit {
    pub layer: usize,
    pub sub: usize,
    pub geometry: MacGeometry,
    pub source: ValueSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TracePoint {
    pub layer: usize,
    pub sub: usize,
    pub elements: usize,
}

/// Per-layer weights and biases, aligned with the model's layer indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Empty,
    /// conv / depthwise / pointwise / dense weight plus per-output bias.
    ConvLike { weight: Tensor, bias: Tensor },
    Residual {
        weight1: Tensor,
        bias1: Tensor,
        weight2: Tensor,
        bias2: Tensor,
    },
}

impl Parameters {
    /// Iterate all tensors in a fixed order (layer, then slot).
    pub fn tensors(&self) -> impl Iterator<Item = (usize, usize, &Tensor)> {
        self.layers.iter().enumerate().flat_map(|(i, lp)| {
            let v: Vec<(usize, usize, &Tensor)> = match lp {
                LayerParams::Empty => vec![],
                LayerParams::ConvLike { weight, bias } => vec![(i, 0, weight), (i, 1, bias)],
                LayerParams::Residual {
                    weight1,
                    bias1,
                    weight2,
                    bias2,
                } => vec![(i, 0, weight1), (i, 1, bias1), (i, 2, weight2), (i, 3, bias2)],
            };
            v
        })
    }

    /// Tensor at (layer, slot); slots follow [`Parameters::tensors`] order.
    pub fn slot(&self, layer: usize, slot: usize) -> &Tensor {
        match (&self.layers[layer], slot) {
            (LayerParams::ConvLike { weight, .. }, 0) => weight,
            (LayerParams::ConvLike { bias, .. }, 1) => bias,
            (LayerParams::Residual { weight1, .. }, 0) => weight1,
            (LayerParams::Residual { bias1, .. }, 1) => bias1,
            (LayerParams::Residual { weight2, .. }, 2) => weight2,
            (LayerParams::Residual { bias2, .. }, 3) => bias2,
            _ => panic!("no slot {slot} at layer {layer}"),
        }
    }

    pub fn set_slot(&mut self, layer: usize, slot: usize, t: Tensor) {
        match (&mut self.layers[layer], slot) {
            (LayerParams::ConvLike { weight, .. }, 0) => *weight = t,
            (LayerParams::ConvLike { bias, .. }, 1) => *bias = t,
            (LayerParams::Residual { weight1, .. }, 0) => *weight1 = t,
            (LayerParams::Residual { bias1, .. }, 1) => *bias1 = t,
            (LayerParams::Residual { weight2, .. }, 2) => *weight2 = t,
            (LayerParams::Residual { bias2, .. }, 3) => *bias2 = t,
            _ => panic!("no slot {slot} at layer {layer}"),
        }
    }

    /// SGD step: `self - lr * grads`, producing a new snapshot.
    pub fn sgd_step(&self, grads: &Parameters, lr: f32) -> Result<Parameters, ModelError> {
        if self.layers.len() != grads.layers.len() {
            return Err(ModelError::ParamMismatch { layer: 0 });
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, (p, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            let stepped = match (p, g) {
                (LayerParams::Empty, LayerParams::Empty) => LayerParams::Empty,
                (
                    LayerParams::ConvLike { weight, bias },
                    LayerParams::ConvLike {
                        weight: gw,
                        bias: gb,
                    },
                ) => LayerParams::ConvLike {
                    weight: weight.sub_scaled(gw, lr)?,
                    bias: bias.sub_scaled(gb, lr)?,
                },
                (
                    LayerParams::Residual {
                        weight1,
                        bias1,
                        weight2,
                        bias2,
                    },
                    LayerParams::Residual {
                        weight1: gw1,
                        bias1: gb1,
                        weight2: gw2,
                        bias2: gb2,
                    },
                ) => LayerParams::Residual {
                    weight1: weight1.sub_scaled(gw1, lr)?,
                    bias1: bias1.sub_scaled(gb1, lr)?,
                    weight2: weight2.sub_scaled(gw2, lr)?,
                    bias2: bias2.sub_scaled(gb2, lr)?,
                },
                _ => return Err(ModelError::ParamMismatch { layer: i }),
            };
            layers.push(stepped);
        }
        Ok(Parameters { layers })
    }
}

/// Per-ReLU record of post-activation values from one forward pass over a
/// batch. `nonzero` uses the exact-zero test the zero-skipping hardware uses.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub layer: usize,
    pub sub: usize,
    /// Batched activations `[n, ...]`.
    pub activations: Tensor,
    pub elements: usize,
    pub nonzero: usize,
}

#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub batch: usize,
    pub entries: Vec<TraceEntry>,
}

impl ActivationTrace {
    pub fn empty(batch: usize) -> Self {
        ActivationTrace {
            batch,
            entries: Vec::new(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.elements).sum()
    }

    pub fn total_nonzero(&self) -> usize {
        self.entries.iter().map(|e| e.nonzero).sum()
    }
}

/// Depthwise-separable preset: 3 blocks of (depthwise 3x3 -> relu ->
/// pointwise 1x1 -> relu), global average pool, dense classifier.
pub fn build_m1_micronet(input_shape: [usize; 3], classes: usize) -> ModelSpec {
    let c0 = input_shape[0];
    let widths = [(c0, 16), (16, 32), (32, 64)];
    let mut layers = Vec::new();
    for (cin, cout) in widths {
        layers.push(LayerSpec::DepthwiseConv {
            channels: cin,
            kernel: 3,
            stride: 1,
            padding: 1,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::PointwiseConv {
            in_channels: cin,
            out_channels: cout,
        });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Dense {
        inputs: 64,
        outputs: classes,
    });
    ModelSpec {
        name: "m1-micronet".into(),
        input_shape,
        classes,
        layers,
    }
}

/// Residual preset: conv stem, 2 residual blocks (conv -> relu -> conv,
/// identity skip, relu after add), global average pool, dense classifier.
pub fn build_m2_miniresnet(input_shape: [usize; 3], classes: usize) -> ModelSpec {
    let c0 = input_shape[0];
    let width = 16;
    let layers = vec![
        LayerSpec::Conv {
            in_channels: c0,
            out_channels: width,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::ResidualBlock {
            channels: width,
            kernel: 3,
        },
        LayerSpec::ResidualBlock {
            channels: width,
            kernel: 3,
        },
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense {
            inputs: width,
            outputs: classes,
        },
    ];
    ModelSpec {
        name: "m2-miniresnet".into(),
        input_shape,
        classes,
        layers,
    }
}

fn he_uniform(rng: &mut impl rand::Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| (rng.random::<f32>() * 2.0 - 1.0) * limit)
        .expect("init tensor")
}

/// He-uniform weights and zero biases, fully determined by the seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Parameters {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1217));
    let layers = spec
        .layers
        .iter()
        .map(|layer| match layer {
            LayerSpec::Dense { inputs, outputs } => LayerParams::ConvLike {
                weight: he_uniform(&mut rng, &[*inputs, *outputs], *inputs),
                bias: Tensor::zeros(&[*outputs]),
            },
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => LayerParams::ConvLike {
                weight: he_uniform(
                    &mut rng,
                    &[*out_channels, *in_channels, *kernel, *kernel],
                    in_channels * kernel * kernel,
                ),
                bias: Tensor::zeros(&[*out_channels]),
            },
            LayerSpec::DepthwiseConv {
                channels, kernel, ..
            } => LayerParams::ConvLike {
                weight: he_uniform(&mut rng, &[*channels, *kernel, *kernel], kernel * kernel),
                bias: Tensor::zeros(&[*channels]),
            },
            LayerSpec::PointwiseConv {
                in_channels,
                out_channels,
            } => LayerParams::ConvLike {
                weight: he_uniform(
                    &mut rng,
                    &[*out_channels, *in_channels, 1, 1],
                    *in_channels,
                ),
                bias: Tensor::zeros(&[*out_channels]),
            },
            LayerSpec::ResidualBlock { channels, kernel } => {
                let fan_in = channels * kernel * kernel;
                LayerParams::Residual {
                    weight1: he_uniform(
                        &mut rng,
                        &[*channels, *channels, *kernel, *kernel],
                        fan_in,
                    ),
                    bias1: Tensor::zeros(&[*channels]),
                    weight2: he_uniform(
                        &mut rng,
                        &[*channels, *channels, *kernel, *kernel],
                        fan_in,
                    ),
                    bias2: Tensor::zeros(&[*channels]),
                }
            }
            _ => LayerParams::Empty,
        })
        .collect();
    Parameters { layers }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Extracts sample `i` of a batched `[n, ...]` tensor as `[...]`.
fn sample_of(batch: &Tensor, i: usize) -> Tensor {
    let per = batch.len() / batch.shape()[0];
    let shape = batch.shape()[1..].to_vec();
    Tensor::new(shape, batch.data()[i * per..(i + 1) * per].to_vec())
        .expect("sample slice of validated batch")
}

fn stack(samples: &[Tensor]) -> Tensor {
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(samples[0].shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        data.extend_from_slice(s.data());
    }
    Tensor::new(shape, data).expect("stack of uniform samples")
}

fn add_channel_bias(t: &mut Tensor, bias: &Tensor) {
    let c = t.shape()[0];
    let per = t.len() / c;
    let data = t.data_mut();
    for ch in 0..c {
        let b = bias.data()[ch];
        for v in &mut data[ch * per..(ch + 1) * per] {
            *v += b;
        }
    }
}

enum LayerCache {
    None,
    /// Input to a conv-like layer (per-sample tensors).
    Input(Vec<Tensor>),
    /// Input to a dense layer (batched 2-d).
    DenseInput(Tensor),
    /// Pre-activation inputs of a standalone relu (per sample for CHW
    /// values, single batched tensor for flat values).
    ReluInput(Vec<Tensor>),
    /// Residual internals per sample: (x, y1, a1, z) with z = conv2(a1)+b2+x.
    Residual(Vec<(Tensor, Tensor, Tensor, Tensor)>),
    /// Input shape of pool/flatten layers.
    Shape(Vec<usize>),
}

struct ForwardState {
    logits: Tensor,
    trace: ActivationTrace,
    caches: Vec<LayerCache>,
}

fn record(trace: &mut ActivationTrace, layer: usize, sub: usize, act: &Tensor) {
    trace.entries.push(TraceEntry {
        layer,
        sub,
        activations: act.clone(),
        elements: act.len(),
        nonzero: act.count_nonzero(),
    });
}

fn forward_impl(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Tensor,
    record_trace: bool,
    keep_caches: bool,
) -> Result<ForwardState, ModelError> {
    let n = match batch.shape() {
        [n, c, h, w]
            if [*c, *h, *w] == spec.input_shape =>
        {
            *n
        }
        s => {
            return Err(ModelError::BatchShape {
                expected: spec.input_shape.to_vec(),
                got: s.to_vec(),
            })
        }
    };
    if params.layers.len() != spec.layers.len() {
        return Err(ModelError::ParamMismatch { layer: 0 });
    }
    let mut trace = ActivationTrace::empty(n);
    let mut caches = Vec::with_capacity(spec.layers.len());

    // CHW layers run per sample; Flat layers run batched.
    let mut chw: Option<Vec<Tensor>> = Some((0..n).map(|i| sample_of(batch, i)).collect());
    let mut flat: Option<Tensor> = None;

    for (li, layer) in spec.layers.iter().enumerate() {
        let lp = &params.layers[li];
        match layer {
            LayerSpec::Conv {
                stride, padding, ..
            } => {
                let (weight, bias) = match lp {
                    LayerParams::ConvLike { weight, bias } => (weight, bias),
                    _ => return Err(ModelError::ParamMismatch { layer: li }),
                };
                let inputs = chw.take().ok_or(ModelError::ParamMismatch { layer: li })?;
                let mut outs = Vec::with_capacity(n);
                for s in &inputs {
                    let mut o = tensor::conv2d(s, weight, *stride, *padding)?;
                    add_channel_bias(&mut o, bias);
                    o.ensure_finite("conv2d+bias")?;
                    outs.push(o);
                }
                caches.push(if keep_caches {
                    LayerCache::Input(inputs)
                } else {
                    LayerCache::None
                });
                chw = Some(outs);
            }
            LayerSpec::PointwiseConv { .. } => {
                let (weight, bias) = match lp {
                    LayerParams::ConvLike { weight, bias } => (weight, bias),
                    _ => return Err(ModelError::ParamMismatch { layer: li }),
                };
                let inputs = chw.take().ok_or(ModelError::ParamMismatch { layer: li })?;
                let mut outs = Vec::with_capacity(n);
                for s in &inputs {
                    let mut o = tensor::conv2d(s, weight, 1, 0)?;
                    add_channel_bias(&mut o, bias);
                    o.ensure_finite("pointwise+bias")?;
                    outs.push(o);
                }
                caches.push(if keep_caches {
                    LayerCache::Input(inputs)
                } else {
                    LayerCache::None
                });
                chw = Some(outs);
            }
            LayerSpec::DepthwiseConv {
                stride, padding, ..
            } => {
                let (weight, bias) = match lp {
                    LayerParams::ConvLike { weight, bias } => (weight, bias),
                    _ => return Err(ModelError::ParamMismatch { layer: li }),
                };
                let inputs = chw.take().ok_or(ModelError::ParamMismatch { layer: li })?;
                let mut outs = Vec::with_capacity(n);
                for s in &inputs {
                    let mut o = tensor::depthwise_conv2d(s, weight, *stride, *padding)?;
                    add_channel_bias(&mut o, bias);
                    o.ensure_finite("depthwise+bias")?;
                    outs.push(o);
                }
                caches.push(if keep_caches {
                    LayerCache::Input(inputs)
                } else {
                    LayerCache::None
                });
                chw = Some(outs);
            }
            LayerSpec::ResidualBlock { kernel, .. } => {
                let (w1, b1, w2, b2) = match lp {
                    LayerParams::Residual {
                        weight1,
                        bias1,
                        weight2,
                        bias2,
                    } => (weight1, bias1, weight2, bias2),
                    _ => return Err(ModelError::ParamMismatch { layer: li }),
                };
                let pad = kernel / 2;
                let inputs = chw.take().ok_or(ModelError::ParamMismatch { layer: li })?;
                let mut outs = Vec::with_capacity(n);
                let mut internals = Vec::with_capacity(n);
                for x in &inputs {
                    let mut y1 = tensor::conv2d(x, w1, 1, pad)?;
                    add_channel_bias(&mut y1, b1);
                    y1.ensure_finite("residual conv1")?;
                    let a1 = tensor::relu(&y1);
                    let mut y2 = tensor::conv2d(&a1, w2, 1, pad)?;
                    add_channel_bias(&mut y2, b2);
                    let z = y2.add(x)?;
                    let out = tensor::relu(&z);
                    internals.push((x.clone(), y1, a1, z));
                    outs.push(out);
                }
                if record_trace {
                    let a1s: Vec<Tensor> = internals.iter().map(|t| t.2.clone()).collect();
                    record(&mut trace, li, 0, &stack(&a1s));
                    record(&mut trace, li, 1, &stack(&outs));
                }
                caches.push(if keep_caches {
                    LayerCache::Residual(internals)
                } else {
                    LayerCache::None
                });
                chw = Some(outs);
            }
            LayerSpec::Relu => {
                if let Some(inputs) = chw.take() {
                    let outs: Vec<Tensor> = inputs.iter().map(tensor::relu).collect();
                    if record_trace {
                        record(&mut trace, li, 0, &stack(&outs));
                    }
                    caches.push(if keep_caches {
                        LayerCache::ReluInput(inputs)
                    } else {
                        LayerCache::None
                    });
                    chw = Some(outs);
                } else {
                    let input = flat.take().ok_or(ModelError::ParamMismatch { layer: li })?;
                    let out = tensor::relu(&input);
                    if record_trace {
                        record(&mut trace, li, 0, &out);
                    }
                    caches.push(if keep_caches {
                        LayerCache::ReluInput(vec![input])
                    } else {
                        LayerCache::None
                    });
                    flat = Some(out);
                }
            }
            LayerSpec::GlobalAvgPool => {
                let inputs = chw.take().ok_or(ModelError::ParamMismatch { layer: li })?;
                let c = inputs[0].shape()[0];
                let per = inputs[0].len() / c;
                let mut data = Vec::with_capacity(n * c);
                for s in &inputs {
                    for ch in 0..c {
                        let sum: f32 = s.data()[ch * per..(ch + 1) * per].iter().sum();
                        data.push(sum / per as f32);
                    }
                }
                caches.push(LayerCache::Shape(inputs[0].shape().to_vec()));
                flat = Some(Tensor::new(vec![n, c], data)?);
            }
            LayerSpec::Flatten => {
                if let Some(inputs) = chw.take() {
                    let d = inputs[0].len();
                    let mut data = Vec::with_capacity(n * d);
                    for s in &inputs {
                        data.extend_from_slice(s.data());
                    }
                    caches.push(LayerCache::Shape(inputs[0].shape().to_vec()));
                    flat = Some(Tensor::new(vec![n, d], data)?);
                } else {
                    // Flatten of an already-flat value is the identity.
                    caches.push(LayerCache::None);
                }
            }
            LayerSpec::Dense { .. } => {
                let (weight, bias) = match lp {
                    LayerParams::ConvLike { weight, bias } => (weight, bias),
                    _ => return Err(ModelError::ParamMismatch { layer: li }),
                };
                let input = flat.take().ok_or(ModelError::ParamMismatch { layer: li })?;
                let mut out = tensor::matmul(&input, weight)?;
                let outputs = weight.shape()[1];
                let data = out.data_mut();
                for row in 0..n {
                    for j in 0..outputs {
                        data[row * outputs + j] += bias.data()[j];
                    }
                }
                out.ensure_finite("dense+bias")?;
                caches.push(if keep_caches {
                    LayerCache::DenseInput(input)
                } else {
                    LayerCache::None
                });
                flat = Some(out);
            }
        }
    }

    let logits = flat.ok_or(ModelError::BadOutput { got: vec![] })?;
    Ok(ForwardState {
        logits,
        trace,
        caches,
    })
}

/// Forward pass over a batch `[n, c, h, w]`, optionally recording one trace
/// entry per ReLU point.
pub fn forward(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Tensor,
    record_trace: bool,
) -> Result<(Tensor, ActivationTrace), ModelError> {
    let st = forward_impl(spec, params, batch, record_trace, false)?;
    Ok((st.logits, st.trace))
}

/// Extra gradient injected at a ReLU output during backprop, keyed by trace
/// index. Returns `dL/d(activations)` to add to the upstream gradient.
pub type ReluGradHook<'a> = dyn Fn(usize, &Tensor) -> Result<Gradient, TensorError> + 'a;

pub struct BackwardOutput {
    /// Mean cross-entropy over the batch (task loss only).
    pub loss: f64,
    pub grads: Parameters,
    pub trace: ActivationTrace,
}

/// Full backward pass: cross-entropy gradients for every parameter, plus the
/// activation trace so the caller can attach activation-level objectives.
/// `relu_hook`, when present, is called at every ReLU point with the trace
/// index and post-activation values; its result is added to the upstream
/// gradient before the ReLU mask is applied.
pub fn backward(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Tensor,
    labels: &[usize],
    relu_hook: Option<&ReluGradHook>,
) -> Result<BackwardOutput, ModelError> {
    backward_opts(spec, params, batch, labels, relu_hook, true)
}

/// [`backward`] with trace recording optional: the gradients themselves do
/// not need the trace unless a hook consumes it, and skipping the recording
/// avoids cloning every activation batch.
pub fn backward_opts(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Tensor,
    labels: &[usize],
    relu_hook: Option<&ReluGradHook>,
    record_trace: bool,
) -> Result<BackwardOutput, ModelError> {
    let record_trace = record_trace || relu_hook.is_some();
    let st = forward_impl(spec, params, batch, record_trace, true)?;
    let n = batch.shape()[0];
    let (loss, dlogits) = softmax_cross_entropy(&st.logits, labels)?;

    let mut grads: Vec<LayerParams> = params
        .layers
        .iter()
        .map(|lp| match lp {
            LayerParams::Empty => LayerParams::Empty,
            LayerParams::ConvLike { weight, bias } => LayerParams::ConvLike {
                weight: Tensor::zeros(weight.shape()),
                bias: Tensor::zeros(bias.shape()),
            },
            LayerParams::Residual {
                weight1,
                bias1,
                weight2,
                bias2,
            } => LayerParams::Residual {
                weight1: Tensor::zeros(weight1.shape()),
                bias1: Tensor::zeros(bias1.shape()),
                weight2: Tensor::zeros(weight2.shape()),
                bias2: Tensor::zeros(bias2.shape()),
            },
        })
        .collect();

    // Trace points are indexed structurally so the countdown works whether
    // or not entries were recorded (recording is skipped without a hook).
    let mut next_trace = spec.trace_points()?.len();

    // Upstream gradient, either batched-flat or per-sample CHW.
    let mut dflat: Option<Tensor> = Some(dlogits);
    let mut dchw: Option<Vec<Tensor>> = None;

    for (li, layer) in spec.layers.iter().enumerate().rev() {
        let cache = &st.caches[li];
        match layer {
            LayerSpec::Dense { .. } => {
                let (weight, _) = match &params.layers[li] {
                    LayerParams::ConvLike { weight, bias } => (weight, bias),
                    _ => unreachable!(),
                };
                let input = match cache {
                    LayerCache::DenseInput(t) => t,
                    _ => unreachable!(),
                };
                let up = dflat.take().expect("dense upstream");
                let (dinput, dweight) = tensor::matmul_backward(input, weight, &up)?;
                let outputs = weight.shape()[1];
                let mut dbias = vec![0.0f32; outputs];
                for row in 0..n {
                    for j in 0..outputs {
                        dbias[j] += up.data()[row * outputs + j];
                    }
                }
                grads[li] = LayerParams::ConvLike {
                    weight: dweight,
                    bias: Tensor::new(vec![outputs], dbias)?,
                };
                dflat = Some(dinput);
            }
            LayerSpec::GlobalAvgPool => {
                let shape = match cache {
                    LayerCache::Shape(s) => s.clone(),
                    _ => unreachable!(),
                };
                let (c, per) = (shape[0], shape[1] * shape[2]);
                let up = dflat.take().expect("pool upstream");
                let mut outs = Vec::with_capacity(n);
                for row in 0..n {
                    let mut data = vec![0.0f32; c * per];
                    for ch in 0..c {
                        let g = up.data()[row * c + ch] / per as f32;
                        for v in &mut data[ch * per..(ch + 1) * per] {
                            *v = g;
                        }
                    }
                    outs.push(Tensor::new(shape.clone(), data)?);
                }
                dchw = Some(outs);
            }
            LayerSpec::Flatten => {
                if let LayerCache::Shape(shape) = cache {
                    let up = dflat.take().expect("flatten upstream");
                    let per: usize = shape.iter().product();
                    let outs = (0..n)
                        .map(|row| {
                            Tensor::new(
                                shape.clone(),
                                up.data()[row * per..(row + 1) * per].to_vec(),
                            )
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    dchw = Some(outs);
                }
                // Identity flatten: gradient passes through unchanged.
            }
            LayerSpec::Relu => {
                next_trace -= 1;
                let pre = match cache {
                    LayerCache::ReluInput(t) => t,
                    _ => unreachable!(),
                };
                if let Some(ups) = dchw.take() {
                    let extra = match relu_hook {
                        Some(hook) => {
                            Some(hook(next_trace, &st.trace.entries[next_trace].activations)?)
                        }
                        None => None,
                    };
                    let mut outs = Vec::with_capacity(n);
                    for (i, (pre_i, up_i)) in pre.iter().zip(&ups).enumerate() {
                        let up_total = match &extra {
                            Some(e) => up_i.add(&sample_of(e, i))?,
                            None => up_i.clone(),
                        };
                        outs.push(tensor::relu_backward(pre_i, &up_total)?);
                    }
                    dchw = Some(outs);
                } else {
                    let mut up = dflat.take().expect("relu upstream");
                    if let Some(hook) = relu_hook {
                        let extra =
                            hook(next_trace, &st.trace.entries[next_trace].activations)?;
                        up = up.add(&extra)?;
                    }
                    dflat = Some(tensor::relu_backward(&pre[0], &up)?);
                }
            }
            LayerSpec::Conv { .. }
            | LayerSpec::PointwiseConv { .. }
            | LayerSpec::DepthwiseConv { .. } => {
                let (stride, padding) = match layer {
                    LayerSpec::Conv {
                        stride, padding, ..
                    }
                    | LayerSpec::DepthwiseConv {
                        stride, padding, ..
                    } => (*stride, *padding),
                    LayerSpec::PointwiseConv { .. } => (1, 0),
                    _ => unreachable!(),
                };
                let (weight, bias) = match &params.layers[li] {
                    LayerParams::ConvLike { weight, bias } => (weight, bias),
                    _ => unreachable!(),
                };
                let inputs = match cache {
                    LayerCache::Input(v) => v,
                    _ => unreachable!(),
                };
                let ups = dchw.take().expect("conv upstream");
                let depthwise = matches!(layer, LayerSpec::DepthwiseConv { .. });
                let mut dweight = Tensor::zeros(weight.shape());
                let mut dbias = vec![0.0f32; bias.len()];
                let mut dins = Vec::with_capacity(n);
                for (x, up) in inputs.iter().zip(&ups) {
                    let (di, dk) = if depthwise {
                        tensor::depthwise_conv2d_backward(x, weight, stride, padding, up)?
                    } else {
                        tensor::conv2d_backward(x, weight, stride, padding, up)?
                    };
                    dweight = dweight.add(&dk)?;
                    let oc = up.shape()[0];
                    let per = up.len() / oc;
                    for ch in 0..oc {
                        dbias[ch] += up.data()[ch * per..(ch + 1) * per].iter().sum::<f32>();
                    }
                    dins.push(di);
                }
                grads[li] = LayerParams::ConvLike {
                    weight: dweight,
                    bias: Tensor::new(vec![bias.len()], dbias)?,
                };
                dchw = Some(dins);
            }
            LayerSpec::ResidualBlock { kernel, .. } => {
                // Two trace entries: internal (sub 0) recorded first,
                // post-add (sub 1) second.
                next_trace -= 2;
                let (internal_idx, output_idx) = (next_trace, next_trace + 1);
                let pad = kernel / 2;
                let (w1, b1, w2, b2) = match &params.layers[li] {
                    LayerParams::Residual {
                        weight1,
                        bias1,
                        weight2,
                        bias2,
                    } => (weight1, bias1, weight2, bias2),
                    _ => unreachable!(),
                };
                let internals = match cache {
                    LayerCache::Residual(v) => v,
                    _ => unreachable!(),
                };
                let mut ups = dchw.take().expect("residual upstream");
                if let Some(hook) = relu_hook {
                    let extra = hook(output_idx, &st.trace.entries[output_idx].activations)?;
                    for (i, up) in ups.iter_mut().enumerate() {
                        *up = up.add(&sample_of(&extra, i))?;
                    }
                }
                // Internal-relu extras are per-sample slices of one batched hook call.
                let internal_extra = match relu_hook {
                    Some(hook) => Some(hook(
                        internal_idx,
                        &st.trace.entries[internal_idx].activations,
                    )?),
                    None => None,
                };
                let mut dw1 = Tensor::zeros(w1.shape());
                let mut dw2 = Tensor::zeros(w2.shape());
                let mut db1 = vec![0.0f32; b1.len()];
                let mut db2 = vec![0.0f32; b2.len()];
                let mut dins = Vec::with_capacity(n);
                for (i, ((x, y1, a1, z), up)) in internals.iter().zip(&ups).enumerate() {
                    // relu after add
                    let dz = tensor::relu_backward(z, up)?;
                    // conv2 path
                    let (da1_conv, dk2) = tensor::conv2d_backward(a1, w2, 1, pad, &dz)?;
                    dw2 = dw2.add(&dk2)?;
                    let oc = dz.shape()[0];
                    let per = dz.len() / oc;
                    for ch in 0..oc {
                        db2[ch] += dz.data()[ch * per..(ch + 1) * per].iter().sum::<f32>();
                    }
                    // internal relu (with optional hook contribution)
                    let da1 = match &internal_extra {
                        Some(extra) => da1_conv.add(&sample_of(extra, i))?,
                        None => da1_conv,
                    };
                    let dy1 = tensor::relu_backward(y1, &da1)?;
                    // conv1 path
                    let (dx_main, dk1) = tensor::conv2d_backward(x, w1, 1, pad, &dy1)?;
                    dw1 = dw1.add(&dk1)?;
                    for ch in 0..oc {
                        db1[ch] += dy1.data()[ch * per..(ch + 1) * per].iter().sum::<f32>();
                    }
                    // skip path adds dz directly
                    dins.push(dx_main.add(&dz)?);
                }
                grads[li] = LayerParams::Residual {
                    weight1: dw1,
                    bias1: Tensor::new(vec![b1.len()], db1)?,
                    weight2: dw2,
                    bias2: Tensor::new(vec![b2.len()], db2)?,
                };
                dchw = Some(dins);
            }
        }
    }

    Ok(BackwardOutput {
        loss,
        grads: Parameters { layers: grads },
        trace: st.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::seeded_tensor_in;

    fn tiny_m1() -> ModelSpec {
        build_m1_micronet([3, 6, 6], 3)
    }

    fn tiny_m2() -> ModelSpec {
        build_m2_miniresnet([3, 6, 6], 3)
    }

    #[test]
    fn presets_validate_and_emit_class_logits() {
        for spec in [build_m1_micronet([3, 32, 32], 10), build_m2_miniresnet([3, 32, 32], 10)] {
            spec.validate().unwrap();
            let shapes = spec.layer_shapes().unwrap();
            assert_eq!(shapes.last().unwrap(), &ValueShape::Flat(10));
        }
    }

    #[test]
    fn m1_depthwise_always_followed_by_pointwise() {
        let spec = build_m1_micronet([3, 32, 32], 10);
        for (i, layer) in spec.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::DepthwiseConv { .. }) {
                // Skip the interleaved relu.
                let next_mac = spec.layers[i + 1..]
                    .iter()
                    .find(|l| !matches!(l, LayerSpec::Relu));
                assert!(matches!(next_mac, Some(LayerSpec::PointwiseConv { .. })));
            }
        }
    }

    #[test]
    fn preset_parameter_counts_match_hand_computation() {
        // m1: dw(3)+3 + pw 3*16+16 + dw(16)+16 + pw 16*32+32 + dw(32)+32
        //     + pw 32*64+64 + dense 64*10+10
        let m1 = build_m1_micronet([3, 32, 32], 10);
        let expect_m1 = (3 * 9 + 3)
            + (16 * 3 + 16)
            + (16 * 9 + 16)
            + (32 * 16 + 32)
            + (32 * 9 + 32)
            + (64 * 32 + 64)
            + (64 * 10 + 10);
        assert_eq!(m1.parameter_count(), expect_m1);
        assert!(m1.parameter_count() <= 100_000);

        // m2: stem 16*3*9+16 + 2 blocks of 2*(16*16*9+16) + dense 16*10+10
        let m2 = build_m2_miniresnet([3, 32, 32], 10);
        let expect_m2 = (16 * 3 * 9 + 16) + 2 * 2 * (16 * 16 * 9 + 16) + (16 * 10 + 10);
        assert_eq!(m2.parameter_count(), expect_m2);
        assert!(m2.parameter_count() <= 200_000);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = tiny_m1();
        let a = init_params(&spec, 7);
        let b = init_params(&spec, 7);
        let c = init_params(&spec, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_variance_matches_he_target() {
        // A dense layer with fan_in 36 and 1008 weights: variance should be
        // within 20% of 2/fan_in.
        let spec = ModelSpec {
            name: "t".into(),
            input_shape: [1, 6, 6],
            classes: 28,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 36,
                    outputs: 28,
                },
            ],
        };
        let params = init_params(&spec, 3);
        let w = match &params.layers[1] {
            LayerParams::ConvLike { weight, .. } => weight,
            _ => panic!(),
        };
        assert_eq!(w.len(), 1008);
        let mean: f64 = w.data().iter().map(|&v| f64::from(v)).sum::<f64>() / w.len() as f64;
        let var: f64 = w
            .data()
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / w.len() as f64;
        let target = 2.0 / 36.0;
        assert!(
            (var - target).abs() / target < 0.2,
            "var {var} vs target {target}"
        );
    }

    #[test]
    fn zero_weight_model_emits_zero_logits() {
        let spec = tiny_m1();
        let mut params = init_params(&spec, 1);
        for lp in &mut params.layers {
            if let LayerParams::ConvLike { weight, bias } = lp {
                *weight = Tensor::zeros(weight.shape());
                *bias = Tensor::zeros(bias.shape());
            }
        }
        let batch = seeded_tensor_in(&[2, 3, 6, 6], 5, 0.0, 1.0);
        let (logits, _) = forward(&spec, &params, &batch, false).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trace_nonzero_counts_match_brute_force() {
        for spec in [tiny_m1(), tiny_m2()] {
            let params = init_params(&spec, 11);
            let batch = seeded_tensor_in(&[3, 3, 6, 6], 13, 0.0, 1.0);
            let (_, trace) = forward(&spec, &params, &batch, true).unwrap();
            assert!(!trace.entries.is_empty());
            for e in &trace.entries {
                let brute = e.activations.data().iter().filter(|&&v| v > 0.0).count();
                assert_eq!(e.nonzero, brute);
                assert!(e.nonzero <= e.elements);
            }
        }
    }

    #[test]
    fn batch_of_one_matches_row_in_batch() {
        let spec = tiny_m2();
        let params = init_params(&spec, 21);
        let batch = seeded_tensor_in(&[8, 3, 6, 6], 23, 0.0, 1.0);
        let (all, _) = forward(&spec, &params, &batch, false).unwrap();
        for i in [0usize, 3, 7] {
            let one = sample_of(&batch, i).reshape(&[1, 3, 6, 6]).unwrap();
            let (row, _) = forward(&spec, &params, &one, false).unwrap();
            assert_eq!(row.data(), &all.data()[i * 3..(i + 1) * 3]);
        }
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let spec = tiny_m1();
        let params = init_params(&spec, 1);
        let batch = Tensor::zeros(&[2, 3, 5, 5]);
        assert!(matches!(
            forward(&spec, &params, &batch, false),
            Err(ModelError::BatchShape { .. })
        ));
    }

    #[test]
    fn trace_completeness_matches_analytic_count() {
        for spec in [tiny_m1(), tiny_m2()] {
            let params = init_params(&spec, 31);
            let n = 4;
            let batch = seeded_tensor_in(&[n, 3, 6, 6], 33, 0.0, 1.0);
            let (_, trace) = forward(&spec, &params, &batch, true).unwrap();
            let per_sample = spec.relu_elements_per_sample().unwrap();
            assert_eq!(trace.total_elements(), per_sample * n);
            let points = spec.trace_points().unwrap();
            assert_eq!(points.len(), trace.entries.len());
            for (p, e) in points.iter().zip(&trace.entries) {
                assert_eq!((p.layer, p.sub), (e.layer, e.sub));
                assert_eq!(p.elements * n, e.elements);
            }
        }
    }

    #[test]
    fn residual_block_with_zero_convs_is_relu_identity() {
        let spec = ModelSpec {
            name: "res".into(),
            input_shape: [2, 4, 4],
            classes: 2,
            layers: vec![
                LayerSpec::ResidualBlock {
                    channels: 2,
                    kernel: 3,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    inputs: 2,
                    outputs: 2,
                },
            ],
        };
        let mut params = init_params(&spec, 3);
        if let LayerParams::Residual {
            weight1,
            weight2,
            bias1,
            bias2,
        } = &mut params.layers[0]
        {
            *weight1 = Tensor::zeros(weight1.shape());
            *weight2 = Tensor::zeros(weight2.shape());
            *bias1 = Tensor::zeros(bias1.shape());
            *bias2 = Tensor::zeros(bias2.shape());
        }
        let batch = crate::check::seeded_tensor(&[1, 2, 4, 4], 9, 1.0);
        let (_, trace) = forward(&spec, &params, &batch, true).unwrap();
        let block_out = &trace.entries[1].activations;
        let expect = tensor::relu(&batch);
        assert_eq!(block_out.data(), expect.data());
    }

    #[test]
    fn shape_soundness_over_random_batches() {
        for spec in [tiny_m1(), tiny_m2()] {
            for seed in 0..5 {
                let n = 1 + (seed as usize % 3);
                let batch = seeded_tensor_in(&[n, 3, 6, 6], 100 + seed, 0.0, 1.0);
                let params = init_params(&spec, seed);
                let (logits, _) = forward(&spec, &params, &batch, false).unwrap();
                assert_eq!(logits.shape(), &[n, spec.classes]);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_end_to_end() {
        for spec in [tiny_m1(), tiny_m2()] {
            let err = crate::check::e2e_grad_check(&spec, 41, 24);
            assert!(err <= 1e-2, "{}: rel err {err:.3e}", spec.name);
        }
    }

    #[test]
    fn finite_diff_agrees_with_backward_on_two_layer_mlp() {
        let spec = ModelSpec {
            name: "mlp".into(),
            input_shape: [1, 4, 4],
            classes: 3,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 16,
                    outputs: 8,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 8,
                    outputs: 3,
                },
            ],
        };
        let err = crate::check::e2e_grad_check(&spec, 7, 64);
        assert!(err <= 1e-2, "rel err {err:.3e}");
    }

    #[test]
    fn mac_units_bind_expected_sources() {
        let m1 = tiny_m1();
        let units = m1.mac_units().unwrap();
        // dw(stem), pw, dw, pw, dw, pw, dense
        assert_eq!(units.len(), 7);
        assert_eq!(units[0].source, ValueSource::RawInput);
        for u in &units[1..6] {
            assert!(matches!(u.source, ValueSource::Trace(_)));
        }
        // dense consumes pooled averages, not activations
        assert_eq!(units[6].source, ValueSource::Opaque);

        let m2 = tiny_m2();
        let units = m2.mac_units().unwrap();
        // stem, block1 conv1+conv2, block2 conv1+conv2, dense
        assert_eq!(units.len(), 6);
        assert_eq!(units[0].source, ValueSource::RawInput);
        assert_eq!(units[1].source, ValueSource::Trace(0)); // stem relu
        assert_eq!(units[2].source, ValueSource::Trace(1)); // block1 internal
        assert_eq!(units[3].source, ValueSource::Trace(2)); // block1 output
        assert_eq!(units[4].source, ValueSource::Trace(3)); // block2 internal
        assert_eq!(units[5].source, ValueSource::Opaque);
    }
}



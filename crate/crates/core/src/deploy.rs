//! Model deployment: the `.smod` binary serialization format and
//! post-training int8 affine quantization.
//!
//! The porting step a real attack pipeline runs through converter toolchains
//! collapses here to one export+quantize step with the same observable
//! contract: a quantized deployable artifact. Weights are stored as u8
//! affine codes (`x ~ (q - zero_point) * scale`) chosen so exact zero is
//! representable; inference dequantizes to float, which keeps the
//! zero-activation semantics of the executor exact.
//!
//! All multi-byte fields are little-endian. Byte layout:
//!
//! ```text
//! magic  "SMOD" (4)     version u16     kind u8 (0 float, 1 quantized)
//! name_len u16          name UTF-8      input shape 3 x u32
//! classes u32           layer_count u16
//! per layer: tag u8 + 5 x u32 dimensional parameters
//! range_count u16       per range: trace u16 + min f32 + max f32
//! tensor_count u32
//! per tensor: layer u16, slot u8, dtype u8 (0 f32 / 1 q8),
//!             scale f32, zero_point u8, ndim u8, dims u32 x ndim,
//!             payload (f32 x n | u8 x n)
//! ```

use thiserror::Error;

use crate::model::{
    forward, ActivationTrace, LayerParams, LayerSpec, ModelError, ModelSpec, Parameters,
};
use crate::tensor::{Tensor, TensorError};

pub const SMOD_MAGIC: &[u8; 4] = b"SMOD";
pub const SMOD_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("bad magic: not an .smod file")]
    BadMagic,
    #[error("unsupported format version {0} (expected {SMOD_VERSION})")]
    Version(u16),
    #[error("truncated stream while reading {field} at offset {offset}")]
    Truncated { field: &'static str, offset: usize },
    #[error("tensor at layer {layer} slot {slot} has non-positive scale {scale}")]
    BadScale { layer: usize, slot: usize, scale: f32 },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("calibration batch must be non-empty")]
    EmptyCalibration,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-tensor affine-quantized weights: `x ~ (code - zero_point) * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<u8>,
    pub scale: f32,
    pub zero_point: u8,
}

impl QTensor {
    /// Quantize from the tensor's own min/max range. A degenerate tensor
    /// (max == min) gets scale 1 and zero_point 0, which round-trips zeros
    /// exactly and bounds the error for constants by half a unit.
    pub fn quantize(t: &Tensor) -> QTensor {
        let min = t.data().iter().fold(f32::INFINITY, |m, &v| m.min(v));
        let max = t.data().iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let (scale, zero_point) = if max == min {
            (1.0, 0u8)
        } else {
            let scale = (max - min) / 255.0;
            // Exact rational form: round(255 * (-min) / (max - min)) avoids
            // the f32 division noise that can push a .5 the wrong way.
            let zp = (255.0 * f64::from(-min) / f64::from(max - min))
                .round()
                .clamp(0.0, 255.0) as u8;
            (scale, zp)
        };
        let codes = t
            .data()
            .iter()
            .map(|&v| ((v / scale).round() + f32::from(zero_point)).clamp(0.0, 255.0) as u8)
            .collect();
        QTensor {
            shape: t.shape().to_vec(),
            codes,
            scale,
            zero_point,
        }
    }

    pub fn dequantize(&self) -> Result<Tensor, TensorError> {
        let zp = f32::from(self.zero_point);
        let data = self
            .codes
            .iter()
            .map(|&q| (f32::from(q) - zp) * self.scale)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedLayer {
    Empty,
    ConvLike {
        weight: QTensor,
        bias: Tensor,
    },
    Residual {
        weight1: QTensor,
        bias1: Tensor,
        weight2: QTensor,
        bias2: Tensor,
    },
}

/// Observed post-ReLU range on the calibration batch, recorded per trace
/// point. Metadata only: reference inference dequantizes weights and runs
/// float activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRange {
    pub trace_index: u16,
    pub min: f32,
    pub max: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub spec: ModelSpec,
    pub layers: Vec<QuantizedLayer>,
    pub activation_ranges: Vec<ActivationRange>,
}

impl QuantizedModel {
    pub fn dequantize(&self) -> Result<Parameters, DeployError> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    QuantizedLayer::Empty => LayerParams::Empty,
                    QuantizedLayer::ConvLike { weight, bias } => LayerParams::ConvLike {
                        weight: weight.dequantize()?,
                        bias: bias.clone(),
                    },
                    QuantizedLayer::Residual {
                        weight1,
                        bias1,
                        weight2,
                        bias2,
                    } => LayerParams::Residual {
                        weight1: weight1.dequantize()?,
                        bias1: bias1.clone(),
                        weight2: weight2.dequantize()?,
                        bias2: bias2.clone(),
                    },
                })
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(Parameters { layers })
    }
}

/// A model ready for export: float weights or a quantized deployment.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelPayload {
    Float(Parameters),
    Quantized(QuantizedModel),
}

/// Post-training per-tensor quantization. Weights quantize from their own
/// min/max; biases stay float; the calibration batch supplies the
/// activation-range metadata stored alongside.
pub fn quantize_post_training(
    spec: &ModelSpec,
    params: &Parameters,
    calibration_batch: &Tensor,
) -> Result<QuantizedModel, DeployError> {
    if calibration_batch.is_empty() || calibration_batch.shape()[0] == 0 {
        return Err(DeployError::EmptyCalibration);
    }
    let (_, trace) = forward(spec, params, calibration_batch, true)?;
    let activation_ranges = trace
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let min = e.activations.data().iter().fold(f32::INFINITY, |m, &v| m.min(v));
            let max = e
                .activations
                .data()
                .iter()
                .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            ActivationRange {
                trace_index: i as u16,
                min,
                max,
            }
        })
        .collect();
    let layers = params
        .layers
        .iter()
        .map(|lp| match lp {
            LayerParams::Empty => QuantizedLayer::Empty,
            LayerParams::ConvLike { weight, bias } => QuantizedLayer::ConvLike {
                weight: QTensor::quantize(weight),
                bias: bias.clone(),
            },
            LayerParams::Residual {
                weight1,
                bias1,
                weight2,
                bias2,
            } => QuantizedLayer::Residual {
                weight1: QTensor::quantize(weight1),
                bias1: bias1.clone(),
                weight2: QTensor::quantize(weight2),
                bias2: bias2.clone(),
            },
        })
        .collect();
    Ok(QuantizedModel {
        spec: spec.clone(),
        layers,
        activation_ranges,
    })
}

/// Reference semantics for the deployed model: dequantize weights once and
/// run the float forward pass, recording the trace like the float path.
pub fn quantized_forward(
    qmodel: &QuantizedModel,
    batch: &Tensor,
    record_trace: bool,
) -> Result<(Tensor, ActivationTrace), DeployError> {
    let params = qmodel.dequantize()?;
    Ok(forward(&qmodel.spec, &params, batch, record_trace)?)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

fn layer_tag(layer: &LayerSpec) -> (u8, [u32; 5]) {
    match layer {
        LayerSpec::Dense { inputs, outputs } => (0, [*inputs as u32, *outputs as u32, 0, 0, 0]),
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => (
            1,
            [
                *in_channels as u32,
                *out_channels as u32,
                *kernel as u32,
                *stride as u32,
                *padding as u32,
            ],
        ),
        LayerSpec::DepthwiseConv {
            channels,
            kernel,
            stride,
            padding,
        } => (
            2,
            [
                *channels as u32,
                *kernel as u32,
                *stride as u32,
                *padding as u32,
                0,
            ],
        ),
        LayerSpec::PointwiseConv {
            in_channels,
            out_channels,
        } => (3, [*in_channels as u32, *out_channels as u32, 0, 0, 0]),
        LayerSpec::ResidualBlock { channels, kernel } => {
            (4, [*channels as u32, *kernel as u32, 0, 0, 0])
        }
        LayerSpec::Relu => (5, [0; 5]),
        LayerSpec::GlobalAvgPool => (6, [0; 5]),
        LayerSpec::Flatten => (7, [0; 5]),
    }
}

fn layer_from_tag(tag: u8, p: [u32; 5]) -> Result<LayerSpec, DeployError> {
    Ok(match tag {
        0 => LayerSpec::Dense {
            inputs: p[0] as usize,
            outputs: p[1] as usize,
        },
        1 => LayerSpec::Conv {
            in_channels: p[0] as usize,
            out_channels: p[1] as usize,
            kernel: p[2] as usize,
            stride: p[3] as usize,
            padding: p[4] as usize,
        },
        2 => LayerSpec::DepthwiseConv {
            channels: p[0] as usize,
            kernel: p[1] as usize,
            stride: p[2] as usize,
            padding: p[3] as usize,
        },
        3 => LayerSpec::PointwiseConv {
            in_channels: p[0] as usize,
            out_channels: p[1] as usize,
        },
        4 => LayerSpec::ResidualBlock {
            channels: p[0] as usize,
            kernel: p[1] as usize,
        },
        5 => LayerSpec::Relu,
        6 => LayerSpec::GlobalAvgPool,
        7 => LayerSpec::Flatten,
        t => return Err(DeployError::Malformed(format!("unknown layer tag {t}"))),
    })
}

enum TensorRecord<'a> {
    Float(&'a Tensor),
    Quant(&'a QTensor),
}

fn write_tensor(w: &mut Writer, layer: usize, slot: usize, rec: TensorRecord<'_>) {
    w.u16(layer as u16);
    w.u8(slot as u8);
    match rec {
        TensorRecord::Float(t) => {
            w.u8(0);
            w.f32(1.0);
            w.u8(0);
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f32(v);
            }
        }
        TensorRecord::Quant(q) => {
            w.u8(1);
            w.f32(q.scale);
            w.u8(q.zero_point);
            w.u8(q.shape.len() as u8);
            for &d in &q.shape {
                w.u32(d as u32);
            }
            w.bytes(&q.codes);
        }
    }
}

/// Serialize a model to the `.smod` byte format. Deterministic: the same
/// model always produces identical bytes.
pub fn export(spec: &ModelSpec, payload: &ModelPayload) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(SMOD_MAGIC);
    w.u16(SMOD_VERSION);
    w.u8(match payload {
        ModelPayload::Float(_) => 0,
        ModelPayload::Quantized(_) => 1,
    });
    let name = spec.name.as_bytes();
    w.u16(name.len() as u16);
    w.bytes(name);
    for &d in &spec.input_shape {
        w.u32(d as u32);
    }
    w.u32(spec.classes as u32);
    w.u16(spec.layers.len() as u16);
    for layer in &spec.layers {
        let (tag, params) = layer_tag(layer);
        w.u8(tag);
        for p in params {
            w.u32(p);
        }
    }
    match payload {
        ModelPayload::Float(params) => {
            w.u16(0); // no activation ranges
            let tensors: Vec<_> = params.tensors().collect();
            w.u32(tensors.len() as u32);
            for (layer, slot, t) in tensors {
                write_tensor(&mut w, layer, slot, TensorRecord::Float(t));
            }
        }
        ModelPayload::Quantized(qm) => {
            w.u16(qm.activation_ranges.len() as u16);
            for r in &qm.activation_ranges {
                w.u16(r.trace_index);
                w.f32(r.min);
                w.f32(r.max);
            }
            let mut records: Vec<(usize, usize, TensorRecord<'_>)> = Vec::new();
            for (li, layer) in qm.layers.iter().enumerate() {
                match layer {
                    QuantizedLayer::Empty => {}
                    QuantizedLayer::ConvLike { weight, bias } => {
                        records.push((li, 0, TensorRecord::Quant(weight)));
                        records.push((li, 1, TensorRecord::Float(bias)));
                    }
                    QuantizedLayer::Residual {
                        weight1,
                        bias1,
                        weight2,
                        bias2,
                    } => {
                        records.push((li, 0, TensorRecord::Quant(weight1)));
                        records.push((li, 1, TensorRecord::Float(bias1)));
                        records.push((li, 2, TensorRecord::Quant(weight2)));
                        records.push((li, 3, TensorRecord::Float(bias2)));
                    }
                }
            }
            w.u32(records.len() as u32);
            for (layer, slot, rec) in records {
                write_tensor(&mut w, layer, slot, rec);
            }
        }
    }
    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], DeployError> {
        if self.pos + n > self.buf.len() {
            return Err(DeployError::Truncated {
                field,
                offset: self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, field: &'static str) -> Result<u8, DeployError> {
        Ok(self.take(1, field)?[0])
    }
    fn u16(&mut self, field: &'static str) -> Result<u16, DeployError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }
    fn u32(&mut self, field: &'static str) -> Result<u32, DeployError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    fn f32(&mut self, field: &'static str) -> Result<f32, DeployError> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Parse an `.smod` byte stream. Inverse of [`export`]; every malformation
/// (bad magic, unknown version, truncation, bad scale) gets its own error.
pub fn import(bytes: &[u8]) -> Result<(ModelSpec, ModelPayload), DeployError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != SMOD_MAGIC {
        return Err(DeployError::BadMagic);
    }
    let version = r.u16("version")?;
    if version != SMOD_VERSION {
        return Err(DeployError::Version(version));
    }
    let kind = r.u8("kind")?;
    let name_len = r.u16("name length")? as usize;
    let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
        .map_err(|_| DeployError::Malformed("architecture name is not UTF-8".into()))?;
    let input_shape = [
        r.u32("input shape")? as usize,
        r.u32("input shape")? as usize,
        r.u32("input shape")? as usize,
    ];
    let classes = r.u32("classes")? as usize;
    let layer_count = r.u16("layer count")? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag = r.u8("layer tag")?;
        let mut p = [0u32; 5];
        for v in &mut p {
            *v = r.u32("layer params")?;
        }
        layers.push(layer_from_tag(tag, p)?);
    }
    let spec = ModelSpec {
        name,
        input_shape,
        classes,
        layers,
    };
    spec.validate()?;

    let range_count = r.u16("range count")? as usize;
    let mut ranges = Vec::with_capacity(range_count);
    for _ in 0..range_count {
        ranges.push(ActivationRange {
            trace_index: r.u16("range trace index")?,
            min: r.f32("range min")?,
            max: r.f32("range max")?,
        });
    }

    let tensor_count = r.u32("tensor count")? as usize;
    let mut raw = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let layer = r.u16("tensor layer")? as usize;
        let slot = r.u8("tensor slot")? as usize;
        let dtype = r.u8("tensor dtype")?;
        let scale = r.f32("tensor scale")?;
        let zero_point = r.u8("tensor zero point")?;
        let ndim = r.u8("tensor ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let rec = match dtype {
            0 => {
                let payload = r.take(4 * n, "f32 payload")?;
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                RawRecord::Float(Tensor::new(shape, data)?)
            }
            1 => {
                if !(scale > 0.0) || !scale.is_finite() {
                    return Err(DeployError::BadScale { layer, slot, scale });
                }
                let payload = r.take(n, "q8 payload")?;
                RawRecord::Quant(QTensor {
                    shape,
                    codes: payload.to_vec(),
                    scale,
                    zero_point,
                })
            }
            t => return Err(DeployError::Malformed(format!("unknown dtype tag {t}"))),
        };
        raw.push(RawTensor { layer, slot, rec });
    }
    if r.pos != bytes.len() {
        return Err(DeployError::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }

    match kind {
        0 => {
            let mut params: Vec<LayerParams> =
                spec.layers.iter().map(|_| LayerParams::Empty).collect();
            for t in raw {
                let RawRecord::Float(tensor) = t.rec else {
                    return Err(DeployError::Malformed(
                        "quantized tensor in float model".into(),
                    ));
                };
                place_float(&mut params, t.layer, t.slot, tensor)?;
            }
            let payload = Parameters { layers: params };
            check_params_match(&spec, &payload)?;
            Ok((spec, ModelPayload::Float(payload)))
        }
        1 => {
            let mut layers: Vec<QuantizedLayer> =
                spec.layers.iter().map(|_| QuantizedLayer::Empty).collect();
            for t in raw {
                place_quantized(&mut layers, t.layer, t.slot, t.rec)?;
            }
            Ok((
                spec.clone(),
                ModelPayload::Quantized(QuantizedModel {
                    spec,
                    layers,
                    activation_ranges: ranges,
                }),
            ))
        }
        k => Err(DeployError::Malformed(format!("unknown model kind {k}"))),
    }
}

struct RawTensor {
    layer: usize,
    slot: usize,
    rec: RawRecord,
}

enum RawRecord {
    Float(Tensor),
    Quant(QTensor),
}

fn place_float(
    params: &mut [LayerParams],
    layer: usize,
    slot: usize,
    tensor: Tensor,
) -> Result<(), DeployError> {
    let lp = params
        .get_mut(layer)
        .ok_or_else(|| DeployError::Malformed(format!("tensor for layer {layer} out of range")))?;
    match (slot, &mut *lp) {
        (0, LayerParams::Empty) => {
            *lp = LayerParams::ConvLike {
                weight: tensor,
                bias: Tensor::zeros(&[1]),
            };
        }
        (1, LayerParams::ConvLike { bias, .. }) => *bias = tensor,
        (2, LayerParams::ConvLike { weight, bias }) => {
            *lp = LayerParams::Residual {
                weight1: weight.clone(),
                bias1: bias.clone(),
                weight2: tensor,
                bias2: Tensor::zeros(&[1]),
            };
        }
        (3, LayerParams::Residual { bias2, .. }) => *bias2 = tensor,
        _ => {
            return Err(DeployError::Malformed(format!(
                "unexpected slot {slot} at layer {layer}"
            )))
        }
    }
    Ok(())
}

fn place_quantized(
    layers: &mut [QuantizedLayer],
    layer: usize,
    slot: usize,
    rec: RawRecord,
) -> Result<(), DeployError> {
    let lp = layers
        .get_mut(layer)
        .ok_or_else(|| DeployError::Malformed(format!("tensor for layer {layer} out of range")))?;
    let bad = |slot: usize| {
        Err(DeployError::Malformed(format!(
            "unexpected slot {slot} at layer {layer}"
        )))
    };
    match (slot, rec) {
        (0, RawRecord::Quant(q)) => {
            *lp = QuantizedLayer::ConvLike {
                weight: q,
                bias: Tensor::zeros(&[1]),
            };
            Ok(())
        }
        (1, RawRecord::Float(b)) => match &mut *lp {
            QuantizedLayer::ConvLike { bias, .. } => {
                *bias = b;
                Ok(())
            }
            _ => bad(1),
        },
        (2, RawRecord::Quant(q)) => match lp.clone() {
            QuantizedLayer::ConvLike { weight, bias } => {
                *lp = QuantizedLayer::Residual {
                    weight1: weight,
                    bias1: bias,
                    weight2: q,
                    bias2: Tensor::zeros(&[1]),
                };
                Ok(())
            }
            _ => bad(2),
        },
        (3, RawRecord::Float(b)) => match &mut *lp {
            QuantizedLayer::Residual { bias2, .. } => {
                *bias2 = b;
                Ok(())
            }
            _ => bad(3),
        },
        (s, _) => bad(s),
    }
}

fn check_params_match(spec: &ModelSpec, params: &Parameters) -> Result<(), DeployError> {
    for (i, (layer, lp)) in spec.layers.iter().zip(&params.layers).enumerate() {
        let ok = matches!(
            (layer, lp),
            (
                LayerSpec::Relu | LayerSpec::GlobalAvgPool | LayerSpec::Flatten,
                LayerParams::Empty
            ) | (
                LayerSpec::Dense { .. }
                    | LayerSpec::Conv { .. }
                    | LayerSpec::DepthwiseConv { .. }
                    | LayerSpec::PointwiseConv { .. },
                LayerParams::ConvLike { .. }
            ) | (LayerSpec::ResidualBlock { .. }, LayerParams::Residual { .. })
        );
        if !ok {
            return Err(DeployError::Malformed(format!(
                "layer {i} parameters do not match its kind"
            )));
        }
    }
    Ok(())
}

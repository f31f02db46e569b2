//! Inference executors for the benchmark harness.
//!
//! `Dense` always performs the full multiply-accumulate work (the control
//! arm). `ZeroSkip` is input-driven: each exactly-zero input element of a
//! conv/dense layer skips its entire fan-out with one compare, so wall-clock
//! time genuinely responds to activation density, the way zero-gating
//! hardware behaves. The zero-skip path skips on any exact-zero operand,
//! including raw pixels; the energy model is the conservative side and
//! never counts stem MACs as skippable.
//!
//! Both executors produce the same logits up to float summation order (the
//! skip path accumulates input-major).

use crate::model::{
    ActivationTrace, LayerParams, LayerSpec, ModelError, ModelSpec, Parameters, TraceEntry,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Dense,
    ZeroSkip,
}

impl ExecMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExecMode::Dense => "dense",
            ExecMode::ZeroSkip => "zero_skip",
        }
    }

    pub fn parse(s: &str) -> Option<ExecMode> {
        match s {
            "dense" => Some(ExecMode::Dense),
            "zero_skip" => Some(ExecMode::ZeroSkip),
            _ => None,
        }
    }
}

/// Run a forward pass under the chosen executor.
pub fn run_model(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Tensor,
    mode: ExecMode,
    record_trace: bool,
) -> Result<(Tensor, ActivationTrace), ModelError> {
    match mode {
        ExecMode::Dense => crate::model::forward(spec, params, batch, record_trace),
        ExecMode::ZeroSkip => forward_zero_skip(spec, params, batch, record_trace),
    }
}

/// Scatter-style convolution that skips the whole fan-out of zero inputs.
/// `cout_stride` distinguishes full conv (c_out kernels per input channel)
/// from depthwise (one kernel per channel).
fn conv_zero_skip(
    input: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f32],
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    depthwise: bool,
    bias: &[f32],
    out: &mut Vec<f32>,
) -> (usize, usize) {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let out_c = if depthwise { c_in } else { c_out };
    out.clear();
    out.reserve(out_c * oh * ow);
    for ch in 0..out_c {
        for _ in 0..oh * ow {
            out.push(bias[ch]);
        }
    }
    for ci in 0..c_in {
        for y in 0..h {
            // (ky, oy) pairs with oy*stride - padding + ky == y.
            let mut pairs_y = [(0usize, 0usize); 16];
            let mut npy = 0;
            for ky in 0..kh {
                let t = y + padding;
                if t >= ky && (t - ky) % stride == 0 {
                    let oy = (t - ky) / stride;
                    if oy < oh {
                        pairs_y[npy] = (ky, oy);
                        npy += 1;
                    }
                }
            }
            for x in 0..w {
                let a = input[(ci * h + y) * w + x];
                if a == 0.0 {
                    continue;
                }
                let mut pairs_x = [(0usize, 0usize); 16];
                let mut npx = 0;
                for kx in 0..kw {
                    let t = x + padding;
                    if t >= kx && (t - kx) % stride == 0 {
                        let ox = (t - kx) / stride;
                        if ox < ow {
                            pairs_x[npx] = (kx, ox);
                            npx += 1;
                        }
                    }
                }
                if depthwise {
                    for &(ky, oy) in &pairs_y[..npy] {
                        for &(kx, ox) in &pairs_x[..npx] {
                            out[(ci * oh + oy) * ow + ox] +=
                                a * weights[(ci * kh + ky) * kw + kx];
                        }
                    }
                } else {
                    for co in 0..c_out {
                        let kbase = (co * c_in + ci) * kh;
                        let obase = co * oh;
                        for &(ky, oy) in &pairs_y[..npy] {
                            for &(kx, ox) in &pairs_x[..npx] {
                                out[(obase + oy) * ow + ox] +=
                                    a * weights[(kbase + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (oh, ow)
}

fn dense_zero_skip(input: &[f32], weights: &[f32], bias: &[f32], outputs: usize, out: &mut Vec<f32>) {
    out.clear();
    out.extend_from_slice(bias);
    for (i, &a) in input.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let wrow = &weights[i * outputs..(i + 1) * outputs];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += a * wv;
        }
    }
}

fn forward_zero_skip(
    spec: &ModelSpec,
    params: &Parameters,
    batch: &Tensor,
    record_trace: bool,
) -> Result<(Tensor, ActivationTrace), ModelError> {
    let n = match batch.shape() {
        [n, c, h, w] if [*c, *h, *w] == spec.input_shape => *n,
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
    let shapes = spec.layer_shapes()?;
    let trace_points = spec.trace_points()?;
    let mut trace_data: Vec<Vec<f32>> = if record_trace {
        trace_points
            .iter()
            .map(|p| Vec::with_capacity(p.elements * n))
            .collect()
    } else {
        Vec::new()
    };

    let per_in: usize = spec.input_shape.iter().product();
    let classes = spec.classes;
    let mut logits = vec![0.0f32; n * classes];

    // Reusable scratch buffers; per-sample execution mirrors the on-device
    // one-inference-at-a-time setting.
    let mut cur: Vec<f32> = Vec::new();
    let mut next: Vec<f32> = Vec::new();
    let mut skip_buf: Vec<f32> = Vec::new();

    for s in 0..n {
        cur.clear();
        cur.extend_from_slice(&batch.data()[s * per_in..(s + 1) * per_in]);
        let mut tp = 0usize;

        for (li, layer) in spec.layers.iter().enumerate() {
            let dims = |i: usize| match &shapes[i] {
                crate::model::ValueShape::Chw(c, h, w) => (*c, *h, *w),
                crate::model::ValueShape::Flat(d) => (*d, 1, 1),
            };
            match (layer, &params.layers[li]) {
                (
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    LayerParams::ConvLike { weight, bias },
                ) => {
                    let (_, h, w) = dims(li);
                    conv_zero_skip(
                        &cur,
                        *in_channels,
                        h,
                        w,
                        weight.data(),
                        *out_channels,
                        *kernel,
                        *kernel,
                        *stride,
                        *padding,
                        false,
                        bias.data(),
                        &mut next,
                    );
                    std::mem::swap(&mut cur, &mut next);
                }
                (
                    LayerSpec::PointwiseConv {
                        in_channels,
                        out_channels,
                    },
                    LayerParams::ConvLike { weight, bias },
                ) => {
                    let (_, h, w) = dims(li);
                    conv_zero_skip(
                        &cur,
                        *in_channels,
                        h,
                        w,
                        weight.data(),
                        *out_channels,
                        1,
                        1,
                        1,
                        0,
                        false,
                        bias.data(),
                        &mut next,
                    );
                    std::mem::swap(&mut cur, &mut next);
                }
                (
                    LayerSpec::DepthwiseConv {
                        channels,
                        kernel,
                        stride,
                        padding,
                    },
                    LayerParams::ConvLike { weight, bias },
                ) => {
                    let (_, h, w) = dims(li);
                    conv_zero_skip(
                        &cur,
                        *channels,
                        h,
                        w,
                        weight.data(),
                        *channels,
                        *kernel,
                        *kernel,
                        *stride,
                        *padding,
                        true,
                        bias.data(),
                        &mut next,
                    );
                    std::mem::swap(&mut cur, &mut next);
                }
                (
                    LayerSpec::ResidualBlock { channels, kernel },
                    LayerParams::Residual {
                        weight1,
                        bias1,
                        weight2,
                        bias2,
                    },
                ) => {
                    let (_, h, w) = dims(li);
                    let pad = kernel / 2;
                    conv_zero_skip(
                        &cur,
                        *channels,
                        h,
                        w,
                        weight1.data(),
                        *channels,
                        *kernel,
                        *kernel,
                        1,
                        pad,
                        false,
                        bias1.data(),
                        &mut next,
                    );
                    for v in next.iter_mut() {
                        *v = v.max(0.0);
                    }
                    if record_trace {
                        trace_data[tp].extend_from_slice(&next);
                    }
                    tp += 1;
                    conv_zero_skip(
                        &next,
                        *channels,
                        h,
                        w,
                        weight2.data(),
                        *channels,
                        *kernel,
                        *kernel,
                        1,
                        pad,
                        false,
                        bias2.data(),
                        &mut skip_buf,
                    );
                    for (o, &x) in skip_buf.iter_mut().zip(cur.iter()) {
                        *o = (*o + x).max(0.0);
                    }
                    if record_trace {
                        trace_data[tp].extend_from_slice(&skip_buf);
                    }
                    tp += 1;
                    std::mem::swap(&mut cur, &mut skip_buf);
                }
                (LayerSpec::Relu, _) => {
                    for v in cur.iter_mut() {
                        *v = v.max(0.0);
                    }
                    if record_trace {
                        trace_data[tp].extend_from_slice(&cur);
                    }
                    tp += 1;
                }
                (LayerSpec::GlobalAvgPool, _) => {
                    let (c, h, w) = dims(li);
                    let per = h * w;
                    next.clear();
                    for ch in 0..c {
                        let sum: f32 = cur[ch * per..(ch + 1) * per].iter().sum();
                        next.push(sum / per as f32);
                    }
                    std::mem::swap(&mut cur, &mut next);
                }
                (LayerSpec::Flatten, _) => {}
                (LayerSpec::Dense { inputs, outputs }, LayerParams::ConvLike { weight, bias }) => {
                    let _ = inputs;
                    dense_zero_skip(&cur, weight.data(), bias.data(), *outputs, &mut next);
                    std::mem::swap(&mut cur, &mut next);
                }
                _ => return Err(ModelError::ParamMismatch { layer: li }),
            }
        }
        logits[s * classes..(s + 1) * classes].copy_from_slice(&cur);
    }

    if record_trace {
        for (p, data) in trace_points.iter().zip(trace_data) {
            let total = data.len();
            let mut shape = vec![n];
            shape.push(total / n);
            let t = Tensor::new(shape, data)?;
            trace.entries.push(TraceEntry {
                layer: p.layer,
                sub: p.sub,
                elements: total,
                nonzero: t.count_nonzero(),
                activations: t,
            });
        }
    }

    let logits = Tensor::new(vec![n, classes], logits)?;
    logits.ensure_finite("zero_skip forward")?;
    Ok((logits, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::seeded_tensor_in;
    use crate::model::{build_m1_micronet, build_m2_miniresnet, forward, init_params};

    #[test]
    fn zero_skip_matches_dense_logits() {
        for spec in [build_m1_micronet([3, 6, 6], 3), build_m2_miniresnet([3, 6, 6], 3)] {
            for seed in 0..5 {
                let params = init_params(&spec, seed);
                let batch = seeded_tensor_in(&[2, 3, 6, 6], 40 + seed, 0.0, 1.0);
                let (dense, _) = forward(&spec, &params, &batch, false).unwrap();
                let (zs, _) = run_model(&spec, &params, &batch, ExecMode::ZeroSkip, false).unwrap();
                for (a, b) in dense.data().iter().zip(zs.data()) {
                    assert!(
                        (a - b).abs() <= 1e-4 * a.abs().max(1.0),
                        "{}: {a} vs {b}",
                        spec.name
                    );
                }
            }
        }
    }

    #[test]
    fn zero_skip_trace_matches_dense_trace_counts() {
        let spec = build_m2_miniresnet([3, 6, 6], 3);
        let params = init_params(&spec, 9);
        let batch = seeded_tensor_in(&[3, 3, 6, 6], 90, 0.0, 1.0);
        let (_, dt) = forward(&spec, &params, &batch, true).unwrap();
        let (_, zt) = run_model(&spec, &params, &batch, ExecMode::ZeroSkip, true).unwrap();
        assert_eq!(dt.entries.len(), zt.entries.len());
        for (a, b) in dt.entries.iter().zip(&zt.entries) {
            assert_eq!((a.layer, a.sub), (b.layer, b.sub));
            assert_eq!(a.elements, b.elements);
            // Densities agree; exact zero sets can differ only at float
            // summation-order boundary cases.
            let diff = (a.nonzero as i64 - b.nonzero as i64).unsigned_abs() as usize;
            assert!(diff <= a.elements / 100 + 1, "{diff} of {}", a.elements);
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let spec = build_m1_micronet([3, 6, 6], 3);
        let params = init_params(&spec, 3);
        let batch = seeded_tensor_in(&[2, 3, 6, 6], 30, 0.0, 1.0);
        let (a, _) = run_model(&spec, &params, &batch, ExecMode::ZeroSkip, false).unwrap();
        let (b, _) = run_model(&spec, &params, &batch, ExecMode::ZeroSkip, false).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

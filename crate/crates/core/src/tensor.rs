//! Deterministic dense-tensor math.
//!
//! Every operation uses a fixed left-to-right summation order and no internal
//! parallelism, so identical inputs produce bit-identical outputs across runs
//! and thread counts. Public operations reject non-finite results instead of
//! letting NaN/Inf propagate silently.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(
        "conv output extent not integral: input {input}, kernel {kernel}, \
         stride {stride}, padding {padding}"
    )]
    BadConvGeometry {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("empty shape is not a valid tensor shape")]
    EmptyShape,
}

/// Dense n-dimensional array of `f32` in row-major order.
///
/// Invariants held by construction: `shape` extents are positive,
/// `data.len() == product(shape)`, and all elements are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// A gradient has the same structure as the tensor it differentiates.
pub type Gradient = Tensor;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyShape);
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of exactly-zero elements.
    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&x| x == 0.0).count()
    }

    /// Number of nonzero elements (exact-zero test).
    pub fn count_nonzero(&self) -> usize {
        self.len() - self.count_zeros()
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Elementwise a + b.
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite("add")?;
        Ok(out)
    }

    /// Elementwise a - scale * b, used by SGD updates.
    pub fn sub_scaled(&self, other: &Tensor, scale: f32) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "sub_scaled",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - scale * b)
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite("sub_scaled")?;
        Ok(out)
    }
}

fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    if stride == 0 {
        return Err(TensorError::ZeroStride);
    }
    let padded = input + 2 * padding;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return Err(TensorError::BadConvGeometry {
            input,
            kernel,
            stride,
            padding,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Standard matrix product `a[m,k] x b[k,n]` with a fixed left-to-right
/// summation over k.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, ka) = match a.shape() {
        [m, k] => (*m, *k),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("lhs must be 2-d, got {s:?}"),
            })
        }
    };
    let (kb, n) = match b.shape() {
        [k, n] => (*k, *n),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("rhs must be 2-d, got {s:?}"),
            })
        }
    };
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dims {ka} vs {kb}"),
        });
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        for j in 0..n {
            let mut acc = 0.0f32;
            for (p, &av) in arow.iter().enumerate() {
                acc += av * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    let t = Tensor {
        shape: vec![m, n],
        data: out,
    };
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// 2-d cross-correlation (no kernel flip) with zero padding.
///
/// `input` is `[c_in, h, w]`, `kernels` is `[c_out, c_in, kh, kw]`; the
/// output is `[c_out, h', w']`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let (c_in, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input must be [c,h,w], got {s:?}"),
            })
        }
    };
    let (c_out, kc, kh, kw) = match kernels.shape() {
        [o, c, kh, kw] => (*o, *c, *kh, *kw),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernels must be [c_out,c_in,kh,kw], got {s:?}"),
            })
        }
    };
    if kc != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input channels {c_in} vs kernel channels {kc}"),
        });
    }
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;
    let mut out = vec![0.0f32; c_out * oh * ow];
    if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        // Pointwise fast path: per output element the channel sum still runs
        // left to right, so results are bit-identical to the generic loop.
        let spatial = h * w;
        for co in 0..c_out {
            let orow = &mut out[co * spatial..(co + 1) * spatial];
            for ci in 0..c_in {
                let k = kernels.data[co * c_in + ci];
                let irow = &input.data[ci * spatial..(ci + 1) * spatial];
                for (o, &iv) in orow.iter_mut().zip(irow) {
                    *o += k * iv;
                }
            }
        }
    } else if stride == 1 {
        // Shifted-row axpy: for each (ci, ky, kx) stream one kernel weight
        // across contiguous rows. Every output element still accumulates its
        // terms in ascending (ci, ky, kx) order, so results are bit-identical
        // to the direct 6-loop form.
        let p = padding as isize;
        for co in 0..c_out {
            let oplane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..c_in {
                for ky in 0..kh {
                    // y = oy + ky - p must lie in [0, h)
                    let oy_lo = (p - ky as isize).max(0) as usize;
                    let oy_hi = ((h as isize + p - ky as isize).min(oh as isize)).max(0) as usize;
                    for kx in 0..kw {
                        let k = kernels.data[((co * c_in + ci) * kh + ky) * kw + kx];
                        let ox_lo = (p - kx as isize).max(0) as usize;
                        let ox_hi =
                            ((w as isize + p - kx as isize).min(ow as isize)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let y = (oy as isize + ky as isize - p) as usize;
                            let x0 = (ox_lo as isize + kx as isize - p) as usize;
                            let irow =
                                &input.data[(ci * h + y) * w + x0..][..ox_hi - ox_lo];
                            let orow = &mut oplane[oy * ow + ox_lo..oy * ow + ox_hi];
                            for (o, &iv) in orow.iter_mut().zip(irow) {
                                *o += k * iv;
                            }
                        }
                    }
                }
            }
        }
    } else {
        for co in 0..c_out {
            for oy in 0..oh {
                let ybase = (oy * stride) as isize - padding as isize;
                let ky_lo = (-ybase).max(0) as usize;
                let ky_hi = ((h as isize - ybase).min(kh as isize)).max(0) as usize;
                for ox in 0..ow {
                    let xbase = (ox * stride) as isize - padding as isize;
                    let kx_lo = (-xbase).max(0) as usize;
                    let kx_hi = ((w as isize - xbase).min(kw as isize)).max(0) as usize;
                    let mut acc = 0.0f32;
                    for ci in 0..c_in {
                        for ky in ky_lo..ky_hi {
                            let y = (ybase + ky as isize) as usize;
                            let irow = &input.data[(ci * h + y) * w..(ci * h + y + 1) * w];
                            let krow = &kernels.data[((co * c_in + ci) * kh + ky) * kw..]
                                [..kw];
                            for kx in kx_lo..kx_hi {
                                acc += irow[(xbase + kx as isize) as usize] * krow[kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    let t = Tensor {
        shape: vec![c_out, oh, ow],
        data: out,
    };
    t.ensure_finite("conv2d")?;
    Ok(t)
}

/// Channel-wise convolution: each channel of `[c, h, w]` is convolved with
/// its own `[kh, kw]` kernel from `kernels = [c, kh, kw]`.
pub fn depthwise_conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let (c, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv2d",
                detail: format!("input must be [c,h,w], got {s:?}"),
            })
        }
    };
    let (kc, kh, kw) = match kernels.shape() {
        [kc, kh, kw] => (*kc, *kh, *kw),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv2d",
                detail: format!("kernels must be [c,kh,kw], got {s:?}"),
            })
        }
    };
    if kc != c {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_conv2d",
            detail: format!("input channels {c} vs kernel channels {kc}"),
        });
    }
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let ybase = (oy * stride) as isize - padding as isize;
            let ky_lo = (-ybase).max(0) as usize;
            let ky_hi = ((h as isize - ybase).min(kh as isize)).max(0) as usize;
            for ox in 0..ow {
                let xbase = (ox * stride) as isize - padding as isize;
                let kx_lo = (-xbase).max(0) as usize;
                let kx_hi = ((w as isize - xbase).min(kw as isize)).max(0) as usize;
                let mut acc = 0.0f32;
                for ky in ky_lo..ky_hi {
                    let y = (ybase + ky as isize) as usize;
                    let irow = &input.data[(ch * h + y) * w..(ch * h + y + 1) * w];
                    let krow = &kernels.data[(ch * kh + ky) * kw..][..kw];
                    for kx in kx_lo..kx_hi {
                        acc += irow[(xbase + kx as isize) as usize] * krow[kx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc;
            }
        }
    }
    let t = Tensor {
        shape: vec![c, oh, ow],
        data: out,
    };
    t.ensure_finite("depthwise_conv2d")?;
    Ok(t)
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Mean cross-entropy over the batch with a numerically stabilized softmax,
/// plus its gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, Gradient), TensorError> {
    let (batch, classes) = match logits.shape() {
        [b, c] => (*b, *c),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits must be [batch, classes], got {s:?}"),
            })
        }
    };
    if labels.len() != batch {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!("{batch} logit rows vs {} labels", labels.len()),
        });
    }
    let mut grad = vec![0.0f32; batch * classes];
    let mut loss = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let row = &logits.data[i * classes..(i + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0f64;
        for &v in row {
            denom += f64::from(v - max).exp();
        }
        loss -= f64::from(row[label] - max) - denom.ln();
        for (j, &v) in row.iter().enumerate() {
            let p = (f64::from(v - max).exp() / denom) as f32;
            let y = if j == label { 1.0 } else { 0.0 };
            grad[i * classes + j] = (p - y) / batch as f32;
        }
    }
    loss /= batch as f64;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    let g = Tensor {
        shape: vec![batch, classes],
        data: grad,
    };
    g.ensure_finite("softmax_cross_entropy")?;
    Ok((loss, g))
}

/// Gradients of `matmul` w.r.t. both operands: `da = up x b^T`, `db = a^T x up`.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    upstream: &Tensor,
) -> Result<(Gradient, Gradient), TensorError> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    if upstream.shape() != [m, n] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_backward",
            detail: format!("upstream {:?} vs [{m}, {n}]", upstream.shape()),
        });
    }
    let mut da = vec![0.0f32; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0f32;
            for j in 0..n {
                acc += upstream.data[i * n + j] * b.data[p * n + j];
            }
            da[i * k + p] = acc;
        }
    }
    let mut db = vec![0.0f32; k * n];
    for p in 0..k {
        for j in 0..n {
            let mut acc = 0.0f32;
            for i in 0..m {
                acc += a.data[i * k + p] * upstream.data[i * n + j];
            }
            db[p * n + j] = acc;
        }
    }
    let da = Tensor {
        shape: vec![m, k],
        data: da,
    };
    let db = Tensor {
        shape: vec![k, n],
        data: db,
    };
    da.ensure_finite("matmul_backward")?;
    db.ensure_finite("matmul_backward")?;
    Ok((da, db))
}

/// Gradients of `conv2d` w.r.t. input and kernels.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    upstream: &Tensor,
) -> Result<(Gradient, Gradient), TensorError> {
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, kh, kw) = (kernels.shape[0], kernels.shape[2], kernels.shape[3]);
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;
    if upstream.shape() != [c_out, oh, ow] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            detail: format!("upstream {:?} vs [{c_out}, {oh}, {ow}]", upstream.shape()),
        });
    }
    let mut dinput = vec![0.0f32; c_in * h * w];
    let mut dkernels = vec![0.0f32; c_out * c_in * kh * kw];
    if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        // Pointwise fast path: dinput is an axpy over upstream rows and
        // dkernels a row dot product; per-element accumulation still runs
        // in fixed (ascending co / position) order.
        let spatial = h * w;
        for co in 0..c_out {
            let urow = &upstream.data[co * spatial..(co + 1) * spatial];
            for ci in 0..c_in {
                let k = kernels.data[co * c_in + ci];
                let dirow = &mut dinput[ci * spatial..(ci + 1) * spatial];
                for (d, &u) in dirow.iter_mut().zip(urow) {
                    *d += u * k;
                }
                let irow = &input.data[ci * spatial..(ci + 1) * spatial];
                let mut acc = 0.0f32;
                for (&u, &x) in urow.iter().zip(irow) {
                    acc += u * x;
                }
                dkernels[co * c_in + ci] = acc;
            }
        }
    } else if stride == 1 {
        // Same shifted-row streaming as the forward pass: one kernel weight
        // at a time over contiguous input/upstream rows.
        let p = padding as isize;
        for co in 0..c_out {
            let uplane = &upstream.data[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..c_in {
                for ky in 0..kh {
                    let oy_lo = (p - ky as isize).max(0) as usize;
                    let oy_hi = ((h as isize + p - ky as isize).min(oh as isize)).max(0) as usize;
                    for kx in 0..kw {
                        let k_idx = ((co * c_in + ci) * kh + ky) * kw + kx;
                        let k = kernels.data[k_idx];
                        let ox_lo = (p - kx as isize).max(0) as usize;
                        let ox_hi =
                            ((w as isize + p - kx as isize).min(ow as isize)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        let mut acc_dk = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let y = (oy as isize + ky as isize - p) as usize;
                            let x0 = (ox_lo as isize + kx as isize - p) as usize;
                            let urow = &uplane[oy * ow + ox_lo..oy * ow + ox_hi];
                            let irow = &input.data[(ci * h + y) * w + x0..][..len];
                            let dirow = &mut dinput[(ci * h + y) * w + x0..][..len];
                            for i in 0..len {
                                dirow[i] += urow[i] * k;
                                acc_dk += urow[i] * irow[i];
                            }
                        }
                        dkernels[k_idx] = acc_dk;
                    }
                }
            }
        }
    } else {
        for co in 0..c_out {
            for oy in 0..oh {
                let ybase = (oy * stride) as isize - padding as isize;
                let ky_lo = (-ybase).max(0) as usize;
                let ky_hi = ((h as isize - ybase).min(kh as isize)).max(0) as usize;
                for ox in 0..ow {
                    let up = upstream.data[(co * oh + oy) * ow + ox];
                    let xbase = (ox * stride) as isize - padding as isize;
                    let kx_lo = (-xbase).max(0) as usize;
                    let kx_hi = ((w as isize - xbase).min(kw as isize)).max(0) as usize;
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    for ci in 0..c_in {
                        for ky in ky_lo..ky_hi {
                            let y = (ybase + ky as isize) as usize;
                            let row = ((ci * h + y) * w) as isize + xbase;
                            let krow = ((co * c_in + ci) * kh + ky) * kw;
                            let di = &mut dinput
                                [(row + kx_lo as isize) as usize..(row + kx_hi as isize) as usize];
                            let iv = &input.data
                                [(row + kx_lo as isize) as usize..(row + kx_hi as isize) as usize];
                            let dk = &mut dkernels[krow + kx_lo..krow + kx_hi];
                            let kv = &kernels.data[krow + kx_lo..krow + kx_hi];
                            for i in 0..kx_hi - kx_lo {
                                di[i] += up * kv[i];
                                dk[i] += up * iv[i];
                            }
                        }
                    }
                }
            }
        }
    }
    let di = Tensor {
        shape: input.shape.clone(),
        data: dinput,
    };
    let dk = Tensor {
        shape: kernels.shape.clone(),
        data: dkernels,
    };
    di.ensure_finite("conv2d_backward")?;
    dk.ensure_finite("conv2d_backward")?;
    Ok((di, dk))
}

/// Gradients of `depthwise_conv2d` w.r.t. input and kernels.
pub fn depthwise_conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    upstream: &Tensor,
) -> Result<(Gradient, Gradient), TensorError> {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (kh, kw) = (kernels.shape[1], kernels.shape[2]);
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;
    if upstream.shape() != [c, oh, ow] {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise_conv2d_backward",
            detail: format!("upstream {:?} vs [{c}, {oh}, {ow}]", upstream.shape()),
        });
    }
    let mut dinput = vec![0.0f32; c * h * w];
    let mut dkernels = vec![0.0f32; c * kh * kw];
    for ch in 0..c {
        for oy in 0..oh {
            let ybase = (oy * stride) as isize - padding as isize;
            let ky_lo = (-ybase).max(0) as usize;
            let ky_hi = ((h as isize - ybase).min(kh as isize)).max(0) as usize;
            for ox in 0..ow {
                let up = upstream.data[(ch * oh + oy) * ow + ox];
                let xbase = (ox * stride) as isize - padding as isize;
                let kx_lo = (-xbase).max(0) as usize;
                let kx_hi = ((w as isize - xbase).min(kw as isize)).max(0) as usize;
                if kx_lo >= kx_hi {
                    continue;
                }
                for ky in ky_lo..ky_hi {
                    let y = (ybase + ky as isize) as usize;
                    let row = ((ch * h + y) * w) as isize + xbase;
                    let krow = (ch * kh + ky) * kw;
                    let di = &mut dinput
                        [(row + kx_lo as isize) as usize..(row + kx_hi as isize) as usize];
                    let iv = &input.data
                        [(row + kx_lo as isize) as usize..(row + kx_hi as isize) as usize];
                    let dk = &mut dkernels[krow + kx_lo..krow + kx_hi];
                    let kv = &kernels.data[krow + kx_lo..krow + kx_hi];
                    for i in 0..kx_hi - kx_lo {
                        di[i] += up * kv[i];
                        dk[i] += up * iv[i];
                    }
                }
            }
        }
    }
    let di = Tensor {
        shape: input.shape.clone(),
        data: dinput,
    };
    let dk = Tensor {
        shape: kernels.shape.clone(),
        data: dkernels,
    };
    di.ensure_finite("depthwise_conv2d_backward")?;
    dk.ensure_finite("depthwise_conv2d_backward")?;
    Ok((di, dk))
}

/// Passes the upstream gradient through only where the pre-activation input
/// was strictly positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Gradient, TensorError> {
    if input.shape != upstream.shape {
        return Err(TensorError::ShapeMismatch {
            op: "relu_backward",
            detail: format!("{:?} vs {:?}", input.shape, upstream.shape),
        });
    }
    Ok(Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Both summands of an addition receive the upstream gradient unchanged.
pub fn add_backward(upstream: &Tensor) -> (Gradient, Gradient) {
    (upstream.clone(), upstream.clone())
}

/// Central-difference gradient oracle.
///
/// Perturbs one element at a time and divides by the actually-represented
/// step `(x+h) - (x-h)`, which removes the rounding error of the nominal `h`
/// in float32. `f` receives the perturbed tensor and returns a scalar; by
/// convention it evaluates in f64 wherever it can.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Gradient
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data[i];
        let xp = orig + h;
        let xm = orig - h;
        probe.data[i] = xp;
        let fp = f(&probe);
        probe.data[i] = xm;
        let fm = f(&probe);
        probe.data[i] = orig;
        grad[i] = ((fp - fm) / (f64::from(xp) - f64::from(xm))) as f32;
    }
    Tensor {
        shape: x.shape.clone(),
        data: grad,
    }
}

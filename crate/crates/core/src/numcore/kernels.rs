//! Value-level kernels shared by the tape and by gradient-free code paths
//! (attention-mask construction, matching costs, evaluation).

use super::Tensor;
use crate::error::{Error, Result};

/// Additive attention-mask value for hidden positions.
pub const MASKED: f64 = f64::NEG_INFINITY;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub const BCE_CLAMP_EPS: f64 = 1e-7;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("transpose", a.shape(), &[]));
    }
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax over each last-dimension slice. `MASKED` entries map to exactly 0.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    let mut out = vec![0.0; x.len()];
    for (r, (row, orow)) in x.data().chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            if v == f64::INFINITY || v.is_nan() {
                return Err(Error::NonFinite(format!("softmax input {v} in row {r}")));
            }
            if v != MASKED && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = if v == MASKED { 0.0 } else { (v - max).exp() };
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// log(sum(exp(row))) computed with max subtraction.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Elementwise clamped binary cross-entropy, mean over elements.
pub fn binary_cross_entropy(p: &[f64], t: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(p.len(), t.len());
    let sum: f64 = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    sum / p.len() as f64
}

/// `BCE(sigmoid(x), t)` evaluated in logit space, mean over elements.
pub fn bce_with_logits(x: &[f64], t: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), t.len());
    let sum: f64 = x.iter().zip(t).map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()).sum();
    sum / x.len() as f64
}

/// Per-axis bilinear sample taps with the half-pixel-center convention.
#[derive(Clone, Debug)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
}

fn axis_taps(src: usize, dst: usize) -> AxisTaps {
    let scale = src as f64 / dst as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        w: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.w.push(s - lo as f64);
    }
    taps
}

/// Precomputed bilinear resize between two grid extents.
#[derive(Clone, Debug)]
pub struct ResizePlan {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    rows: AxisTaps,
    cols: AxisTaps,
}

impl ResizePlan {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        ResizePlan {
            src,
            dst,
            rows: axis_taps(src.0, dst.0),
            cols: axis_taps(src.1, dst.1),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    /// Calls `f(dst_index, src_index, weight)` for every contributing tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, f64)) {
        let (_, sw) = self.src;
        let (dh, dw) = self.dst;
        for oy in 0..dh {
            let (y0, y1, wy) = (self.rows.lo[oy], self.rows.hi[oy], self.rows.w[oy]);
            for ox in 0..dw {
                let (x0, x1, wx) = (self.cols.lo[ox], self.cols.hi[ox], self.cols.w[ox]);
                let o = oy * dw + ox;
                f(o, y0 * sw + x0, (1.0 - wy) * (1.0 - wx));
                f(o, y0 * sw + x1, (1.0 - wy) * wx);
                f(o, y1 * sw + x0, wy * (1.0 - wx));
                f(o, y1 * sw + x1, wy * wx);
            }
        }
    }

    /// Resizes an `h×w×c` buffer.
    pub fn apply(&self, src: &[f64], channels: usize) -> Vec<f64> {
        if self.is_identity() {
            return src.to_vec();
        }
        // Nested lerps reproduce constant inputs exactly.
        let (_, sw) = self.src;
        let (dh, dw) = self.dst;
        let mut out = Vec::with_capacity(dh * dw * channels);
        for oy in 0..dh {
            let (y0, y1, wy) = (self.rows.lo[oy], self.rows.hi[oy], self.rows.w[oy]);
            for ox in 0..dw {
                let (x0, x1, wx) = (self.cols.lo[ox], self.cols.hi[ox], self.cols.w[ox]);
                for c in 0..channels {
                    let at = |y: usize, x: usize| src[(y * sw + x) * channels + c];
                    let top = at(y0, x0) + wx * (at(y0, x1) - at(y0, x0));
                    let bottom = at(y1, x0) + wx * (at(y1, x1) - at(y1, x0));
                    out.push(top + wy * (bottom - top));
                }
            }
        }
        out
    }

    /// Adjoint of `apply`: scatters `grad` (dst-shaped) back onto the source grid.
    pub fn apply_transpose(&self, grad: &[f64], channels: usize) -> Vec<f64> {
        if self.is_identity() {
            return grad.to_vec();
        }
        let mut out = vec![0.0; self.src.0 * self.src.1 * channels];
        self.for_each_tap(|o, s, w| {
            if w != 0.0 {
                let (orow, srow) = (o * channels, s * channels);
                for c in 0..channels {
                    out[srow + c] += w * grad[orow + c];
                }
            }
        });
        out
    }
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.rank() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", x.shape(), &[out_h, out_w]));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plan = ResizePlan::new((h, w), (out_h, out_w));
    Tensor::new(vec![out_h, out_w, c], plan.apply(x.data(), c))
}

/// Patch extraction for `k×k` convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Im2ColPlan {
    pub src: (usize, usize, usize),
    pub out: (usize, usize),
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Im2ColPlan {
    pub fn new(src: (usize, usize, usize), kernel: usize, stride: usize, pad: usize) -> Self {
        let oh = (src.0 + 2 * pad - kernel) / stride + 1;
        let ow = (src.1 + 2 * pad - kernel) / stride + 1;
        Im2ColPlan {
            src,
            out: (oh, ow),
            kernel,
            stride,
            pad,
        }
    }

    pub fn cols(&self) -> usize {
        self.kernel * self.kernel * self.src.2
    }

    /// Calls `f(col_offset, src_offset)` for every in-bounds patch element;
    /// each offset addresses the first channel.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (h, w, c) = self.src;
        let (oh, ow) = self.out;
        let k = self.kernel;
        let ncols = self.cols();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * ncols;
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let col = row + (ky * k + kx) * c;
                        f(col, (iy as usize * w + ix as usize) * c);
                    }
                }
            }
        }
    }

    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        let c = self.src.2;
        let mut out = vec![0.0; self.out.0 * self.out.1 * self.cols()];
        self.for_each(|col, s| out[col..col + c].copy_from_slice(&src[s..s + c]));
        out
    }

    pub fn apply_transpose(&self, grad: &[f64]) -> Vec<f64> {
        let c = self.src.2;
        let mut out = vec![0.0; self.src.0 * self.src.1 * c];
        self.for_each(|col, s| {
            for i in 0..c {
                out[s + i] += grad[col + i];
            }
        });
        out
    }
}

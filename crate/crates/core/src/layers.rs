//! Parameterised building blocks over the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Gaussian weights with standard deviation `1/sqrt(d_in)` scaled by
    /// `gain`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = gain / (d_in as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[d_in, d_out], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// `k×k` convolution over `h×w×c` tensors with zero padding `k/2`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub c_out: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, kernel: usize, stride: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let fan_in = kernel * kernel * c_in;
        let std = (2.0 / fan_in as f64).sqrt();
        Conv {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[fan_in, c_out], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            kernel,
            stride,
            c_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let cols = tape.im2col(x, self.kernel, self.stride, self.kernel / 2)?;
        let y = tape.linear(cols, p.var(self.weight), p.var(self.bias))?;
        let (h, w) = conv_extent(tape.shape(x), self.kernel, self.stride);
        tape.reshape(y, &[h, w, self.c_out])
    }
}

pub fn conv_extent(shape: &[usize], kernel: usize, stride: usize) -> (usize, usize) {
    let pad = kernel / 2;
    (
        (shape[0] + 2 * pad - kernel) / stride + 1,
        (shape[1] + 2 * pad - kernel) / stride + 1,
    )
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], 1.0, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.gelu(x);
            }
            x = layer.forward(tape, p, x)?;
        }
        Ok(x)
    }
}

/// Row `i` of a `rows×d` parameter as a `[d]` vector.
pub fn param_row(tape: &mut Tape, table: Var, i: usize) -> Result<Var> {
    let d = tape.value(table).cols();
    let row = tape.slice_rows(table, i, i + 1)?;
    tape.reshape(row, &[d])
}

/// Flattens `h×w×c` to `(h*w)×c`.
pub fn flatten_hw(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("flatten_hw", &s, &[]));
    }
    tape.reshape(x, &[s[0] * s[1], s[2]])
}

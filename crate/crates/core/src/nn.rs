//! Dense kernels and the stateless neural building blocks.
//!
//! The `*_rows` / `*_core` kernels are shared by the tape (which also keeps
//! their caches for the backward pass) and by the plain forward functions
//! exported here.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Hidden nonlinearity of feed-forward blocks and MLP heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact (erf-based) GELU.
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
                let pdf = libm::exp(-0.5 * x * x) * INV_SQRT_2PI;
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `out += a · b` with `a: n×k`, `b: k×m`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: n×m`, `b: k×m`, `out: n×k`.
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let a_row = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let b_row = &b[j * m..(j + 1) * m];
            out[i * k + j] += dot(a_row, b_row);
        }
    }
}

/// `out += aᵀ · b` with `a: n×k`, `b: n×m`, `out: k×m`.
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * m..(i + 1) * m];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_ij;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Row-wise layer norm. Returns `(output, normalized input, 1/σ per row)`.
pub(crate) fn layer_norm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / libm::sqrt(var + eps);
        inv_std[r] = inv;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[r * cols + c] = h;
            y[r * cols + c] = gamma[c] * h + beta[c];
        }
    }
    (y, xhat, inv_std)
}

/// Numerically stable log-sum-exp.
pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(values.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

/// In-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Scaled dot-product attention over pre-projected `q`, `k`, `v`
/// (`tokens × width`), heads split along columns. Returns the concatenated
/// head outputs and the attention probabilities laid out
/// `[head][query][key]`.
pub(crate) fn attention_core(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tokens: usize,
    width: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let head_dim = width / heads;
    let scale = 1.0 / libm::sqrt(head_dim as f64);
    let mut out = vec![0.0; tokens * width];
    let mut probs = vec![0.0; heads * tokens * tokens];
    for h in 0..heads {
        let off = h * head_dim;
        for i in 0..tokens {
            let qi = &q[i * width + off..i * width + off + head_dim];
            let p = &mut probs[(h * tokens + i) * tokens..(h * tokens + i + 1) * tokens];
            let visible = if causal { i + 1 } else { tokens };
            for j in 0..visible {
                let kj = &k[j * width + off..j * width + off + head_dim];
                p[j] = dot(qi, kj) * scale;
            }
            softmax_in_place(&mut p[..visible]);
            let oi = &mut out[i * width + off..i * width + off + head_dim];
            for j in 0..visible {
                let w = p[j];
                let vj = &v[j * width + off..j * width + off + head_dim];
                for (o, &x) in oi.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
    }
    (out, probs)
}

/// Temperature-scaled softmax over a logit vector.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        bail!(Domain, "softmax temperature must be positive, got {}", temperature);
    }
    if logits.is_empty() {
        bail!(Dimension, "softmax over an empty vector");
    }
    let mut out: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        bail!(Domain, "layer norm eps must be positive");
    }
    let (_, cols) = x.matrix_dims()?;
    if gamma.len() != cols || beta.len() != cols {
        bail!(
            Dimension,
            "layer norm over {} features with gamma {} / beta {}",
            cols,
            gamma.len(),
            beta.len()
        );
    }
    let (y, _, _) = layer_norm_rows(x.data(), gamma.data(), beta.data(), cols, eps);
    Tensor::new(x.shape().to_vec(), y)
}

/// Weights of one affine map `x·W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Affine<'a> {
    pub weight: &'a Tensor,
    pub bias: Option<&'a Tensor>,
}

impl Affine<'_> {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.matrix_dims()?;
        let (w_in, w_out) = self.weight.matrix_dims()?;
        if w_in != cols {
            bail!(Dimension, "affine map expects {} inputs, got {}", w_in, cols);
        }
        let mut out = vec![0.0; rows * w_out];
        if let Some(b) = self.bias {
            if b.len() != w_out {
                bail!(Dimension, "bias has {} values, expected {}", b.len(), w_out);
            }
            for r in 0..rows {
                out[r * w_out..(r + 1) * w_out].copy_from_slice(b.data());
            }
        }
        matmul_acc(x.data(), self.weight.data(), &mut out, rows, cols, w_out);
        Tensor::from_rows(rows, w_out, out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub query: Affine<'a>,
    pub key: Affine<'a>,
    pub value: Affine<'a>,
    pub output: Affine<'a>,
}

/// Multi-head self-attention over `x: tokens × width`.
pub fn multi_head_attention(
    x: &Tensor,
    heads: usize,
    weights: &AttentionWeights<'_>,
    causal: bool,
) -> Result<Tensor> {
    let (tokens, width) = x.matrix_dims()?;
    if heads == 0 || width % heads != 0 {
        bail!(Config, "width {} is not divisible by {} heads", width, heads);
    }
    let q = weights.query.apply(x)?;
    let k = weights.key.apply(x)?;
    let v = weights.value.apply(x)?;
    if q.len() != tokens * width || k.len() != q.len() || v.len() != q.len() {
        bail!(Dimension, "attention projections must preserve width {}", width);
    }
    let (mixed, _) = attention_core(q.data(), k.data(), v.data(), tokens, width, heads, causal);
    weights.output.apply(&Tensor::from_rows(tokens, width, mixed)?)
}

/// Position-wise feed-forward: `act(x·W1 + b1)·W2 + b2`.
pub fn feed_forward(
    x: &Tensor,
    fc: Affine<'_>,
    proj: Affine<'_>,
    activation: Activation,
) -> Result<Tensor> {
    let (_, width) = x.matrix_dims()?;
    let mut hidden = fc.apply(x)?;
    for v in hidden.data_mut() {
        *v = activation.apply(*v);
    }
    let out = proj.apply(&hidden)?;
    if out.matrix_dims()?.1 != width {
        bail!(Dimension, "feed-forward output width differs from input width {}", width);
    }
    Ok(out)
}

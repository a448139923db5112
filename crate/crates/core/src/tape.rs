//! Reverse-mode differentiation over a recorded tape of coarse matrix ops.
//!
//! Every value on the tape is a dense `rows × cols` matrix. Parameters are
//! read in place from the [`ParamStore`] the tape borrows; backward returns
//! gradients for trainable parameters only.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::nn::{self, Activation};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct ClipCache {
    image_unit: Vec<f64>,
    text_unit: Vec<f64>,
    image_norm: Vec<f64>,
    text_norm: Vec<f64>,
    sim: Vec<f64>,
    row_probs: Vec<f64>,
    col_probs: Vec<f64>,
    temperature: f64,
    clamped: bool,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        index: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    ClipLoss {
        image: Var,
        text: Var,
        log_temperature: Var,
        cache: ClipCache,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Clamp range of the learnable contrastive temperature.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.01, 1.0);

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    track_all: bool,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a trainable parameter; `None` for frozen or unused ones.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.params.get_mut(id.0).and_then(|g| g.as_mut())
    }

    /// Gradient with respect to an intermediate value.
    pub fn node(&self, var: Var) -> Option<&[f64]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param_slots(&self) -> usize {
        self.params.len()
    }

    /// Copy gradients into the tensors' gradient slots.
    pub fn store_into(&self, params: &mut ParamStore) -> Result<()> {
        for (i, g) in self.params.iter().enumerate() {
            let p = params.get_mut(ParamId(i));
            match g {
                Some(g) => p.tensor.set_grad(g.clone())?,
                None => p.tensor.clear_grad(),
            }
        }
        Ok(())
    }

    /// Element-wise sum with another gradient set of the same store.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            track_all: false,
        }
    }

    /// A tape on which every node requires a gradient, including inputs and
    /// frozen parameters, so intermediate gradients can be inspected.
    pub fn tracking_all(params: &'p ParamStore) -> Self {
        let mut t = Self::new(params);
        t.track_all = true;
        t
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.track_all || parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).tensor.data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            other => bail!(Contract, "expected a scalar, found {} values", other.len()),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::from_rows(r, c, self.value(v).to_vec()).expect("tape node dims")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Probabilities `[head][query][key]` of the most recently recorded
    /// attention with the given masking, with its head and token counts.
    pub fn last_attention(&self, causal: bool) -> Option<(usize, usize, &[f64])> {
        self.nodes.iter().rev().find_map(|n| match &n.op {
            Op::Attention {
                heads,
                causal: c,
                probs,
                ..
            } if *c == causal => Some((*heads, n.rows, probs.as_slice())),
            _ => None,
        })
    }

    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.matrix_dims()?;
        Ok(self.input_matrix(r, c, t.data().to_vec()))
    }

    pub fn input_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.push(rows, cols, data, Op::Input, &[])
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        self.param_by_id(id)
    }

    pub fn param_by_id(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        let p = self.params.get(id);
        let (r, c) = p.tensor.matrix_dims()?;
        let requires_grad = p.trainable || self.track_all;
        self.nodes.push(Node {
            rows: r,
            cols: c,
            value: Vec::new(),
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    /// `x·W (+ b)`, `W: in × out`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.dims(x);
        let (wk, m) = self.dims(w);
        if wk != k {
            bail!(Dimension, "linear: input width {} vs weight rows {}", k, wk);
        }
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                bail!(Dimension, "linear: bias {} vs output width {}", bv.len(), m);
            }
            for r in 0..n {
                out[r * m..(r + 1) * m].copy_from_slice(bv);
            }
        }
        nn::matmul_acc(self.value(x), self.value(w), &mut out, n, k, m);
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(n, m, out, Op::Linear { x, w, b }, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            bail!(Dimension, "add: {:?} vs {:?}", self.dims(a), self.dims(b));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, out, Op::Add(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            bail!(Dimension, "mul: {:?} vs {:?}", self.dims(a), self.dims(b));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(r, c, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let (r, c) = self.dims(a);
        self.push(r, c, out, Op::Scale(a, factor), &[a])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let out = self.value(a).iter().map(|&x| act.apply(x)).collect();
        let (r, c) = self.dims(a);
        self.push(r, c, out, Op::Act(a, act), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            bail!(Dimension, "layer norm: gamma/beta must have {} values", c);
        }
        let (y, xhat, inv_std) =
            nn::layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), c, eps);
        Ok(self.push(
            r,
            c,
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product attention on projected `q`, `k`, `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (t, w) = self.dims(q);
        if self.dims(k) != (t, w) || self.dims(v) != (t, w) {
            bail!(Dimension, "attention: q/k/v shapes differ");
        }
        if heads == 0 || w % heads != 0 {
            bail!(Config, "width {} is not divisible by {} heads", w, heads);
        }
        let (out, probs) =
            nn::attention_core(self.value(q), self.value(k), self.value(v), t, w, heads, causal);
        Ok(self.push(
            t,
            w,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of nothing");
        };
        let cols = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                bail!(Dimension, "concat_rows: width {} vs {}", c, cols);
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of nothing");
        };
        let rows = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            bail!(Dimension, "concat_cols: row counts differ");
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let c = self.dims(p).1;
            let v = self.value(p);
            for r in 0..rows {
                out[r * cols + off..r * cols + off + c].copy_from_slice(&v[r * c..(r + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            bail!(Dimension, "slice rows {}..{} of {}", start, start + len, r);
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, out, Op::SliceRows { x, start }, &[x]))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if ids.is_empty() {
            bail!(Dimension, "gather of no rows");
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                bail!(Domain, "row id {} out of range for table with {} rows", i, r);
            }
            out.extend_from_slice(&self.value(table)[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            ids.len(),
            c,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Single element (row-major index) as a `1 × 1` value.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.len() {
            bail!(Dimension, "pick index {} of {}", index, v.len());
        }
        let out = vec![v[index]];
        Ok(self.push(1, 1, out, Op::Pick { x, index }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x), &[x])
    }

    /// Mean softmax cross-entropy of logit rows against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(logits);
        if targets.len() != n {
            bail!(Dimension, "cross entropy: {} targets for {} rows", targets.len(), n);
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= m {
                bail!(Domain, "class {} out of range for {} classes", t, m);
            }
            let row = &mut probs[r * m..(r + 1) * m];
            let lse = nn::log_sum_exp(row);
            loss += lse - row[t];
            nn::softmax_in_place(row);
        }
        loss /= n as f64;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Symmetric InfoNCE over a batch of paired embeddings (`N × d` each),
    /// temperature `clamp(exp(log_temperature))`.
    pub fn clip_loss(&mut self, image: Var, text: Var, log_temperature: Var) -> Result<Var> {
        let (n, d) = self.dims(image);
        if self.dims(text) != (n, d) {
            bail!(Dimension, "clip loss: image {:?} vs text {:?}", (n, d), self.dims(text));
        }
        if self.value(log_temperature).len() != 1 {
            bail!(Dimension, "clip loss: temperature must be a scalar");
        }
        let raw = libm::exp(self.value(log_temperature)[0]);
        let (lo, hi) = TEMPERATURE_RANGE;
        let temperature = raw.clamp(lo, hi);
        let clamped = raw < lo || raw > hi;

        let normalize = |v: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut unit = v.to_vec();
            let mut norms = Vec::with_capacity(n);
            for r in 0..n {
                let row = &mut unit[r * d..(r + 1) * d];
                let len = nn::norm(row);
                if !(len > 0.0) {
                    bail!(Domain, "cosine similarity of a zero-norm embedding");
                }
                row.iter_mut().for_each(|x| *x /= len);
                norms.push(len);
            }
            Ok((unit, norms))
        };
        let (image_unit, image_norm) = normalize(self.value(image))?;
        let (text_unit, text_norm) = normalize(self.value(text))?;
        let mut sim = vec![0.0; n * n];
        nn::matmul_bt_acc(&image_unit, &text_unit, &mut sim, n, d, n);

        let scaled: Vec<f64> = sim.iter().map(|s| s / temperature).collect();
        let mut row_probs = scaled.clone();
        let mut loss_i = 0.0;
        for i in 0..n {
            let row = &mut row_probs[i * n..(i + 1) * n];
            loss_i += nn::log_sum_exp(row) - row[i];
            nn::softmax_in_place(row);
        }
        let mut col_probs = vec![0.0; n * n];
        let mut loss_t = 0.0;
        let mut col = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                col[i] = scaled[i * n + j];
            }
            loss_t += nn::log_sum_exp(&col) - col[j];
            nn::softmax_in_place(&mut col);
            for i in 0..n {
                col_probs[i * n + j] = col[i];
            }
        }
        let loss = 0.5 * (loss_i + loss_t) / n as f64;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::ClipLoss {
                image,
                text,
                log_temperature,
                cache: ClipCache {
                    image_unit,
                    text_unit,
                    image_norm,
                    text_norm,
                    sim,
                    row_probs,
                    col_probs,
                    temperature,
                    clamped,
                },
            },
            &[image, text, log_temperature],
        ))
    }

    /// Backpropagate from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            bail!(Contract, "backward needs a scalar loss, got {:?}", self.dims(loss));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = vec![None; self.params.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if self.params.get(ParamId(pid)).trainable {
                    params[pid] = grads[v.0].clone();
                }
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn len_of(&self, v: Var) -> usize {
        let (r, c) = self.dims(v);
        r * c
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (n, k) = self.dims(*x);
                let m = node.cols;
                if self.wants(*x) {
                    let dx = add_into(&mut grads[x.0], n * k);
                    nn::matmul_bt_acc(g, self.value(*w), dx, n, m, k);
                }
                if self.wants(*w) {
                    let dw = add_into(&mut grads[w.0], k * m);
                    nn::matmul_at_acc(self.value(*x), g, dw, n, k, m);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = add_into(&mut grads[b.0], m);
                        for r in 0..n {
                            for (d, gv) in db.iter_mut().zip(&g[r * m..(r + 1) * m]) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        let d = add_into(&mut grads[p.0], g.len());
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (p, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(p) {
                        let o = self.value(other);
                        let d = add_into(&mut grads[p.0], g.len());
                        for ((d, gv), ov) in d.iter_mut().zip(g).zip(o) {
                            *d += gv * ov;
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    let d = add_into(&mut grads[a.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += f * gv);
                }
            }
            Op::Act(a, act) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let d = add_into(&mut grads[a.0], g.len());
                    for ((d, gv), &xv) in d.iter_mut().zip(g).zip(x) {
                        *d += gv * act.derivative(xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = (node.rows, node.cols);
                if self.wants(*gamma) {
                    let dg = add_into(&mut grads[gamma.0], cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let db = add_into(&mut grads[beta.0], cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma);
                    let dx = add_into(&mut grads[x.0], rows * cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = g[r * cols + c] * gam[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = nn::dot(&dxhat, xh) / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            } => self.backprop_attention(node, g, grads, (*q, *k, *v), *heads, *causal, probs),
            Op::ConcatRows(parts) => {
                let cols = node.cols;
                let mut off = 0;
                for &p in parts {
                    let (r, _) = self.dims(p);
                    if self.wants(p) {
                        let d = add_into(&mut grads[p.0], r * cols);
                        d.iter_mut()
                            .zip(&g[off * cols..(off + r) * cols])
                            .for_each(|(d, gv)| *d += gv);
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = (node.rows, node.cols);
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if self.wants(p) {
                        let d = add_into(&mut grads[p.0], rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                d[r * c + j] += g[r * cols + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let cols = node.cols;
                    let len = self.len_of(*x);
                    let d = add_into(&mut grads[x.0], len);
                    d[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let cols = node.cols;
                    let len = self.len_of(*table);
                    let d = add_into(&mut grads[table.0], len);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            d[id * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Pick { x, index } => {
                if self.wants(*x) {
                    let len = self.len_of(*x);
                    add_into(&mut grads[x.0], len)[*index] += g[0];
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let len = self.len_of(*x);
                    add_into(&mut grads[x.0], len).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let (n, m) = self.dims(*logits);
                    let scale = g[0] / n as f64;
                    let d = add_into(&mut grads[logits.0], n * m);
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..m {
                            let y = if c == t { 1.0 } else { 0.0 };
                            d[r * m + c] += scale * (probs[r * m + c] - y);
                        }
                    }
                }
            }
            Op::ClipLoss {
                image,
                text,
                log_temperature,
                cache,
            } => self.backprop_clip(g[0], grads, (*image, *text, *log_temperature), cache),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        causal: bool,
        probs: &[f64],
    ) {
        let (t, w) = (node.rows, node.cols);
        let hd = w / heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; t * w];
        let mut dk = vec![0.0; t * w];
        let mut dv = vec![0.0; t * w];
        let mut dp = vec![0.0; t];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..t {
                let visible = if causal { i + 1 } else { t };
                let p = &probs[(h * t + i) * t..(h * t + i) * t + visible];
                let gi = &g[i * w + off..i * w + off + hd];
                for j in 0..visible {
                    let vj = &vv[j * w + off..j * w + off + hd];
                    dp[j] = nn::dot(gi, vj);
                    let dvj = &mut dv[j * w + off..j * w + off + hd];
                    for (d, gv) in dvj.iter_mut().zip(gi) {
                        *d += p[j] * gv;
                    }
                }
                let weighted: f64 = (0..visible).map(|j| p[j] * dp[j]).sum();
                for j in 0..visible {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..hd {
                        dq[i * w + off + c] += ds * kv[j * w + off + c];
                        dk[j * w + off + c] += ds * qv[i * w + off + c];
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                let acc = add_into(&mut grads[var.0], t * w);
                acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
        }
    }

    fn backprop_clip(
        &self,
        g: f64,
        grads: &mut [Option<Vec<f64>>],
        (image, text, log_temperature): (Var, Var, Var),
        c: &ClipCache,
    ) {
        let (n, d) = self.dims(image);
        // dL/dZ for Z = S / τ, both directions averaged.
        let coeff = g * 0.5 / n as f64;
        let mut dz = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let eye = if i == j { 2.0 } else { 0.0 };
                dz[i * n + j] = coeff * (c.row_probs[i * n + j] + c.col_probs[i * n + j] - eye);
            }
        }
        if self.wants(log_temperature) && !c.clamped {
            // dZ/dτ = −S/τ², dτ/d(log τ) = τ
            let dtau: f64 = dz
                .iter()
                .zip(&c.sim)
                .map(|(dz, s)| -dz * s / (c.temperature * c.temperature))
                .sum();
            add_into(&mut grads[log_temperature.0], 1)[0] += dtau * c.temperature;
        }
        let ds: Vec<f64> = dz.iter().map(|v| v / c.temperature).collect();
        let unit_back = |unit: &[f64], norms: &[f64], dunit: &[f64], out: &mut [f64]| {
            for r in 0..n {
                let u = &unit[r * d..(r + 1) * d];
                let du = &dunit[r * d..(r + 1) * d];
                let proj = nn::dot(u, du);
                for k in 0..d {
                    out[r * d + k] += (du[k] - u[k] * proj) / norms[r];
                }
            }
        };
        if self.wants(image) {
            let mut da = vec![0.0; n * d];
            nn::matmul_acc(&ds, &c.text_unit, &mut da, n, n, d);
            let acc = add_into(&mut grads[image.0], n * d);
            unit_back(&c.image_unit, &c.image_norm, &da, acc);
        }
        if self.wants(text) {
            let mut db = vec![0.0; n * d];
            nn::matmul_at_acc(&ds, &c.image_unit, &mut db, n, n, d);
            let acc = add_into(&mut grads[text.0], n * d);
            unit_back(&c.text_unit, &c.text_norm, &db, acc);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamGroup;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "w",
            Tensor::from_rows(2, 3, alloc::vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7]).unwrap(),
            true,
            ParamGroup::Head,
        )
        .unwrap();
        s.insert("frozen", Tensor::filled(&[2, 3], 0.25), false, ParamGroup::Encoder)
            .unwrap();
        s
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let s = store();
        let mut tape = Tape::new(&s);
        let w = tape.param("w").unwrap();
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(ParamId(0)).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradient() {
        let s = store();
        let mut tape = Tape::new(&s);
        let w = tape.param("w").unwrap();
        let z = tape.scale(w, 0.0);
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert!(g.param(ParamId(0)).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_parameter_receives_nothing() {
        let s = store();
        let mut tape = Tape::new(&s);
        let w = tape.param("w").unwrap();
        let f = tape.param("frozen").unwrap();
        let a = tape.add(w, f).unwrap();
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert!(g.param(ParamId(0)).is_some());
        assert!(g.param(ParamId(1)).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let s = store();
        let mut tape = Tape::new(&s);
        let w = tape.param("w").unwrap();
        assert!(matches!(tape.backward(w), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn gradients_land_in_tensor_slots() {
        let mut s = store();
        let g = {
            let mut tape = Tape::new(&s);
            let w = tape.param("w").unwrap();
            let loss = tape.sum(w);
            tape.backward(loss).unwrap()
        };
        g.store_into(&mut s).unwrap();
        assert_eq!(s.tensor("w").unwrap().grad().unwrap(), &[1.0; 6]);
        assert!(s.tensor("frozen").unwrap().grad().is_none());
    }
}

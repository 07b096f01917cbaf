//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the reverse sweep. Nodes are only ever appended, so the tape is always in
//! topological order and [`Tape::backward`] walks it back to front.
//!
//! Gradients accumulate across `backward` calls until [`Tape::zero_grad`].

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// Work below this many multiply-adds stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 14;

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    CausalAttention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>().checked_div(cols).unwrap_or(0);
    (rows, cols)
}

fn add_into<F: Scalar>(slot: &mut Option<Vec<F>>, g: &[F]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b = *b + x),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_into_f64<F: Scalar>(slot: &mut Option<Vec<F>>, g: &[f64]) {
    match slot {
        Some(buf) => buf
            .iter_mut()
            .zip(g)
            .for_each(|(b, &x)| *b = F::from_f64(b.as_f64() + x)),
        None => *slot = Some(g.iter().map(|&x| F::from_f64(x)).collect()),
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`, rows computed independently so the result does
/// not depend on the thread count.
fn matmul_kernel<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    let row = |(i, orow): (usize, &mut [F])| {
        let mut acc = vec![0.0f64; n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &ap) in arow.iter().enumerate() {
            let ap = ap.as_f64();
            if ap == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += ap * bv.as_f64();
            }
        }
        for (o, s) in orow.iter_mut().zip(acc) {
            *o = F::from_f64(s);
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ -> [m×k]`.
fn matmul_bt_kernel<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    let row = |(i, orow): (usize, &mut [F])| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = arow.iter().zip(brow).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
            *o = F::from_f64(s);
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 0 {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else if k > 0 {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

/// `a[m×k]ᵀ · c[m×n] -> [k×n]`.
fn matmul_at_kernel<F: Scalar>(a: &[F], c: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    let row = |(p, orow): (usize, &mut [F])| {
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            let ap = a[i * k + p].as_f64();
            if ap == 0.0 {
                continue;
            }
            for (s, &cv) in acc.iter_mut().zip(&c[i * n..(i + 1) * n]) {
                *s += ap * cv.as_f64();
            }
        }
        for (o, s) in orow.iter_mut().zip(acc) {
            *o = F::from_f64(s);
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Per-(sequence, head) causal attention result: output rows and the weight matrix.
struct HeadOut<F> {
    out: Vec<f64>,
    probs: Vec<F>,
}

/// Extracts the `[seq × head_dim]` slice of head `h` in sequence `b` from a
/// `[batch·seq × d]` matrix.
fn gather_head<F: Scalar>(x: &[F], b: usize, h: usize, seq: usize, d: usize, hd: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(seq * hd);
    for t in 0..seq {
        let base = (b * seq + t) * d + h * hd;
        out.extend(x[base..base + hd].iter().map(|v| v.as_f64()));
    }
    out
}

fn attention_head<F: Scalar>(q: &[f64], k: &[f64], v: &[f64], seq: usize, hd: usize) -> HeadOut<F> {
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![F::zero(); seq * seq];
    let mut out = vec![0.0f64; seq * hd];
    let mut w = vec![0.0f64; seq];
    for t in 0..seq {
        let qt = &q[t * hd..(t + 1) * hd];
        let mut max = f64::NEG_INFINITY;
        for i in 0..=t {
            let ki = &k[i * hd..(i + 1) * hd];
            let s = qt.iter().zip(ki).map(|(a, b)| a * b).sum::<f64>() * scale;
            w[i] = s;
            max = max.max(s);
        }
        let mut z = 0.0;
        for wi in w.iter_mut().take(t + 1) {
            *wi = (*wi - max).exp();
            z += *wi;
        }
        let ot = &mut out[t * hd..(t + 1) * hd];
        for i in 0..=t {
            let p = w[i] / z;
            probs[t * seq + i] = F::from_f64(p);
            let vi = &v[i * hd..(i + 1) * hd];
            for (o, &vv) in ot.iter_mut().zip(vi) {
                *o += p * vv;
            }
        }
    }
    HeadOut { out, probs }
}

/// Causal scaled dot-product attention weights for one head:
/// `weights[t][i] = softmax_i(q_t·k_i / √d)` over `i ≤ t`, zero for `i > t`.
pub fn causal_attention_weights(q: &[f64], k: &[f64], seq: usize, head_dim: usize) -> Vec<f64> {
    let v = vec![0.0; seq * head_dim];
    attention_head::<f64>(q, k, &v, seq, head_dim).probs
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a node, if any backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records a tensor as an input. Gradients flow to it when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        let needs = t.requires_grad();
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("shape already valid");
        value.set_requires_grad(needs);
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MatMul { a, b, m, k, n }, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Mul { a, b }, needs))
    }

    /// `x[..., n] + bias[n]`, broadcast over the leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, n) = rows_cols(&shape);
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: shape,
                right: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(&shape, data)?, Op::AddBias { x, bias }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * cf).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(&shape, data).expect("same shape"), Op::Scale { x, c }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(&shape, data).expect("same shape"), Op::Relu { x }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let needs = self.needs(x);
        self.push(Tensor::new(&[1], vec![F::from_f64(s)]).unwrap(), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.len().max(1) as f64;
        let s: f64 = t.data().iter().map(|v| v.as_f64()).sum();
        let needs = self.needs(x);
        self.push(Tensor::new(&[1], vec![F::from_f64(s / n)]).unwrap(), Op::Mean { x }, needs)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("softmax input is not finite".into()));
        }
        let shape = t.shape().to_vec();
        let (_, n) = rows_cols(&shape);
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n.max(1)) {
            data.extend(softmax_row(row).into_iter().map(F::from_f64));
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Softmax { x }, needs))
    }

    /// Normalizes each row over the last axis to zero mean / unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&shape);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mu = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j].as_f64() - mu) * r;
                data.push(F::from_f64(xhat * g[j].as_f64() + b[j].as_f64()));
            }
            mean.push(mu);
            rstd.push(r);
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            needs,
        ))
    }

    /// Gathers rows of a `[vocab × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                left: shape,
                right: vec![ids.len()],
            });
        }
        let (v, d) = (shape[0], shape[1]);
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange { index: id, bound: v });
            }
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Eval mode and
    /// `p == 0` return `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let t = self.value(x);
        let mask: Vec<F> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Dropout { x, mask }, needs))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, v) = rows_cols(&shape);
        if rows != targets.len() || rows == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![targets.len()],
            });
        }
        let lv = self.value(logits).data();
        if lv.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericDomain("logits are not finite".into()));
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0;
        for (row, &t) in lv.chunks(v).zip(targets) {
            if t >= v {
                return Err(Error::IndexOutOfRange { index: t, bound: v });
            }
            let p = softmax_row(row);
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[t].as_f64();
            probs.extend(p);
        }
        let loss = total / rows as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(&[1], vec![F::from_f64(loss)])?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Multi-head causal scaled dot-product attention. `q`, `k`, `v` are
    /// `[batch·seq × d]` with heads laid out as contiguous column groups of
    /// width `d / heads`; the output has the same layout (heads concatenated).
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (rows, d) = rows_cols(&shape);
        if shape.len() != 2 || rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "causal_attention",
                left: shape,
                right: vec![batch, seq, heads],
            });
        }
        let hd = d / heads;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let run = |idx: usize| {
            let (b, h) = (idx / heads, idx % heads);
            let qh = gather_head(qd, b, h, seq, d, hd);
            let kh = gather_head(kd, b, h, seq, d, hd);
            let vh = gather_head(vd, b, h, seq, d, hd);
            attention_head::<F>(&qh, &kh, &vh, seq, hd)
        };
        let work = batch * heads * seq * seq * hd;
        let results: Vec<HeadOut<F>> = if work >= PAR_THRESHOLD {
            (0..batch * heads).into_par_iter().map(run).collect()
        } else {
            (0..batch * heads).map(run).collect()
        };
        let mut data = vec![F::zero(); rows * d];
        let mut probs = Vec::with_capacity(batch * heads * seq * seq);
        for (idx, r) in results.into_iter().enumerate() {
            let (b, h) = (idx / heads, idx % heads);
            for t in 0..seq {
                let base = (b * seq + t) * d + h * hd;
                for j in 0..hd {
                    data[base + j] = F::from_f64(r.out[t * hd + j]);
                }
            }
            probs.extend(r.probs);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Inputs of every ReLU on the tape, in recording order.
    pub fn relu_inputs(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(x),
                _ => None,
            })
            .collect()
    }

    /// Attention weights saved by a [`Tape::causal_attention`] node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::CausalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar node. Resulting gradients are added to any
    /// already held by the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut g: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(out_grad) = g[idx].take() else { continue };
            self.backprop_node(idx, &out_grad, &mut g);
            g[idx] = Some(out_grad);
        }
        for (slot, local) in self.grads.iter_mut().zip(g) {
            if let Some(local) = local {
                add_into(slot, &local);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, dy: &[F], g: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let da = matmul_bt_kernel(dy, self.value(b).data(), m, n, k);
                    add_into(&mut g[a.0], &da);
                }
                if self.needs(b) {
                    let db = matmul_at_kernel(self.value(a).data(), dy, m, k, n);
                    add_into(&mut g[b.0], &db);
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    add_into(&mut g[a.0], dy);
                }
                if self.needs(b) {
                    add_into(&mut g[b.0], dy);
                }
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let bv = self.value(b).data();
                    let da: Vec<F> = dy.iter().zip(bv).map(|(&d, &y)| d * y).collect();
                    add_into(&mut g[a.0], &da);
                }
                if self.needs(b) {
                    let av = self.value(a).data();
                    let db: Vec<F> = dy.iter().zip(av).map(|(&d, &x)| d * x).collect();
                    add_into(&mut g[b.0], &db);
                }
            }
            &Op::AddBias { x, bias } => {
                if self.needs(x) {
                    add_into(&mut g[x.0], dy);
                }
                if self.needs(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0f64; n];
                    for row in dy.chunks(n) {
                        for (s, &d) in db.iter_mut().zip(row) {
                            *s += d.as_f64();
                        }
                    }
                    add_into_f64(&mut g[bias.0], &db);
                }
            }
            &Op::Scale { x, c } => {
                let c = F::from_f64(c);
                let dx: Vec<F> = dy.iter().map(|&d| d * c).collect();
                add_into(&mut g[x.0], &dx);
            }
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                let dx: Vec<F> = dy
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v > F::zero() { d } else { F::zero() })
                    .collect();
                add_into(&mut g[x.0], &dx);
            }
            &Op::Sum { x } => {
                let dx = vec![dy[0]; self.value(x).len()];
                add_into(&mut g[x.0], &dx);
            }
            &Op::Mean { x } => {
                let n = self.value(x).len().max(1);
                let dx = vec![F::from_f64(dy[0].as_f64() / n as f64); n];
                add_into(&mut g[x.0], &dx);
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let (_, n) = rows_cols(node.value.shape());
                let mut dx = Vec::with_capacity(y.len());
                for (yr, dr) in y.chunks(n).zip(dy.chunks(n)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    dx.extend(
                        yr.iter()
                            .zip(dr)
                            .map(|(&yv, &dv)| F::from_f64(yv.as_f64() * (dv.as_f64() - dot))),
                    );
                }
                add_into(&mut g[x.0], &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                let mut dgain = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                let mut dx = Vec::with_capacity(xv.len());
                let mut xhat = vec![0.0f64; d];
                let mut dxhat = vec![0.0f64; d];
                for (r, (xr, dr)) in xv.chunks(d).zip(dy.chunks(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    for j in 0..d {
                        xhat[j] = (xr[j].as_f64() - mu) * rs;
                        let dyj = dr[j].as_f64();
                        dgain[j] += dyj * xhat[j];
                        dbias[j] += dyj;
                        dxhat[j] = dyj * gv[j].as_f64();
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx.push(F::from_f64(rs * (dxhat[j] - m1 - xhat[j] * m2)));
                    }
                }
                if self.needs(*x) {
                    add_into(&mut g[x.0], &dx);
                }
                if self.needs(*gain) {
                    add_into_f64(&mut g[gain.0], &dgain);
                }
                if self.needs(*bias) {
                    add_into_f64(&mut g[bias.0], &dbias);
                }
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table);
                let d = shape[1];
                let mut dt = vec![0.0f64; shape[0] * d];
                for (row, &id) in dy.chunks(d).zip(ids) {
                    for (s, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *s += v.as_f64();
                    }
                }
                add_into_f64(&mut g[table.0], &dt);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<F> = dy.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                add_into(&mut g[x.0], &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = probs.len() / targets.len();
                let scale = dy[0].as_f64() / targets.len() as f64;
                let mut dl = Vec::with_capacity(probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl.push(F::from_f64((probs[r * v + j] - onehot) * scale));
                    }
                }
                add_into(&mut g[logits.0], &dl);
            }
            &Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                ref probs,
            } => {
                let d = self.shape(q)[1];
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
                let run = |idx: usize| {
                    let (b, h) = (idx / heads, idx % heads);
                    let qh = gather_head(qd, b, h, seq, d, hd);
                    let kh = gather_head(kd, b, h, seq, d, hd);
                    let vh = gather_head(vd, b, h, seq, d, hd);
                    let doh = gather_head(dy, b, h, seq, d, hd);
                    let p = &probs[idx * seq * seq..(idx + 1) * seq * seq];
                    let mut dq = vec![0.0f64; seq * hd];
                    let mut dk = vec![0.0f64; seq * hd];
                    let mut dv = vec![0.0f64; seq * hd];
                    let mut dp = vec![0.0f64; seq];
                    for t in 0..seq {
                        let dot = &doh[t * hd..(t + 1) * hd];
                        let mut acc = 0.0;
                        for i in 0..=t {
                            let vi = &vh[i * hd..(i + 1) * hd];
                            dp[i] = dot.iter().zip(vi).map(|(a, b)| a * b).sum();
                            let pti = p[t * seq + i].as_f64();
                            acc += pti * dp[i];
                            for (s, &o) in dv[i * hd..(i + 1) * hd].iter_mut().zip(dot) {
                                *s += pti * o;
                            }
                        }
                        for i in 0..=t {
                            let ds = p[t * seq + i].as_f64() * (dp[i] - acc) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for j in 0..hd {
                                dq[t * hd + j] += ds * kh[i * hd + j];
                                dk[i * hd + j] += ds * qh[t * hd + j];
                            }
                        }
                    }
                    (dq, dk, dv)
                };
                let work = batch * heads * seq * seq * hd;
                let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = if work >= PAR_THRESHOLD {
                    (0..batch * heads).into_par_iter().map(run).collect()
                } else {
                    (0..batch * heads).map(run).collect()
                };
                let rows = batch * seq;
                let mut gq = vec![0.0f64; rows * d];
                let mut gk = vec![0.0f64; rows * d];
                let mut gv = vec![0.0f64; rows * d];
                for (idx, (dq, dk, dv)) in parts.into_iter().enumerate() {
                    let (b, h) = (idx / heads, idx % heads);
                    for t in 0..seq {
                        let base = (b * seq + t) * d + h * hd;
                        gq[base..base + hd].copy_from_slice(&dq[t * hd..(t + 1) * hd]);
                        gk[base..base + hd].copy_from_slice(&dk[t * hd..(t + 1) * hd]);
                        gv[base..base + hd].copy_from_slice(&dv[t * hd..(t + 1) * hd]);
                    }
                }
                if self.needs(q) {
                    add_into_f64(&mut g[q.0], &gq);
                }
                if self.needs(k) {
                    add_into_f64(&mut g[k.0], &gk);
                }
                if self.needs(v) {
                    add_into_f64(&mut g[v.0], &gv);
                }
            }
        }
    }
}

fn softmax_row<F: Scalar>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn param(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut rng(seed)).with_requires_grad(true)
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let m = Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let mv = tape.constant(m.clone());
        let out = tape.matmul(eye, mv).unwrap();
        assert_eq!(tape.value(out).data(), m.data());

        let a = tape.constant(Tensor::from_f64(&[1, 1], &[2.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[1, 1], &[3.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_bt() {
        let a = param(&[4, 5], 1);
        let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng(2));
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let g = tape.grad(av).unwrap();
        for i in 0..4 {
            for p in 0..5 {
                let expect: f64 = (0..3).map(|j| b.data()[p * 3 + j]).sum();
                assert!((g[i * 5 + p] - expect).abs() < 1e-12);
            }
        }
        let err = check_gradients(&[a.clone(), b.clone().with_requires_grad(true)], 1e-3, |tape, vs| {
            let c = tape.matmul(vs[0], vs[1]).unwrap();
            tape.sum(c)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn softmax_values_and_stability() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 3], &[0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1e4, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] >= 0.0 && d[1] < 1e-12);

        let bad = tape.constant(Tensor::from_f64(&[1, 2], &[f64::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax(bad), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn softmax_gradient() {
        let x = param(&[2, 5], 3);
        let w = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng(4));
        let err = check_gradients(&[x], 1e-3, |tape, vs| {
            let y = tape.softmax(vs[0]).unwrap();
            let wv = tape.constant(w.clone());
            let z = tape.mul(y, wv).unwrap();
            tape.sum(z)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn layer_norm_values() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::full(&[1, 3], 4.2));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));

        let x = tape.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let d = tape.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 3.0;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_gradient() {
        let x = param(&[3, 6], 5);
        let g = param(&[6], 6);
        let b = param(&[6], 7);
        let w = Tensor::<f64>::randn(&[3, 6], 1.0, &mut rng(8));
        let err = check_gradients(&[x, g, b], 1e-3, |tape, vs| {
            let y = tape.layer_norm(vs[0], vs[1], vs[2], 1e-5).unwrap();
            let wv = tape.constant(w.clone());
            let z = tape.mul(y, wv).unwrap();
            tape.sum(z)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[4, 402]));
        let loss = tape.cross_entropy(logits, &[0, 17, 200, 401]).unwrap();
        assert!((tape.value(loss).data()[0] - 402f64.ln()).abs() < 1e-12);

        let mut conf = vec![0.0; 5];
        conf[2] = 60.0;
        let logits = tape.constant(Tensor::from_f64(&[1, 5], &conf).unwrap());
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-20);

        assert!(matches!(
            tape.cross_entropy(logits, &[5]),
            Err(Error::IndexOutOfRange { index: 5, bound: 5 })
        ));
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = param(&[3, 7], 9);
        let err = check_gradients(&[x], 1e-3, |tape, vs| tape.cross_entropy(vs[0], &[1, 6, 0]).unwrap());
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn embedding_and_bias_gradients() {
        let table = param(&[5, 3], 10);
        let bias = param(&[3], 11);
        let w = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng(12));
        let err = check_gradients(&[table, bias], 1e-3, |tape, vs| {
            let e = tape.embedding(vs[0], &[0, 3, 3, 4]).unwrap();
            let e = tape.add_bias(e, vs[1]).unwrap();
            let e = tape.relu(e);
            let wv = tape.constant(w.clone());
            let z = tape.mul(e, wv).unwrap();
            tape.sum(z)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn dropout_modes() {
        let mut r = rng(13);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[10], 2.0));
        assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut r).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.2, Mode::Eval, &mut r).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, Mode::Train, &mut r), Err(Error::Config(_))));
        assert!(tape.dropout(x, -0.1, Mode::Eval, &mut r).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let mut r = rng(14);
        let mut tape = Tape::<f64>::new();
        let n = 100_000;
        let x = tape.constant(Tensor::full(&[n], 1.0));
        let y = tape.dropout(x, 0.5, Mode::Train, &mut r).unwrap();
        let d = tape.value(y).data();
        let survivors = d.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = d.iter().sum::<f64>() / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn backward_contract() {
        let x = param(&[3], 15);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        assert!(matches!(tape.backward(xv), Err(Error::Contract(_))));
        let s = tape.sum(xv);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(s).unwrap(), &[1.0]);
        // second sweep accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[2.0, 2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(xv).is_none());
    }

    #[test]
    fn composite_softmax_of_product() {
        let x = param(&[2, 4], 16);
        let w = param(&[4, 3], 17);
        let weights = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng(18));
        let err = check_gradients(&[x, w], 1e-3, |tape, vs| {
            let h = tape.matmul(vs[0], vs[1]).unwrap();
            let p = tape.softmax(h).unwrap();
            let c = tape.constant(weights.clone());
            let z = tape.mul(p, c).unwrap();
            tape.sum(z)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn attention_single_token_returns_value() {
        let q = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng(19));
        let k = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng(20));
        let v = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng(21));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
        let out = tape.causal_attention(qv, kv, vv, 1, 1, 2).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_uniform_keys_average_evenly() {
        let seq = 5;
        let q = vec![0.3; seq * 2];
        let w = causal_attention_weights(&q, &q, seq, 2);
        for t in 0..seq {
            for i in 0..seq {
                let expect = if i <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                assert!((w[t * seq + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradient() {
        let (batch, seq, d) = (2, 3, 4);
        let q = param(&[batch * seq, d], 22);
        let k = param(&[batch * seq, d], 23);
        let v = param(&[batch * seq, d], 24);
        let w = Tensor::<f64>::randn(&[batch * seq, d], 1.0, &mut rng(25));
        let err = check_gradients(&[q, k, v], 1e-3, |tape, vs| {
            let o = tape.causal_attention(vs[0], vs[1], vs[2], batch, seq, 2).unwrap();
            let c = tape.constant(w.clone());
            let z = tape.mul(o, c).unwrap();
            tape.sum(z)
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (batch, seq, d, heads) = (2, 6, 8, 2);
        let q = Tensor::<f32>::randn(&[batch * seq, d], 1.0, &mut rng(26));
        let k = Tensor::<f32>::randn(&[batch * seq, d], 1.0, &mut rng(27));
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(q), tape.constant(k));
        let out = tape.causal_attention(qv, kv, kv, batch, seq, heads).unwrap();
        let probs = tape.attention_probs(out).unwrap();
        for block in probs.chunks(seq * seq) {
            for t in 0..seq {
                let row = &block[t * seq..(t + 1) * seq];
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!(row[t + 1..].iter().all(|&p| p == 0.0));
                let s: f64 = row.iter().map(|&p| p as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn f32_storage_gradients_within_tolerance() {
        let x = Tensor::<f32>::randn(&[3, 5], 1.0, &mut rng(28)).with_requires_grad(true);
        let w = Tensor::<f32>::randn(&[5, 4], 1.0, &mut rng(29)).with_requires_grad(true);
        let mut tape = Tape::<f32>::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let h = tape.matmul(xv, wv).unwrap();
        let loss = tape.cross_entropy(h, &[0, 3, 1]).unwrap();
        tape.backward(loss).unwrap();
        let analytic = [tape.grad(xv).unwrap().to_vec(), tape.grad(wv).unwrap().to_vec()];
        // Finite differences on the same graph in f64.
        let numeric = crate::gradcheck::numeric_gradients(&[x.cast::<f64>(), w.cast::<f64>()], 1e-3, |tape, vs| {
            let h = tape.matmul(vs[0], vs[1]).unwrap();
            tape.cross_entropy(h, &[0, 3, 1]).unwrap()
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            assert!(max_rel_error(&a, n) < 1e-2);
        }
    }
}

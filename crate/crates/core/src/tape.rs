//! Reverse-accumulation autodiff over a recorded operation tape.
//!
//! Each op computes its value eagerly and appends a node; [`Tape::backward`]
//! walks the nodes in reverse and applies the hand-written adjoint of every
//! kernel. A tape is single-threaded and owned by one forward pass.

use std::collections::HashMap;

use crate::error::{contract, Error, Result};
use crate::param::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{self, dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Tensor>,
    },
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Conv2d(Var, Var),
    TConv2d(Var, Var),
    SigmoidBce {
        logits: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Dot(Var, Tensor),
    AddScalars(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Attention configuration shared by the encoder, aligner and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub heads: usize,
    /// Query row `t` may only see key rows `s ≤ t + (S − T)`.
    pub causal: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    relu_inputs: Vec<Var>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros if `v` did not influence the output.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a parameter read; repeated reads of one id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Broadcast-adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = tensor::add_row(self.value(a), self.value(row))?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = tensor::scale(self.value(a), s)?;
        Ok(self.push(out, Op::Scale(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = tensor::relu(self.value(a));
        self.relu_inputs.push(a);
        self.push(out, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: self.value(gain).shape().to_vec(),
            });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let (mean, iv) = tensor::row_moments(row);
            inv[i] = iv;
            for j in 0..n {
                let h = (row[j] - mean) * iv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?.checked("layer_norm")?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
        ))
    }

    /// Multi-head scaled dot-product attention on pre-projected `q`, `k`, `v`.
    ///
    /// Heads are contiguous column blocks of width `d / heads`; the head
    /// outputs are written back into the same blocks (concatenation).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), spec)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads: spec.heads,
                probs,
            },
        ))
    }

    /// Attention weights of every attention node on the tape, in recording order.
    pub fn all_attention_probs(&self) -> Vec<&[Tensor]> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { probs, .. } => Some(probs.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Post-softmax attention weights recorded by an attention node, one
    /// `T × S` matrix per head.
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Copies the listed rows of `table` (embedding lookup or row selection).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (m, n) = t.dims2()?;
        contract!(!rows.is_empty(), "gather_rows needs at least one row");
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            contract!(r < m, "row {r} out of range for {m} rows");
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(out, Op::GatherRows(table, rows.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(w))?;
        Ok(self.push(out, Op::Conv2d(x, w)))
    }

    pub fn tconv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = tensor::tconv2d(self.value(x), self.value(w))?;
        Ok(self.push(out, Op::TConv2d(x, w)))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
    pub fn sigmoid_bce_mean(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != target.numel() {
            return Err(Error::ShapeMismatch {
                op: "sigmoid_bce",
                left: z.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let n = z.numel() as f64;
        let mut sum = 0.0;
        for (&zi, &yi) in z.data().iter().zip(target.data()) {
            sum += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let out = Tensor::scalar(sum / n).checked("sigmoid_bce")?;
        Ok(self.push(
            out,
            Op::SigmoidBce {
                logits,
                target: target.clone(),
            },
        ))
    }

    /// `Σ_r −log softmax(logits_r)[targets_r]` over the rows of `logits`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (m, n) = z.dims2()?;
        contract!(
            m == targets.len(),
            "cross_entropy: {m} logit rows but {} targets",
            targets.len()
        );
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            contract!(t < n, "target id {t} out of range for {n} classes");
            let row = z.row(r);
            loss += tensor::log_sum_exp(row) - row[t];
            tensor::softmax_in_place(&mut probs.data_mut()[r * n..(r + 1) * n]);
        }
        let out = Tensor::scalar(loss).checked("cross_entropy")?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ a ⊙ w` for a constant tensor `w`; reduces any node to a scalar.
    pub fn dot_const(&mut self, a: Var, w: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.numel() != w.numel() {
            return Err(Error::ShapeMismatch {
                op: "dot_const",
                left: av.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        let out = Tensor::scalar(dot(av.data(), w.data())).checked("dot_const")?;
        Ok(self.push(out, Op::Dot(a, w.clone())))
    }

    pub fn add_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "add_scalars needs at least one term");
        let mut s = 0.0;
        for &p in parts {
            contract!(self.value(p).numel() == 1, "add_scalars on a non-scalar");
            s += self.scalar(p);
        }
        let out = Tensor::scalar(s).checked("add_scalars")?;
        Ok(self.push(out, Op::AddScalars(parts.to_vec())))
    }

    /// Sign pattern (`x > 0`) of every ReLU input recorded so far. Two
    /// evaluations with different patterns straddle a ReLU kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.relu_inputs
            .iter()
            .flat_map(|&v| self.value(v).data().iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        contract!(
            self.value(loss).numel() == 1,
            "backward needs a scalar, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Grads { grads })
    }

    /// Gradients for every parameter read on this tape.
    pub fn param_grads(&self, grads: &Grads, n_params: usize) -> ParamGrads {
        let mut out = ParamGrads::with_len(n_params);
        let mut reads: Vec<(&ParamId, &Var)> = self.params.iter().collect();
        reads.sort_by_key(|(id, _)| **id);
        for (id, v) in reads {
            if let Some(g) = grads.get(*v) {
                out.add_tensor(*id, g);
            }
        }
        out
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let da = tensor::matmul_nt(g, self.value(*b))?;
                let db = tensor::matmul_tn(self.value(*a), g)?;
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let da = tensor::matmul(g, self.value(*b))?;
                let db = tensor::matmul_tn(g, self.value(*a))?;
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accum(grads, *a, g.clone());
                let n = self.value(*row).numel();
                let mut dr = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                accum(grads, *row, Tensor::new(self.value(*row).shape().to_vec(), dr)?);
            }
            Op::Scale(a, s) => accum(grads, *a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accum(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (_, n) = y.dims2()?;
                let mut dx = vec![0.0; y.numel()];
                for (r, (yr, gr)) in y.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let inner = dot(yr, gr);
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - inner);
                    }
                }
                accum(grads, *a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let (m, n) = node.value.dims2()?;
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..m {
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        mean_d += dh;
                        mean_dh += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        dx[i * n + j] = inv[i] * (dh - mean_d - hr[j] * mean_dh);
                    }
                }
                accum(grads, *x, Tensor::new(vec![m, n], dx)?);
                accum(grads, *gain, Tensor::new(self.value(*gain).shape().to_vec(), dg)?);
                accum(grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (dq, dk, dv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, g)?;
                accum(grads, *q, dq);
                accum(grads, *k, dk);
                accum(grads, *v, dv);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let (_, n) = src.dims2()?;
                let mut d = Tensor::zeros(src.shape());
                d.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                accum(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let count = self.value(*p).numel();
                    let d = Tensor::new(shape, g.data()[offset..offset + count].to_vec())?;
                    offset += count;
                    accum(grads, *p, d);
                }
            }
            Op::GatherRows(table, rows) => {
                let t = self.value(*table);
                let (_, n) = t.dims2()?;
                let mut d = Tensor::zeros(t.shape());
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut d.data_mut()[r * n..(r + 1) * n];
                    for (a, b) in dst.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                        *a += b;
                    }
                }
                accum(grads, *table, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accum(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::Conv2d(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                accum(grads, *x, tensor::conv2d_grad_input(g, wv, xv.shape()));
                accum(grads, *w, tensor::conv2d_grad_weight(g, xv, wv.shape()));
            }
            Op::TConv2d(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                accum(grads, *x, tensor::tconv2d_grad_input(g, wv, xv.shape()));
                accum(grads, *w, tensor::tconv2d_grad_weight(g, xv, wv.shape()));
            }
            Op::SigmoidBce { logits, target } => {
                let z = self.value(*logits);
                let s = g.data()[0] / z.numel() as f64;
                let data = z
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&zi, &yi)| s * (tensor::sigmoid(zi) - yi))
                    .collect();
                accum(grads, *logits, Tensor::new(z.shape().to_vec(), data)?);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = g.data()[0];
                let (_, n) = probs.dims2()?;
                let mut d = probs.map(|p| p * s);
                for (r, &t) in targets.iter().enumerate() {
                    d.data_mut()[r * n + t] -= s;
                }
                accum(grads, *logits, d);
            }
            Op::Dot(a, w) => {
                let s = g.data()[0];
                let shape = self.value(*a).shape().to_vec();
                accum(grads, *a, Tensor::new(shape, w.data().iter().map(|v| v * s).collect())?);
            }
            Op::AddScalars(parts) => {
                for p in parts {
                    accum(grads, *p, g.clone());
                }
            }
        }
        Ok(())
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn head_block(x: &Tensor, head: usize, dk: usize) -> Vec<f64> {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(m * dk);
    for i in 0..m {
        out.extend_from_slice(&x.data()[i * n + head * dk..i * n + (head + 1) * dk]);
    }
    out
}

/// Number of key rows visible to query row `t`.
#[inline]
fn visible(t: usize, rows_q: usize, rows_k: usize, causal: bool) -> usize {
    if causal {
        t + 1 + rows_k - rows_q
    } else {
        rows_k
    }
}

/// Forward multi-head attention, returning the concatenated head outputs and
/// the per-head attention weights.
pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, spec: AttnSpec) -> Result<(Tensor, Vec<Tensor>)> {
    let (tq, d) = q.dims2()?;
    let (sk, dk_all) = k.dims2()?;
    let (sv, dv_all) = v.dims2()?;
    if dk_all != d || dv_all != d || sk != sv {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    contract!(sk > 0, "attention over an empty key sequence");
    contract!(
        spec.heads > 0 && d % spec.heads == 0,
        "{} heads do not divide width {d}",
        spec.heads
    );
    contract!(
        !spec.causal || sk >= tq,
        "causal attention needs at least as many keys ({sk}) as queries ({tq})"
    );
    let dk = d / spec.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    let mut probs = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let qh = head_block(q, h, dk);
        let kh = head_block(k, h, dk);
        let vh = head_block(v, h, dk);
        let mut p = vec![0.0; tq * sk];
        for t in 0..tq {
            let vis = visible(t, tq, sk, spec.causal);
            let row = &mut p[t * sk..t * sk + vis];
            for (s, slot) in row.iter_mut().enumerate() {
                *slot = dot(&qh[t * dk..(t + 1) * dk], &kh[s * dk..(s + 1) * dk]) * scale;
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "attention logits" });
            }
            tensor::softmax_in_place(row);
            let orow = &mut out[t * d + h * dk..t * d + (h + 1) * dk];
            for (s, &w) in row.iter().enumerate() {
                for (o, &vv) in orow.iter_mut().zip(&vh[s * dk..(s + 1) * dk]) {
                    *o += w * vv;
                }
            }
        }
        probs.push(Tensor::new(vec![tq, sk], p)?);
    }
    Ok((Tensor::new(vec![tq, d], out)?.checked("attention")?, probs))
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[Tensor],
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (tq, d) = q.dims2()?;
    let sk = k.shape()[0];
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = vec![0.0; tq * d];
    let mut dkm = vec![0.0; sk * d];
    let mut dvm = vec![0.0; sk * d];
    for (h, ph) in probs.iter().enumerate() {
        let qh = head_block(q, h, dk);
        let kh = head_block(k, h, dk);
        let vh = head_block(v, h, dk);
        let gh = head_block(g, h, dk);
        let p = ph.data();
        for t in 0..tq {
            let go = &gh[t * dk..(t + 1) * dk];
            let prow = &p[t * sk..(t + 1) * sk];
            // dP[t,s] = go · v_s ; dS = P ⊙ (dP − Σ P dP)
            let mut dp = vec![0.0; sk];
            let mut inner = 0.0;
            for s in 0..sk {
                if prow[s] == 0.0 {
                    continue;
                }
                dp[s] = dot(go, &vh[s * dk..(s + 1) * dk]);
                inner += prow[s] * dp[s];
            }
            for s in 0..sk {
                let w = prow[s];
                if w == 0.0 {
                    continue;
                }
                // dV_s += P[t,s] · go
                let dvrow = &mut dvm[s * d + h * dk..s * d + (h + 1) * dk];
                for (a, &b) in dvrow.iter_mut().zip(go) {
                    *a += w * b;
                }
                let ds = w * (dp[s] - inner) * scale;
                let dqrow = &mut dq[t * d + h * dk..t * d + (h + 1) * dk];
                for (a, &b) in dqrow.iter_mut().zip(&kh[s * dk..(s + 1) * dk]) {
                    *a += ds * b;
                }
                let dkrow = &mut dkm[s * d + h * dk..s * d + (h + 1) * dk];
                for (a, &b) in dkrow.iter_mut().zip(&qh[t * dk..(t + 1) * dk]) {
                    *a += ds * b;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![tq, d], dq)?,
        Tensor::new(vec![sk, d], dkm)?,
        Tensor::new(vec![sk, d], dvm)?,
    ))
}

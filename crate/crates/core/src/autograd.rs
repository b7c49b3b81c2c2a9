//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op applied during a forward pass. Nodes that
//! depend on a trainable parameter are marked `requires_grad`; for those the
//! graph also records which intermediate values the backward pass will
//! read. That retained set is what a memory-frugal tape would keep alive,
//! and [`Graph::retained`] reports its size. Backward only ever reads
//! retained values (checked in debug builds), so the count is honest.
//!
//! Values that do not depend on a trainable parameter (frozen weights,
//! cached features) flow through the graph without retaining anything.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        store: u64,
        id: ParamId,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Option<Tensor>,
        rstd: Option<Vec<f64>>,
    },
    Gelu(Var),
    Transpose(Var),
    SplitHeads(Var),
    MergeHeads(Var, usize),
    SelectToken(Var, usize),
    PrependToken(Var, Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Option<Tensor>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: bool,
    retained: bool,
}

/// Size of the activation set kept alive for the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RetainedStats {
    pub tensors: usize,
    pub elements: usize,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    backward_done: bool,
    params: HashMap<(u64, ParamId), Var>,
    extra_tensors: usize,
    extra_elements: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that differentiates with respect to non-frozen parameters.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
            params: HashMap::new(),
            extra_tensors: 0,
            extra_elements: 0,
        }
    }

    /// A forward-only graph: every parameter is treated as a constant and
    /// nothing is retained.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Drops the recorded tape so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
        self.extra_tensors = 0;
        self.extra_elements = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn retained(&self) -> RetainedStats {
        let (mut tensors, mut elements) = (self.extra_tensors, self.extra_elements);
        for n in self.nodes.iter().filter(|n| n.retained) {
            tensors += 1;
            elements += n.value.numel();
        }
        RetainedStats { tensors, elements }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let param = matches!(op, Op::Param { .. });
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
            retained: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn retain(&mut self, v: Var) {
        let n = &mut self.nodes[v.0];
        if !n.param {
            n.retained = true;
        }
    }

    /// Value read by the backward pass; must have been retained.
    fn saved(&self, v: Var) -> &Tensor {
        let n = &self.nodes[v.0];
        debug_assert!(n.param || n.retained, "backward read an unretained value");
        &n.value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&(store.uid(), id)) {
            return v;
        }
        let p = store.get(id);
        let rg = self.grad_enabled && !p.frozen;
        let v = self.push_arc(Arc::clone(&p.value), Op::Param { store: store.uid(), id }, rg);
        self.params.insert((store.uid(), id), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let (ra, rb) = (self.rg(a), self.rg(b));
        if rb {
            self.retain(a);
        }
        if ra {
            self.retain(b);
        }
        Ok(self.push(out, Op::MatMul(a, b), ra || rb))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add_suffix(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a - b` where `b`'s shape is a suffix of `a`'s.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !tensor::is_suffix(va.shape(), vb.shape()) {
            return Err(Error::shape("sub", va.shape(), vb.shape()));
        }
        let n = vb.numel();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(vb.data()) {
                *o -= v;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let (ra, rb) = (self.rg(a), self.rg(b));
        if ra {
            self.retain(b);
        }
        if rb {
            self.retain(a);
        }
        Ok(self.push(out, Op::Mul(a, b), ra || rb))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = tensor::softmax_lastdim(self.value(a));
        let rg = self.rg(a);
        let v = self.push(out, Op::Softmax(a), rg);
        if rg {
            self.retain(v);
        }
        v
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let o = tensor::layer_norm_full(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (rx, rgm) = (self.rg(x), self.rg(gamma));
        let rg = rx || rgm || self.rg(beta);
        let xhat = if rx || rgm {
            self.extra_tensors += 1;
            self.extra_elements += o.xhat.numel();
            Some(o.xhat)
        } else {
            None
        };
        let rstd = if rx {
            self.extra_tensors += 1;
            self.extra_elements += o.rstd.len();
            self.retain(gamma);
            Some(o.rstd)
        } else {
            None
        };
        Ok(self.push(
            o.y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = tensor::gelu(self.value(a));
        let rg = self.rg(a);
        if rg {
            self.retain(a);
        }
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose_last2(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let out = tensor::split_heads(self.value(a), heads)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SplitHeads(a), rg))
    }

    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let heads = {
            let s = self.shape(a);
            if s.len() < 3 {
                return Err(Error::shape("merge_heads", s, &[]));
            }
            s[s.len() - 3]
        };
        let out = tensor::merge_heads(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MergeHeads(a, heads), rg))
    }

    /// Picks token `index` from `[.., L, d]`, giving `[.., d]`.
    pub fn select_token(&mut self, a: Var, index: usize) -> Result<Var> {
        let src = self.value(a);
        let r = src.rank();
        if r < 2 {
            return Err(Error::shape("select_token", src.shape(), &[index]));
        }
        let (l, d) = (src.shape()[r - 2], src.shape()[r - 1]);
        if index >= l {
            return Err(Error::Index { index, len: l });
        }
        let data: Vec<f64> = src
            .data()
            .chunks(l * d)
            .flat_map(|c| c[index * d..(index + 1) * d].iter().copied())
            .collect();
        let mut shape = src.shape()[..r - 2].to_vec();
        shape.push(d);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SelectToken(a, index), rg))
    }

    /// Prepends the `[d]` vector `token` to every `[L, d]` slice of `a`.
    pub fn prepend_token(&mut self, a: Var, token: Var) -> Result<Var> {
        let (src, tok) = (self.value(a), self.value(token));
        let r = src.rank();
        if r < 2 || tok.shape() != [src.last_dim()] {
            return Err(Error::shape("prepend_token", src.shape(), tok.shape()));
        }
        let (l, d) = (src.shape()[r - 2], src.shape()[r - 1]);
        let mut data = Vec::with_capacity(src.numel() + src.numel() / l);
        for c in src.data().chunks(l * d) {
            data.extend_from_slice(tok.data());
            data.extend_from_slice(c);
        }
        let mut shape = src.shape().to_vec();
        shape[r - 2] = l + 1;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(token);
        Ok(self.push(out, Op::PrependToken(a, token), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean cross-entropy of `[B, C]` (or `[C]`) logits against class
    /// labels, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        if lv.rows() != labels.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let probs = tensor::softmax_lastdim(lv);
        let mut total = 0.0;
        for (row, &label) in lv.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(logits);
        let probs = if rg {
            self.extra_tensors += 1;
            self.extra_elements += probs.numel();
            Some(probs)
        } else {
            None
        };
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Runs the reverse pass from a scalar loss and returns the gradients of
    /// every trainable parameter reached. Frozen parameters get none.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.rg(loss) {
            return Ok(Gradients::default());
        }
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));

        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param { store, id } => out.entries.push((*store, *id, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let plan = tensor::matmul_plan(&sa, &sb)?;
                let (m, k, p) = (plan.m, plan.k, plan.p);
                if self.rg(*a) {
                    let bv = self.saved(*b);
                    let mut ga = vec![0.0; sa.iter().product()];
                    for (bi, (&ia, &ib)) in plan.a_map.iter().zip(&plan.b_map).enumerate() {
                        tensor::gemm_nt_acc(
                            &g.data()[bi * m * p..(bi + 1) * m * p],
                            &bv.data()[ib * k * p..(ib + 1) * k * p],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            k,
                            p,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(sa, ga)?);
                }
                if self.rg(*b) {
                    let av = self.saved(*a);
                    let mut gb = vec![0.0; sb.iter().product()];
                    for (bi, (&ia, &ib)) in plan.a_map.iter().zip(&plan.b_map).enumerate() {
                        tensor::gemm_tn_acc(
                            &av.data()[ia * m * k..(ia + 1) * m * k],
                            &g.data()[bi * m * p..(bi + 1) * m * p],
                            &mut gb[ib * k * p..(ib + 1) * k * p],
                            m,
                            k,
                            p,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(sb, gb)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.rg(*b) {
                    let sb = self.shape(*b).to_vec();
                    let n: usize = sb.iter().product();
                    let mut gb = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(chunk) {
                            *o += sign * v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(sb, gb)?);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let gb = g.zip_map(self.saved(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, gb);
                }
                if self.rg(*b) {
                    let ga = g.zip_map(self.saved(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Softmax(a) => {
                let y = self.saved(Var(i));
                let n = y.last_dim();
                let mut gx = g.into_data();
                for (gr, yr) in gx.chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = g.last_dim();
                if self.rg(*beta) {
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *beta, Tensor::new(vec![d], gb)?);
                }
                if self.rg(*gamma) {
                    let xh = xhat.as_ref().expect("xhat kept when gamma trains");
                    let mut gg = vec![0.0; d];
                    for (row, hrow) in g.data().chunks(d).zip(xh.data().chunks(d)) {
                        for ((o, v), h) in gg.iter_mut().zip(row).zip(hrow) {
                            *o += v * h;
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![d], gg)?);
                }
                if self.rg(*x) {
                    let xh = xhat.as_ref().expect("xhat kept when x trains");
                    let rs = rstd.as_ref().expect("rstd kept when x trains");
                    let gm = self.saved(*gamma).data();
                    let mut gx = vec![0.0; g.numel()];
                    let df = d as f64;
                    for (r, ((grow, hrow), orow)) in g
                        .data()
                        .chunks(d)
                        .zip(xh.data().chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let gy = grow[j] * gm[j];
                            s1 += gy;
                            s2 += gy * hrow[j];
                        }
                        for j in 0..d {
                            let gy = grow[j] * gm[j];
                            orow[j] = rs[r] / df * (df * gy - s1 - hrow[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                }
            }
            Op::Gelu(a) => {
                let xv = self.saved(*a);
                let gx = g.zip_map(xv, |gv, x| gv * tensor::gelu_grad_scalar(x))?;
                self.accumulate(grads, *a, gx);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, tensor::transpose_last2(&g)?);
            }
            Op::SplitHeads(a) => {
                self.accumulate(grads, *a, tensor::merge_heads(&g)?);
            }
            Op::MergeHeads(a, heads) => {
                self.accumulate(grads, *a, tensor::split_heads(&g, *heads)?);
            }
            Op::SelectToken(a, index) => {
                let sa = self.shape(*a).to_vec();
                let r = sa.len();
                let (l, d) = (sa[r - 2], sa[r - 1]);
                let mut ga = vec![0.0; sa.iter().product()];
                for (dst, src) in ga.chunks_mut(l * d).zip(g.data().chunks(d)) {
                    dst[index * d..(index + 1) * d].copy_from_slice(src);
                }
                self.accumulate(grads, *a, Tensor::new(sa, ga)?);
            }
            Op::PrependToken(a, token) => {
                let sa = self.shape(*a).to_vec();
                let r = sa.len();
                let (l, d) = (sa[r - 2], sa[r - 1]);
                let mut ga = Vec::with_capacity(sa.iter().product());
                let mut gt = vec![0.0; d];
                for chunk in g.data().chunks((l + 1) * d) {
                    for (o, v) in gt.iter_mut().zip(&chunk[..d]) {
                        *o += v;
                    }
                    ga.extend_from_slice(&chunk[d..]);
                }
                self.accumulate(grads, *token, Tensor::new(vec![d], gt)?);
                self.accumulate(grads, *a, Tensor::new(sa, ga)?);
            }
            Op::Sum(a) => {
                let s = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&s, g.item()));
            }
            Op::Mean(a) => {
                let s = self.shape(*a).to_vec();
                let n: usize = s.iter().product();
                self.accumulate(grads, *a, Tensor::full(&s, g.item() / n as f64));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let p = probs.as_ref().expect("probs kept when logits train");
                let c = p.last_dim();
                let scale = g.item() / labels.len() as f64;
                let mut gl = p.data().to_vec();
                for (row, &label) in gl.chunks_mut(c).zip(labels) {
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(p.shape().to_vec(), gl)?);
            }
        }
        Ok(())
    }
}

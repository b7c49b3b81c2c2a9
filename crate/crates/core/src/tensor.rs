//! Dense row-major `f64` tensors and the forward kernels the autograd graph
//! builds on.
//!
//! Every kernel here is a pure function of its inputs. Gradients live in
//! [`crate::autograd`]; nothing in this module records history.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidTensor(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor from a nested-row literal, mostly for tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of last-dimension slices.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Rounds every value through `f32`, the at-rest precision of weight and
    /// cache files.
    pub fn round_to_f32(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, treating the tensors as raw `f64` bit patterns.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Slice `index` along the leading axis.
    pub fn index_first(&self, index: usize) -> Result<Tensor> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::InvalidTensor("cannot index a scalar".into()))?;
        if index >= lead {
            return Err(Error::Index { index, len: lead });
        }
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let stride: usize = inner.iter().product();
        let data = self.data[index * stride..(index + 1) * stride].to_vec();
        Ok(Tensor {
            shape: if inner.is_empty() { Vec::new() } else { inner },
            data,
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidTensor("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Flat batch-offset maps for two operands whose batch dims broadcast
/// numpy-style. Returns the output batch shape and, per output batch
/// element, the batch index into `a` and into `b`.
pub(crate) fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return None;
        }
    }
    let total: usize = out.iter().product();
    let mut a_map = Vec::with_capacity(total);
    let mut b_map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..rank {
            ia = ia * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            ib = ib * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        a_map.push(ia);
        b_map.push(ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((out, a_map, b_map))
}

pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub out_shape: Vec<usize>,
    pub a_map: Vec<usize>,
    pub b_map: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (batch, a_map, b_map) =
        broadcast_batch(&a[..a.len() - 2], &b[..b.len() - 2]).ok_or_else(|| Error::shape("matmul", a, b))?;
    let mut out_shape = batch;
    out_shape.extend_from_slice(&[m, p]);
    Ok(MatmulPlan {
        m,
        k,
        p,
        out_shape,
        a_map,
        b_map,
    })
}

/// `c += a @ b` for row-major `m×k` and `k×p` slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a @ bᵀ` where `a` is `m×p` and `b` is `k×p`; `c` is `m×k`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..k {
            let brow = &b[j * p..(j + 1) * p];
            c[i * k + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ @ b` where `a` is `m×k` and `b` is `m×p`; `c` is `k×p`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Batched matrix product `[.., M, K] @ [.., K, P] -> [.., M, P]` with
/// broadcasting over the batch dims.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, p) = (plan.m, plan.k, plan.p);
    let mut out = vec![0.0; plan.out_shape.iter().product()];
    for (bi, (&ia, &ib)) in plan.a_map.iter().zip(&plan.b_map).enumerate() {
        gemm_acc(
            &a.data[ia * m * k..(ia + 1) * m * k],
            &b.data[ib * k * p..(ib + 1) * k * p],
            &mut out[bi * m * p..(bi + 1) * m * p],
            m,
            k,
            p,
        );
    }
    Tensor::new(plan.out_shape, out)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) struct LayerNormOut {
    pub y: Tensor,
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_full(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<LayerNormOut> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let mut y = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(x.rows());
    for row in x.data.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.push(h);
            y.push(h * gamma.data[j] + beta.data[j]);
        }
    }
    Ok(LayerNormOut {
        y: Tensor::new(x.shape.clone(), y)?,
        xhat: Tensor::new(x.shape.clone(), xhat)?,
        rstd,
    })
}

/// Per-token layer normalisation over the last dimension with an affine
/// `gamma`/`beta` pair; `eps` is added to the variance inside the root.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_full(x, gamma, beta, eps).map(|o| o.y)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact GELU, `x·Φ(x)` with Φ the standard normal CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Swaps the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::shape("transpose", x.shape(), &[]));
    }
    let (m, n) = (x.shape[r - 2], x.shape[r - 1]);
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

/// `[.., L, H·w] -> [.., H, L, w]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || heads == 0 || !x.last_dim().is_multiple_of(heads) {
        return Err(Error::shape("split_heads", x.shape(), &[heads]));
    }
    let (l, width) = (x.shape[r - 2], x.shape[r - 1]);
    let w = width / heads;
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data.chunks(l * width).zip(out.chunks_mut(l * width)) {
        for t in 0..l {
            for h in 0..heads {
                let s = &src[t * width + h * w..t * width + (h + 1) * w];
                dst[(h * l + t) * w..(h * l + t + 1) * w].copy_from_slice(s);
            }
        }
    }
    let mut shape = x.shape[..r - 2].to_vec();
    shape.extend_from_slice(&[heads, l, w]);
    Tensor::new(shape, out)
}

/// Inverse of [`split_heads`]: `[.., H, L, w] -> [.., L, H·w]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 3 {
        return Err(Error::shape("merge_heads", x.shape(), &[]));
    }
    let (heads, l, w) = (x.shape[r - 3], x.shape[r - 2], x.shape[r - 1]);
    let width = heads * w;
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data.chunks(l * width).zip(out.chunks_mut(l * width)) {
        for h in 0..heads {
            for t in 0..l {
                let s = &src[(h * l + t) * w..(h * l + t + 1) * w];
                dst[t * width + h * w..t * width + (h + 1) * w].copy_from_slice(s);
            }
        }
    }
    let mut shape = x.shape[..r - 3].to_vec();
    shape.extend_from_slice(&[l, width]);
    Tensor::new(shape, out)
}

/// Elementwise `a + b` where `b`'s shape equals a suffix of `a`'s shape
/// (covers bias vectors and positional tables).
pub fn add_suffix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !is_suffix(a.shape(), b.shape()) {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let n = b.numel();
    let mut out = a.data.clone();
    for chunk in out.chunks_mut(n) {
        for (o, &v) in chunk.iter_mut().zip(&b.data) {
            *o += v;
        }
    }
    Tensor::new(a.shape.clone(), out)
}

pub(crate) fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Cuts `[.., C, H, W]` images into non-overlapping `p×p` patches, giving
/// `[.., (H/p)·(W/p), C·p·p]` with patches in raster order and each patch
/// flattened channel-major.
pub fn unfold_patches(images: &Tensor, patch: usize) -> Result<Tensor> {
    let r = images.rank();
    if r < 3 || patch == 0 {
        return Err(Error::shape("unfold", images.shape(), &[patch]));
    }
    let (c, h, w) = (images.shape[r - 3], images.shape[r - 2], images.shape[r - 1]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("unfold", images.shape(), &[patch]));
    }
    let (gh, gw) = (h / patch, w / patch);
    let per = c * patch * patch;
    let mut out = Vec::with_capacity(images.numel());
    for img in images.data.chunks(c * h * w) {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for y in 0..patch {
                        let row = (ch * h + py * patch + y) * w + px * patch;
                        out.extend_from_slice(&img[row..row + patch]);
                    }
                }
            }
        }
    }
    let mut shape = images.shape[..r - 3].to_vec();
    shape.extend_from_slice(&[gh * gw, per]);
    Tensor::new(shape, out)
}

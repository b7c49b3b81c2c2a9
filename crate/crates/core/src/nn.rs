//! Layer building blocks shared by the backbone and the side network.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};

/// Layer-norm epsilon used everywhere in the crate.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub fn linear(g: &mut Graph, store: &ParamStore, x: Var, ids: LinearIds) -> Result<Var> {
    let w = g.param(store, ids.weight);
    let b = g.param(store, ids.bias);
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn norm(g: &mut Graph, store: &ParamStore, x: Var, ids: NormIds) -> Result<Var> {
    let gamma = g.param(store, ids.gamma);
    let beta = g.param(store, ids.beta);
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Multi-head scaled dot-product attention on already projected
/// `[.., L, w]` queries, keys and values. Each head has width `w / heads`
/// and its scores are scaled by `1/√(w / heads)`. Returns the concatenated
/// heads, `[.., L, w]`, without any output projection.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let width = *g.shape(q).last().unwrap_or(&1);
    let head_width = width / heads.max(1);
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (head_width as f64).sqrt());
    let probs = g.softmax(scores);
    let out = g.matmul(probs, vh)?;
    g.merge_heads(out)
}

/// Deterministic generator for one purpose (`stream`) under a seed.
pub fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Normal(0, std) samples redrawn outside ±3·std, rounded to `f32` so the
/// weights survive the on-disk format unchanged.
pub fn trunc_normal(rng: &mut impl rand::Rng, shape: &[usize], std: f64) -> crate::tensor::Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 3.0 {
                break (z * std) as f32 as f64;
            }
        })
        .collect();
    crate::tensor::Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}

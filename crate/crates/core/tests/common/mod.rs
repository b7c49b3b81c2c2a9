//! Test helpers: finite differences and loop-based reference
//! implementations written independently of the library kernels.
#![allow(dead_code)]

use last_core::autograd::{Graph, Var};
use last_core::backbone::BackboneConfig;
use last_core::nn;
use last_core::param::{ParamId, ParamStore};
use last_core::side::SideConfig;
use last_core::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng64 = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    nn::seeded_rng(seed, 0x7E57)
}

pub fn randn(rng: &mut Rng64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Standard normal values rounded to `f32`, as taps are stored.
pub fn randn_f32(rng: &mut Rng64, shape: &[usize]) -> Tensor {
    randn(rng, shape).round_to_f32()
}

pub fn uniform(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a floor on the denominator so that exactly-zero
/// gradients are compared absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest entrywise relative error between the analytic gradient of
/// `loss` and central differences with step `h`, over every trainable
/// parameter of `store`. `loss` records the scalar loss on a fresh graph.
pub fn gradcheck(store: &mut ParamStore, h: f64, loss: impl Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    gradcheck_with(store, |s| s, |s| s, h, loss)
}

/// [`gradcheck`] for a model that owns its parameter store.
pub fn gradcheck_with<S>(
    state: &mut S,
    store: impl Fn(&S) -> &ParamStore,
    store_mut: impl Fn(&mut S) -> &mut ParamStore,
    h: f64,
    loss: impl Fn(&mut Graph, &S) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let l = loss(&mut g, state);
    let grads = g.backward(l).unwrap();
    let eval = |state: &S| {
        let mut g = Graph::inference();
        let l = loss(&mut g, state);
        g.value(l).item()
    };
    let ids: Vec<ParamId> = store(state)
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty(), "nothing to check");
    let mut worst: f64 = 0.0;
    for id in ids {
        let base = store(state).value(id).clone();
        let analytic = grads
            .get(store(state), id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        for e in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[e] += h;
            store_mut(state).set_value(id, plus);
            let fp = eval(state);
            let mut minus = base.clone();
            minus.data_mut()[e] -= h;
            store_mut(state).set_value(id, minus);
            let fm = eval(state);
            store_mut(state).set_value(id, base.clone());
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}

/// `sum(w ⊙ x)` on the graph, for turning tensor outputs into scalar
/// losses with non-degenerate gradients.
pub fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Var {
    let wv = g.constant(w.clone());
    let p = g.mul(x, wv).unwrap();
    g.sum(p)
}

// ---- loop references -------------------------------------------------------

pub fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(|r| r.to_vec()).collect()
}

pub fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn linear_ref(x: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| {
                    let mut s = 0.0;
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w[i][j];
                    }
                    s + b[j]
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm_ref(x: &[Vec<f64>], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

/// Multi-head attention on projected `q, k, v` (`[L, w]`), scale
/// `1/sqrt(w/heads)`, heads concatenated.
pub fn attention_ref(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let l = q.len();
    let w = q[0].len();
    let hw = w / heads;
    let scale = 1.0 / (hw as f64).sqrt();
    let mut out = vec![vec![0.0; w]; l];
    for h in 0..heads {
        let cols = h * hw..(h + 1) * hw;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..l).map(|j| exps[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

pub fn add_ref(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Parameter value as nested rows (2-D) or a flat vector (1-D).
pub fn pmat(store: &ParamStore, name: &str) -> Vec<Vec<f64>> {
    mat(store.value(store.find(name).unwrap_or_else(|| panic!("no param {name}"))))
}

pub fn pvec(store: &ParamStore, name: &str) -> Vec<f64> {
    vec_of(store.value(store.find(name).unwrap_or_else(|| panic!("no param {name}"))))
}

/// Randomises every parameter of `store` (normal, std `std`), including
/// the ones initialised to zero or one.
pub fn scramble(store: &mut ParamStore, rng: &mut Rng64, std: f64) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let t = randn(rng, &shape).map(|v| v * std);
        store.set_value(id, t);
    }
}

// ---- toy configurations ----------------------------------------------------

/// Backbone matching the gradient-check toy: `d = 8`, `N = 4`, two heads.
/// Image fields only matter when the backbone itself runs.
pub fn toy_backbone(depth: usize) -> BackboneConfig {
    BackboneConfig {
        depth,
        width: 8,
        heads: 2,
        patch_size: 4,
        image_size: 8,
        ..BackboneConfig::default()
    }
}

pub fn toy_side(classes: usize) -> SideConfig {
    SideConfig {
        gap: 2,
        stack: 2,
        rank: 4,
        heads: 2,
        num_classes: classes,
        ..SideConfig::default()
    }
}

pub fn toy_frozen(depth: usize, seed: u64) -> last_core::backbone::Backbone {
    let w = last_core::backbone::ViTWeights::init_synthetic(&toy_backbone(depth), seed).unwrap();
    last_core::backbone::Backbone::new(w)
}

/// `synth-cls` at toy image size with `train + eval` samples.
pub fn toy_dataset(train: usize, eval: usize, classes: usize, seed: u64) -> last_core::data::Dataset {
    let config = last_core::data::SynthConfig {
        num_classes: classes,
        train,
        eval,
        ..Default::default()
    };
    last_core::data::synth_cls(&config, &toy_backbone(4), seed).unwrap()
}

pub fn sha256_file(path: &std::path::Path) -> String {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).unwrap();
    format!("{:x}", Sha256::digest(&bytes))
}

mod common;

use common::*;
use last_core::autograd::Graph;
use last_core::backbone::{self, Backbone, BackboneConfig, TapSchedule, ViTWeights};
use last_core::error::Error;
use last_core::tensor::{self, Tensor};

fn scrambled(config: &BackboneConfig, seed: u64) -> ViTWeights {
    let mut w = ViTWeights::init_synthetic(config, seed).unwrap();
    scramble(w.params_mut(), &mut rng(seed), 0.3);
    w
}

/// Per-patch loop: gather channel-major patch vectors, project, prepend
/// the class token, add positions.
fn patch_embed_ref(image: &Tensor, w: &ViTWeights) -> Vec<Vec<f64>> {
    let c = w.config();
    let (p, s) = (c.patch_size, c.image_size);
    let grid = s / p;
    let px = |ch: usize, y: usize, x: usize| image.data()[ch * s * s + y * s + x];
    let weight = pmat(w.params(), "patch_embed.weight");
    let bias = pvec(w.params(), "patch_embed.bias");
    let mut tokens = Vec::new();
    if c.class_token {
        tokens.push(pvec(w.params(), "cls_token"));
    }
    for gy in 0..grid {
        for gx in 0..grid {
            let mut v = Vec::new();
            for ch in 0..c.channels {
                for y in 0..p {
                    for x in 0..p {
                        v.push(px(ch, gy * p + y, gx * p + x));
                    }
                }
            }
            tokens.push(linear_ref(&[v], &weight, &bias).remove(0));
        }
    }
    add_ref(&tokens, &pmat(w.params(), "pos_embed"))
}

fn mhsa_ref(x: &[Vec<f64>], w: &ViTWeights, block: usize) -> Vec<Vec<f64>> {
    let p = w.params();
    let lin = |x: &[Vec<f64>], name: &str| {
        linear_ref(
            x,
            &pmat(p, &format!("blocks.{block}.{name}.weight")),
            &pvec(p, &format!("blocks.{block}.{name}.bias")),
        )
    };
    let (q, k, v) = (lin(x, "attn.q"), lin(x, "attn.k"), lin(x, "attn.v"));
    let heads = attention_ref(&q, &k, &v, w.config().heads);
    lin(&heads, "attn.o")
}

fn block_ref(x: &[Vec<f64>], w: &ViTWeights, block: usize) -> Vec<Vec<f64>> {
    let p = w.params();
    let ln = |x: &[Vec<f64>], name: &str| {
        layer_norm_ref(
            x,
            &pvec(p, &format!("blocks.{block}.{name}.gamma")),
            &pvec(p, &format!("blocks.{block}.{name}.beta")),
            1e-6,
        )
    };
    let lin = |x: &[Vec<f64>], name: &str| {
        linear_ref(
            x,
            &pmat(p, &format!("blocks.{block}.{name}.weight")),
            &pvec(p, &format!("blocks.{block}.{name}.bias")),
        )
    };
    let x = add_ref(x, &mhsa_ref(&ln(x, "ln1"), w, block));
    let h: Vec<Vec<f64>> = lin(&ln(&x, "ln2"), "mlp.fc1")
        .into_iter()
        .map(|r| r.into_iter().map(tensor::gelu_scalar).collect())
        .collect();
    add_ref(&x, &lin(&h, "mlp.fc2"))
}

#[test]
fn sixteen_pixel_image_with_class_token_has_17_tokens() {
    let w = ViTWeights::init_synthetic(&BackboneConfig::default(), 0).unwrap();
    let img = randn(&mut rng(0), &[3, 16, 16]);
    let z0 = backbone::patch_embed(&img, &w).unwrap();
    assert_eq!(z0.shape(), &[17, 32]);
}

#[test]
fn zero_image_with_zero_positions_gives_bias_tokens() {
    let config = BackboneConfig::default();
    let mut w = ViTWeights::init_synthetic(&config, 1).unwrap();
    let mut r = rng(1);
    let bias_id = w.params().find("patch_embed.bias").unwrap();
    let pos_id = w.pos_id();
    let bias = randn(&mut r, &[32]);
    w.params_mut().set_value(bias_id, bias.clone());
    w.params_mut().set_value(pos_id, Tensor::zeros(&[17, 32]));
    let z0 = backbone::patch_embed(&Tensor::zeros(&[3, 16, 16]), &w).unwrap();
    let cls = pvec(w.params(), "cls_token");
    let rows = mat(&z0);
    assert_eq!(rows[0], cls);
    for row in &rows[1..] {
        assert_eq!(row.as_slice(), bias.data());
    }
}

#[test]
fn patch_embedding_matches_per_patch_loop() {
    for (class_token, seed) in [(true, 2), (false, 3)] {
        let config = BackboneConfig {
            class_token,
            ..BackboneConfig::default()
        };
        let w = scrambled(&config, seed);
        let img = randn(&mut rng(seed), &[3, 16, 16]);
        let z0 = backbone::patch_embed(&img, &w).unwrap();
        assert!(max_diff(&mat(&z0), &patch_embed_ref(&img, &w)) < 1e-12);
    }
}

#[test]
fn wrong_image_size_is_shape_error() {
    let w = ViTWeights::init_synthetic(&BackboneConfig::default(), 0).unwrap();
    let err = backbone::patch_embed(&Tensor::zeros(&[3, 12, 12]), &w).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn single_token_attention_is_value_then_output_projection() {
    let config = BackboneConfig {
        width: 4,
        heads: 2,
        ..BackboneConfig::default()
    };
    let w = scrambled(&config, 4);
    let x = randn(&mut rng(4), &[1, 4]);
    let y = backbone::mhsa(&x, &w, 0).unwrap();
    let p = w.params();
    let v = linear_ref(
        &mat(&x),
        &pmat(p, "blocks.0.attn.v.weight"),
        &pvec(p, "blocks.0.attn.v.bias"),
    );
    let o = linear_ref(&v, &pmat(p, "blocks.0.attn.o.weight"), &pvec(p, "blocks.0.attn.o.bias"));
    assert!(max_diff(&mat(&y), &o) < 1e-14);
}

#[test]
fn mhsa_matches_explicit_loops() {
    let config = BackboneConfig {
        width: 4,
        heads: 2,
        ..BackboneConfig::default()
    };
    for seed in [5, 6, 7] {
        let w = scrambled(&config, seed);
        let x = randn(&mut rng(seed), &[3, 4]);
        let y = backbone::mhsa(&x, &w, 1).unwrap();
        assert!(max_diff(&mat(&y), &mhsa_ref(&mat(&x), &w, 1)) < 1e-12);
    }
}

#[test]
fn one_head_equals_single_head_reference() {
    let config = BackboneConfig {
        width: 4,
        heads: 1,
        ..BackboneConfig::default()
    };
    let w = scrambled(&config, 8);
    let x = randn(&mut rng(8), &[5, 4]);
    let y = backbone::mhsa(&x, &w, 0).unwrap();
    let p = w.params();
    let lin = |x: &[Vec<f64>], n: &str| {
        linear_ref(
            x,
            &pmat(p, &format!("blocks.0.attn.{n}.weight")),
            &pvec(p, &format!("blocks.0.attn.{n}.bias")),
        )
    };
    let xs = mat(&x);
    let (q, k, v) = (lin(&xs, "q"), lin(&xs, "k"), lin(&xs, "v"));
    // plain single-head softmax(QK^T/sqrt(d))V written without head slicing
    let mut a = vec![vec![0.0; 4]; 5];
    for i in 0..5 {
        let s: Vec<f64> = (0..5)
            .map(|j| (0..4).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 2.0)
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..4 {
            a[i][c] = (0..5).map(|j| e[j] / z * v[j][c]).sum();
        }
    }
    assert!(max_diff(&mat(&y), &lin(&a, "o")) < 1e-12);
}

#[test]
fn tap_counts_and_shapes() {
    let config = BackboneConfig::default();
    let bb = Backbone::new(ViTWeights::init_synthetic(&config, 0).unwrap());
    let img = randn(&mut rng(0), &[3, 16, 16]);
    for (gap, count) in [(1, 5), (2, 3), (4, 2)] {
        let taps = bb.forward_with_taps(&img, TapSchedule::new(gap, 4).unwrap()).unwrap();
        assert_eq!(taps.len(), count);
        assert!(taps.iter().all(|t| t.shape() == [17, 32]));
    }
    assert!(matches!(TapSchedule::new(3, 4), Err(Error::Config(_))));
}

#[test]
fn coarse_taps_are_fine_taps_at_shared_boundaries() {
    let config = BackboneConfig::default();
    let w = scrambled(&config, 9);
    let bb = Backbone::new(w.clone());
    let imgs = randn(&mut rng(9), &[2, 3, 16, 16]);
    let fine = bb.forward_with_taps(&imgs, TapSchedule::new(1, 4).unwrap()).unwrap();
    let coarse = bb.forward_with_taps(&imgs, TapSchedule::new(2, 4).unwrap()).unwrap();
    for (i, z) in coarse.iter().enumerate() {
        assert!(z.bit_eq(&fine[2 * i]));
    }
    // block-by-block composition through the public block op
    let mut g = Graph::inference();
    let mut x = w.embed(&mut g, &imgs).unwrap();
    assert!(g.value(x).bit_eq(&fine[0]));
    for b in 0..4 {
        x = w.block(&mut g, x, b).unwrap();
        assert!(g.value(x).bit_eq(&fine[b + 1]));
    }
}

#[test]
fn blocks_match_loop_reference() {
    let config = BackboneConfig {
        width: 8,
        heads: 2,
        depth: 2,
        ..BackboneConfig::default()
    };
    let w = scrambled(&config, 10);
    let img = randn(&mut rng(10), &[3, 16, 16]);
    let taps = Backbone::new(w.clone())
        .forward_with_taps(&img, TapSchedule::new(1, 2).unwrap())
        .unwrap();
    let mut x = patch_embed_ref(&img, &w);
    for b in 0..2 {
        x = block_ref(&x, &w, b);
        assert!(max_diff(&mat(&taps[b + 1]), &x) < 1e-10, "block {b}");
    }
}

#[test]
fn frozen_forward_retains_nothing() {
    let w = ViTWeights::init_synthetic(&BackboneConfig::default(), 0).unwrap();
    let mut g = Graph::new();
    let img = randn(&mut rng(0), &[2, 3, 16, 16]);
    let taps = w.forward_graph(&mut g, &img, TapSchedule::new(2, 4).unwrap()).unwrap();
    assert_eq!(taps.len(), 3);
    assert_eq!(g.retained().elements, 0);
    assert!(taps.iter().all(|&t| !g.requires_grad(t)));
}

#[test]
fn init_is_seeded_and_frozen() {
    let config = BackboneConfig::default();
    let a = ViTWeights::init_synthetic(&config, 1).unwrap();
    let b = ViTWeights::init_synthetic(&config, 1).unwrap();
    let c = ViTWeights::init_synthetic(&config, 2).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    assert!(a.params().iter().all(|(_, p)| p.frozen));
}

#[test]
fn init_std_within_ten_percent() {
    let config = BackboneConfig::default();
    let w = ViTWeights::init_synthetic(&config, 3).unwrap();
    let vals: Vec<f64> = w
        .params()
        .iter()
        .filter(|(_, p)| p.name.ends_with(".weight"))
        .flat_map(|(_, p)| p.value.data().to_vec())
        .collect();
    assert!(vals.len() >= 10_000);
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std / config.init_std - 1.0).abs() < 0.1, "std {std}");
}

#[test]
fn weights_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.lastw");
    let w = ViTWeights::init_synthetic(&BackboneConfig::default(), 4).unwrap();
    w.save(&path).unwrap();
    let back = ViTWeights::load(&path).unwrap();
    assert_eq!(back.checksum(), w.checksum());
    assert_eq!(back.config(), w.config());
    assert_eq!(&std::fs::read(&path).unwrap()[..6], b"LASTW\0");
}

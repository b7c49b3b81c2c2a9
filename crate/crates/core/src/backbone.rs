//! Frozen pre-LN Vision Transformer used forward-only as a feature
//! extractor.
//!
//! Each block is `x + MHSA(LN(x))` followed by `x + FFN(LN(x))` with a
//! `d → 4d → d` GELU feed-forward. Taps are the raw token maps after the
//! patch embedding (`z_0`) and after every `gap`-th block; no final norm is
//! applied.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, LinearIds, NormIds};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};
use crate::weights::{self, BACKBONE_MAGIC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Prepend a learned class token (position 0).
    pub class_token: bool,
    pub mlp_ratio: usize,
    pub init_std: f64,
}

impl Default for BackboneConfig {
    /// The desk-scale toy backbone: 16×16×3 images, 4×4 patches, 17 tokens.
    fn default() -> Self {
        BackboneConfig {
            depth: 4,
            width: 32,
            heads: 4,
            patch_size: 4,
            image_size: 16,
            channels: 3,
            class_token: true,
            mlp_ratio: 4,
            init_std: 0.02,
        }
    }
}

impl BackboneConfig {
    /// ViT-B/16 at 224×224 (197 tokens).
    pub fn vit_b16() -> Self {
        BackboneConfig {
            depth: 12,
            width: 768,
            heads: 12,
            patch_size: 16,
            image_size: 224,
            channels: 3,
            class_token: true,
            mlp_ratio: 4,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.patch_size == 0 {
            return bad("backbone depth, width, heads and patch_size must be positive".into());
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return bad("backbone channels and mlp_ratio must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "backbone width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("backbone init_std must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Tokens per image, class token included.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.width
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// Parameters per transformer block.
    pub fn block_params(&self) -> usize {
        let (d, h) = (self.width, self.hidden());
        4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    }

    /// Parameters of the whole backbone, no classification head.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        self.patch_dim() * d
            + d
            + usize::from(self.class_token) * d
            + self.seq_len() * d
            + self.depth * self.block_params()
    }
}

/// Where taps are taken: after the patch embedding and after every `gap`-th
/// block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapSchedule {
    gap: usize,
    groups: usize,
}

impl TapSchedule {
    pub fn new(gap: usize, depth: usize) -> Result<Self> {
        if gap == 0 || !depth.is_multiple_of(gap) {
            return Err(Error::Config(format!("gap {gap} must divide backbone depth {depth}")));
        }
        Ok(TapSchedule {
            gap,
            groups: depth / gap,
        })
    }

    pub fn gap(&self) -> usize {
        self.gap
    }

    /// `m = N / g`.
    pub fn groups(&self) -> usize {
        self.groups
    }

    /// `m + 1` tensors: `z_0 .. z_m`.
    pub fn tap_count(&self) -> usize {
        self.groups + 1
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub ln1: NormIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub ln2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// Backbone parameters. Frozen after construction unless explicitly thawed
/// through [`ViTWeights::trainable_copy`].
#[derive(Clone, Debug)]
pub struct ViTWeights {
    config: BackboneConfig,
    params: ParamStore,
    patch: LinearIds,
    cls: Option<ParamId>,
    pos: ParamId,
    blocks: Vec<BlockIds>,
}

impl ViTWeights {
    /// Lays out every parameter, asking `fill(name, shape, is_projection)`
    /// for its value.
    fn build(config: &BackboneConfig, mut fill: impl FnMut(&str, &[usize], Kind) -> Result<Tensor>) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.width, config.hidden());
        let mut b = Builder {
            params: ParamStore::new(),
            fill: &mut fill,
        };
        let patch = b.linear("patch_embed", config.patch_dim(), d)?;
        let cls = if config.class_token {
            Some(b.add("cls_token".into(), &[d], Kind::Projection)?)
        } else {
            None
        };
        let pos = b.add("pos_embed".into(), &[config.seq_len(), d], Kind::Projection)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            blocks.push(BlockIds {
                ln1: b.norm(&format!("{p}.ln1"), d)?,
                q: b.linear(&format!("{p}.attn.q"), d, d)?,
                k: b.linear(&format!("{p}.attn.k"), d, d)?,
                v: b.linear(&format!("{p}.attn.v"), d, d)?,
                o: b.linear(&format!("{p}.attn.o"), d, d)?,
                ln2: b.norm(&format!("{p}.ln2"), d)?,
                fc1: b.linear(&format!("{p}.mlp.fc1"), d, h)?,
                fc2: b.linear(&format!("{p}.mlp.fc2"), h, d)?,
            });
        }
        let params = b.params;
        Ok(ViTWeights {
            config: config.clone(),
            params,
            patch,
            cls,
            pos,
            blocks,
        })
    }

    /// Deterministic synthetic weights: projections, class token and
    /// positional table from a normal with std `init_std` truncated at
    /// three standard deviations; biases zero; norm gains one. Every value
    /// is `f32`-representable so the weight file is lossless.
    pub fn init_synthetic(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = nn::seeded_rng(seed, 0xB0B);
        let std = config.init_std;
        Self::build(config, |_, shape, kind| {
            Ok(match kind {
                Kind::Projection => nn::trunc_normal(&mut rng, shape, std),
                Kind::Zero => Tensor::zeros(shape),
                Kind::One => Tensor::full(shape, 1.0),
            })
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[BlockIds] {
        &self.blocks
    }

    pub fn patch_ids(&self) -> LinearIds {
        self.patch
    }

    pub fn pos_id(&self) -> ParamId {
        self.pos
    }

    pub fn cls_id(&self) -> Option<ParamId> {
        self.cls
    }

    /// Copy with every parameter unfrozen, for full fine-tuning baselines.
    pub fn trainable_copy(&self) -> Self {
        let mut w = self.clone();
        w.params.set_frozen(false);
        w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_value(&self.config).expect("config serialises");
        let tensors: Vec<(&str, &Tensor)> = self.params.iter().map(|(_, p)| (p.name.as_str(), &*p.value)).collect();
        weights::encode(BACKBONE_MAGIC, &meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let file = weights::decode(bytes, BACKBONE_MAGIC, path)?;
        let config: BackboneConfig = serde_json::from_value(file.meta.clone())
            .map_err(|e| Error::format(path, format!("bad backbone config: {e}")))?;
        Self::build(&config, |name, _, _| {
            file.get(name)
                .cloned()
                .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialised weight file.
    pub fn checksum(&self) -> String {
        crate::io::sha256_hex(&self.to_bytes())
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let want = self.config.image_shape();
        let s = images.shape();
        if s.len() < 3 || s[s.len() - 3..] != want {
            return Err(Error::shape("patch_embed", s, &want));
        }
        Ok(())
    }

    /// Patch embedding on the graph: `[.., C, H, W] -> [.., L, d]`.
    pub fn embed(&self, g: &mut Graph, images: &Tensor) -> Result<Var> {
        self.check_images(images)?;
        let patches = tensor::unfold_patches(images, self.config.patch_size)?;
        let x = g.constant(patches);
        let mut x = nn::linear(g, &self.params, x, self.patch)?;
        if let Some(cls) = self.cls {
            let c = g.param(&self.params, cls);
            x = g.prepend_token(x, c)?;
        }
        let pos = g.param(&self.params, self.pos);
        g.add(x, pos)
    }

    /// Multi-head self-attention of `block` on already normalised tokens,
    /// including the output projection.
    pub fn attention(&self, g: &mut Graph, x: Var, block: usize) -> Result<Var> {
        let b = &self.blocks[block];
        let q = nn::linear(g, &self.params, x, b.q)?;
        let k = nn::linear(g, &self.params, x, b.k)?;
        let v = nn::linear(g, &self.params, x, b.v)?;
        let heads = nn::attention(g, q, k, v, self.config.heads)?;
        nn::linear(g, &self.params, heads, b.o)
    }

    pub fn block(&self, g: &mut Graph, x: Var, block: usize) -> Result<Var> {
        let b = self.blocks[block];
        let h = nn::norm(g, &self.params, x, b.ln1)?;
        let a = self.attention(g, h, block)?;
        let x = g.add(x, a)?;
        let h = nn::norm(g, &self.params, x, b.ln2)?;
        let h = nn::linear(g, &self.params, h, b.fc1)?;
        let h = g.gelu(h);
        let h = nn::linear(g, &self.params, h, b.fc2)?;
        g.add(x, h)
    }

    /// Full forward on the graph, returning the taps `z_0 .. z_m`.
    pub fn forward_graph(&self, g: &mut Graph, images: &Tensor, sched: TapSchedule) -> Result<Vec<Var>> {
        if sched.groups() * sched.gap() != self.config.depth {
            return Err(Error::Config(format!(
                "tap schedule gap {} does not fit depth {}",
                sched.gap(),
                self.config.depth
            )));
        }
        let mut x = self.embed(g, images)?;
        let mut taps = vec![x];
        for b in 0..self.config.depth {
            x = self.block(g, x, b)?;
            if (b + 1) % sched.gap() == 0 {
                taps.push(x);
            }
        }
        Ok(taps)
    }
}

struct Builder<'a, F> {
    params: ParamStore,
    fill: &'a mut F,
}

impl<F: FnMut(&str, &[usize], Kind) -> Result<Tensor>> Builder<'_, F> {
    fn add(&mut self, name: String, shape: &[usize], kind: Kind) -> Result<ParamId> {
        let t = (self.fill)(&name, shape, kind)?;
        if t.shape() != shape {
            return Err(Error::shape("backbone weight", shape, t.shape()));
        }
        Ok(self.params.add(name, t, true))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<LinearIds> {
        Ok(LinearIds {
            weight: self.add(format!("{name}.weight"), &[fan_in, fan_out], Kind::Projection)?,
            bias: self.add(format!("{name}.bias"), &[fan_out], Kind::Zero)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gamma: self.add(format!("{name}.gamma"), &[d], Kind::One)?,
            beta: self.add(format!("{name}.beta"), &[d], Kind::Zero)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Projection,
    Zero,
    One,
}

/// `z_0` for one image or a batch, with no gradient recording.
pub fn patch_embed(images: &Tensor, weights: &ViTWeights) -> Result<Tensor> {
    let mut g = Graph::inference();
    let v = weights.embed(&mut g, images)?;
    Ok(g.value(v).clone())
}

/// The attention sub-layer of `block` applied to `x` (no norm, no residual).
pub fn mhsa(x: &Tensor, weights: &ViTWeights, block: usize) -> Result<Tensor> {
    if x.last_dim() != weights.config.width {
        return Err(Error::shape("mhsa", x.shape(), &[weights.config.width]));
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let v = weights.attention(&mut g, xv, block)?;
    Ok(g.value(v).clone())
}

/// A frozen backbone plus a count of the images it has encoded.
#[derive(Debug)]
pub struct Backbone {
    weights: ViTWeights,
    checksum: String,
    forwards: AtomicUsize,
}

impl Backbone {
    pub fn new(weights: ViTWeights) -> Self {
        let checksum = weights.checksum();
        Backbone {
            weights,
            checksum,
            forwards: AtomicUsize::new(0),
        }
    }

    pub fn weights(&self) -> &ViTWeights {
        &self.weights
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.weights.config
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Images encoded so far, across all threads.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Runs `[C,H,W]` or `[B,C,H,W]` images through every block and returns
    /// the `m + 1` taps as plain tensors of shape `[.., L, d]`. Nothing is
    /// recorded for differentiation.
    pub fn forward_with_taps(&self, images: &Tensor, sched: TapSchedule) -> Result<Vec<Tensor>> {
        let mut g = Graph::inference();
        let taps = self.weights.forward_graph(&mut g, images, sched)?;
        let batch = images.numel() / self.weights.config.image_shape().iter().product::<usize>();
        self.forwards.fetch_add(batch, Ordering::Relaxed);
        Ok(taps.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

//! The trainable side network: a ladder of low-rank self-attention (LSA)
//! blocks fed by backbone taps, the residual bias correction, and the
//! classification head.
//!
//! With taps `z_0 .. z_m` the ladder is
//!
//! ```text
//! u_0 = F_0(z_0)            (or u_0 = z_0 when skip_block_zero)
//! h_i = u_{i-1} + z_i       for i = 1..m
//! u_i = F_i(h_i)
//! rep = u_m - (z_0 + .. + z_{m-1})     when bias_correction
//! ```
//!
//! where each `F_i` chains `T` modules. An LSA module is
//! `x + Up(MHSA_r(LN(x)A_Q, LN(x)A_K, LN(x)A_V))` with the attention run at
//! width `r` split into `heads` heads and no output projection.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{self, LinearIds, NormIds};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::weights::{self, SIDE_MAGIC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SideConfig {
    /// Backbone blocks per group, `g`.
    pub gap: usize,
    /// Modules per side block, `T`.
    pub stack: usize,
    /// Low-rank attention width `r`.
    pub rank: usize,
    pub heads: usize,
    pub bias_correction: bool,
    /// Include the low-rank attention sub-module in each module.
    pub attention: bool,
    /// Hidden width of an optional GELU feed-forward after each attention
    /// module.
    pub ffn_hidden: Option<usize>,
    pub num_classes: usize,
    /// Run `m` blocks (`F_1 .. F_m`) instead of one after every tap.
    pub skip_block_zero: bool,
    pub init_std: f64,
}

impl Default for SideConfig {
    fn default() -> Self {
        SideConfig {
            gap: 2,
            stack: 2,
            rank: 16,
            heads: 4,
            bias_correction: true,
            attention: true,
            ffn_hidden: None,
            num_classes: 2,
            skip_block_zero: true,
            init_std: 0.02,
        }
    }
}

impl SideConfig {
    pub fn head_width(&self) -> usize {
        self.rank / self.heads.max(1)
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        self.validate_for(backbone.width, backbone.depth)
    }

    /// Checks against a backbone of `width` and `depth`.
    pub fn validate_for(&self, width: usize, depth: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.gap == 0 || !depth.is_multiple_of(self.gap) {
            return bad(format!("gap {} must divide backbone depth {depth}", self.gap));
        }
        if self.stack == 0 {
            return bad("stack must be at least 1".into());
        }
        if self.attention {
            if self.rank == 0 || self.heads == 0 || !self.rank.is_multiple_of(self.heads) {
                return bad(format!(
                    "rank {} must be a positive multiple of heads {}",
                    self.rank, self.heads
                ));
            }
            if self.rank >= width {
                return bad(format!("rank {} must be below backbone width {width}", self.rank));
            }
        }
        if self.ffn_hidden == Some(0) {
            return bad("ffn_hidden must be positive when set".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("side init_std must be positive".into());
        }
        Ok(())
    }

    /// Number of side blocks that run for a backbone of `depth` blocks.
    pub fn block_count(&self, depth: usize) -> usize {
        let m = depth / self.gap.max(1);
        if self.skip_block_zero {
            m
        } else {
            m + 1
        }
    }

    /// Trainable scalars in one side module at width `d`.
    pub fn module_params(&self, d: usize) -> usize {
        let r = self.rank;
        let attn = if self.attention {
            2 * d + 3 * (d * r + r) + (r * d + d)
        } else {
            0
        };
        let ffn = self.ffn_hidden.map_or(0, |h| 2 * d + (d * h + h) + (h * d + d));
        attn + ffn
    }

    pub fn head_params(&self, d: usize) -> usize {
        2 * d + d * self.num_classes + self.num_classes
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self, backbone: &BackboneConfig, include_head: bool) -> usize {
        let d = backbone.width;
        let body = self.block_count(backbone.depth) * self.stack * self.module_params(d);
        body + if include_head { self.head_params(d) } else { 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub ln: NormIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub up: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub ln: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct ModuleIds {
    pub attn: Option<AttentionIds>,
    pub ffn: Option<FfnIds>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub ln: NormIds,
    pub fc: LinearIds,
}

#[derive(Serialize, Deserialize)]
struct SideMeta {
    side: SideConfig,
    width: usize,
    depth: usize,
}

/// Side-network weights and layout. All parameters are trainable.
#[derive(Clone, Debug)]
pub struct SideNetwork {
    config: SideConfig,
    width: usize,
    depth: usize,
    params: ParamStore,
    /// `blocks[j]` holds the modules of `F_{first_block + j}`.
    blocks: Vec<Vec<ModuleIds>>,
    head: HeadIds,
}

struct Builder<'a, F> {
    params: ParamStore,
    fill: &'a mut F,
}

#[derive(Clone, Copy)]
enum Kind {
    Projection,
    Zero,
    One,
}

impl<F: FnMut(&str, &[usize], Kind) -> Result<Tensor>> Builder<'_, F> {
    fn add(&mut self, name: String, shape: &[usize], kind: Kind) -> Result<ParamId> {
        let t = (self.fill)(&name, shape, kind)?;
        if t.shape() != shape {
            return Err(Error::shape("side weight", shape, t.shape()));
        }
        Ok(self.params.add(name, t, false))
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

impl SideNetwork {
    fn build(
        config: &SideConfig,
        d: usize,
        depth: usize,
        mut fill: impl FnMut(&str, &[usize], Kind) -> Result<Tensor>,
    ) -> Result<Self> {
        config.validate_for(d, depth)?;
        let r = config.rank;
        let mut b = Builder {
            params: ParamStore::new(),
            fill: &mut fill,
        };
        let first = usize::from(config.skip_block_zero);
        let m = depth / config.gap;
        let mut blocks = Vec::with_capacity(m + 1 - first);
        for i in first..=m {
            let mut modules = Vec::with_capacity(config.stack);
            for t in 0..config.stack {
                let p = format!("blocks.{i}.{t}");
                let attn = if config.attention {
                    Some(AttentionIds {
                        ln: b.norm(&format!("{p}.attn.ln"), d)?,
                        q: b.linear(&format!("{p}.attn.down_q"), d, r)?,
                        k: b.linear(&format!("{p}.attn.down_k"), d, r)?,
                        v: b.linear(&format!("{p}.attn.down_v"), d, r)?,
                        up: b.linear(&format!("{p}.attn.up"), r, d)?,
                    })
                } else {
                    None
                };
                let ffn = match config.ffn_hidden {
                    Some(h) => Some(FfnIds {
                        ln: b.norm(&format!("{p}.ffn.ln"), d)?,
                        fc1: b.linear(&format!("{p}.ffn.fc1"), d, h)?,
                        fc2: b.linear(&format!("{p}.ffn.fc2"), h, d)?,
                    }),
                    None => None,
                };
                modules.push(ModuleIds { attn, ffn });
            }
            blocks.push(modules);
        }
        let head = HeadIds {
            ln: b.norm("head.ln", d)?,
            fc: b.linear("head.fc", d, config.num_classes)?,
        };
        Ok(SideNetwork {
            config: config.clone(),
            width: d,
            depth,
            params: b.params,
            blocks,
            head,
        })
    }

    /// Random initialisation: every projection, including the `Up`
    /// projections and the head, is drawn from a normal with std
    /// `init_std` truncated at three standard deviations; biases are zero
    /// and norm gains one.
    pub fn init(config: &SideConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = nn::seeded_rng(seed, 0x51DE);
        let std = config.init_std;
        Self::build(config, backbone.width, backbone.depth, |_, shape, kind| {
            Ok(match kind {
                Kind::Projection => nn::trunc_normal(&mut rng, shape, std),
                Kind::Zero => Tensor::zeros(shape),
                Kind::One => Tensor::full(shape, 1.0),
            })
        })
    }

    pub fn config(&self) -> &SideConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// `m = N / g`.
    pub fn groups(&self) -> usize {
        self.depth / self.config.gap
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Ladder indices `i` of the blocks `F_i` that run.
    pub fn block_indices(&self) -> Range<usize> {
        let first = usize::from(self.config.skip_block_zero);
        first..self.groups() + 1
    }

    /// Modules of block `F_i`.
    pub fn block(&self, i: usize) -> &[ModuleIds] {
        let first = usize::from(self.config.skip_block_zero);
        &self.blocks[i - first]
    }

    pub fn head(&self) -> HeadIds {
        self.head
    }

    pub fn count_trainable_params(&self, include_head: bool) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen && (include_head || !p.name.starts_with("head.")))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Zeroes every `Up` projection and every feed-forward output layer,
    /// weights and biases, making each module the identity.
    pub fn zero_residual_branches(&mut self) {
        let ids: Vec<LinearIds> = self
            .blocks
            .iter()
            .flatten()
            .flat_map(|m| m.attn.map(|a| a.up).into_iter().chain(m.ffn.map(|f| f.fc2)))
            .collect();
        for l in ids {
            for id in [l.weight, l.bias] {
                let shape = self.params.value(id).shape().to_vec();
                self.params.set_value(id, Tensor::zeros(&shape));
            }
        }
    }

    /// Low-rank self-attention module: `x + Up(MHSA_r(LN(x)))`.
    pub fn lsa_module(&self, g: &mut Graph, x: Var, ids: &AttentionIds) -> Result<Var> {
        let p = &self.params;
        let h = nn::norm(g, p, x, ids.ln)?;
        let q = nn::linear(g, p, h, ids.q)?;
        let k = nn::linear(g, p, h, ids.k)?;
        let v = nn::linear(g, p, h, ids.v)?;
        let a = nn::attention(g, q, k, v, self.config.heads)?;
        let up = nn::linear(g, p, a, ids.up)?;
        g.add(x, up)
    }

    /// `x + W2(GELU(W1(LN(x))))`.
    pub fn ffn_module(&self, g: &mut Graph, x: Var, ids: &FfnIds) -> Result<Var> {
        let p = &self.params;
        let h = nn::norm(g, p, x, ids.ln)?;
        let h = nn::linear(g, p, h, ids.fc1)?;
        let h = g.gelu(h);
        let h = nn::linear(g, p, h, ids.fc2)?;
        g.add(x, h)
    }

    pub fn module(&self, g: &mut Graph, mut x: Var, ids: &ModuleIds) -> Result<Var> {
        if let Some(a) = &ids.attn {
            x = self.lsa_module(g, x, a)?;
        }
        if let Some(f) = &ids.ffn {
            x = self.ffn_module(g, x, f)?;
        }
        Ok(x)
    }

    /// `F_i`: the block's modules applied in sequence.
    pub fn lsa_block(&self, g: &mut Graph, mut x: Var, i: usize) -> Result<Var> {
        for ids in self.block(i) {
            x = self.module(g, x, ids)?;
        }
        Ok(x)
    }

    /// `u_m`, the final ladder output before any correction.
    pub fn ladder(&self, g: &mut Graph, taps: &[Var]) -> Result<Var> {
        let m = self.groups();
        if taps.len() != m + 1 {
            return Err(Error::Config(format!(
                "side network expects {} taps (gap {}), got {}",
                m + 1,
                self.config.gap,
                taps.len()
            )));
        }
        let mut u = taps[0];
        if !self.config.skip_block_zero {
            u = self.lsa_block(g, u, 0)?;
        }
        for (i, &z) in taps.iter().enumerate().skip(1) {
            let h = g.add(u, z)?;
            u = self.lsa_block(g, h, i)?;
        }
        Ok(u)
    }

    /// `u_m - (z_0 + .. + z_{m-1})`, the sum accumulated left to right.
    pub fn correct_bias(g: &mut Graph, u: Var, taps: &[Var]) -> Result<Var> {
        let Some((_, head)) = taps.split_last() else {
            return Ok(u);
        };
        let Some((&first, rest)) = head.split_first() else {
            return Ok(u);
        };
        let mut s = first;
        for &z in rest {
            s = g.add(s, z)?;
        }
        g.sub(u, s)
    }

    /// Token representation `[.., L, d]`, corrected when `correct` is set.
    pub fn represent(&self, g: &mut Graph, taps: &[Var], correct: bool) -> Result<Var> {
        let u = self.ladder(g, taps)?;
        if correct {
            Self::correct_bias(g, u, taps)
        } else {
            Ok(u)
        }
    }

    /// Representation with the configured bias-correction setting.
    pub fn forward(&self, g: &mut Graph, taps: &[Var]) -> Result<Var> {
        self.represent(g, taps, self.config.bias_correction)
    }

    /// LN then linear on the class token (position 0): `[.., C]` logits.
    pub fn classify(&self, g: &mut Graph, rep: Var) -> Result<Var> {
        let cls = g.select_token(rep, 0)?;
        let h = nn::norm(g, &self.params, cls, self.head.ln)?;
        nn::linear(g, &self.params, h, self.head.fc)
    }

    pub fn logits(&self, g: &mut Graph, taps: &[Var]) -> Result<Var> {
        let rep = self.forward(g, taps)?;
        self.classify(g, rep)
    }

    /// Gradient-free representation of plain tap tensors.
    pub fn represent_tensors(&self, taps: &[Tensor], correct: bool) -> Result<Tensor> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = taps.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.represent(&mut g, &vars, correct)?;
        Ok(g.value(out).clone())
    }

    /// Gradient-free logits of plain tap tensors.
    pub fn logits_tensors(&self, taps: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = taps.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.logits(&mut g, &vars)?;
        Ok(g.value(out).clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_value(SideMeta {
            side: self.config.clone(),
            width: self.width,
            depth: self.depth,
        })
        .expect("side meta serialises");
        let tensors: Vec<(&str, &Tensor)> = self.params.iter().map(|(_, p)| (p.name.as_str(), &*p.value)).collect();
        weights::encode(SIDE_MAGIC, &meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let file = weights::decode(bytes, SIDE_MAGIC, path)?;
        let meta: SideMeta = serde_json::from_value(file.meta.clone())
            .map_err(|e| Error::format(path, format!("bad side header: {e}")))?;
        Self::build(&meta.side, meta.width, meta.depth, |name, _, _| {
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
}

//! Analytic training-memory model.
//!
//! Memory is split into parameters, inputs, activations kept for the
//! backward pass, and Adam state. Activations follow the retention rules of
//! [`crate::autograd::Graph`]: an op keeps the operands its gradient needs
//! (the other factor of a product, its own softmax output, the input of a
//! GELU, the normalised input and reciprocal std of a layer norm, the class
//! probabilities of the loss) and nothing is kept for values that do not
//! depend on a trainable parameter. For a side network this means no
//! backbone internal is ever kept.
//!
//! Per sample, with `L` tokens of width `d`, `n` attention heads and the
//! classification head on `C` classes (`2d + C`, plus one reciprocal std
//! when its input trains):
//!
//! | strategy | per backbone block / side module |
//! |---|---|
//! | full | `16Ld + 2L + nL²` per block, plus the unfolded patches |
//! | bias_only | `9Ld + 2L + nL²` |
//! | entangled_lowrank (rank ρ on Q, V) | `10Ld + 2L + 2Lρ + nL²` |
//! | ladder_side (width `d_s`) | `Ld + 16L·d_s + 2L + nL²` |
//! | last, attention module | `2Ld + L + 4Lr + n_head·L²` |
//! | last, feed-forward module | `2Ld + L + 2Lh` |
//!
//! The first side module reads only backbone taps, so it keeps no
//! reciprocal std (`-L`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::side::SideConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Full,
    BiasOnly,
    EntangledLowrank,
    LadderSide,
    Last,
    LinearProbe,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Full,
        Strategy::BiasOnly,
        Strategy::EntangledLowrank,
        Strategy::LadderSide,
        Strategy::Last,
        Strategy::LinearProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::BiasOnly => "bias_only",
            Strategy::EntangledLowrank => "entangled_lowrank",
            Strategy::LadderSide => "ladder_side",
            Strategy::Last => "last",
            Strategy::LinearProbe => "linear_probe",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Strategy::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown strategy `{s}`; valid: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub batch: usize,
    pub dtype_bytes: usize,
    pub num_classes: usize,
    /// Rank of the low-rank updates on Q and V for `entangled_lowrank`.
    pub lowrank_rank: usize,
    /// `d / d_s` for `ladder_side`.
    pub ladder_reduction: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            batch: 32,
            dtype_bytes: 4,
            num_classes: 100,
            lowrank_rank: 8,
            ladder_reduction: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub strategy: Strategy,
    pub batch: usize,
    pub seq_len: usize,
    pub dtype_bytes: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    /// Activations kept for backward, one sample.
    pub activation_elements_per_sample: usize,
    /// Activations kept for backward, whole batch.
    pub activation_elements: usize,
    /// Model inputs held for the batch (images, or taps for side strategies).
    pub input_elements: usize,
    pub optimizer_state_elements: usize,
    pub total_elements: usize,
    pub activation_bytes: usize,
    pub total_bytes: usize,
}

fn head_activations(d: usize, classes: usize, input_trains: bool) -> usize {
    2 * d + classes + usize::from(input_trains)
}

fn head_params(d: usize, classes: usize) -> usize {
    2 * d + d * classes + classes
}

/// Side-network activations per sample for `side` on `arch`.
pub fn last_activations(arch: &BackboneConfig, side: &SideConfig, classes: usize) -> usize {
    let (l, d) = (arch.seq_len(), arch.width);
    let attn = if side.attention {
        2 * l * d + l + 4 * l * side.rank + side.heads * l * l
    } else {
        0
    };
    let ffn = side.ffn_hidden.map_or(0, |h| 2 * l * d + l + 2 * l * h);
    let modules = side.block_count(arch.depth) * side.stack;
    let per_module = attn + ffn;
    if modules == 0 || per_module == 0 {
        return head_activations(d, classes, false);
    }
    modules * per_module - l + head_activations(d, classes, true)
}

/// Closed-form footprint of training `arch` with `strategy`. `side` is
/// read only by [`Strategy::Last`].
pub fn estimate(
    arch: &BackboneConfig,
    side: &SideConfig,
    strategy: Strategy,
    mem: &MemoryConfig,
) -> Result<FootprintReport> {
    arch.validate()?;
    if mem.batch == 0 || mem.dtype_bytes == 0 || mem.num_classes == 0 {
        return Err(Error::Config(
            "memory batch, dtype_bytes and num_classes must be positive".into(),
        ));
    }
    let (n_blocks, l, d, n) = (arch.depth, arch.seq_len(), arch.width, arch.heads);
    let c = mem.num_classes;
    let backbone = arch.param_count();
    let image = arch.channels * arch.image_size * arch.image_size;
    let softmax = n * l * l;

    let (trainable, frozen, act, input) = match strategy {
        Strategy::Full => (
            backbone + head_params(d, c),
            0,
            arch.num_patches() * arch.patch_dim()
                + n_blocks * (16 * l * d + 2 * l + softmax)
                + head_activations(d, c, true),
            image,
        ),
        Strategy::BiasOnly => {
            // q, k, v, o and both MLP biases, both LN shifts, patch bias
            let biases = n_blocks * (4 * d + arch.hidden() + d + 2 * d) + d;
            (
                biases + head_params(d, c),
                backbone - biases,
                n_blocks * (9 * l * d + 2 * l + softmax) + head_activations(d, c, true),
                image,
            )
        }
        Strategy::EntangledLowrank => {
            let rho = mem.lowrank_rank;
            if rho == 0 {
                return Err(Error::Config("lowrank_rank must be positive".into()));
            }
            (
                n_blocks * 2 * (d * rho + rho * d) + head_params(d, c),
                backbone,
                n_blocks * (10 * l * d + 2 * l + 2 * l * rho + softmax) + head_activations(d, c, true),
                image,
            )
        }
        Strategy::LadderSide => {
            if mem.ladder_reduction == 0 || d % mem.ladder_reduction != 0 {
                return Err(Error::Config(format!(
                    "ladder_reduction {} must divide width {d}",
                    mem.ladder_reduction
                )));
            }
            let ds = d / mem.ladder_reduction;
            let side_block = BackboneConfig {
                width: ds,
                heads: 1,
                ..arch.clone()
            }
            .block_params();
            (
                n_blocks * (d * ds + ds + side_block) + head_params(ds, c),
                backbone,
                n_blocks * (l * d + 16 * l * ds + 2 * l + softmax) + head_activations(ds, c, true),
                (n_blocks + 1) * l * d,
            )
        }
        Strategy::Last => {
            side.validate(arch)?;
            let side = SideConfig {
                num_classes: c,
                ..side.clone()
            };
            (
                side.param_count(arch, true),
                backbone,
                last_activations(arch, &side, c),
                (arch.depth / side.gap + 1) * l * d,
            )
        }
        Strategy::LinearProbe => (head_params(d, c), backbone, head_activations(d, c, false), l * d),
    };

    let b = mem.batch;
    let optimizer = 2 * trainable;
    let total = trainable + frozen + b * act + b * input + optimizer;
    Ok(FootprintReport {
        strategy,
        batch: b,
        seq_len: l,
        dtype_bytes: mem.dtype_bytes,
        trainable_params: trainable,
        frozen_params: frozen,
        activation_elements_per_sample: act,
        activation_elements: b * act,
        input_elements: b * input,
        optimizer_state_elements: optimizer,
        total_elements: total,
        activation_bytes: b * act * mem.dtype_bytes,
        total_bytes: total * mem.dtype_bytes,
    })
}

/// One row of a [`compare`] table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub report: FootprintReport,
    /// Against the reference (full fine-tuning when present, else the first
    /// report).
    pub activation_ratio: f64,
    pub total_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: Strategy,
    /// Ordered by activation bytes, largest first; ties keep input order.
    pub rows: Vec<ComparisonRow>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        if a == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a as f64 / b as f64
    }
}

pub fn compare(reports: &[FootprintReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Config("compare needs at least two reports".into()));
    }
    let reference = reports
        .iter()
        .find(|r| r.strategy == Strategy::Full)
        .unwrap_or(&reports[0]);
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            report: r.clone(),
            activation_ratio: ratio(r.activation_bytes, reference.activation_bytes),
            total_ratio: ratio(r.total_bytes, reference.total_bytes),
        })
        .collect();
    rows.sort_by_key(|r| std::cmp::Reverse(r.report.activation_bytes));
    Ok(Comparison {
        reference: reference.strategy,
        rows,
    })
}

impl Comparison {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let header = [
            "strategy",
            "trainable",
            "frozen",
            "act/sample",
            "act MiB",
            "total MiB",
            "act ratio",
            "total ratio",
        ];
        let mib = |b: usize| format!("{:.1}", b as f64 / (1024.0 * 1024.0));
        let rows: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                let p = &r.report;
                [
                    p.strategy.to_string(),
                    p.trainable_params.to_string(),
                    p.frozen_params.to_string(),
                    p.activation_elements_per_sample.to_string(),
                    mib(p.activation_bytes),
                    mib(p.total_bytes),
                    format!("{:.3}", r.activation_ratio),
                    format!("{:.3}", r.total_ratio),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for r in &rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: Vec<&str>| -> String {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(header.to_vec());
        for r in &rows {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
        }
        out
    }
}

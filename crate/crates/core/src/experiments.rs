//! Ablation presets. Each preset is a two-axis grid of side configurations
//! derived from a base run; results are written as a long CSV (one row per
//! cell) and a wide accuracy matrix, optionally with an SVG chart.

use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::cache::TapSource;
use crate::error::{Error, Result};
use crate::plot;
use crate::side::SideConfig;
use crate::train::{self, RunResult, RunSpec, TrainConfig};

pub const PRESETS: [&str; 5] = ["gap-stack", "heads", "bias", "ffn", "stack"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChartKind {
    Line,
    Bar,
}

/// A grid of runs: `rows` are plotted as series, `cols` along the x axis.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub row_axis: &'static str,
    pub col_axis: &'static str,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major, `rows.len() * cols.len()` entries.
    pub cells: Vec<RunSpec>,
    pub chart: ChartKind,
}

fn unknown(name: &str) -> Error {
    Error::Config(format!(
        "unknown preset `{name}`; valid presets: {}",
        PRESETS.join(", ")
    ))
}

/// The preset's canonical name, or a configuration error listing them all.
pub fn check_name(name: &str) -> Result<&'static str> {
    PRESETS.into_iter().find(|&p| p == name).ok_or_else(|| unknown(name))
}

fn onoff(b: bool) -> String {
    if b { "on" } else { "off" }.to_string()
}

/// Builds the grid for `name` around `base`. Gaps that do not divide the
/// backbone depth or are not multiples of `cache_gap` are dropped; the
/// preset is rejected if that leaves an axis empty.
pub fn preset(
    name: &str,
    base: &SideConfig,
    train: &TrainConfig,
    seed: u64,
    backbone: &BackboneConfig,
    cache_gap: usize,
) -> Result<Preset> {
    let name = check_name(name)?;
    let d = backbone.width;
    let gaps: Vec<usize> = [1, 2, 4]
        .into_iter()
        .filter(|g| backbone.depth.is_multiple_of(*g) && g % cache_gap == 0)
        .collect();
    type Cell = Box<dyn Fn(&mut SideConfig, usize, usize)>;
    let (row_axis, col_axis, rows, cols, chart, set): (&str, &str, Vec<String>, Vec<String>, ChartKind, Cell) =
        match name {
            "gap-stack" => {
                let stacks = [1, 2];
                let g = gaps.clone();
                (
                    "stack",
                    "gap",
                    stacks.iter().map(|t| t.to_string()).collect(),
                    gaps.iter().map(|g| g.to_string()).collect(),
                    ChartKind::Line,
                    Box::new(move |c, r, k| {
                        c.stack = stacks[r];
                        c.gap = g[k];
                    }),
                )
            }
            "heads" => {
                let heads = [1, 2, 4];
                let per_head = [2, 4];
                (
                    "n_head",
                    "r_head",
                    heads.iter().map(|h| h.to_string()).collect(),
                    per_head.iter().map(|r| r.to_string()).collect(),
                    ChartKind::Line,
                    Box::new(move |c, r, k| {
                        c.heads = heads[r];
                        c.rank = heads[r] * per_head[k];
                    }),
                )
            }
            "bias" => {
                let g = gaps.clone();
                (
                    "bias_correction",
                    "gap",
                    vec![onoff(true), onoff(false)],
                    gaps.iter().map(|g| g.to_string()).collect(),
                    ChartKind::Line,
                    Box::new(move |c, r, k| {
                        c.bias_correction = r == 0;
                        c.gap = g[k];
                    }),
                )
            }
            "ffn" => {
                let hidden = [None, Some(d), Some(4 * d)];
                (
                    "attention",
                    "ffn_hidden",
                    vec![onoff(false), onoff(true)],
                    hidden
                        .iter()
                        .map(|h| h.map_or("none".to_string(), |h| h.to_string()))
                        .collect(),
                    ChartKind::Bar,
                    Box::new(move |c, r, k| {
                        c.attention = r == 1;
                        c.ffn_hidden = hidden[k];
                    }),
                )
            }
            "stack" => (
                "model",
                "stack",
                vec!["last".to_string()],
                (1..=5).map(|t: usize| t.to_string()).collect(),
                ChartKind::Line,
                Box::new(|c, _, k| c.stack = k + 1),
            ),
            _ => unreachable!("name checked against PRESETS"),
        };
    if cols.is_empty() {
        return Err(Error::Config(format!(
            "preset {name}: no gap in {{1, 2, 4}} divides depth {} and is a multiple of cache gap {cache_gap}",
            backbone.depth
        )));
    }
    let mut cells = Vec::with_capacity(rows.len() * cols.len());
    for (r, rv) in rows.iter().enumerate() {
        for (k, cv) in cols.iter().enumerate() {
            let mut side = base.clone();
            set(&mut side, r, k);
            side.validate(backbone)
                .map_err(|e| Error::Config(format!("preset {name} cell {row_axis}={rv}, {col_axis}={cv}: {e}")))?;
            if !side.gap.is_multiple_of(cache_gap) {
                return Err(Error::Config(format!(
                    "preset {name}: gap {} is not a multiple of cache gap {cache_gap}",
                    side.gap
                )));
            }
            cells.push(RunSpec {
                id: format!("{name}-{row_axis}{rv}-{col_axis}{cv}"),
                side,
                train: train.clone(),
                seed,
            });
        }
    }
    Ok(Preset {
        name,
        row_axis,
        col_axis,
        rows,
        cols,
        cells,
        chart,
    })
}

/// Completed preset, results in cell order.
pub struct PresetOutcome {
    pub preset: Preset,
    pub results: Vec<Result<RunResult>>,
}

pub fn run(preset: Preset, source: &dyn TapSource, concurrency: usize) -> PresetOutcome {
    let results = train::sweep(&preset.cells, source, concurrency);
    PresetOutcome { preset, results }
}

impl PresetOutcome {
    fn acc(&self, i: usize) -> Option<f64> {
        self.results[i].as_ref().ok().map(|r| r.final_acc())
    }

    /// One row per cell in grid order.
    pub fn long_csv(&self) -> String {
        let p = &self.preset;
        let mut out = format!(
            "{},{},run_id,status,trainable_params,final_loss,final_acc\n",
            p.row_axis, p.col_axis
        );
        for (r, rv) in p.rows.iter().enumerate() {
            for (k, cv) in p.cols.iter().enumerate() {
                let i = r * p.cols.len() + k;
                let line = match &self.results[i] {
                    Ok(res) => format!(
                        "{rv},{cv},{},ok,{},{},{}\n",
                        p.cells[i].id,
                        res.trainable_params,
                        res.final_loss(),
                        res.final_acc()
                    ),
                    Err(_) => format!("{rv},{cv},{},failed,,,\n", p.cells[i].id),
                };
                out.push_str(&line);
            }
        }
        out
    }

    /// Final accuracy matrix, rows by columns; failed cells are empty.
    pub fn grid_csv(&self) -> String {
        let p = &self.preset;
        let mut out = format!("{}\\{}", p.row_axis, p.col_axis);
        for c in &p.cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (r, rv) in p.rows.iter().enumerate() {
            out.push_str(rv);
            for k in 0..p.cols.len() {
                out.push(',');
                if let Some(a) = self.acc(r * p.cols.len() + k) {
                    out.push_str(&a.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn svg(&self) -> String {
        let p = &self.preset;
        let series: Vec<plot::Series> = p
            .rows
            .iter()
            .enumerate()
            .map(|(r, rv)| plot::Series {
                label: format!("{}={rv}", p.row_axis),
                values: (0..p.cols.len())
                    .map(|k| self.acc(r * p.cols.len() + k).unwrap_or(f64::NAN))
                    .collect(),
            })
            .collect();
        let chart = plot::Chart {
            title: format!("{} ablation", p.name),
            x_label: p.col_axis.to_string(),
            y_label: "eval accuracy".to_string(),
            x_ticks: p.cols.clone(),
            series,
        };
        match p.chart {
            ChartKind::Line => chart.line_svg(),
            ChartKind::Bar => chart.bar_svg(),
        }
    }

    /// Writes `<name>.csv`, `<name>_grid.csv` and, with `plot`,
    /// `<name>.svg` into `dir`. Returns the written paths.
    pub fn write(&self, dir: &Path, plot: bool) -> Result<Vec<PathBuf>> {
        let name = self.preset.name;
        let mut files = vec![
            (dir.join(format!("{name}.csv")), self.long_csv()),
            (dir.join(format!("{name}_grid.csv")), self.grid_csv()),
        ];
        if plot {
            files.push((dir.join(format!("{name}.svg")), self.svg()));
        }
        for (path, text) in &files {
            crate::io::write_atomic(path, text.as_bytes())?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(name: &str) -> Result<Preset> {
        preset(
            name,
            &SideConfig::default(),
            &TrainConfig::default(),
            0,
            &BackboneConfig::default(),
            1,
        )
    }

    #[test]
    fn grid_shapes() {
        for (name, rows, cols) in [
            ("gap-stack", 2, 3),
            ("heads", 3, 2),
            ("bias", 2, 3),
            ("ffn", 2, 3),
            ("stack", 1, 5),
        ] {
            let p = build(name).unwrap();
            assert_eq!((p.rows.len(), p.cols.len()), (rows, cols), "{name}");
            assert_eq!(p.cells.len(), rows * cols);
        }
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let err = build("table4").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        for p in PRESETS {
            assert!(err.to_string().contains(p));
        }
    }

    #[test]
    fn coarse_cache_drops_fine_gaps() {
        let p = preset(
            "bias",
            &SideConfig::default(),
            &TrainConfig::default(),
            0,
            &BackboneConfig::default(),
            2,
        )
        .unwrap();
        assert_eq!(p.cols, ["2", "4"]);
    }

    #[test]
    fn run_ids_are_unique() {
        for name in PRESETS {
            let p = build(name).unwrap();
            let mut ids: Vec<_> = p.cells.iter().map(|c| c.id.clone()).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), p.cells.len());
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use last_core::backbone::{Backbone, BackboneConfig, ViTWeights};
use last_core::cache::{self, ExtractStatus, FeatureCache, LiveSource, TapSource};
use last_core::config::RunConfig;
use last_core::data::{self, Dataset};
use last_core::error::{Error, Result};
use last_core::experiments;
use last_core::io::write_atomic;
use last_core::memory::{self, Strategy};
use last_core::side::SideConfig;
use last_core::train::{self, RunSpec};

#[derive(Parser)]
#[command(name = "last", version, about = "Low-rank attention side-tuning on a frozen ViT")]
struct Cli {
    /// JSON run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetically initialised backbone weights.
    InitBackbone {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synth-cls dataset into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the frozen backbone once over a dataset and cache its taps.
    Extract {
        #[arg(long)]
        data: PathBuf,
        /// Backbone weights; defaults to a fresh synthetic init from the seed.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one side network.
    Train {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured grid of side networks concurrently.
    Sweep {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "LAST_THREADS")]
        concurrency: Option<usize>,
    },
    /// Run an ablation preset and write its grid.
    Ablate {
        #[arg(long)]
        preset: String,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "LAST_THREADS")]
        concurrency: Option<usize>,
        /// Also write an SVG chart.
        #[arg(long)]
        plot: bool,
    },
    /// Linear probe, full fine-tuning and the configured side network.
    Baselines {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic training-memory footprint per strategy.
    EstimateMem {
        /// One strategy instead of all of them.
        #[arg(long)]
        strategy: Option<String>,
        /// Backbone depth; for `last` the side gap is rescaled to keep the
        /// number of groups fixed.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, value_enum, default_value_t = Arch::VitB16)]
        arch: Arch,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    /// ViT-B/16 at 224 pixels.
    VitB16,
    /// The `backbone` section of the configuration.
    Config,
}

#[derive(Args)]
struct SourceArgs {
    /// Cache directory written by `extract`.
    #[arg(long, required_unless_present = "live", conflicts_with = "live")]
    cache: Option<PathBuf>,
    /// Forward the backbone on every batch instead of reading a cache.
    #[arg(long, requires = "data")]
    live: bool,
    /// Dataset directory for `--live`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Backbone weights for `--live`.
    #[arg(long)]
    weights: Option<PathBuf>,
}

enum Source {
    Cache(FeatureCache),
    Live(Backbone, Dataset),
}

impl Source {
    fn open(args: &SourceArgs, config: &RunConfig) -> Result<Self> {
        match (&args.cache, &args.data) {
            (Some(dir), _) => Ok(Source::Cache(FeatureCache::open(dir)?)),
            (None, Some(data)) => {
                let backbone = load_backbone(args.weights.as_deref(), config)?;
                Ok(Source::Live(backbone, Dataset::load(data)?))
            }
            (None, None) => Err(Error::Config("need --cache or --live --data".into())),
        }
    }

    fn with<T>(&self, f: impl FnOnce(&dyn TapSource) -> T) -> T {
        match self {
            Source::Cache(c) => f(c),
            Source::Live(backbone, dataset) => f(&LiveSource { backbone, dataset }),
        }
    }

    fn cache_gap(&self) -> usize {
        match self {
            Source::Cache(c) => c.manifest().gap,
            Source::Live(..) => 1,
        }
    }
}

fn load_backbone(path: Option<&Path>, config: &RunConfig) -> Result<Backbone> {
    let weights = match path {
        Some(p) => ViTWeights::load(p)?,
        None => ViTWeights::init_synthetic(&config.backbone, config.seed)?,
    };
    Ok(Backbone::new(weights))
}

fn concurrency(flag: Option<usize>, config: &RunConfig) -> usize {
    flag.filter(|&c| c > 0)
        .or(Some(config.sweep.concurrency).filter(|&c| c > 0))
        .unwrap_or(1)
}

fn sweep_plan(config: &RunConfig) -> Vec<RunSpec> {
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let s = &config.sweep;
    let seeds = if s.seeds.is_empty() {
        vec![config.seed]
    } else {
        s.seeds.clone()
    };
    let mut plan = Vec::new();
    for &gap in &or(&s.gaps, config.side.gap) {
        for &stack in &or(&s.stacks, config.side.stack) {
            for &rank in &or(&s.ranks, config.side.rank) {
                for &heads in &or(&s.heads, config.side.heads) {
                    for &seed in &seeds {
                        plan.push(RunSpec {
                            id: format!("g{gap}-t{stack}-r{rank}-h{heads}-s{seed}"),
                            side: SideConfig {
                                gap,
                                stack,
                                rank,
                                heads,
                                ..config.side.clone()
                            },
                            train: config.train.clone(),
                            seed,
                        });
                    }
                }
            }
        }
    }
    plan
}

fn estimate_mem(
    config: &RunConfig,
    strategy: Option<&str>,
    depth: Option<usize>,
    arch: Arch,
    json: bool,
) -> Result<()> {
    let mut side = config.side.clone();
    let mut backbone = match arch {
        Arch::VitB16 => BackboneConfig::vit_b16(),
        Arch::Config => config.backbone.clone(),
    };
    if let Some(depth) = depth {
        let groups = backbone.depth / side.gap.max(1);
        if depth == 0 || depth % groups != 0 {
            return Err(Error::Config(format!(
                "--depth {depth} is not a multiple of the {groups} side groups"
            )));
        }
        side.gap = depth / groups;
        backbone.depth = depth;
    }
    let strategies = match strategy {
        Some(s) => vec![s.parse::<Strategy>()?],
        None => Strategy::ALL.to_vec(),
    };
    let reports = strategies
        .iter()
        .map(|&s| memory::estimate(&backbone, &side, s, &config.memory))
        .collect::<Result<Vec<_>>>()?;
    if json {
        let text = if reports.len() > 1 {
            serde_json::to_string_pretty(&memory::compare(&reports)?)
        } else {
            serde_json::to_string_pretty(&reports[0])
        };
        println!("{}", text.expect("reports serialise"));
    } else if reports.len() > 1 {
        print!("{}", memory::compare(&reports)?.to_text());
    } else {
        let r = &reports[0];
        println!("strategy                {}", r.strategy);
        println!("trainable params        {}", r.trainable_params);
        println!("frozen params           {}", r.frozen_params);
        println!("activations/sample      {}", r.activation_elements_per_sample);
        println!("activations (batch {})  {}", r.batch, r.activation_elements);
        println!("inputs                  {}", r.input_elements);
        println!("optimizer state         {}", r.optimizer_state_elements);
        println!("total elements          {}", r.total_elements);
        println!("total bytes             {}", r.total_bytes);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::InitBackbone { out } => {
            let w = ViTWeights::init_synthetic(&config.backbone, config.seed)?;
            w.save(&out)?;
            println!(
                "wrote {} ({} params, sha256 {})",
                out.display(),
                w.params().total_count(),
                w.checksum()
            );
        }
        Command::GenData { out } => {
            let d = data::synth_cls(&config.data, &config.backbone, config.seed)?;
            d.save(&out)?;
            println!("wrote {} samples to {}", d.len(), out.display());
        }
        Command::Extract { data, weights, out } => {
            let dataset = Dataset::load(&data)?;
            let backbone = load_backbone(weights.as_deref(), &config)?;
            let outcome = cache::extract(&dataset, &backbone, config.cache.gap, &out)?;
            if outcome.status == ExtractStatus::UpToDate {
                println!("cache up-to-date");
            }
            println!("samples {} bytes {}", outcome.manifest.samples, outcome.bytes);
        }
        Command::Train { source, out } => {
            let source = Source::open(&source, &config)?;
            let spec = RunSpec {
                id: "train".into(),
                side: config.side.clone(),
                train: config.train.clone(),
                seed: config.seed,
            };
            let result = source.with(|s| train::train(&spec, s))?;
            result.persist(&out)?;
            println!(
                "{} trainable params, final loss {:.6}, eval acc {:.4}",
                result.trainable_params,
                result.final_loss(),
                result.final_acc()
            );
        }
        Command::Sweep {
            source,
            out,
            concurrency: c,
        } => {
            let source = Source::open(&source, &config)?;
            let plan = sweep_plan(&config);
            let results = source.with(|s| train::sweep(&plan, s, concurrency(c, &config)));
            for r in results.iter().flatten() {
                r.persist(&out)?;
            }
            let summary = train::summary_csv(&plan, &results);
            write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
            print!("{summary}");
        }
        Command::Ablate {
            preset,
            source,
            out,
            concurrency: c,
            plot,
        } => {
            experiments::check_name(&preset)?;
            let source = Source::open(&source, &config)?;
            let backbone = source.with(|s| s.backbone_config().clone());
            let preset = experiments::preset(
                &preset,
                &config.side,
                &config.train,
                config.seed,
                &backbone,
                source.cache_gap(),
            )?;
            let outcome = source.with(|s| experiments::run(preset, s, concurrency(c, &config)));
            for path in outcome.write(&out, plot)? {
                println!("wrote {}", path.display());
            }
            print!("{}", outcome.grid_csv());
        }
        Command::Baselines { data, weights, out } => {
            let dataset = Dataset::load(&data)?;
            let backbone = load_backbone(weights.as_deref(), &config)?;
            let live = LiveSource {
                backbone: &backbone,
                dataset: &dataset,
            };
            let probe = train::linear_probe(&live, &config.train, config.seed)?;
            let side = train::train(
                &RunSpec {
                    id: "last".into(),
                    side: config.side.clone(),
                    train: config.train.clone(),
                    seed: config.seed,
                },
                &live,
            )?;
            let full = train::full_finetune(backbone.weights(), &dataset, &config.train, config.seed)?;
            let mut csv = String::from("method,trainable_params,retained_tensors,retained_elements,final_acc\n");
            for (name, log, params, retained) in [
                ("linear-probe", &probe.log, probe.trainable_params, probe.retained),
                ("last", &side.log, side.trainable_params, side.retained),
                ("full-finetune", &full.log, full.trainable_params, full.retained),
            ] {
                let acc = log.last().map_or(0.0, |m| m.acc);
                csv.push_str(&format!(
                    "{name},{params},{},{},{acc}\n",
                    retained.tensors, retained.elements
                ));
                write_atomic(&out.join(format!("{name}.jsonl")), train::metrics_jsonl(log).as_bytes())?;
            }
            write_atomic(&out.join("baselines.csv"), csv.as_bytes())?;
            print!("{csv}");
        }
        Command::EstimateMem {
            strategy,
            depth,
            arch,
            json,
        } => estimate_mem(&config, strategy.as_deref(), depth, arch, json)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

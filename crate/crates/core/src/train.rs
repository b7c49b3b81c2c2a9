//! Cross-entropy training with Adam, the concurrent sweep, and the linear
//! probe and full fine-tuning baselines.
//!
//! Every run is a pure function of its [`RunSpec`] and the tap source: the
//! side network, the shuffling generator and the optimizer are all seeded
//! from the run seed and owned by the run, so a sweep returns the same bits
//! at any concurrency.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RetainedStats, Var};
use crate::backbone::{TapSchedule, ViTWeights};
use crate::cache::TapSource;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{self, LinearIds, NormIds};
use crate::optim::{Adam, AdamConfig};
use crate::param::ParamStore;
use crate::side::{SideConfig, SideNetwork};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5EED;
const HEAD_STREAM: u64 = 0x4EAD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            epochs: 100,
            batch_size: 32,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::Config("Adam eps must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One side-network training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub id: String,
    pub side: SideConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub run_id: String,
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Accuracy on the eval split after the epoch.
    pub acc: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: RunSpec,
    pub log: Vec<EpochMetrics>,
    pub side: SideNetwork,
    pub trainable_params: usize,
    /// Tape retention of the first training step.
    pub retained: RetainedStats,
}

impl RunResult {
    pub fn final_acc(&self) -> f64 {
        self.log.last().map_or(0.0, |m| m.acc)
    }

    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |m| m.loss)
    }

    /// JSON-lines metric log.
    pub fn log_jsonl(&self) -> String {
        metrics_jsonl(&self.log)
    }

    /// Writes `<id>.lasts` and `<id>.jsonl` under `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        self.side.save(&dir.join(format!("{}.lasts", self.spec.id)))?;
        crate::io::write_atomic(
            &dir.join(format!("{}.jsonl", self.spec.id)),
            self.log_jsonl().as_bytes(),
        )
    }
}

pub fn metrics_jsonl(log: &[EpochMetrics]) -> String {
    log.iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialise") + "\n")
        .collect()
}

/// A model the training loop can drive.
trait Model {
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Records logits for the samples `indices` and returns their labels.
    fn logits(&self, g: &mut Graph, indices: &[usize]) -> Result<(Var, Vec<usize>)>;
}

struct SideModel<'a> {
    side: SideNetwork,
    source: &'a dyn TapSource,
}

impl Model for SideModel<'_> {
    fn params_mut(&mut self) -> &mut ParamStore {
        self.side.params_mut()
    }

    fn logits(&self, g: &mut Graph, indices: &[usize]) -> Result<(Var, Vec<usize>)> {
        let batch = self.source.load_batch(indices, self.side.config().gap)?;
        let taps: Vec<Var> = batch.taps.into_iter().map(|t| g.constant(t)).collect();
        Ok((self.side.logits(g, &taps)?, batch.labels))
    }
}

struct Fit {
    log: Vec<EpochMetrics>,
    retained: RetainedStats,
}

fn fit(
    model: &mut impl Model,
    run_id: &str,
    cfg: &TrainConfig,
    seed: u64,
    labels: &[usize],
    splits: &[Split],
) -> Result<Fit> {
    cfg.validate()?;
    let split = |s: Split| -> Vec<usize> { (0..labels.len()).filter(|&i| splits[i] == s).collect() };
    let train_ids = split(Split::Train);
    let eval_ids = split(Split::Eval);
    if train_ids.is_empty() || eval_ids.is_empty() {
        return Err(Error::Config("training needs non-empty train and eval splits".into()));
    }
    let mut rng = nn::seeded_rng(seed, SHUFFLE_STREAM);
    let mut adam = Adam::new(cfg.adam());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut retained = RetainedStats::default();
    for epoch in 1..=cfg.epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let (logits, labels) = model.logits(&mut g, chunk)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, step });
            }
            if epoch == 1 && step == 0 {
                retained = g.retained();
            }
            let grads = g.backward(loss)?;
            model.params_mut().absorb(&grads);
            adam.step(model.params_mut())?;
            total += value * chunk.len() as f64;
        }
        let acc = accuracy(model, &eval_ids, cfg.batch_size)?;
        log.push(EpochMetrics {
            run_id: run_id.to_string(),
            epoch,
            loss: total / train_ids.len() as f64,
            acc,
        });
    }
    Ok(Fit { log, retained })
}

fn accuracy(model: &impl Model, ids: &[usize], batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in ids.chunks(batch) {
        let mut g = Graph::inference();
        let (logits, labels) = model.logits(&mut g, chunk)?;
        let lv = g.value(logits);
        correct += lv
            .data()
            .chunks(lv.last_dim())
            .zip(&labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / ids.len() as f64)
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains one side network on `source`.
pub fn train(spec: &RunSpec, source: &dyn TapSource) -> Result<RunResult> {
    if spec.side.num_classes != source.num_classes() {
        return Err(Error::Config(format!(
            "run {} has {} classes, data has {}",
            spec.id,
            spec.side.num_classes,
            source.num_classes()
        )));
    }
    let side = SideNetwork::init(&spec.side, source.backbone_config(), spec.seed)?;
    let trainable_params = side.count_trainable_params(true);
    let mut model = SideModel { side, source };
    let fit = fit(
        &mut model,
        &spec.id,
        &spec.train,
        spec.seed,
        source.labels(),
        source.splits(),
    )?;
    Ok(RunResult {
        spec: spec.clone(),
        log: fit.log,
        side: model.side,
        trainable_params,
        retained: fit.retained,
    })
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Trains every run of `plan` on up to `concurrency` threads. Results come
/// back in plan order; a failed or panicking run yields an error in its
/// slot and leaves the others untouched.
pub fn sweep(plan: &[RunSpec], source: &dyn TapSource, concurrency: usize) -> Vec<Result<RunResult>> {
    let workers = concurrency.clamp(1, plan.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..plan.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(spec) = plan.get(i) else { break };
                let out = panic::catch_unwind(AssertUnwindSafe(|| train(spec, source))).unwrap_or_else(|p| {
                    Err(Error::Panicked {
                        id: spec.id.clone(),
                        msg: panic_message(p),
                    })
                });
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Summary CSV ranked by final eval accuracy (ties keep plan order);
/// failed runs are listed last.
pub fn summary_csv(plan: &[RunSpec], results: &[Result<RunResult>]) -> String {
    let mut order: Vec<usize> = (0..plan.len()).collect();
    let key = |i: &usize| match &results[*i] {
        Ok(r) => (0, -r.final_acc()),
        Err(_) => (1, 0.0),
    };
    order.sort_by(|a, b| key(a).partial_cmp(&key(b)).expect("accuracies are finite"));
    let mut out = String::from(
        "rank,run_id,status,gap,stack,rank_r,heads,bias_correction,attention,ffn_hidden,seed,trainable_params,final_loss,final_acc\n",
    );
    for (rank, &i) in order.iter().enumerate() {
        let s = &plan[i];
        let c = &s.side;
        let ffn = c.ffn_hidden.map_or(String::new(), |h| h.to_string());
        let (status, params, loss, acc) = match &results[i] {
            Ok(r) => (
                "ok".to_string(),
                r.trainable_params.to_string(),
                r.final_loss().to_string(),
                r.final_acc().to_string(),
            ),
            Err(e) => (
                csv_field(&format!("failed: {e}")),
                String::new(),
                String::new(),
                String::new(),
            ),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            rank + 1,
            csv_field(&s.id),
            status,
            c.gap,
            c.stack,
            c.rank,
            c.heads,
            c.bias_correction,
            c.attention,
            ffn,
            s.seed,
            params,
            loss,
            acc
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Side configuration equivalent to a linear probe: no modules, `m = 1`,
/// bias correction on, so the head reads the class token of `z_N`.
pub fn linear_probe_config(depth: usize, num_classes: usize) -> SideConfig {
    SideConfig {
        gap: depth,
        stack: 1,
        attention: false,
        ffn_hidden: None,
        bias_correction: true,
        num_classes,
        ..SideConfig::default()
    }
}

/// Head-only training on the class token of the last backbone tap.
pub fn linear_probe(source: &dyn TapSource, train: &TrainConfig, seed: u64) -> Result<RunResult> {
    let spec = RunSpec {
        id: "linear-probe".into(),
        side: linear_probe_config(source.backbone_config().depth, source.num_classes()),
        train: train.clone(),
        seed,
    };
    self::train(&spec, source)
}

/// A baseline that trains something other than a side network.
#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub name: String,
    pub log: Vec<EpochMetrics>,
    pub trainable_params: usize,
    pub retained: RetainedStats,
}

impl BaselineResult {
    pub fn final_acc(&self) -> f64 {
        self.log.last().map_or(0.0, |m| m.acc)
    }
}

struct FullModel<'a> {
    weights: ViTWeights,
    head_ln: NormIds,
    head_fc: LinearIds,
    dataset: &'a Dataset,
}

impl Model for FullModel<'_> {
    fn params_mut(&mut self) -> &mut ParamStore {
        self.weights.params_mut()
    }

    fn logits(&self, g: &mut Graph, indices: &[usize]) -> Result<(Var, Vec<usize>)> {
        let images = self.dataset.gather(indices)?;
        let depth = self.weights.config().depth;
        let taps = self
            .weights
            .forward_graph(g, &images, TapSchedule::new(depth, depth)?)?;
        let last = *taps.last().expect("at least one tap");
        let cls = g.select_token(last, 0)?;
        let p = self.weights.params();
        let h = nn::norm(g, p, cls, self.head_ln)?;
        let logits = nn::linear(g, p, h, self.head_fc)?;
        let labels = indices.iter().map(|&i| self.dataset.labels()[i]).collect();
        Ok((logits, labels))
    }
}

/// Every backbone parameter plus an LN + linear head on the final class
/// token, trained end to end with live forwards.
pub fn full_finetune(
    weights: &ViTWeights,
    dataset: &Dataset,
    train: &TrainConfig,
    seed: u64,
) -> Result<BaselineResult> {
    let mut w = weights.trainable_copy();
    let d = w.config().width;
    let c = dataset.num_classes();
    let mut rng = nn::seeded_rng(seed, HEAD_STREAM);
    let fc = nn::trunc_normal(&mut rng, &[d, c], w.config().init_std);
    let store = w.params_mut();
    let head_ln = NormIds {
        gamma: store.add("head.ln.gamma", Tensor::full(&[d], 1.0), false),
        beta: store.add("head.ln.beta", Tensor::zeros(&[d]), false),
    };
    let head_fc = LinearIds {
        weight: store.add("head.fc.weight", fc, false),
        bias: store.add("head.fc.bias", Tensor::zeros(&[c]), false),
    };
    let trainable_params = w.params().trainable_count();
    let mut model = FullModel {
        weights: w,
        head_ln,
        head_fc,
        dataset,
    };
    let fit = fit(
        &mut model,
        "full-finetune",
        train,
        seed,
        dataset.labels(),
        dataset.splits(),
    )?;
    Ok(BaselineResult {
        name: "full-finetune".into(),
        log: fit.log,
        trainable_params,
        retained: fit.retained,
    })
}

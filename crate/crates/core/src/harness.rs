//! Optimization, training, evaluation and the comparative experiment runners.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_dataset, make_zero_shot_splits, DataConfig, Dataset, Pulse, SplitSpec, Vocabulary};
use crate::decoder::{DecoderConfig, TaskMode};
use crate::encoder::{AttentionMode, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::{Bound, ParamStore};
use crate::metrics::{mean_ap, multilabel_accuracy, top1_accuracy, EvalBatch};
use crate::model::{ForwardOptions, ModelConfig, Msqnet, TextConfig};
use crate::query::{FrameEmbedderConfig, TextMode};
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update. `None` gradients (frozen or unreached
/// parameters) leave the parameter and its moments untouched. Nothing is
/// updated if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState, lr: f64, adam: &Adam) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (id, g) in store.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Contract(format!("gradient shape {:?} for {}", g.shape(), store.name(id))));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for parameter {}", store.name(id))));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for (i, (param, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + adam.eps);
        }
    }
    Ok(())
}

/// `lr0 · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let x = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Evaluate every this many epochs (0: only after training).
    pub eval_every: usize,
    pub threshold: f64,
    pub adam: Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 1e-3,
            batch_size: 8,
            clip_norm: Some(1.0),
            eval_every: 1,
            threshold: 0.5,
            adam: Adam::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be a finite non-negative number, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub map: f64,
    pub multilabel_accuracy: f64,
    /// Single-label runs only.
    pub top1: Option<f64>,
    /// `M×K` logits.
    pub scores: Tensor,
    pub truth: Tensor,
}

impl Evaluation {
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("map", self.map), ("multilabel_accuracy", self.multilabel_accuracy)];
        if let Some(t) = self.top1 {
            out.push(("top1_accuracy", t));
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scores every video of `ds` on its own class columns.
pub fn evaluate(model: &Msqnet, ds: &Dataset, threshold: f64, opts: ForwardOptions) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    let k = ds.classes.len();
    let mut scores = Vec::with_capacity(ds.len() * k);
    let mut tape = Tape::new();
    let p = model.bind_constants(&mut tape);
    let checkpoint = tape.len();
    for v in &ds.videos {
        tape.truncate(checkpoint);
        let f = model.forward(&mut tape, &p, &v.pixels, &ds.classes, opts)?;
        scores.extend_from_slice(tape.value(f.logits).data());
    }
    let scores = Tensor::new(vec![ds.len(), k], scores)?;
    let truth = ds.targets(&(0..ds.len()).collect::<Vec<_>>());
    let probs = match model.task() {
        TaskMode::MultiLabel => scores.map(sigmoid),
        TaskMode::SingleLabel => {
            let mut p = scores.clone();
            for r in p.data_mut().chunks_mut(k) {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                r.iter_mut().for_each(|x| *x = (*x - m).exp());
                let z: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= z);
            }
            p
        }
    };
    let batch = EvalBatch::new(scores.clone(), truth.clone())?;
    let top1 = match model.task() {
        TaskMode::SingleLabel => Some(top1_accuracy(&batch)?),
        TaskMode::MultiLabel => None,
    };
    Ok(Evaluation {
        map: mean_ap(&batch)?,
        multilabel_accuracy: multilabel_accuracy(&EvalBatch::new(probs, truth.clone())?, threshold, false),
        top1,
        scores,
        truth,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    /// Canonical sorted `key=value` pairs of the run configuration.
    pub config: Vec<(String, String)>,
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    pub final_eval: Option<Evaluation>,
    pub wall_clock_secs: f64,
    pub checksum: String,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// Line-oriented log: `# key=value` header, then `epoch,loss,name=value,…`.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config {
            writeln!(out, "# {k}={v}").expect("string write");
        }
        writeln!(out, "# config_hash={}", self.config_hash).expect("string write");
        for e in &self.epochs {
            write!(out, "{},{:.6}", e.epoch, e.loss).expect("string write");
            for (k, v) in &e.metrics {
                write!(out, ",{k}={v:.6}").expect("string write");
            }
            out.push('\n');
        }
        if let Some(ev) = &self.final_eval {
            write!(out, "# final").expect("string write");
            for (k, v) in ev.metrics() {
                write!(out, ",{k}={v:.6}").expect("string write");
            }
            out.push('\n');
        }
        writeln!(out, "# wall_clock_secs={:.3}", self.wall_clock_secs).expect("string write");
        writeln!(out, "# checksum={}", self.checksum).expect("string write");
        out
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Sorted dotted `key=value` pairs of any serializable config.
pub fn canonical_config<T: Serialize>(cfg: &T) -> Vec<(String, String)> {
    let mut out = Vec::new();
    flatten("", &serde_json::to_value(cfg).expect("config serializes"), &mut out);
    out.sort();
    out
}

pub fn config_hash(pairs: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in pairs {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Minibatch Adam with a per-step cosine schedule; evaluates `eval` every
/// `cfg.eval_every` epochs and once at the end.
pub fn train(
    model: &mut Msqnet,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
    config: Vec<(String, String)>,
) -> Result<RunRecord> {
    cfg.validate()?;
    if train_set.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let start = Instant::now();
    let opts = ForwardOptions::default();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5348_5546);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let videos: Vec<&Tensor> = batch.iter().map(|&i| &train_set.videos[i].pixels).collect();
            let targets = train_set.targets(batch);
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let loss = model.batch_loss(&mut tape, &p, &videos, &targets, &train_set.classes, opts)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                let seeds: Vec<u64> = batch.iter().map(|&i| train_set.videos[i].seed).collect();
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch} batch {b}, video seeds {seeds:?}")));
            }
            let g = tape.backward(loss)?;
            let mut grads: Vec<Option<Tensor>> = model.params.ids().map(|id| g.get(p[id]).cloned()).collect();
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            let lr = cosine_lr(epoch * steps_per_epoch + b, total, cfg.lr0);
            adam_step(&mut model.params, &grads, &mut state, lr, &cfg.adam)?;
            loss_sum += value * batch.len() as f64;
        }
        let mut metrics = Vec::new();
        if let Some(ev) = eval_set {
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && epoch + 1 < cfg.epochs {
                let e = evaluate(model, ev, cfg.threshold, opts)?;
                metrics = e.metrics().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            }
        }
        epochs.push(EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / train_set.len() as f64,
            metrics,
        });
    }
    let final_eval = match eval_set {
        Some(ev) => {
            let e = evaluate(model, ev, cfg.threshold, opts)?;
            if let Some(last) = epochs.last_mut() {
                last.metrics = e.metrics().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            }
            Some(e)
        }
        None => None,
    };
    let config_hash = config_hash(&config);
    Ok(RunRecord {
        config,
        config_hash,
        epochs,
        final_eval,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checksum: model.params.checksum(),
    })
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub classes: Vec<String>,
    pub n_train: usize,
    pub n_eval: usize,
    /// Drives initialization, data generation and batch order.
    pub seed: u64,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        let e = &self.model.encoder;
        if (e.frames, e.height, e.width) != (self.data.frames, self.data.height, self.data.width) {
            return Err(Error::Config(format!(
                "model expects {}×{}×{} videos, data produces {}×{}×{}",
                e.frames, e.height, e.width, self.data.frames, self.data.height, self.data.width
            )));
        }
        Vocabulary::new(&self.classes)?;
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(&self.classes)
    }

    /// Sets the clip length in both the model and the data.
    pub fn with_frames(mut self, frames: usize) -> Self {
        self.model.encoder.frames = frames;
        self.data.frames = frames;
        self
    }

    pub fn build_model(&self) -> Result<Msqnet> {
        Msqnet::new(&self.model, &self.classes, self.seed)
    }

    pub fn datasets(&self, split: &SplitSpec) -> Result<(Dataset, Dataset)> {
        build_dataset(&self.vocabulary()?, split, self.n_train, self.n_eval, &self.data, self.seed)
    }
}

/// A trained supervised run.
pub struct Outcome {
    pub model: Msqnet,
    pub record: RunRecord,
}

impl Outcome {
    pub fn map(&self) -> f64 {
        self.record.final_eval.as_ref().map_or(f64::NAN, |e| e.map)
    }
}

/// Builds data and model from `exp`, trains on all classes, evaluates.
pub fn run_supervised(exp: &Experiment) -> Result<Outcome> {
    exp.validate()?;
    let split = SplitSpec::supervised(exp.classes.len());
    let (train_set, eval_set) = exp.datasets(&split)?;
    let mut model = exp.build_model()?;
    let record = train(&mut model, &train_set, (exp.n_eval > 0).then_some(&eval_set), &exp.train, exp.seed, canonical_config(exp))?;
    Ok(Outcome { model, record })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: String,
    pub seed: u64,
    pub map: f64,
    pub multilabel_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: String,
    pub n: usize,
    pub mean_map: f64,
    pub std_map: f64,
    pub mean_multilabel_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub runs: Vec<CellResult>,
    pub summary: Vec<CellSummary>,
}

impl AblationReport {
    pub fn from_runs(runs: Vec<CellResult>) -> Self {
        let mut cells: Vec<String> = Vec::new();
        for r in &runs {
            if !cells.contains(&r.cell) {
                cells.push(r.cell.clone());
            }
        }
        let summary = cells
            .into_iter()
            .map(|cell| {
                let maps: Vec<f64> = runs.iter().filter(|r| r.cell == cell).map(|r| r.map).collect();
                let accs: Vec<f64> = runs.iter().filter(|r| r.cell == cell).map(|r| r.multilabel_accuracy).collect();
                let (mean_map, std_map) = mean_std(&maps);
                CellSummary {
                    cell,
                    n: maps.len(),
                    mean_map,
                    std_map,
                    mean_multilabel_accuracy: mean_std(&accs).0,
                }
            })
            .collect();
        Self { runs, summary }
    }

    pub fn cell(&self, name: &str) -> Option<&CellSummary> {
        self.summary.iter().find(|c| c.cell == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("cell,seed,map,multilabel_accuracy\n");
        for r in &self.runs {
            writeln!(out, "{},{},{:.6},{:.6}", r.cell, r.seed, r.map, r.multilabel_accuracy).expect("string write");
        }
        out.push_str("# cell,n,mean_map,std_map,mean_multilabel_accuracy\n");
        for c in &self.summary {
            writeln!(out, "# {},{},{:.6},{:.6},{:.6}", c.cell, c.n, c.mean_map, c.std_map, c.mean_multilabel_accuracy).expect("string write");
        }
        out
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

pub const ABLATION_FRAMES: [usize; 3] = [8, 10, 16];

/// Cell names of the ablation grid, in run order.
pub fn ablation_cells() -> Vec<String> {
    let mut cells = Vec::new();
    for mmq in [false, true] {
        for text in [false, true] {
            cells.push(format!("mmq={mmq},text_init={text}"));
        }
    }
    cells.extend(ABLATION_FRAMES.iter().map(|t| format!("frames={t}")));
    cells
}

/// The {MMQ × text-init} factorial plus the frame-count sweep, per seed.
pub fn ablation_suite(base: &Experiment, seeds: &[u64]) -> Result<AblationReport> {
    ablation_suite_with(base, seeds, &ABLATION_FRAMES)
}

pub fn ablation_suite_with(base: &Experiment, seeds: &[u64], frames: &[usize]) -> Result<AblationReport> {
    let mut runs = Vec::new();
    let mut push = |cell: String, seed: u64, o: Outcome| {
        let e = o.record.final_eval.expect("ablation runs evaluate");
        runs.push(CellResult {
            cell,
            seed,
            map: e.map,
            multilabel_accuracy: e.multilabel_accuracy,
        });
    };
    for &seed in seeds {
        for mmq in [false, true] {
            for text in [false, true] {
                let mut exp = base.clone();
                exp.seed = seed;
                exp.model.mmq = mmq;
                exp.model.text_init = text;
                push(format!("mmq={mmq},text_init={text}"), seed, run_supervised(&exp)?);
            }
        }
        for &t in frames {
            let mut exp = base.clone().with_frames(t);
            exp.seed = seed;
            push(format!("frames={t}"), seed, run_supervised(&exp)?);
        }
    }
    Ok(AblationReport::from_runs(runs))
}

/// mAP of `scores` against row-permuted `truth`, `n` times.
pub fn permutation_null(scores: &Tensor, truth: &Tensor, n: usize, seed: u64) -> Result<Vec<f64>> {
    let rows = truth.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..rows).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        order.shuffle(&mut rng);
        let mut data = Vec::with_capacity(truth.numel());
        for &r in &order {
            data.extend_from_slice(truth.row(r));
        }
        let permuted = Tensor::new(truth.shape().to_vec(), data)?;
        out.push(mean_ap(&EvalBatch::new(scores.clone(), permuted)?)?);
    }
    Ok(out)
}

/// Value at quantile `q` (nearest-rank on the sorted sample).
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let idx = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
    s[idx]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroShotVariant {
    /// Random label queries, no video cue.
    Vanilla,
    /// Text-initialized label queries, no video cue.
    TextInit,
    /// Text-initialized label queries fused with the video embedding.
    Full,
}

impl ZeroShotVariant {
    pub const ALL: [ZeroShotVariant; 3] = [ZeroShotVariant::Vanilla, ZeroShotVariant::TextInit, ZeroShotVariant::Full];

    pub fn apply(self, cfg: &mut ModelConfig) {
        let (mmq, text) = match self {
            ZeroShotVariant::Vanilla => (false, false),
            ZeroShotVariant::TextInit => (false, true),
            ZeroShotVariant::Full => (true, true),
        };
        cfg.mmq = mmq;
        cfg.text_init = text;
    }

    pub fn name(self) -> &'static str {
        match self {
            ZeroShotVariant::Vanilla => "vanilla",
            ZeroShotVariant::TextInit => "text_init",
            ZeroShotVariant::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShotResult {
    pub split: usize,
    pub variant: ZeroShotVariant,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub map: f64,
    pub null_mean: f64,
    pub null_p95: f64,
}

impl ZeroShotResult {
    pub fn beats_null(&self) -> bool {
        self.map > self.null_p95
    }

    pub fn to_text(&self) -> String {
        format!(
            "{}metric,value\nsplit,{}\nvariant,{}\nseen,{:?}\nunseen,{:?}\n",
            "",
            self.split,
            self.variant.name(),
            self.seen,
            self.unseen
        ) + &crate::metrics::format_report(&[("unseen_map", self.map), ("null_mean", self.null_mean), ("null_p95", self.null_p95)])
    }
}

/// Trains on seen classes, imputes unseen rows, scores unseen-only videos and
/// compares against a label-permutation null.
pub fn run_zero_shot_split(exp: &Experiment, split: &SplitSpec, index: usize, variant: ZeroShotVariant, null_samples: usize) -> Result<ZeroShotResult> {
    let mut exp = exp.clone();
    variant.apply(&mut exp.model);
    exp.validate()?;
    let (train_set, eval_set) = exp.datasets(split)?;
    let mut model = exp.build_model()?;
    train(&mut model, &train_set, None, &exp.train, exp.seed, canonical_config(&exp))?;
    model.impute_class_rows(&split.seen, &split.unseen)?;
    let ev = evaluate(&model, &eval_set, exp.train.threshold, ForwardOptions::default())?;
    let null = permutation_null(&ev.scores, &ev.truth, null_samples, exp.seed ^ split.split_seed)?;
    Ok(ZeroShotResult {
        split: index,
        variant,
        seen: split.seen.clone(),
        unseen: split.unseen.clone(),
        map: ev.map,
        null_mean: mean_std(&null).0,
        null_p95: quantile(&null, 0.95),
    })
}

pub fn run_zero_shot(exp: &Experiment, seen_fraction: f64, n_splits: usize, variants: &[ZeroShotVariant], null_samples: usize) -> Result<Vec<ZeroShotResult>> {
    let splits = make_zero_shot_splits(exp.classes.len(), seen_fraction, n_splits, exp.seed)?;
    let mut out = Vec::new();
    for (i, split) in splits.iter().enumerate() {
        for &v in variants {
            out.push(run_zero_shot_split(exp, split, i, v, null_samples)?);
        }
    }
    Ok(out)
}

/// The supervised reference setup: eight primitives, 256 training and 64
/// evaluation videos of 8 frames at 16×16.
pub fn reference_experiment(seed: u64) -> Experiment {
    let d = 32;
    Experiment {
        model: ModelConfig {
            encoder: EncoderConfig {
                frames: 8,
                height: 16,
                width: 16,
                patch: 8,
                hidden: d,
                layers: 2,
                heads: 2,
                attention: AttentionMode::Divided,
                out_dim: d,
                ffn_hidden: 2 * d,
            },
            frame_embedder: FrameEmbedderConfig {
                patch: 8,
                dim: d / 2,
                heads: 2,
                ffn_hidden: d,
                trainable: true,
            },
            decoder: DecoderConfig {
                layers: 2,
                heads: 2,
                dim: d,
                ffn_hidden: 2 * d,
                task: TaskMode::MultiLabel,
            },
            text: TextConfig {
                mode: TextMode::Hashed,
                seed: 0,
            },
            mmq: true,
            text_init: true,
        },
        data: DataConfig::default(),
        train: TrainConfig {
            epochs: 100,
            eval_every: 10,
            ..TrainConfig::default()
        },
        classes: Vocabulary::primitives(8).expect("library has eight primitives").names(),
        n_train: 256,
        n_eval: 64,
        seed,
    }
}

/// Shape-by-colour classes named by `+`-joined tokens, with the matching
/// compositional text embedder.
pub fn zero_shot_experiment(seed: u64) -> Experiment {
    let mut exp = reference_experiment(seed);
    exp.model.text.mode = TextMode::Compositional;
    exp.classes = Vocabulary::compositional_default().names();
    exp.train.epochs = 30;
    exp.train.eval_every = 0;
    exp
}

/// Patterns visible for 4 frames out of every 16, so short clips often miss
/// a class entirely.
pub fn frame_trend_experiment(seed: u64, frames: usize) -> Experiment {
    let mut exp = reference_experiment(seed);
    exp.data.pulse = Some(Pulse { period: 16, width: 4 });
    exp.train.epochs = 60;
    exp.train.eval_every = 0;
    exp.with_frames(frames)
}

/// Central-difference check of the summed multi-label loss of two random
/// videos against every parameter of a fresh model.
pub fn model_grad_check(cfg: &ModelConfig, num_classes: usize, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let names: Vec<String> = (0..num_classes).map(|i| format!("class{i}")).collect();
    let model = Msqnet::new(cfg, &names, seed)?;
    let e = &cfg.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4752_4144);
    let videos: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[e.frames, 3, e.height, e.width], 0.0, 1.0, &mut rng)).collect();
    let refs: Vec<&Tensor> = videos.iter().collect();
    let rows: Vec<Vec<f64>> = (0..2).map(|m| (0..num_classes).map(|k| ((k + m) % 2) as f64).collect()).collect();
    let targets = Tensor::from_rows(&rows)?;
    let classes = model.all_classes();
    grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            model.batch_loss(tape, &p, &refs, &targets, &classes, ForwardOptions::default())
        },
        model.params.tensors(),
        h,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_vec(values.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store_with(&[1.0, -2.0]);
        let mut st = AdamState::new(&s);
        for _ in 0..5 {
            adam_step(&mut s, &[Some(Tensor::zeros(&[2]))], &mut st, 0.1, &Adam::default()).unwrap();
        }
        assert_eq!(s.get(s.find("x").unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign_by_lr() {
        let mut s = store_with(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Some(Tensor::from_vec(vec![3.0, -0.2, 1e-3]))], &mut st, 0.01, &Adam::default()).unwrap();
        let x = s.get(s.find("x").unwrap()).data();
        assert!((x[0] + 0.01).abs() < 1e-9);
        assert!((x[1] - 0.01).abs() < 1e-9);
        assert!((x[2] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn matches_scalar_adam_on_quadratic_bowl() {
        // f(x) = Σ c_i (x_i − t_i)², gradient 2c(x − t).
        let (c, t) = ([0.5, 2.0, 1.5], [1.0, -1.0, 0.25]);
        let mut s = store_with(&[0.3, 0.7, -0.4]);
        let mut st = AdamState::new(&s);
        let adam = Adam::default();
        let mut oracle: Vec<(f64, f64, f64)> = [0.3, 0.7, -0.4].iter().map(|&x| (x, 0.0, 0.0)).collect();
        for step in 1..=10 {
            let x = s.get(s.find("x").unwrap()).data().to_vec();
            let g: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * (x[i] - t[i])).collect();
            adam_step(&mut s, &[Some(Tensor::from_vec(g))], &mut st, 0.05, &adam).unwrap();
            for (i, (x, m, v)) in oracle.iter_mut().enumerate() {
                let g = 2.0 * c[i] * (*x - t[i]);
                *m = 0.9 * *m + 0.1 * g;
                *v = 0.999 * *v + 0.001 * g * g;
                let mh = *m / (1.0 - 0.9f64.powi(step));
                let vh = *v / (1.0 - 0.999f64.powi(step));
                *x -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let x = s.get(s.find("x").unwrap()).data();
        for i in 0..3 {
            assert!((x[i] - oracle[i].0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut s = store_with(&[1.0]);
        s.add("y", Tensor::from_vec(vec![2.0]));
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &[Some(Tensor::from_vec(vec![1.0])), Some(Tensor::from_vec(vec![f64::NAN]))], &mut st, 0.1, &Adam::default()).unwrap_err();
        assert!(matches!(&err, Error::Numerical(m) if m.contains('y')));
        assert_eq!(s.tensors()[0].data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(Tensor::from_vec(vec![3.0])), None, Some(Tensor::from_vec(vec![4.0]))];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn config_hash_ignores_field_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": {"c": 2, "d": [1, 2]}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b": {"d": [1, 2], "c": 2}, "a": 1}"#).unwrap();
        assert_eq!(config_hash(&canonical_config(&a)), config_hash(&canonical_config(&b)));
        let c: serde_json::Value = serde_json::from_str(r#"{"a": 2, "b": {"c": 2, "d": [1, 2]}}"#).unwrap();
        assert_ne!(config_hash(&canonical_config(&a)), config_hash(&canonical_config(&c)));
    }

    #[test]
    fn quantile_nearest_rank() {
        let xs: Vec<f64> = (1..=200).map(f64::from).collect();
        assert_eq!(quantile(&xs, 0.95), 190.0);
        assert_eq!(quantile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn ablation_grid_has_four_factorial_and_three_frame_cells() {
        let cells = ablation_cells();
        assert_eq!(cells.len(), 7);
        assert_eq!(cells.iter().filter(|c| c.starts_with("mmq=")).count(), 4);
        assert_eq!(cells.iter().filter(|c| c.starts_with("frames=")).count(), 3);
    }
}

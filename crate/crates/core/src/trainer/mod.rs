//! Joint optimization: one backward pass over the recommendation,
//! diffusion and alignment terms per batch, followed by one Adam update.
//!
//! Metrics stream (`metrics.jsonl`), one JSON object per line:
//!
//! * `{"kind":"step", "epoch", "step", "global_step", "l_rec", "l_diff",
//!   "l_align", "l_prefix", "l_total", "reward_mean", "clip_rate",
//!   "clamp_hits", "all_zero_groups", "skipped"}` — one per batch when
//!   `log_steps` is on;
//! * `{"kind":"epoch", "epoch", "beta", "steps", "skipped_steps", "l_rec",
//!   "l_diff", "l_align", "l_prefix", "l_total", "reward_mean",
//!   "clip_rate", "valid": {"Recall@K": .., "NDCG@K": ..}, "best"}`.
//!
//! Wall-clock numbers never enter that stream (it is byte-reproducible);
//! they go to `timing.jsonl` as `{"epoch", "steps", "train_seconds",
//! "train_ms_per_batch", "infer_seconds", "infer_users"}`.

mod ablation;

pub use ablation::{ablation_variants, run_ablation, AblationRow, AblationTable, Variant};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::datasets::{DatasetSplit, Example};
use crate::error::{Error, Result};
use crate::eval::{full_rank_eval, EvalOptions, EvalSplit, MetricsReport};
use crate::model::{Arch, LossWeights, Model, ModelConfig, NoiseKeys, Rollout};
use crate::numerics::par::map_indexed;
use crate::numerics::{adam_step, AdamConfig, AdamState, Exec, ParamStore, Purpose, RandomSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    /// Weight of next-item supervision on every encoder position.
    pub prefix_weight: f64,
    pub with_kl: bool,
    /// Train without the alignment term first, then switch it on for the
    /// last `rl_epochs` epochs (half of `epochs` when unset).
    pub two_stage: bool,
    pub rl_epochs: Option<usize>,
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    pub exec: Exec,
    pub eval_ks: Vec<usize>,
    /// Validation metric that selects the best checkpoint.
    pub select_metric: String,
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            seed: 7,
            alpha: 1.0,
            beta: 1.0,
            prefix_weight: 1.0,
            with_kl: false,
            two_stage: false,
            rl_epochs: None,
            grad_clip: None,
            weight_decay: 0.0,
            exec: Exec::Parallel,
            eval_ks: vec![1, 5, 10],
            select_metric: "Recall@10".into(),
            log_steps: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("prefix_weight", self.prefix_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0")));
            }
        }
        if let Some(r) = self.rl_epochs {
            if r > self.epochs {
                return Err(Error::invalid("rl_epochs exceeds epochs"));
            }
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::invalid("eval_ks must be non-empty and >= 1"));
        }
        if !self.eval_ks.iter().any(|k| self.select_metric == format!("Recall@{k}") || self.select_metric == format!("NDCG@{k}")) {
            return Err(Error::invalid(format!(
                "select_metric {} is not among the evaluated metrics",
                self.select_metric
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ..AdamConfig::default()
        }
    }

    /// Alignment weight in effect during `epoch` (0-based).
    pub fn beta_at(&self, epoch: usize) -> f64 {
        if self.two_stage {
            let rl = self.rl_epochs.unwrap_or(self.epochs / 2);
            if epoch < self.epochs - rl {
                return 0.0;
            }
        }
        self.beta
    }

    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta_at(epoch),
            prefix: self.prefix_weight,
            with_kl: self.with_kl,
        }
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            ks: self.eval_ks.clone(),
            mask_history: false,
            exec: self.exec,
        }
    }
}

/// Batch means of one update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub l_rec: f64,
    pub l_diff: f64,
    pub l_align: f64,
    pub l_prefix: f64,
    pub l_total: f64,
    pub reward_mean: Option<f64>,
    pub clip_rate: f64,
    pub clamp_hits: usize,
    pub all_zero_groups: usize,
    /// Why the update was skipped, if it was.
    pub skipped: Option<String>,
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Summed objective of a batch and its averaged gradient.
pub struct BatchOut {
    pub report: StepReport,
    pub grads: Option<Vec<Option<Vec<f64>>>>,
    pub rollouts: Vec<Option<Rollout>>,
}

/// Mean objective over `batch` (`(user index, example)` pairs). With
/// `frozen`, each example reuses its recorded GRPO group.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    arch: &Arch,
    store: &ParamStore,
    batch: &[(usize, &Example)],
    epoch: usize,
    w: &LossWeights,
    src: &RandomSource,
    exec: Exec,
    frozen: Option<&[Option<Rollout>]>,
    want_grad: bool,
) -> Result<BatchOut> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let outs = map_indexed(exec, batch, |i, &(user, ex)| {
        let keys = NoiseKeys {
            epoch: epoch as u64,
            user: user as u64,
        };
        let fr = frozen.and_then(|f| f[i].as_ref());
        arch.example_loss(store, ex, keys, w, src, fr, want_grad)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let inv = 1.0 / batch.len() as f64;
    let mut r = StepReport::default();
    let mut grads: Option<Vec<Option<Vec<f64>>>> = want_grad.then(|| vec![None; store.len()]);
    let mut rewards = Vec::new();
    let mut n_ratios = 0usize;
    let mut clipped = 0.0;
    let mut rollouts = Vec::with_capacity(outs.len());
    for o in outs {
        r.l_rec += inv * o.l_rec;
        r.l_diff += inv * o.l_diff;
        r.l_align += inv * o.l_align;
        r.l_prefix += inv * o.l_prefix;
        r.l_total += inv * o.l_total;
        r.clamp_hits += o.clamp_hits;
        r.all_zero_groups += o.all_zero_group as usize;
        if let Some(m) = o.reward_mean {
            rewards.push(m);
            clipped += o.clip_frac * o.ratios.len() as f64;
            n_ratios += o.ratios.len();
        }
        if let (Some(acc), Some(g)) = (grads.as_mut(), o.grads) {
            for (a, g) in acc.iter_mut().zip(g) {
                let Some(g) = g else { continue };
                match a {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += inv * y),
                    None => *a = Some(g.iter().map(|y| inv * y).collect()),
                }
            }
        }
        rollouts.push(o.rollout);
    }
    if !rewards.is_empty() {
        r.reward_mean = Some(rewards.iter().sum::<f64>() / rewards.len() as f64);
        r.clip_rate = clipped / n_ratios.max(1) as f64;
    }
    Ok(BatchOut {
        report: r,
        grads,
        rollouts,
    })
}

/// Forward, backward and one Adam update. A non-finite loss or gradient
/// skips the update and is reported, not raised.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &[(usize, &Example)],
    epoch: usize,
    w: &LossWeights,
    src: &RandomSource,
    exec: Exec,
) -> Result<StepReport> {
    let t0 = Instant::now();
    let out = match batch_objective(&model.arch, &model.store, batch, epoch, w, src, exec, None, true) {
        Ok(o) => o,
        Err(Error::NonFinite(what)) => {
            log::warn!("epoch {epoch}: skipping update, {what} is non-finite");
            return Ok(StepReport {
                l_total: f64::NAN,
                skipped: Some(what),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                ..StepReport::default()
            });
        }
        Err(e) => return Err(e),
    };
    let mut report = out.report;
    let grads = out.grads.expect("gradients requested");
    if let Err(e) = adam_step(&mut model.store, &grads, adam) {
        match e {
            Error::NonFinite(what) => {
                log::warn!("epoch {epoch}: skipping update, {what} is non-finite");
                report.skipped = Some(what);
            }
            e => return Err(e),
        }
    }
    report.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        epoch: usize,
        step: usize,
        global_step: u64,
        #[serde(flatten)]
        report: StepReport,
    },
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub beta: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub l_rec: f64,
    pub l_diff: f64,
    pub l_align: f64,
    pub l_prefix: f64,
    pub l_total: f64,
    pub reward_mean: Option<f64>,
    pub clip_rate: f64,
    pub valid: std::collections::BTreeMap<String, f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_seconds: f64,
    pub train_ms_per_batch: f64,
    pub infer_seconds: f64,
    pub infer_users: usize,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn init(&self) -> PathBuf {
        self.dir.join("init.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.jsonl")
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// Best-validation model (the initial one if no epoch ran).
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub timing: Vec<TimingRecord>,
}

struct Jsonl {
    out: Option<BufWriter<File>>,
    path: PathBuf,
}

impl Jsonl {
    fn open(path: Option<PathBuf>, append: bool) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                out: None,
                path: PathBuf::new(),
            });
        };
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
            path,
        })
    }

    fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            w.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

/// Trains `model_cfg` on the split's training examples, validating after
/// every epoch. With `out`, writes checkpoints and the metrics streams there;
/// with `resume`, continues from a `last.ckpt`-style checkpoint.
pub fn train(
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&RunPaths>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model_cfg.backbone.max_len != split.max_len {
        return Err(Error::invalid(format!(
            "model max_len {} differs from the split's {}",
            model_cfg.backbone.max_len, split.max_len
        )));
    }
    let src = RandomSource::new(cfg.seed);
    let (mut model, mut adam, mut state, mut best) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if &ck.meta.model != model_cfg || ck.meta.n_items != split.n_items {
                return Err(Error::invalid(format!(
                    "{}: checkpoint does not match the model configuration",
                    path.display()
                )));
            }
            let model = ck.model()?;
            let mut adam = AdamState::new(cfg.adam(), &model.store);
            ck.restore_adam(&model, &mut adam)?;
            let best_path = path.with_file_name("best.ckpt");
            let best = if ck.meta.state.best_epoch.is_some() && best_path.exists() {
                Checkpoint::load(&best_path)?.model()?
            } else {
                model.clone()
            };
            (model, adam, ck.meta.state.clone(), best)
        }
        None => {
            let model = Model::new(model_cfg, split.n_items, cfg.seed)?;
            let adam = AdamState::new(cfg.adam(), &model.store);
            let best = model.clone();
            (model, adam, TrainState::default(), best)
        }
    };
    if let Some(p) = out {
        std::fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
        if resume.is_none() {
            save(&Checkpoint::capture(&model, Some(&adam), state.clone()), &p.init())?;
        }
    }
    let mut outcome_epochs = Vec::new();
    let mut outcome_timing = Vec::new();
    if state.epoch >= cfg.epochs {
        return Ok(TrainOutcome {
            model,
            best,
            best_epoch: state.best_epoch,
            best_metric: state.best_metric,
            epochs: outcome_epochs,
            timing: outcome_timing,
        });
    }
    let append = resume.is_some();
    let mut metrics = Jsonl::open(out.map(|p| p.metrics()), append)?;
    let mut timing = Jsonl::open(out.map(|p| p.timing()), append)?;

    let examples = split.train_examples();
    if examples.is_empty() {
        return Err(Error::invalid("no training examples (every user has fewer than 4 items)"));
    }
    let opts = cfg.eval_options();
    for epoch in state.epoch..cfg.epochs {
        let w = cfg.weights_at(epoch);
        let mut order = examples.clone();
        src.stream(Purpose::Shuffle, &[epoch as u64]).shuffle(&mut order);
        let t0 = Instant::now();
        let mut sums = StepReport::default();
        let mut rewards = Vec::new();
        let (mut steps, mut skipped) = (0usize, 0usize);
        for (s, batch) in order.chunks(cfg.batch_size).enumerate() {
            let rep = train_step(&mut model, &mut adam, batch, epoch, &w, &src, cfg.exec)?;
            steps += 1;
            if rep.skipped.is_some() {
                skipped += 1;
            } else {
                sums.l_rec += rep.l_rec;
                sums.l_diff += rep.l_diff;
                sums.l_align += rep.l_align;
                sums.l_prefix += rep.l_prefix;
                sums.l_total += rep.l_total;
                sums.clip_rate += rep.clip_rate;
                rewards.extend(rep.reward_mean);
            }
            if cfg.log_steps {
                metrics.write(&MetricRecord::Step {
                    epoch: epoch + 1,
                    step: s + 1,
                    global_step: adam.step,
                    report: rep,
                })?;
            }
        }
        let train_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let valid = full_rank_eval(&model.arch, &model.store, split, EvalSplit::Valid, &src, &opts)?;
        let infer_seconds = t1.elapsed().as_secs_f64();

        let score = valid.get(&cfg.select_metric);
        let improved = state.best_metric.is_none_or(|b| score > b);
        if improved {
            state.best_metric = Some(score);
            state.best_epoch = Some(epoch + 1);
            best = model.clone();
        }
        state.epoch = epoch + 1;

        let ok = (steps - skipped).max(1) as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            beta: w.beta,
            steps,
            skipped_steps: skipped,
            l_rec: sums.l_rec / ok,
            l_diff: sums.l_diff / ok,
            l_align: sums.l_align / ok,
            l_prefix: sums.l_prefix / ok,
            l_total: sums.l_total / ok,
            reward_mean: (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64),
            clip_rate: sums.clip_rate / ok,
            valid: valid.metrics.clone(),
            best: improved,
        };
        log::info!(
            "epoch {}/{}: L_total {:.4}, valid {} {:.4}",
            epoch + 1,
            cfg.epochs,
            rec.l_total,
            cfg.select_metric,
            score
        );
        metrics.write(&MetricRecord::Epoch(rec.clone()))?;
        metrics.flush()?;
        let tr = TimingRecord {
            epoch: epoch + 1,
            steps,
            train_seconds,
            train_ms_per_batch: 1e3 * train_seconds / steps as f64,
            infer_seconds,
            infer_users: valid.n_users,
        };
        timing.write(&tr)?;
        timing.flush()?;
        if let Some(p) = out {
            let ck = Checkpoint::capture(&model, Some(&adam), state.clone());
            save(&ck, &p.last())?;
            if improved {
                save(&ck, &p.best())?;
            }
        }
        outcome_epochs.push(rec);
        outcome_timing.push(tr);
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch: state.best_epoch,
        best_metric: state.best_metric,
        epochs: outcome_epochs,
        timing: outcome_timing,
    })
}

/// Two-stage schedule: `stage1` epochs without the alignment term, then
/// `stage2` epochs with it.
pub fn two_stage_variant(
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    stage1: usize,
    stage2: usize,
    out: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        epochs: stage1 + stage2,
        two_stage: true,
        rl_epochs: Some(stage2),
        ..cfg.clone()
    };
    train(split, model_cfg, &cfg, out, None)
}

/// Test-split metrics of a trained model.
pub fn test_report(model: &Model, split: &DatasetSplit, cfg: &TrainConfig) -> Result<MetricsReport> {
    let src = RandomSource::new(cfg.seed);
    full_rank_eval(&model.arch, &model.store, split, EvalSplit::Test, &src, &cfg.eval_options())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_generate, SynthConfig};
    use crate::numerics::grad_check_params;

    fn tiny_model_cfg(max_len: usize) -> ModelConfig {
        let mut m = ModelConfig::default();
        m.backbone.d_model = 8;
        m.backbone.max_len = max_len;
        m.backbone.ffn_dim = 8;
        m.reasoner.ffn_dim = 8;
        m.reasoner.steps = 2;
        m.diffusion.steps = 3;
        m.align.group_size = 2;
        m
    }

    fn data() -> DatasetSplit {
        let cfg = SynthConfig {
            n_users: 24,
            n_items: 6,
            n_intents: 2,
            min_len: 4,
            max_len: 7,
            ..SynthConfig::default()
        };
        synth_generate(&cfg, 5, 5).unwrap().split
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            lr: 5e-3,
            exec: Exec::Sequential,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn step_report_decomposes() {
        let s = data();
        let m = Model::new(&tiny_model_cfg(5), s.n_items, 1).unwrap();
        let ex = s.train_examples();
        let w = LossWeights {
            alpha: 0.7,
            beta: 1.3,
            prefix: 0.0,
            with_kl: false,
        };
        let r = batch_objective(&m.arch, &m.store, &ex[..6], 0, &w, &RandomSource::new(2), Exec::Parallel, None, false)
            .unwrap()
            .report;
        let recombined = r.l_rec + 0.7 * r.l_diff + 1.3 * r.l_align;
        assert!((r.l_total - recombined).abs() < 1e-9);
        assert!(r.reward_mean.is_some());
    }

    #[test]
    fn batch_gradient_is_mean_of_examples() {
        let s = data();
        let m = Model::new(&tiny_model_cfg(5), s.n_items, 1).unwrap();
        let ex = s.train_examples();
        let src = RandomSource::new(2);
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            prefix: 0.0,
            with_kl: false,
        };
        let b = batch_objective(&m.arch, &m.store, &ex[..3], 4, &w, &src, Exec::Parallel, None, true).unwrap();
        let mut want = vec![vec![0.0; 0]; m.store.len()];
        for &(u, e) in &ex[..3] {
            let o = m
                .arch
                .example_loss(&m.store, e, NoiseKeys { epoch: 4, user: u as u64 }, &w, &src, None, true)
                .unwrap();
            for (i, g) in o.grads.unwrap().into_iter().enumerate() {
                if let Some(g) = g {
                    if want[i].is_empty() {
                        want[i] = vec![0.0; g.len()];
                    }
                    want[i].iter_mut().zip(&g).for_each(|(a, b)| *a += b / 3.0);
                }
            }
        }
        for (i, g) in b.grads.unwrap().iter().enumerate() {
            match g {
                Some(g) => g.iter().zip(&want[i]).for_each(|(a, b)| assert!((a - b).abs() < 1e-12)),
                None => assert!(want[i].is_empty()),
            }
        }
        assert!(b.report.reward_mean.is_none());
    }

    #[test]
    fn full_step_gradient_matches_differences() {
        let s = data();
        let mut mc = tiny_model_cfg(5);
        mc.diffusion.dropout = 0.0;
        mc.backbone.dropout = 0.0;
        mc.reasoner.dropout = 0.0;
        let m = Model::new(&mc, s.n_items, 3).unwrap();
        let ex = s.train_examples();
        let batch = &ex[..2];
        let src = RandomSource::new(4);
        let w = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            prefix: 0.5,
            with_kl: true,
        };
        let b = batch_objective(&m.arch, &m.store, batch, 0, &w, &src, Exec::Sequential, None, true).unwrap();
        let frozen = b.rollouts.clone();
        let chk = grad_check_params(
            &m.store,
            b.grads.as_ref().unwrap(),
            |st| {
                Ok(batch_objective(&m.arch, st, batch, 0, &w, &src, Exec::Sequential, Some(&frozen), false)?
                    .report
                    .l_total)
            },
            1e-6,
            7,
        )
        .unwrap();
        assert!(chk.max_rel_err < 1e-4, "{chk:?}");
    }

    #[test]
    fn zero_epochs_writes_init_only() {
        let s = data();
        let dir = tempfile::tempdir().unwrap();
        let p = RunPaths::new(dir.path().join("run"));
        let res = train(&s, &tiny_model_cfg(5), &quick(0), Some(&p), None).unwrap();
        assert!(res.epochs.is_empty());
        let files: Vec<_> = std::fs::read_dir(&p.dir).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(files, vec![std::ffi::OsString::from("init.ckpt")]);
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let s = data();
        let mc = tiny_model_cfg(5);
        let dir = tempfile::tempdir().unwrap();
        let (a, b, c) = (
            RunPaths::new(dir.path().join("a")),
            RunPaths::new(dir.path().join("b")),
            RunPaths::new(dir.path().join("c")),
        );
        train(&s, &mc, &quick(3), Some(&a), None).unwrap();
        train(&s, &mc, &quick(3), Some(&b), None).unwrap();
        let read = |p: PathBuf| std::fs::read(p).unwrap();
        assert_eq!(read(a.metrics()), read(b.metrics()));
        assert_eq!(read(a.last()), read(b.last()));
        assert_eq!(read(a.best()), read(b.best()));

        // Interrupt after two epochs, then resume for the third.
        train(&s, &mc, &quick(2), Some(&c), None).unwrap();
        train(&s, &mc, &quick(3), Some(&c), Some(&c.last())).unwrap();
        assert_eq!(read(a.metrics()), read(c.metrics()));
        assert_eq!(read(a.last()), read(c.last()));
    }

    #[test]
    fn two_stage_reductions() {
        let s = data();
        let mc = tiny_model_cfg(5);
        let no_rl = TrainConfig { beta: 0.0, ..quick(2) };
        let a = train(&s, &mc, &no_rl, None, None).unwrap();
        let b = two_stage_variant(&s, &mc, &quick(2), 2, 0, None).unwrap();
        assert_eq!(a.epochs, b.epochs);
        let zero_beta_stage2 = TrainConfig { beta: 0.0, ..quick(2) };
        let c = two_stage_variant(&s, &mc, &zero_beta_stage2, 1, 1, None).unwrap();
        assert_eq!(a.epochs, c.epochs);
        let d = two_stage_variant(&s, &mc, &quick(2), 1, 1, None).unwrap();
        assert_eq!(d.epochs[0].beta, 0.0);
        assert_eq!(d.epochs[1].beta, 1.0);
        assert_eq!(d.epochs[0], a.epochs[0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..quick(1) }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..quick(1) }.validate().is_err());
        assert!(TrainConfig { select_metric: "Recall@50".into(), ..quick(1) }.validate().is_err());
        assert!(TrainConfig { rl_epochs: Some(3), ..quick(2) }.validate().is_err());
        assert!(quick(1).validate().is_ok());
    }
}

//! Optimization: Adam under a cosine schedule, the multi-scale training loop,
//! held-out evaluation, and resumable checkpoints.

mod eval;
mod optim;

pub use eval::{evaluate, EvalReport, ImageScore};
pub use optim::{clip_global_norm, cosine_lr, global_norm, Adam, StepOutcome};

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::autodiff::Tape;
use crate::config::KeyValues;
use crate::data::{augment, item_rng, stack_batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{sr_loss, target_pyramid, total_loss};
use crate::metrics::MetricSpace;
use crate::model::checkpoint::Checkpoint;
use crate::model::{Model, Task};
use crate::ops::NormMode;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Square crop side in clean pixels; 0 trains on whole images.
    pub crop: usize,
    pub seed: u64,
    /// 0 evaluates only at the end.
    pub eval_every: usize,
    pub clip: bool,
    pub clip_norm: f64,
    /// Pairs taken from the end of the dataset for evaluation.
    pub holdout: usize,
    pub freq_weight: f64,
    pub bn_momentum: f64,
    pub eval_space: MetricSpace,
    /// Abort when the loss stays above `divergence_factor` times the first
    /// loss for `divergence_patience` consecutive steps.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 2e-4,
            lr_min: 1e-6,
            total_steps: 2000,
            batch: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            crop: 32,
            seed: 0,
            eval_every: 500,
            clip: true,
            clip_norm: 1.0,
            holdout: 20,
            freq_weight: crate::loss::FREQ_WEIGHT,
            bn_momentum: 0.1,
            eval_space: MetricSpace::Rgb,
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr_init",
        "lr_min",
        "total_steps",
        "batch",
        "beta1",
        "beta2",
        "eps",
        "crop",
        "seed",
        "eval_every",
        "clip",
        "clip_norm",
        "holdout",
        "freq_weight",
        "bn_momentum",
        "eval_space",
        "divergence_factor",
        "divergence_patience",
    ];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr_init: kv.get_or("lr_init", d.lr_init)?,
            lr_min: kv.get_or("lr_min", d.lr_min)?,
            total_steps: kv.get_or("total_steps", d.total_steps)?,
            batch: kv.get_or("batch", d.batch)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            eps: kv.get_or("eps", d.eps)?,
            crop: kv.get_or("crop", d.crop)?,
            seed: kv.get_or("seed", d.seed)?,
            eval_every: kv.get_or("eval_every", d.eval_every)?,
            clip: kv.get_or("clip", d.clip)?,
            clip_norm: kv.get_or("clip_norm", d.clip_norm)?,
            holdout: kv.get_or("holdout", d.holdout)?,
            freq_weight: kv.get_or("freq_weight", d.freq_weight)?,
            bn_momentum: kv.get_or("bn_momentum", d.bn_momentum)?,
            eval_space: kv.get_or("eval_space", d.eval_space)?,
            divergence_factor: kv.get_or("divergence_factor", d.divergence_factor)?,
            divergence_patience: kv.get_or("divergence_patience", d.divergence_patience)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("lr_init", self.lr_init);
        kv.set("lr_min", self.lr_min);
        kv.set("total_steps", self.total_steps);
        kv.set("batch", self.batch);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("crop", self.crop);
        kv.set("seed", self.seed);
        kv.set("eval_every", self.eval_every);
        kv.set("clip", self.clip);
        kv.set("clip_norm", self.clip_norm);
        kv.set("holdout", self.holdout);
        kv.set("freq_weight", self.freq_weight);
        kv.set("bn_momentum", self.bn_momentum);
        kv.set("eval_space", self.eval_space);
        kv.set("divergence_factor", self.divergence_factor);
        kv.set("divergence_patience", self.divergence_patience);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_init && self.lr_init.is_finite()) {
            return fail("learning rates need 0 <= lr_min <= lr_init");
        }
        if self.total_steps == 0 || self.batch == 0 {
            return fail("total_steps and batch must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return fail("Adam needs beta1, beta2 in [0, 1) and eps > 0");
        }
        if self.clip && !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.freq_weight >= 0.0) {
            return fail("bn_momentum must be in [0, 1] and freq_weight >= 0");
        }
        if !(self.divergence_factor > 1.0) || self.divergence_patience == 0 {
            return fail(
                "divergence_factor must exceed 1 and divergence_patience must be positive",
            );
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        cosine_lr(step, self.total_steps, self.lr_init, self.lr_min)
    }
}

/// Everything beyond the parameters needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    /// Index of the next step to run.
    pub next_step: usize,
    pub initial_loss: Option<f64>,
    /// Consecutive steps above the divergence threshold.
    pub above: usize,
    pub best_psnr: f64,
}

impl TrainState {
    pub fn fresh(model: &Model, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = model
            .store
            .ids()
            .map(|id| model.store.get(id).numel())
            .collect();
        TrainState {
            adam: Adam::new(&sizes, cfg.beta1, cfg.beta2, cfg.eps),
            next_step: 0,
            initial_loss: None,
            above: 0,
            best_psnr: f64::NEG_INFINITY,
        }
    }

    const RECORD: &'static str = "train.state";

    fn records(&self, model: &Model) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            Self::RECORD.to_string(),
            Tensor::from_parts(
                vec![5],
                vec![
                    self.adam.step as f64,
                    self.next_step as f64,
                    self.initial_loss.unwrap_or(f64::NAN),
                    self.above as f64,
                    self.best_psnr,
                ],
            ),
        )];
        for (i, id) in model.store.ids().enumerate() {
            let name = model.store.name(id);
            let shape = model.store.get(id).shape().to_vec();
            out.push((
                format!("adam.m.{name}"),
                Tensor::from_parts(shape.clone(), self.adam.m[i].clone()),
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor::from_parts(shape, self.adam.v[i].clone()),
            ));
        }
        out
    }

    /// Recover the state stored by a training checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, model: &Model, cfg: &TrainConfig) -> Result<Self> {
        let missing =
            |n: &str| Error::Checkpoint(format!("no {n:?} record; not a training checkpoint"));
        let s = ckpt
            .get(Self::RECORD)
            .ok_or_else(|| missing(Self::RECORD))?
            .data();
        if s.len() != 5 {
            return Err(Error::Checkpoint(format!(
                "{} has {} entries",
                Self::RECORD,
                s.len()
            )));
        }
        let mut state = TrainState::fresh(model, cfg);
        state.adam.step = s[0] as u64;
        state.next_step = s[1] as usize;
        state.initial_loss = (!s[2].is_nan()).then_some(s[2]);
        state.above = s[3] as usize;
        state.best_psnr = s[4];
        for (i, id) in model.store.ids().enumerate() {
            let name = model.store.name(id);
            for (slot, kind) in [(&mut state.adam.m[i], "m"), (&mut state.adam.v[i], "v")] {
                let key = format!("adam.{kind}.{name}");
                let t = ckpt.get(&key).ok_or_else(|| missing(&key))?;
                if t.numel() != slot.len() {
                    return Err(Error::Checkpoint(format!(
                        "{key}: wrong length {}",
                        t.numel()
                    )));
                }
                slot.copy_from_slice(t.data());
            }
        }
        Ok(state)
    }
}

/// Record prefixes a training checkpoint adds on top of the model.
pub const STATE_PREFIXES: &[&str] = &["adam.", "train."];

/// Save the model together with its training state and config.
pub fn save_training_checkpoint(
    model: &Model,
    cfg: &TrainConfig,
    state: &TrainState,
    path: &Path,
) -> Result<()> {
    model
        .to_checkpoint(Some(&cfg.to_kv()), state.records(model))
        .save(path)
}

/// Model, training config and state from a training checkpoint.
pub fn load_training_checkpoint(path: &Path) -> Result<(Model, TrainConfig, TrainState)> {
    let ckpt = Checkpoint::load(path)?;
    let model = Model::from_checkpoint(&ckpt, STATE_PREFIXES)?;
    let mut kv = KeyValues::default();
    let all = KeyValues::parse(&ckpt.config_text)?;
    for key in TrainConfig::KEYS {
        if let Some(v) = all.get_str(key) {
            kv.set(key, v);
        }
    }
    let cfg = TrainConfig::from_kv(&kv)?;
    let state = TrainState::from_checkpoint(&ckpt, &model, &cfg)?;
    Ok((model, cfg, state))
}

/// One line of the metrics log.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_ssim: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Loss of every step run in this call, skipped steps included.
    pub losses: Vec<f64>,
    /// Steps whose update was skipped for a non-finite gradient or loss.
    pub skipped: Vec<usize>,
    pub evals: Vec<(usize, EvalReport)>,
    pub best_psnr: f64,
    pub log: Vec<LogRecord>,
}

/// Where a run writes its log and checkpoints. `None` keeps everything in
/// memory.
#[derive(Clone, Debug, Default)]
pub struct OutputDir(pub Option<PathBuf>);

impl OutputDir {
    pub fn metrics(&self) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join("metrics.jsonl"))
    }
    pub fn best(&self) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join("best.ckpt"))
    }
    pub fn last(&self) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join("last.ckpt"))
    }
}

/// The pairs used for one step: `batch` random training pairs, each cropped
/// and flipped. Depends only on `(seed, step)`.
pub fn step_batch(train: &Dataset, cfg: &TrainConfig, step: usize) -> Result<(Tensor, Tensor)> {
    let mut rng = item_rng(cfg.seed, step as u64);
    let pairs = (0..cfg.batch)
        .map(|_| {
            let i = rand::Rng::random_range(&mut rng, 0..train.len());
            augment(train.pair(i), (cfg.crop > 0).then_some(cfg.crop), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    stack_batch(&pairs)
}

/// Forward, loss and gradients for one batch. BN statistics are returned
/// for the caller to fold in.
fn loss_and_grads(
    model: &Model,
    degraded: Tensor,
    clean: &Tensor,
    freq_weight: f64,
) -> Result<(
    f64,
    Vec<Option<Vec<f64>>>,
    Vec<(crate::nn::StatsId, crate::ops::BatchStats)>,
)> {
    let tape = Tape::new();
    let p = model.store.bind(&tape, NormMode::Train);
    let preds = model.forward(&p, &tape.constant(degraded))?;
    let loss = match model.config.task {
        Task::Restoration => total_loss(&preds, &target_pyramid(clean, preds.len())?, freq_weight)?,
        Task::SuperResolution(_) => sr_loss(&preds[0], clean)?,
    };
    let value = loss.value().item();
    let grads = tape.backward(&loss)?;
    let stats = p.take_stat_updates();
    Ok((value, p.collect_grads(grads), stats))
}

/// Train `model` on `split.train`, evaluating on `split.test`. Continues
/// from `state` when given.
pub fn train(
    model: &mut Model,
    split: &Split,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    out: &OutputDir,
) -> Result<(TrainReport, TrainState)> {
    train_until(model, split, cfg, state, out, cfg.total_steps)
}

/// Like [`train`] but stops before step `stop`, leaving the schedule intact
/// so a later call can continue the same run.
pub fn train_until(
    model: &mut Model,
    split: &Split,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    out: &OutputDir,
    stop: usize,
) -> Result<(TrainReport, TrainState)> {
    cfg.validate()?;
    let stop = stop.min(cfg.total_steps);
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut state = state.unwrap_or_else(|| TrainState::fresh(model, cfg));
    if state.adam.m.len() != model.store.len() {
        return Err(Error::Checkpoint(
            "optimizer state does not match the model".into(),
        ));
    }
    let mut log = match out.metrics() {
        Some(path) => {
            std::fs::create_dir_all(path.parent().expect("file in a directory"))
                .map_err(|e| Error::io(&path, e))?;
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };
    let mut report = TrainReport {
        best_psnr: state.best_psnr,
        ..Default::default()
    };
    let mut emit = |record: LogRecord, report: &mut TrainReport| -> Result<()> {
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(&record).expect("plain record");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        report.log.push(record);
        Ok(())
    };

    while state.next_step < stop {
        let step = state.next_step;
        let lr = cfg.lr(step);
        let (degraded, clean) = step_batch(&split.train, cfg, step)?;
        let mut record = LogRecord {
            step,
            lr,
            loss: None,
            grad_norm: None,
            skipped: false,
            eval_psnr: None,
            eval_ssim: None,
        };
        match loss_and_grads(model, degraded, &clean, cfg.freq_weight) {
            Ok((loss, mut grads, stats)) => {
                record.loss = Some(loss);
                report.losses.push(loss);
                let norm = if cfg.clip {
                    clip_global_norm(&mut grads, cfg.clip_norm)
                } else {
                    global_norm(&grads)
                };
                record.grad_norm = Some(norm);
                let outcome = {
                    let mut params: Vec<&mut [f64]> =
                        model.store.values_mut().map(|t| t.data_mut()).collect();
                    state.adam.step(&mut params, &grads, lr)?
                };
                match outcome {
                    StepOutcome::Applied => model.store.apply_stat_updates(stats, cfg.bn_momentum),
                    StepOutcome::Skipped { tensor, index } => {
                        let id = model
                            .store
                            .ids()
                            .nth(tensor)
                            .expect("tensor index in range");
                        let name = model.store.name(id).to_string();
                        warn!(
                            "step {step}: non-finite gradient in {name}[{index}]; update skipped"
                        );
                        record.skipped = true;
                        report.skipped.push(step);
                    }
                }
                let initial = *state.initial_loss.get_or_insert(loss);
                if loss > cfg.divergence_factor * initial {
                    state.above += 1;
                } else {
                    state.above = 0;
                }
            }
            Err(Error::NonFinite { location, index }) => {
                warn!("step {step}: non-finite value in {location}[{index}]; update skipped");
                record.skipped = true;
                report.losses.push(f64::NAN);
                report.skipped.push(step);
                state.above += 1;
            }
            Err(e) => return Err(e),
        }
        state.next_step += 1;
        if state.above >= cfg.divergence_patience {
            let initial = state.initial_loss.unwrap_or(f64::NAN);
            emit(record, &mut report)?;
            return Err(Error::Diverged(format!(
                "loss stayed above {}x the initial {initial:.4e} for {} steps (last step {step})",
                cfg.divergence_factor, state.above
            )));
        }

        let done = state.next_step == cfg.total_steps;
        let due = cfg.eval_every > 0 && state.next_step % cfg.eval_every == 0;
        if (done || due) && !split.test.is_empty() {
            let ev = evaluate(model, &split.test, cfg.eval_space)?;
            info!(
                "step {}: loss {:.5} eval PSNR {:.3} dB SSIM {:.4}",
                state.next_step,
                record.loss.unwrap_or(f64::NAN),
                ev.mean_psnr,
                ev.mean_ssim
            );
            record.eval_psnr = Some(ev.mean_psnr);
            record.eval_ssim = Some(ev.mean_ssim);
            if ev.mean_psnr > state.best_psnr {
                state.best_psnr = ev.mean_psnr;
                report.best_psnr = ev.mean_psnr;
                if let Some(path) = out.best() {
                    save_training_checkpoint(model, cfg, &state, &path)?;
                }
            }
            report.evals.push((state.next_step, ev));
        }
        emit(record, &mut report)?;
        if done || due {
            if let Some(path) = out.last() {
                save_training_checkpoint(model, cfg, &state, &path)?;
            }
        }
    }
    Ok((report, state))
}

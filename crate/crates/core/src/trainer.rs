//! Two-stage optimization: AdamW under a per-step cosine schedule, global
//! gradient clipping, augmentation-view selection and validation-driven
//! early stopping with per-epoch checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{validation_score, EvalConfig, EvalError};
use crate::model::{save_checkpoint, ActionInput, CheckpointMeta, ModelError, ModelParams, StateInput};
use crate::objective::{combined_loss, mine_negatives, LossConfig, ObjectiveError, TrainBatch};
use crate::store::{DatasetSplit, TextField, Trajectory};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid stage config: {0}")]
    InvalidConfig(String),
    #[error("parameter and gradient shapes differ")]
    ShapeMismatch,
    #[error("loss diverged at epoch {epoch} step {step}; last good checkpoint: {last_good:?}")]
    DivergedLoss { epoch: u32, step: usize, last_good: Option<PathBuf> },
    #[error("stage has no training anchors")]
    NoTrainingData,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Pretrain,
    Finetune,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Pretrain => "pretrain",
            StageName::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: StageName,
    pub epochs: u32,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub aug_prob: f64,
    /// Word-dropout rates the stored variants were generated with; recorded only.
    pub aug_rate_range: (f64, f64),
    pub early_stop_patience: u32,
    pub seed: u64,
    /// OS tags admitted to this stage; empty admits everything.
    pub dataset_filter: Vec<String>,
    /// Share of negative slots reserved for labeled-incorrect steps.
    #[serde(default = "default_negative_mix")]
    pub negative_mix: f64,
}

fn default_negative_mix() -> f64 {
    0.5
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self {
            name: StageName::Pretrain,
            epochs: 30,
            lr: 5e-4,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            lambda: 2.0,
            margin: 0.20,
            batch_size: 1024,
            clip_norm: 1.0,
            aug_prob: 0.75,
            aug_rate_range: (0.30, 0.50),
            early_stop_patience: 5,
            seed: 0,
            dataset_filter: Vec::new(),
            negative_mix: default_negative_mix(),
        }
    }

    pub fn finetune() -> Self {
        Self { name: StageName::Finetune, epochs: 40, lr: 1e-4, lambda: 3.0, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > self.lr_min && self.lr_min > 0.0) {
            return bad("need lr > lr_min > 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.aug_prob) || !(0.0..=1.0).contains(&self.negative_mix) {
            return bad("aug_prob and negative_mix must lie in [0, 1]");
        }
        if self.margin <= 0.0 || self.lambda < 0.0 || self.clip_norm <= 0.0 {
            return bad("margin and clip_norm must be positive, lambda non-negative");
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
        let config: Self = serde_json::from_str(&text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// `lr_min + ½(lr − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn grad_norm(grads: &ModelParams<f32>) -> f64 {
    grads.tensors().iter().flat_map(|(_, _, v)| v.iter()).map(|&g| g as f64 * g as f64).sum::<f64>().sqrt()
}

/// Rescales `grads` to global norm `max_norm` when it exceeds it; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, values) in grads.tensors_mut() {
            for g in values {
                *g = (*g as f64 * scale) as f32;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One AdamW update of a flat tensor at step `t` (1-based). Weight decay is
/// decoupled: applied to θ directly, before the adaptive step.
pub fn adamw_update(theta: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], t: u64, lr: f64, wd: f64, hp: AdamHyper) {
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let gi = g[i] as f64;
        let mi = hp.beta1 * m[i] as f64 + (1.0 - hp.beta1) * gi;
        let vi = hp.beta2 * v[i] as f64 + (1.0 - hp.beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let mut th = theta[i] as f64;
        th -= lr * wd * th;
        th -= lr * (mi / bc1) / ((vi / bc2).sqrt() + hp.eps);
        theta[i] = th as f32;
    }
}

pub struct AdamW {
    pub hyper: AdamHyper,
    m: ModelParams<f32>,
    v: ModelParams<f32>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams<f32>, hyper: AdamHyper) -> Self {
        Self { hyper, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// Updates `params` in place; `log_tau` gets no weight decay and τ is
    /// re-clamped afterwards.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, lr: f64, weight_decay: f64) -> Result<(), TrainError> {
        if params.dims != grads.dims || params.dims != self.m.dims {
            return Err(TrainError::ShapeMismatch);
        }
        self.t += 1;
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for ((((name, theta), (_, _, gv)), (_, mv)), (_, vv)) in params.tensors_mut().into_iter().zip(&g).zip(m).zip(v) {
            let wd = if name == "log_tau" { 0.0 } else { weight_decay };
            adamw_update(theta, gv, mv, vv, self.t, lr, wd, self.hyper);
        }
        params.clamp_tau();
        Ok(())
    }
}

/// Variant index for one field: with probability `aug_prob` a uniform pick
/// among the stored variants, otherwise the base (`None`).
pub fn select_view<R: Rng + ?Sized>(field: &TextField, aug_prob: f64, rng: &mut R) -> Option<usize> {
    if field.variants.is_empty() || !rng.gen_bool(aug_prob) {
        return None;
    }
    Some(rng.gen_range(0..field.variants.len()))
}

fn augmented<'a, R: Rng + ?Sized>(traj: &'a Trajectory, i: usize, aug_prob: f64, rng: &mut R) -> ActionInput<'a> {
    let step = &traj.steps[i];
    let a = select_view(&step.action, aug_prob, rng);
    let c = select_view(&step.code, aug_prob, rng);
    ActionInput::with_views(step, a, c)
}

/// Training and validation trajectories for one stage.
#[derive(Debug, Clone, Default)]
pub struct StageData<'a> {
    pub train: Vec<&'a Trajectory>,
    pub val: Vec<&'a Trajectory>,
}

impl<'a> StageData<'a> {
    /// Tasks of `split` whose OS tag passes `filter` (empty admits all).
    pub fn from_split(trajectories: &'a [Trajectory], split: &DatasetSplit, filter: &[String]) -> Self {
        let keep = |t: &&Trajectory| filter.is_empty() || filter.iter().any(|f| f == t.os_tag.as_str());
        Self {
            train: trajectories.iter().filter(|t| split.train.contains(&t.task_id)).filter(keep).collect(),
            val: trajectories.iter().filter(|t| split.val.contains(&t.task_id)).filter(keep).collect(),
        }
    }

    /// `(trajectory, step)` for every correct step of the training side.
    pub fn anchors(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| t.steps.iter().enumerate().filter(|(_, s)| s.correct).map(move |(i, _)| (ti, i)))
            .collect()
    }
}

/// Assembles one batch: augmented positives and mined negatives per anchor.
pub fn assemble_batch<'a, R: Rng + ?Sized>(
    data: &StageData<'a>,
    anchors: &[(usize, usize)],
    config: &StageConfig,
    rng: &mut R,
) -> Result<TrainBatch<'a>, TrainError> {
    let mut batch = TrainBatch::default();
    for &(ti, t) in anchors {
        let traj = data.train[ti];
        assert!(traj.steps[t].correct, "incorrect step {t} of {} offered as an anchor", traj.task_id);
        batch.states.push(StateInput::from_trajectory(traj, t));
        batch.positives.push(augmented(traj, t, config.aug_prob, rng));
        batch.weights.push(traj.weight());
        let negatives = match mine_negatives(traj, t, config.negative_mix, rng) {
            Ok(n) => n.into_iter().map(|(i, src)| (augmented(traj, i, config.aug_prob, rng), src)).collect(),
            Err(ObjectiveError::NoNegativesAvailable { .. }) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        batch.negatives.push(negatives);
        batch.anchors.push((ti, t));
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub align_loss: f64,
    pub margin_loss: f64,
    pub validation_score: f64,
    pub lr: f64,
    pub tau: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

pub struct StageResult {
    /// Parameters of the best-validation epoch (the input when no epoch ran).
    pub params: ModelParams<f32>,
    pub log: TrainLog,
    pub best_epoch: Option<u32>,
    pub best_score: Option<f64>,
}

/// Optional observer of every assembled batch, e.g. for auditing anchors.
pub type BatchHook<'h> = &'h mut dyn FnMut(&TrainBatch<'_>);

pub struct StageRunner<'h> {
    /// Checkpoints and the log go here when set.
    pub out_dir: Option<PathBuf>,
    pub hook: Option<BatchHook<'h>>,
}

impl Default for StageRunner<'_> {
    fn default() -> Self {
        Self { out_dir: None, hook: None }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

impl StageRunner<'_> {
    pub fn run(&mut self, config: &StageConfig, data: &StageData<'_>, init: ModelParams<f32>) -> Result<StageResult, TrainError> {
        config.validate()?;
        let mut log = TrainLog::default();
        if config.epochs == 0 {
            return Ok(StageResult { params: init, log, best_epoch: None, best_score: None });
        }
        let anchors = data.anchors();
        let steps_per_epoch = anchors.len() / config.batch_size + usize::from(anchors.len() % config.batch_size >= 2);
        if steps_per_epoch == 0 {
            return Err(TrainError::NoTrainingData);
        }
        let total_steps = steps_per_epoch * config.epochs as usize;
        let loss_config = LossConfig::new(config.margin, config.lambda);
        let eval_config = EvalConfig { seed: config.seed, ..EvalConfig::default() };
        let stage = config.name.as_str();

        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xb47c);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd409);

        let mut log_file = match &self.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                let path = dir.join(format!("{stage}.log.jsonl"));
                Some((std::fs::File::create(&path).map_err(io_err(&path))?, path))
            }
            None => None,
        };

        let mut params = init;
        let mut opt = AdamW::new(&params, AdamHyper::default());
        let mut best: Option<(u32, f64, ModelParams<f32>)> = None;
        let mut last_good: Option<PathBuf> = None;
        let mut since_best = 0u32;
        let mut step = 0usize;
        let start = Instant::now();
        for epoch in 1..=config.epochs {
            let mut order = anchors.clone();
            order.shuffle(&mut shuffle_rng);
            let (mut sum, mut sum_align, mut sum_margin, mut n) = (0.0, 0.0, 0.0, 0usize);
            let mut lr = config.lr;
            for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
                let batch = assemble_batch(data, chunk, config, &mut batch_rng)?;
                if let Some(hook) = self.hook.as_mut() {
                    hook(&batch);
                }
                let out = match combined_loss(&params, &batch, &loss_config, Some(&mut dropout_rng as &mut dyn RngCore)) {
                    Ok(out) if out.loss.is_finite() => out,
                    Ok(_) | Err(ObjectiveError::Model(ModelError::NonFiniteActivation(_))) => {
                        return Err(TrainError::DivergedLoss { epoch, step, last_good });
                    }
                    Err(e) => return Err(e.into()),
                };
                let mut grads = out.grads;
                clip_gradients(&mut grads, config.clip_norm);
                lr = cosine_lr(step, total_steps, config.lr, config.lr_min);
                opt.step(&mut params, &grads, lr, config.weight_decay)?;
                step += 1;
                sum += out.loss as f64;
                sum_align += out.align as f64;
                sum_margin += out.margin as f64;
                n += 1;
            }
            let val = validation_score(&params, &data.val, &eval_config)?;
            let record = EpochRecord {
                epoch,
                train_loss: sum / n as f64,
                align_loss: sum_align / n as f64,
                margin_loss: sum_margin / n as f64,
                validation_score: val,
                lr,
                tau: params.tau() as f64,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "{stage} epoch {epoch}: loss {:.4} (align {:.4}, margin {:.4}) val {val:.4} tau {:.4}",
                record.train_loss,
                record.align_loss,
                record.margin_loss,
                record.tau
            );
            if let Some((file, path)) = log_file.as_mut() {
                file.write_all((serde_json::to_string(&record).expect("record serializes") + "\n").as_bytes())
                    .map_err(io_err(path))?;
            }
            log.records.push(record);

            let improved = best.as_ref().map_or(true, |(_, s, _)| val > *s);
            if let Some(dir) = &self.out_dir {
                let meta = CheckpointMeta::describe(&params, stage, epoch, Some(val), config.seed);
                let path = dir.join(format!("{stage}-epoch{epoch:03}.iscr"));
                save_checkpoint(&path, &params, &meta)?;
                if improved {
                    save_checkpoint(&dir.join(format!("{stage}-best.iscr")), &params, &meta)?;
                }
                last_good = Some(path);
            }
            if improved {
                best = Some((epoch, val, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.early_stop_patience {
                    log::info!("{stage}: early stop after epoch {epoch}");
                    break;
                }
            }
        }
        let (best_epoch, best_score, best_params) = best.expect("at least one epoch ran");
        Ok(StageResult { params: best_params, log, best_epoch: Some(best_epoch), best_score: Some(best_score) })
    }
}

/// [`StageRunner::run`] without checkpoints or hooks.
pub fn run_stage(config: &StageConfig, data: &StageData<'_>, init: ModelParams<f32>) -> Result<StageResult, TrainError> {
    StageRunner::default().run(config, data, init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 5e-4, 1e-6), 5e-4);
        assert_eq!(cosine_lr(100, 100, 5e-4, 1e-6), 1e-6);
        assert_abs_diff_eq!(cosine_lr(50, 100, 5e-4, 1e-6), (5e-4 + 1e-6) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn single_scalar_adamw_step_by_hand() {
        // g = 0.5, lr = 0.1, wd = 0.01, θ₀ = 2:
        // decay: 2 − 0.1·0.01·2 = 1.998; m̂ = 0.5, v̂ = 0.25; step = 0.1·0.5/(0.5 + 1e-8)
        let (mut theta, mut m, mut v) = ([2.0f32], [0.0f32], [0.0f32]);
        adamw_update(&mut theta, &[0.5], &mut m, &mut v, 1, 0.1, 0.01, AdamHyper::default());
        let expected = 1.998 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert_abs_diff_eq!(theta[0] as f64, expected, epsilon = 1e-6);
        assert_abs_diff_eq!(m[0], 0.05, epsilon = 1e-7);
        assert_abs_diff_eq!(v[0], 0.00025, epsilon = 1e-9);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (mut theta, mut m, mut v) = ([0.3f32, -1.2], [0.0f32; 2], [0.0f32; 2]);
        adamw_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.0, AdamHyper::default());
        assert_eq!(theta, [0.3, -1.2]);
    }

    #[test]
    fn stage_defaults() {
        let p = StageConfig::pretrain();
        assert_eq!((p.epochs, p.lr, p.lambda, p.margin, p.batch_size), (30, 5e-4, 2.0, 0.20, 1024));
        let f = StageConfig::finetune();
        assert_eq!((f.epochs, f.lr, f.lambda), (40, 1e-4, 3.0));
        assert!(p.validate().is_ok() && f.validate().is_ok());
        assert!(StageConfig { batch_size: 1, ..p.clone() }.validate().is_err());
        assert!(StageConfig { lr_min: 1e-3, ..p }.validate().is_err());
    }

    #[test]
    fn view_selection_falls_back_to_base() {
        let field = TextField::new(None, Some(vec![1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| select_view(&field, 0.75, &mut rng).is_none()));
    }
}

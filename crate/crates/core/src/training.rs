//! Teacher-forced training: deterministic pretraining and fine-tuning, and
//! fair-CRPS retrofitting with separate learning rates for the backbone and
//! the noise branch.

use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, BackboneConfig};
use crate::dynamics::{Split, TrajectoryDataset};
use crate::model::{ModelBundle, ModelError, Params};
use crate::modulation::{is_noise_param, replicate, sample_noise, NoiseBranchConfig};
use crate::objectives::{objectives, LossError};
use crate::registry::{Named, Registry, UnknownName};
use crate::tensor::{Tape, Tensor};
use crate::util::derive_seed;

const BATCH_STREAM: u64 = 0x6261_7463;
const NOISE_STREAM: u64 = 0x6e6f_6973;
const VAL_STREAM: u64 = 0x7661_6c69;
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: &'static str, epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Unknown(#[from] UnknownName),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: String,
    pub lr_backbone: f64,
    /// Used only when retrofitting.
    pub lr_noise: f64,
    pub weight_decay: f64,
    pub schedule: String,
    pub warmup_epochs: usize,
    pub cooldown_epochs: usize,
    pub grad_clip_norm: f64,
    /// Input windows per step. Deterministic runs use `batch_size * members`
    /// windows so both pipelines make the same number of member forwards.
    pub batch_size: usize,
    pub members: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Fixed validation windows scored after every epoch.
    pub val_windows: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: "mae".into(),
            lr_backbone: 1e-3,
            lr_noise: 1e-3,
            weight_decay: 1e-4,
            schedule: "inv_sqrt".into(),
            warmup_epochs: 5,
            cooldown_epochs: 5,
            grad_clip_norm: 10.0,
            batch_size: 8,
            members: 4,
            epochs: 20,
            steps_per_epoch: 100,
            val_windows: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn plan(&self) -> Result<SchedulePlan> {
        SchedulePlan::new(
            self.total_steps(),
            self.warmup_epochs * self.steps_per_epoch,
            self.cooldown_epochs * self.steps_per_epoch,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        objectives().get(&self.loss)?;
        schedules().get(&self.schedule)?;
        self.plan()?;
        if self.batch_size == 0 || self.members == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("batch_size, members, epochs and steps_per_epoch must be positive".into());
        }
        if self.val_windows == 0 {
            return bad("val_windows must be positive".into());
        }
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_noise", self.lr_noise), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        Ok(())
    }

    /// Rows forwarded per step, identical for both pipelines.
    pub fn rows_per_step(&self) -> usize {
        self.batch_size * self.members
    }
}

// ---------------------------------------------------------------------------
// Learning-rate schedules

/// Step counts a schedule is evaluated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchedulePlan {
    pub total: usize,
    pub warmup: usize,
    pub cooldown: usize,
}

impl SchedulePlan {
    pub fn new(total: usize, warmup: usize, cooldown: usize) -> Result<Self> {
        if warmup + cooldown > total {
            return Err(TrainError::Config(format!(
                "warmup ({warmup}) + cooldown ({cooldown}) steps exceed the {total} total steps"
            )));
        }
        Ok(Self { total, warmup, cooldown })
    }
}

/// Learning-rate multiplier as a function of the step, for steps `0..=total`.
/// Training step `i` (0-based) uses the multiplier at `i + 1`.
pub trait LrSchedule: Named + Send + Sync {
    fn multiplier(&self, step: usize, plan: &SchedulePlan) -> f64;
}

/// Linear warmup, `sqrt(warmup / step)` decay, then a linear cooldown to 0.
pub struct InvSqrt;

/// Linear warmup followed by a half cosine from 1 to 0.
pub struct Cosine;

impl Named for InvSqrt {
    fn name(&self) -> &'static str {
        "inv_sqrt"
    }
}

impl Named for Cosine {
    fn name(&self) -> &'static str {
        "cosine"
    }
}

fn warmup_ramp(step: usize, plan: &SchedulePlan) -> Option<f64> {
    (step < plan.warmup).then(|| step as f64 / plan.warmup as f64)
}

impl LrSchedule for InvSqrt {
    fn multiplier(&self, step: usize, plan: &SchedulePlan) -> f64 {
        let step = step.min(plan.total);
        if let Some(r) = warmup_ramp(step, plan) {
            return r;
        }
        let decay = |s: usize| {
            if plan.warmup == 0 || s == 0 {
                1.0
            } else {
                (plan.warmup as f64 / s.max(plan.warmup) as f64).sqrt()
            }
        };
        let start = plan.total - plan.cooldown;
        if plan.cooldown > 0 && step > start {
            return decay(start) * (plan.total - step) as f64 / plan.cooldown as f64;
        }
        decay(step)
    }
}

impl LrSchedule for Cosine {
    fn multiplier(&self, step: usize, plan: &SchedulePlan) -> f64 {
        let step = step.min(plan.total);
        if let Some(r) = warmup_ramp(step, plan) {
            return r;
        }
        let span = plan.total - plan.warmup;
        if span == 0 {
            return 0.0;
        }
        let frac = (step - plan.warmup) as f64 / span as f64;
        0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

pub fn schedules() -> &'static Registry<dyn LrSchedule> {
    static REG: std::sync::OnceLock<Registry<dyn LrSchedule>> = std::sync::OnceLock::new();
    REG.get_or_init(|| {
        Registry::<dyn LrSchedule>::new("schedule")
            .with(Box::new(InvSqrt))
            .with(Box::new(Cosine))
    })
}

// ---------------------------------------------------------------------------
// Optimiser

pub type Grads = IndexMap<String, Tensor>;

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &Grads) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the scale applied.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    scale
}

/// Parameters sharing one base learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: &'static str,
    pub lr: f64,
    pub params: Vec<String>,
}

/// Splits parameters into a backbone group and, if present, a noise group.
pub fn param_groups(params: &Params, lr_backbone: f64, lr_noise: f64) -> Vec<ParamGroup> {
    let (noise, base): (Vec<String>, Vec<String>) = params.names().cloned().partition(|n| is_noise_param(n));
    let mut groups = vec![ParamGroup {
        name: "backbone",
        lr: lr_backbone,
        params: base,
    }];
    if !noise.is_empty() {
        groups.push(ParamGroup {
            name: "noise",
            lr: lr_noise,
            params: noise,
        });
    }
    groups
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `groups`. A missing gradient
    /// counts as zero.
    pub fn step(&mut self, params: &mut Params, grads: &Grads, groups: &[ParamGroup], lr_scale: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for group in groups {
            let lr = group.lr * lr_scale;
            for name in &group.params {
                let Some(p) = params.get_mut(name) else { continue };
                let n = p.numel();
                let (m, v) = self
                    .moments
                    .entry(name.clone())
                    .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let g = grads.get(name).map(|g| g.data());
                let decay = 1.0 - lr * self.weight_decay;
                for (i, w) in p.data_mut().iter_mut().enumerate() {
                    let gi = g.map_or(0.0, |g| g[i]);
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    *w *= decay;
                    *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Data windows

/// Teacher-forcing batch: normalised histories `[B, k, C, spatial...]` and
/// next states `[B, C, spatial...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub history: Tensor,
    pub target: Tensor,
}

/// `(trajectory, t)` pairs whose history ends at frame `t` and whose target is `t + 1`.
pub fn sample_windows(
    data: &TrajectoryDataset,
    split: Split,
    history_len: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    let trajs = data.splits().get(split);
    if trajs.is_empty() {
        return Err(TrainError::Config(format!("{split:?} split is empty")));
    }
    if data.t_steps() < history_len + 1 {
        return Err(TrainError::Config(format!(
            "trajectories of {} frames are too short for history {history_len}",
            data.t_steps()
        )));
    }
    let lo = history_len - 1;
    let hi = data.t_steps() - 1;
    Ok((0..n)
        .map(|_| (trajs[rng.random_range(0..trajs.len())], rng.random_range(lo..hi)))
        .collect())
}

pub fn assemble_batch(data: &TrajectoryDataset, windows: &[(usize, usize)], history_len: usize) -> Result<Batch> {
    let frame = data.frame_len();
    let mut hist = Vec::with_capacity(windows.len() * history_len * frame);
    let mut target = Vec::with_capacity(windows.len() * frame);
    for &(i, t) in windows {
        for s in t + 1 - history_len..=t {
            hist.extend(data.normalized_frame(i, s));
        }
        target.extend(data.normalized_frame(i, t + 1));
    }
    let b = windows.len();
    let mut hs = vec![b, history_len, data.channels()];
    hs.extend_from_slice(data.spatial());
    let mut ts = vec![b, data.channels()];
    ts.extend_from_slice(data.spatial());
    Ok(Batch {
        history: Tensor::new(hs, hist).map_err(ModelError::from)?,
        target: Tensor::new(ts, target).map_err(ModelError::from)?,
    })
}

/// Training batch drawn at global step `step` with `windows` windows.
pub fn training_batch(data: &TrajectoryDataset, cfg: &TrainConfig, history_len: usize, step: usize, windows: usize) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, BATCH_STREAM), step as u64));
    let w = sample_windows(data, Split::Train, history_len, windows, &mut rng)?;
    assemble_batch(data, &w, history_len)
}

/// Noise for the `rows` member rows at global step `step`.
pub fn training_noise(cfg: &TrainConfig, d_noise: usize, step: usize, rows: usize) -> Result<Tensor> {
    Ok(sample_noise(rows, d_noise, derive_seed(derive_seed(cfg.seed, NOISE_STREAM), step as u64))?)
}

// ---------------------------------------------------------------------------
// Logs

/// Per-step diagnostics kept in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr_backbone: f64,
    pub lr_noise: f64,
}

/// One CSV row; epoch 0 is the model before any update.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr_backbone: f64,
    pub lr_noise: f64,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub grad_norm: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Single-member forward passes performed by optimisation steps.
    pub member_forwards: u64,
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,step,lr_backbone,lr_noise,train_loss,val_loss,grad_norm,seconds";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{:e},{:e},{},{:e},{},{:.3}\n",
                r.epoch,
                r.step,
                r.lr_backbone,
                r.lr_noise,
                opt(r.train_loss),
                r.val_loss,
                opt(r.grad_norm),
                r.seconds
            ));
        }
        out
    }

    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }
}

// ---------------------------------------------------------------------------
// Pipelines

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Deterministic,
    Crps,
}

struct Trainer<'a> {
    data: &'a TrajectoryDataset,
    cfg: &'a TrainConfig,
    mode: Mode,
    loss_name: &'a str,
    val: Batch,
}

impl<'a> Trainer<'a> {
    fn new(data: &'a TrajectoryDataset, cfg: &'a TrainConfig, model: &ModelBundle, mode: Mode) -> Result<Self> {
        cfg.validate()?;
        check_compat(model, data)?;
        let loss_name = match mode {
            Mode::Deterministic => {
                if !matches!(cfg.loss.as_str(), "mae" | "mse") {
                    return Err(TrainError::Config(format!("deterministic training needs mae or mse, got {}", cfg.loss)));
                }
                cfg.loss.as_str()
            }
            Mode::Crps => {
                if cfg.loss != "fair_crps" {
                    return Err(TrainError::Config(format!("retrofitting needs loss fair_crps, got {}", cfg.loss)));
                }
                if cfg.members < 2 {
                    return Err(TrainError::Config(format!("retrofitting needs members >= 2, got {}", cfg.members)));
                }
                "fair_crps"
            }
        };
        let k = model.backbone.history_len;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, VAL_STREAM));
        let windows = sample_windows(data, Split::Val, k, cfg.val_windows, &mut rng)?;
        let val = assemble_batch(data, &windows, k)?;
        Ok(Self {
            data,
            cfg,
            mode,
            loss_name,
            val,
        })
    }

    fn members(&self) -> usize {
        match self.mode {
            Mode::Deterministic => 1,
            Mode::Crps => self.cfg.members,
        }
    }

    /// Loss of `batch` on a fresh tape; returns the loss and, if requested,
    /// gradients of every parameter.
    fn evaluate(&self, model: &ModelBundle, batch: &Batch, eps_seed: Option<(u64, usize)>, grads: bool) -> Result<(f64, Grads)> {
        let tape = Tape::new();
        let p = model.params.to_vars(&tape, |_| grads);
        let b = batch.history.shape()[0];
        let m = self.members();
        let pred = match self.mode {
            Mode::Deterministic => backbone::forward(&model.backbone, &p, &tape, &batch.history, &[])?,
            Mode::Crps => {
                let mut rows_shape = vec![m * b];
                rows_shape.extend_from_slice(&batch.history.shape()[1..]);
                let rows = replicate(&batch.history, m)?.reshape(&rows_shape).map_err(ModelError::from)?;
                let d = model.noise.as_ref().ok_or(ModelError::MissingNoiseBranch)?.d_noise;
                let (seed, step) = eps_seed.expect("noise seed for ensemble loss");
                let eps = sample_noise(m * b, d, derive_seed(seed, step as u64))?;
                model.forward_with_noise(&p, &tape, &rows, &eps)?
            }
        };
        let mut ens_shape = vec![m];
        ens_shape.extend_from_slice(batch.target.shape());
        let ens = pred.reshape(&ens_shape).map_err(ModelError::from)?;
        let loss = objectives().get(self.loss_name)?.loss(&ens, &batch.target)?;
        let value = loss.item();
        let mut out = Grads::new();
        if grads && value.is_finite() {
            tape.backward(&loss.value).map_err(ModelError::from)?;
            for (name, var) in p.iter() {
                let g = var.grad().unwrap_or_else(|| Tensor::zeros(&var.shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok((value, out))
    }

    fn val_loss(&self, model: &ModelBundle) -> Result<f64> {
        const CHUNK: usize = 64;
        let n = self.val.history.shape()[0];
        let mut total = 0.0;
        for (ci, start) in (0..n).step_by(CHUNK).enumerate() {
            let end = (start + CHUNK).min(n);
            let chunk = Batch {
                history: slice_rows(&self.val.history, start, end),
                target: slice_rows(&self.val.target, start, end),
            };
            let seed = derive_seed(self.cfg.seed, VAL_STREAM ^ 1);
            let (v, _) = self.evaluate(model, &chunk, Some((seed, ci)), false)?;
            total += v * (end - start) as f64;
        }
        Ok(total / n as f64)
    }

    fn run(&self, mut model: ModelBundle, mut log: TrainLog) -> Result<(ModelBundle, TrainLog)> {
        let cfg = self.cfg;
        let plan = cfg.plan()?;
        let schedule = schedules().get(&cfg.schedule)?;
        let groups = param_groups(&model.params, cfg.lr_backbone, cfg.lr_noise);
        let mut opt = AdamW::new(cfg.weight_decay);
        let windows = match self.mode {
            Mode::Deterministic => cfg.rows_per_step(),
            Mode::Crps => cfg.batch_size,
        };
        let lr_noise_logged = if model.has_noise_branch() { cfg.lr_noise } else { 0.0 };

        let start = Instant::now();
        let val0 = self.val_loss(&model)?;
        if !val0.is_finite() {
            return Err(TrainError::NonFinite {
                what: "validation loss",
                epoch: 0,
                step: 0,
            });
        }
        log.epochs.push(EpochRecord {
            epoch: 0,
            step: 0,
            lr_backbone: 0.0,
            lr_noise: 0.0,
            train_loss: None,
            val_loss: val0,
            grad_norm: None,
            seconds: start.elapsed().as_secs_f64(),
        });
        let mut best = (val0, model.params.clone());
        log.best_epoch = 0;

        let noise_seed = derive_seed(cfg.seed, NOISE_STREAM);
        let mut step = 0usize;
        for epoch in 1..=cfg.epochs {
            let t0 = Instant::now();
            let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
            let mut mult = 0.0;
            for _ in 0..cfg.steps_per_epoch {
                let batch = training_batch(self.data, cfg, model.backbone.history_len, step, windows)?;
                let (loss, mut grads) = self.evaluate(&model, &batch, Some((noise_seed, step)), true)?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite { what: "loss", epoch, step });
                }
                let norm = grad_norm(&grads);
                if !norm.is_finite() {
                    return Err(TrainError::NonFinite { what: "gradient", epoch, step });
                }
                clip_grad_norm(&mut grads, cfg.grad_clip_norm);
                mult = schedule.multiplier(step + 1, &plan);
                opt.step(&mut model.params, &grads, &groups, mult);
                log.member_forwards += (windows * self.members()) as u64;
                log.steps.push(StepRecord {
                    loss,
                    grad_norm: norm,
                    clipped_norm: grad_norm(&grads),
                    lr_backbone: cfg.lr_backbone * mult,
                    lr_noise: lr_noise_logged * mult,
                });
                loss_sum += loss;
                norm_sum += norm;
                step += 1;
            }
            if model.params.check_finite().is_err() {
                return Err(TrainError::NonFinite {
                    what: "parameter",
                    epoch,
                    step,
                });
            }
            let val = self.val_loss(&model)?;
            if !val.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "validation loss",
                    epoch,
                    step,
                });
            }
            if val < best.0 {
                best = (val, model.params.clone());
                log.best_epoch = epoch;
            }
            let n = cfg.steps_per_epoch as f64;
            log.epochs.push(EpochRecord {
                epoch,
                step,
                lr_backbone: cfg.lr_backbone * mult,
                lr_noise: lr_noise_logged * mult,
                train_loss: Some(loss_sum / n),
                val_loss: val,
                grad_norm: Some(norm_sum / n),
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
        model.params = best.1;
        Ok((model, log))
    }
}

fn slice_rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * row..end * row].to_vec()).expect("row slice")
}

fn check_compat(model: &ModelBundle, data: &TrajectoryDataset) -> Result<()> {
    model.validate()?;
    if model.backbone.channels != data.channels() || model.backbone.spatial != data.spatial() {
        return Err(TrainError::Config(format!(
            "model expects {} channels on {:?}, dataset has {} on {:?}",
            model.backbone.channels,
            model.backbone.spatial,
            data.channels(),
            data.spatial()
        )));
    }
    Ok(())
}

/// Deterministic pretraining from a fresh initialisation. The model carries
/// the dataset's channel statistics; the best validation checkpoint is returned.
pub fn train_deterministic(
    data: &TrajectoryDataset,
    backbone_cfg: &BackboneConfig,
    cfg: &TrainConfig,
    config_hash: String,
) -> Result<(ModelBundle, TrainLog)> {
    let model = ModelBundle::init_deterministic(
        backbone_cfg.clone(),
        data.stats().clone(),
        derive_seed(cfg.seed, INIT_STREAM),
        config_hash,
    )?;
    let trainer = Trainer::new(data, cfg, &model, Mode::Deterministic)?;
    trainer.run(model, TrainLog::default())
}

/// Continued deterministic training of an existing checkpoint with a fresh
/// optimiser state.
pub fn finetune_deterministic(
    base: &ModelBundle,
    data: &TrajectoryDataset,
    cfg: &TrainConfig,
    config_hash: String,
) -> Result<(ModelBundle, TrainLog)> {
    if base.has_noise_branch() {
        return Err(TrainError::Config("deterministic fine-tuning needs a checkpoint without a noise branch".into()));
    }
    let model = ModelBundle {
        config_hash,
        ..base.clone()
    };
    let trainer = Trainer::new(data, cfg, &model, Mode::Deterministic)?;
    trainer.run(model, TrainLog::default())
}

/// Attaches a noise branch to a deterministic checkpoint and trains both
/// parameter groups under the fair CRPS.
pub fn retrofit_crps(
    base: &ModelBundle,
    noise_cfg: &NoiseBranchConfig,
    data: &TrajectoryDataset,
    cfg: &TrainConfig,
    config_hash: String,
) -> Result<(ModelBundle, TrainLog)> {
    let mut model = base.attach_noise_branch(noise_cfg.clone(), derive_seed(cfg.seed, INIT_STREAM))?;
    model.config_hash = config_hash;
    let trainer = Trainer::new(data, cfg, &model, Mode::Crps)?;
    let mut log = TrainLog::default();
    if cfg.lr_noise < cfg.lr_backbone {
        log.warnings.push(format!(
            "lr_noise ({}) is below lr_backbone ({}); the noise branch usually needs the larger rate",
            cfg.lr_noise, cfg.lr_backbone
        ));
    }
    trainer.run(model, log)
}

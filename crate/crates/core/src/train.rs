//! Training loop, evaluation, baselines and model accounting.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{ModelConfig, RolloutPlan};
use crate::data::SequenceDataset;
use crate::error::{ensure_config, Error, Result};
use crate::graph::Graph;
use crate::metrics::{Convention, MetricAccumulator, MetricReport};
use crate::model::{Body, Vmrnn};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vss_block::ConvUnit;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_min_lr() -> f64 {
    1e-6
}
fn default_data_range() -> f64 {
    1.0
}

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Floor of the cosine schedule, clamped to `learning_rate`.
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
    /// Caps the optimiser steps per epoch.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
}

impl OptimConfig {
    pub fn new(learning_rate: f64, epochs: usize, batch_size: usize) -> Self {
        OptimConfig {
            learning_rate,
            epochs,
            batch_size,
            grad_clip: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            min_lr: default_min_lr(),
            steps_per_epoch: None,
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub plan: RolloutPlan,
    pub optim: OptimConfig,
    /// Epoch cadence of periodic checkpoints; 0 disables them.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub convention: Convention,
    #[serde(default = "default_data_range")]
    pub data_range: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        let o = &self.optim;
        ensure_config!(o.learning_rate >= 0.0 && o.learning_rate.is_finite(), "learning_rate must be non-negative");
        ensure_config!(o.epochs >= 1, "epochs must be at least 1");
        ensure_config!(o.batch_size >= 1, "batch_size must be at least 1");
        ensure_config!(o.grad_clip.is_none_or(|c| c > 0.0), "grad_clip must be positive");
        ensure_config!((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2), "betas must lie in [0, 1)");
        ensure_config!(o.eps > 0.0, "eps must be positive");
        ensure_config!(o.steps_per_epoch != Some(0), "steps_per_epoch must be positive");
        ensure_config!(self.data_range > 0.0, "data_range must be positive");
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}

/// Cosine decay from `lr` to `min(min_lr, lr)` over `total` steps.
pub fn cosine_lr(lr: f64, min_lr: f64, step: usize, total: usize) -> f64 {
    let floor = min_lr.min(lr);
    if total <= 1 {
        return lr;
    }
    let progress = (step as f64 / (total - 1) as f64).min(1.0);
    floor + 0.5 * (lr - floor) * (1.0 + (PI * progress).cos())
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor<f32>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0f32; p.len()]).collect();
        Adam { beta1, beta2, eps, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<()> {
        ensure_config!(grads.len() == store.len(), "gradient count {} != parameter count {}", grads.len(), store.len());
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            }
            if step == 0.0 {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                p[k] -= step * m[k] / (v[k].sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss and gradients of one batch `[B, T, H, W, C]`: the mean over every
/// rollout step of the per-pixel MSE against the next frame.
pub fn batch_loss(
    model: &Vmrnn,
    store: &ParamStore<f32>,
    batch: &Tensor<f32>,
    plan: &RolloutPlan,
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    ensure_config!(
        batch.rank() == 5 && batch.shape()[1] >= plan.clip_len(),
        "training clips need {} frames, got shape {:?}",
        plan.clip_len(),
        batch.shape()
    );
    let mut g = Graph::new(store);
    let preds = model.rollout_graph(&mut g, batch, plan)?;
    let mut terms = Vec::with_capacity(preds.len());
    for (t, &p) in preds.iter().enumerate() {
        let target = g.constant(batch.select1(t + 1)?);
        terms.push(g.mse_loss(p, target)?);
    }
    let total = g.sum(&terms)?;
    let loss = g.scale(total, 1.0 / terms.len() as f32);
    let value = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?.into_param_grads();
    Ok((value, grads))
}

/// Statistics of one optimiser step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Global norm actually applied, after clipping.
    pub applied_norm: f64,
}

/// Model, parameters and optimiser state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Vmrnn,
    pub params: ParamStore<f32>,
    pub optimizer: Adam,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Vmrnn::init::<f32>(&cfg.model, cfg.seed)?;
        let o = &cfg.optim;
        let optimizer = Adam::new(&params, o.beta1, o.beta2, o.eps);
        Ok(Trainer { cfg: cfg.clone(), model, params, optimizer, step: 0 })
    }

    /// One forward/backward/update on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &Tensor<f32>, lr: f64) -> Result<StepStats> {
        let (loss, mut grads) = batch_loss(&self.model, &self.params, batch, &self.cfg.plan)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: 0, step: self.step });
        }
        let grad_norm = match self.cfg.optim.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { epoch: 0, step: self.step });
        }
        let applied_norm = global_norm(&grads);
        self.optimizer.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        Ok(StepStats { loss, lr, grad_norm, applied_norm })
    }

    fn meta(&self, epoch: usize, val_mse: Option<f64>) -> CheckpointMeta {
        CheckpointMeta { model: self.cfg.model.clone(), seed: self.cfg.seed, epoch, step: self.step, val_mse }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<MetricReport>,
    pub wall_clock_secs: f64,
    /// SHA-256 of the shuffling RNG state after the epoch.
    pub rng_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mse,val_mae,val_ssim,val_psnr,wall_clock_secs,rng_digest\n");
        for e in &self.epochs {
            let v = |f: fn(&MetricReport) -> f64| e.val.as_ref().map(f).map_or(String::new(), |x| x.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.3},{}\n",
                e.epoch,
                e.train_loss,
                v(|r| r.mse),
                v(|r| r.mae),
                v(|r| r.ssim),
                v(|r| r.psnr),
                e.wall_clock_secs,
                e.rng_digest
            ));
        }
        out
    }
}

fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut h = Sha256::new();
    h.update(rng.get_seed());
    h.update(rng.get_stream().to_le_bytes());
    h.update(rng.get_word_pos().to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Vmrnn,
    pub params: ParamStore<f32>,
    pub log: TrainLog,
    /// Lowest validation (or training) MSE checkpoint, when an output
    /// directory was given.
    pub best: Option<PathBuf>,
    pub last: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Minimises the rollout MSE over `train_ds`. When `out_dir` is given,
/// writes `last.ckpt` every `checkpoint_every` epochs, `best.ckpt` whenever
/// the monitored MSE improves, and `train_log.csv` after each epoch. A
/// non-finite loss aborts with [`Error::Diverged`], leaving earlier
/// checkpoints in place.
pub fn train(
    cfg: &TrainConfig,
    train_ds: &SequenceDataset,
    val_ds: Option<&SequenceDataset>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut tr = Trainer::new(cfg)?;
    check_dataset(&cfg.model, &cfg.plan, train_ds)?;
    if let Some(v) = val_ds {
        check_dataset(&cfg.model, &cfg.plan, v)?;
    }
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let o = &cfg.optim;
    let batches = train_ds.len().div_ceil(o.batch_size);
    let per_epoch = o.steps_per_epoch.map_or(batches, |s| s.min(batches));
    let total = per_epoch * o.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = TrainLog::default();
    let mut best_mse = f64::INFINITY;
    let (mut best, mut last) = (None, None);
    let clip = cfg.plan.clip_len();
    for epoch in 0..o.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, idx) in order.chunks(o.batch_size).take(per_epoch).enumerate() {
            let batch = train_ds.batch::<f32>(idx)?;
            let batch = if batch.shape()[1] > clip { truncate_time(&batch, clip)? } else { batch };
            let lr = cosine_lr(o.learning_rate, o.min_lr, tr.step, total);
            let stats = tr.train_step(&batch, lr).map_err(|e| match e {
                Error::Diverged { .. } => Error::Diverged { epoch, step: b },
                other => other,
            })?;
            sum += stats.loss;
            log.step_losses.push(stats.loss);
        }
        let train_loss = sum / per_epoch as f64;
        let val = match val_ds {
            Some(v) => {
                Some(evaluate(&tr.model, &tr.params, v, &cfg.plan, cfg.convention, cfg.data_range, o.batch_size)?)
            }
            None => None,
        };
        let monitored = val.as_ref().map_or(train_loss, |r| r.mse);
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == o.epochs {
                let p = d.join(LAST_CHECKPOINT);
                save_checkpoint(&p, &tr.meta(epoch + 1, val.as_ref().map(|r| r.mse)), &tr.params)?;
                last = Some(p);
            }
            if monitored < best_mse {
                let p = d.join(BEST_CHECKPOINT);
                save_checkpoint(&p, &tr.meta(epoch + 1, val.as_ref().map(|r| r.mse)), &tr.params)?;
                best = Some(p);
            }
        }
        best_mse = best_mse.min(monitored);
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            rng_digest: rng_digest(&rng),
        });
        if let Some(d) = out_dir {
            std::fs::write(d.join("train_log.csv"), log.to_csv())?;
        }
    }
    Ok(TrainOutcome { model: tr.model, params: tr.params, log, best, last })
}

fn truncate_time(batch: &Tensor<f32>, len: usize) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = (0..len).map(|t| batch.select1(t)).collect::<Result<_>>()?;
    Tensor::stack1(&parts)
}

fn check_dataset(model: &ModelConfig, plan: &RolloutPlan, ds: &SequenceDataset) -> Result<()> {
    ensure_config!(!ds.is_empty(), "dataset is empty");
    ensure_config!(
        ds.frame_shape() == model.resolution,
        "dataset frames {:?} do not match model resolution {:?}",
        ds.frame_shape(),
        model.resolution
    );
    ensure_config!(
        ds.seq_len() >= plan.clip_len(),
        "clips of {} frames are shorter than observe + horizon = {}",
        ds.seq_len(),
        plan.clip_len()
    );
    Ok(())
}

/// `[B, T, ...]` frames `start..start + len` along time.
fn time_window(batch: &Tensor<f32>, start: usize, len: usize) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = (start..start + len).map(|t| batch.select1(t)).collect::<Result<_>>()?;
    Tensor::stack1(&parts)
}

/// Rolls the model out on every clip and scores the `horizon` predictions.
pub fn evaluate(
    model: &Vmrnn,
    store: &ParamStore<f32>,
    ds: &SequenceDataset,
    plan: &RolloutPlan,
    convention: Convention,
    data_range: f64,
    batch_size: usize,
) -> Result<MetricReport> {
    check_dataset(&model.config, plan, ds)?;
    ensure_config!(batch_size >= 1, "batch_size must be at least 1");
    let mut acc = MetricAccumulator::new(plan.horizon, convention, data_range);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let batch = ds.batch::<f32>(chunk)?;
        let pred = model.rollout(store, &batch, plan)?;
        acc.add(&pred, &time_window(&batch, plan.observe, plan.horizon)?)?;
    }
    acc.finish()
}

/// [`evaluate`] for a checkpoint on disk.
pub fn evaluate_checkpoint(
    path: &Path,
    ds: &SequenceDataset,
    plan: &RolloutPlan,
    convention: Convention,
    data_range: f64,
    batch_size: usize,
) -> Result<MetricReport> {
    let (model, store, _) = load_checkpoint::<f32>(path)?;
    evaluate(&model, &store, ds, plan, convention, data_range, batch_size)
}

/// Scores the pseudo-model that repeats the last observed frame.
pub fn copy_last_baseline(
    ds: &SequenceDataset,
    plan: &RolloutPlan,
    convention: Convention,
    data_range: f64,
) -> Result<MetricReport> {
    plan.validate()?;
    ensure_config!(!ds.is_empty(), "dataset is empty");
    ensure_config!(ds.seq_len() >= plan.clip_len(), "clips shorter than observe + horizon");
    let mut acc = MetricAccumulator::new(plan.horizon, convention, data_range);
    for i in 0..ds.len() {
        let clip = ds.batch::<f32>(&[i])?;
        let last = clip.select1(plan.observe - 1)?;
        let pred = Tensor::stack1(&vec![last; plan.horizon])?;
        acc.add(&pred, &time_window(&clip, plan.observe, plan.horizon)?)?;
    }
    acc.finish()
}

/// Number of learnable scalars.
pub fn count_parameters<T: crate::tensor::Real>(store: &ParamStore<T>) -> usize {
    store.num_scalars()
}

/// Multiply-accumulate counts of a model, batch size one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEstimate {
    /// MACs of linear maps, convolutions and norms in one recurrent step.
    pub dense_macs: u64,
    /// MACs of the selective-scan recurrences in one recurrent step.
    pub scan_macs: u64,
    /// Recurrent steps of one rollout.
    pub steps: u64,
}

impl FlopEstimate {
    /// All MACs of one step.
    pub fn step_macs(&self) -> u64 {
        self.dense_macs + self.scan_macs
    }

    /// `2 × MAC` of one step.
    pub fn step_flops(&self) -> u64 {
        2 * self.step_macs()
    }

    /// Dense MACs over a whole rollout. Operator-level profilers report one
    /// MAC as one FLOP and cannot see the fused scan kernel, so this is the
    /// figure they print.
    pub fn profiler_flops(&self) -> u64 {
        self.dense_macs * self.steps
    }

    /// All MACs over a whole rollout.
    pub fn rollout_macs(&self) -> u64 {
        self.step_macs() * self.steps
    }
}

fn linear_macs(l: &Linear, tokens: u64) -> u64 {
    tokens * (l.in_dim * l.out_dim) as u64
}

/// Layer norm, counted as five operations per element.
fn norm_macs(tokens: u64, dim: usize) -> u64 {
    5 * tokens * dim as u64
}

fn block_macs(b: &crate::vss_block::VssBlock, tokens: u64) -> (u64, u64) {
    let e = b.hidden as u64;
    let mut scan = 0;
    let mut m = norm_macs(tokens, b.dim) + linear_macs(&b.in_proj, tokens) + norm_macs(tokens, b.hidden);
    m += match &b.conv {
        ConvUnit::Dw(c) => tokens * e * (c.ksize * c.ksize) as u64,
        ConvUnit::Conv2d(c) => linear_macs(&c.linear, tokens),
        ConvUnit::DwDwd1x1 { dw, dwd, pointwise } => {
            tokens * e * (dw.ksize * dw.ksize + dwd.ksize * dwd.ksize) as u64 + linear_macs(pointwise, tokens)
        }
    };
    for s in &b.ss2d.dirs {
        let n = s.state_dim as u64;
        m += linear_macs(&s.delta_down, tokens) + linear_macs(&s.delta_up, tokens) + linear_macs(&s.bc, tokens);
        // Ā·h, (Δu)·B and C·h per state, plus the skip D·u.
        scan += tokens * e * (3 * n + 1);
    }
    (m + linear_macs(&b.out_proj, tokens), scan)
}

/// Counts MACs of every linear map, convolution, normalisation and scan
/// update for one recurrent step; elementwise activations are not counted.
pub fn flop_breakdown(model: &Vmrnn, plan: &RolloutPlan) -> FlopEstimate {
    let cfg = &model.config;
    let (gh, gw) = cfg.grid();
    let full = (gh * gw) as u64;
    let mut macs = linear_macs(&model.embed.proj, full) + linear_macs(&model.head.proj, full);
    let mut scan = 0;
    for (cell, ((h, w), _, _)) in model.cells().into_iter().zip(cfg.cell_layout()) {
        let tokens = (h * w) as u64;
        macs += linear_macs(&cell.lp, tokens);
        for b in &cell.blocks {
            let (d, s) = block_macs(b, tokens);
            macs += d;
            scan += s;
        }
    }
    if let Body::Deep { merges, expands, .. } = &model.body {
        macs += norm_macs(full / 4, merges[0].norm_dim()) + linear_macs(&merges[0].reduce, full / 4);
        macs += norm_macs(full / 16, merges[1].norm_dim()) + linear_macs(&merges[1].reduce, full / 16);
        macs += linear_macs(&expands[0].expand, full / 16) + linear_macs(&expands[1].expand, full / 4);
    }
    FlopEstimate { dense_macs: macs, scan_macs: scan, steps: plan.steps() as u64 }
}

/// `2 × MAC` over every linear map, convolution and scan step of one
/// recurrent step.
pub fn estimate_flops(model: &Vmrnn, plan: &RolloutPlan) -> u64 {
    flop_breakdown(model, plan).step_flops()
}

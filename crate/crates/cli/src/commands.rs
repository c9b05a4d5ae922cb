use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use vmrnn::checkpoint::load_checkpoint;
use vmrnn::data::{load_dataset, save_dataset, write_frame_image};
use vmrnn::metrics::{report, MetricReport};
use vmrnn::presets::{AblationAxis, RunConfig};
use vmrnn::train::{
    copy_last_baseline, count_parameters, evaluate, flop_breakdown, train as run_training, BEST_CHECKPOINT,
    LAST_CHECKPOINT,
};
use vmrnn::{RolloutPlan, Tensor, Vmrnn};

use crate::run::{config_error, default_val_size, ensure_dir, split, DataArgs, RunArgs};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output dataset file.
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Seed for the generator; defaults to the run seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let seed = a.data_seed.unwrap_or(cfg.train.seed);
    let started = Instant::now();
    let ds = cfg.data.generate(seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_dataset(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} clips of shape {:?} to {} in {:.1}s",
        ds.len(),
        &ds.frames.shape()[1..],
        a.out.display(),
        started.elapsed().as_secs_f64()
    );
    println!("sha256 {}", ds.digest());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Separate validation dataset; otherwise the tail of the training data.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Clips held out for validation when `--val-data` is absent.
    #[arg(long)]
    val_size: Option<usize>,
    /// Output directory for checkpoints, logs and the resolved config.
    #[arg(long, short = 'o', default_value = "runs/latest")]
    out: PathBuf,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let ds = a.data.load(&cfg, cfg.train.seed)?;
    let (train_ds, val_ds) = match &a.val_data {
        Some(p) => (ds, Some(load_dataset(p).with_context(|| format!("loading {}", p.display()))?)),
        None => {
            let n = a.val_size.unwrap_or_else(|| default_val_size(ds.len()));
            split(ds, n)?
        }
    };
    ensure_dir(&a.out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    let m = &cfg.train.model;
    let (_, params) = Vmrnn::init::<f32>(m, cfg.train.seed)?;
    println!(
        "training {:?} model: {} parameters, {} train / {} val clips, plan {}->{}",
        m.variant,
        count_parameters(&params),
        train_ds.len(),
        val_ds.as_ref().map_or(0, |v| v.len()),
        cfg.train.plan.observe,
        cfg.train.plan.horizon
    );
    let started = Instant::now();
    let out = run_training(&cfg.train, &train_ds, val_ds.as_ref(), Some(&a.out))?;
    println!("{:>5}  {:>12}  {:>12}  {:>8}  {:>8}", "epoch", "train_loss", "val_mse", "val_ssim", "secs");
    for e in &out.log.epochs {
        let (mse, ssim) = e.val.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.mse, r.ssim));
        println!("{:>5}  {:>12.6}  {:>12.6}  {:>8.4}  {:>8.1}", e.epoch, e.train_loss, mse, ssim, e.wall_clock_secs);
    }
    if let Some(rep) = out.log.epochs.last().and_then(|e| e.val.as_ref()) {
        std::fs::write(a.out.join("val_metrics.csv"), rep.to_csv())?;
    }
    println!(
        "done in {:.1}s; wrote {} and {} to {}",
        started.elapsed().as_secs_f64(),
        LAST_CHECKPOINT,
        BEST_CHECKPOINT,
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-frame CSV; a `_h<horizon>` suffix is added when several
    /// horizons are evaluated.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Also score the copy-last-frame baseline.
    #[arg(long)]
    baseline: bool,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let (model, params, meta) =
        load_checkpoint::<f32>(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let cfg = with_model(cfg, &model);
    let ds = a.data.load(&cfg, cfg.train.seed + 1)?;
    println!("checkpoint epoch {} step {}; {} clips", meta.epoch, meta.step, ds.len());
    let plans = cfg.eval_plans();
    for plan in &plans {
        let rep = evaluate(
            &model,
            &params,
            &ds,
            plan,
            cfg.train.convention,
            cfg.train.data_range,
            cfg.train.optim.batch_size,
        )?;
        println!("plan {}->{}\n{rep}", plan.observe, plan.horizon);
        if a.baseline {
            let base = copy_last_baseline(&ds, plan, cfg.train.convention, cfg.train.data_range)?;
            println!("copy-last baseline\n{base}");
        }
        if let Some(out) = &a.out {
            let path = if plans.len() > 1 { suffixed(out, plan.horizon) } else { out.clone() };
            write_csv(&path, &rep)?;
        }
    }
    Ok(())
}

/// Evaluation uses the architecture stored in the checkpoint.
fn with_model(mut cfg: RunConfig, model: &Vmrnn) -> RunConfig {
    cfg.train.model = model.config.clone();
    cfg
}

fn suffixed(path: &Path, horizon: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_h{horizon}{ext}"))
}

fn write_csv(path: &Path, rep: &MetricReport) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    std::fs::write(path, rep.to_csv()).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip to predict.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Directory for images and `metrics.csv`.
    #[arg(long, short = 'o', default_value = "predictions")]
    out: PathBuf,
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let (model, params, _) =
        load_checkpoint::<f32>(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let cfg = with_model(cfg, &model);
    let ds = a.data.load(&cfg, cfg.train.seed + 1)?;
    if a.index >= ds.len() {
        return Err(config_error(format!("clip index {} out of range for {} clips", a.index, ds.len())));
    }
    let plan = cfg.eval_plans().last().copied().unwrap_or(cfg.train.plan);
    if ds.seq_len() < plan.clip_len() {
        return Err(config_error(format!("clips of {} frames are shorter than {}", ds.seq_len(), plan.clip_len())));
    }
    let clip = ds.batch::<f32>(&[a.index])?;
    let pred = model.rollout(&params, &clip, &plan)?;
    ensure_dir(&a.out)?;
    let ext = if cfg.train.model.resolution[2] == 1 { "pgm" } else { "ppm" };
    let [h, w, c] = cfg.train.model.resolution;
    let frame = |t: &Tensor<f32>, i: usize| -> Result<Tensor<f32>> { Ok(t.select1(i)?.reshape(&[h, w, c])?) };
    for t in 0..plan.observe {
        write_frame_image(&frame(&clip, t)?, &a.out.join(format!("input_{:02}.{ext}", t + 1)))?;
    }
    let mut targets = Vec::with_capacity(plan.horizon);
    for t in 0..plan.horizon {
        write_frame_image(&frame(&clip, plan.observe + t)?, &a.out.join(format!("target_{:02}.{ext}", t + 1)))?;
        write_frame_image(&frame(&pred, t)?, &a.out.join(format!("pred_{:02}.{ext}", t + 1)))?;
        targets.push(clip.select1(plan.observe + t)?);
    }
    let target = Tensor::stack1(&targets)?;
    let rep = report(&pred, &target, cfg.train.convention, cfg.train.data_range)?;
    write_csv(&a.out.join("metrics.csv"), &rep)?;
    println!("{rep}");
    println!("wrote {} frames to {}", plan.observe + 2 * plan.horizon, a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Time this many batch-one inference rollouts.
    #[arg(long, default_value_t = 0)]
    time: usize,
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let m = &cfg.train.model;
    let plan = cfg.train.plan;
    let (model, params) = Vmrnn::init::<f32>(m, cfg.train.seed)?;
    let f = flop_breakdown(&model, &plan);
    let rows = [
        ("parameters", count_parameters(&params).to_string()),
        ("dense MACs / step", f.dense_macs.to_string()),
        ("scan MACs / step", f.scan_macs.to_string()),
        ("FLOPs / step (2 x MACs)", f.step_flops().to_string()),
        ("rollout steps", f.steps.to_string()),
        ("rollout dense MACs", f.profiler_flops().to_string()),
        ("rollout FLOPs (2 x MACs)", (2 * f.rollout_macs()).to_string()),
    ];
    println!(
        "{:?} {:?} patch {} embed {} plan {}->{}",
        m.variant, m.resolution, m.patch_size, m.embed_dim, plan.observe, plan.horizon
    );
    for (k, v) in rows {
        println!("{k:<26} {v:>16}");
    }
    if a.time > 0 {
        let [h, w, c] = m.resolution;
        let frames = Tensor::<f32>::full(&[1, plan.observe, h, w, c], 0.5);
        let mut secs = Vec::with_capacity(a.time);
        for _ in 0..a.time {
            let started = Instant::now();
            model.rollout(&params, &frames, &plan)?;
            secs.push(started.elapsed().as_secs_f64());
        }
        secs.sort_by(f64::total_cmp);
        println!("{:<26} {:>15.3}s", "rollout median", secs[secs.len() / 2]);
        println!("{:<26} {:>15.3}s", "rollout min", secs[0]);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    data: DataArgs,
    /// conv_variant, patch_size or vsb_depth.
    #[arg(long)]
    axis: String,
    /// Comma-separated values; the axis defaults when omitted.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Optimiser steps per setting before scoring; 0 scores the
    /// initialisation.
    #[arg(long, default_value_t = 0)]
    train_steps: usize,
    /// Held-out clips used for scoring.
    #[arg(long, default_value_t = 16)]
    val_size: usize,
    /// Also write the table as CSV.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let axis = AblationAxis::parse(&a.axis)
        .ok_or_else(|| config_error(format!("unknown axis {:?}; use conv_variant, patch_size or vsb_depth", a.axis)))?;
    let values = if a.values.is_empty() { axis.default_values() } else { a.values.clone() };
    let base = a.run.resolve()?;
    // Resolve every setting before any work so a bad value fails fast.
    let settings: Vec<(String, RunConfig)> = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.train.model = axis.apply(&base.train.model, v.trim())?;
            Ok((v.trim().to_owned(), cfg))
        })
        .collect::<Result<_>>()?;
    let ds = a.data.load(&base, base.train.seed)?;
    let (train_ds, val_ds) = split(ds, a.val_size.max(1))?;
    let val_ds = val_ds.expect("validation size is at least one");
    let plan: RolloutPlan = base.train.plan;

    let mut csv = format!("{},params,gflops_per_step,train_loss,val_mse,val_ssim,val_psnr,secs\n", axis.name());
    println!(
        "{:>12}  {:>10}  {:>10}  {:>11}  {:>11}  {:>8}  {:>8}  {:>7}",
        axis.name(),
        "params",
        "GFLOPs",
        "train_loss",
        "val_mse",
        "val_ssim",
        "psnr",
        "secs"
    );
    for (value, mut cfg) in settings {
        let started = Instant::now();
        let (model, params, train_loss) = if a.train_steps > 0 {
            cfg.train.optim.epochs = 1;
            cfg.train.optim.steps_per_epoch = Some(a.train_steps);
            let out = run_training(&cfg.train, &train_ds, None, None)?;
            let loss = out.log.epochs.last().map_or(f64::NAN, |e| e.train_loss);
            (out.model, out.params, loss)
        } else {
            let (m, p) = Vmrnn::init::<f32>(&cfg.train.model, cfg.train.seed)?;
            (m, p, f64::NAN)
        };
        let rep = evaluate(
            &model,
            &params,
            &val_ds,
            &plan,
            cfg.train.convention,
            cfg.train.data_range,
            cfg.train.optim.batch_size,
        )?;
        let n_params = count_parameters(&params);
        let gflops = flop_breakdown(&model, &plan).step_flops() as f64 / 1e9;
        let secs = started.elapsed().as_secs_f64();
        println!(
            "{value:>12}  {n_params:>10}  {gflops:>10.4}  {train_loss:>11.5}  {:>11.5}  {:>8.4}  {:>8.3}  {secs:>7.1}",
            rep.mse, rep.ssim, rep.psnr
        );
        let _ =
            writeln!(csv, "{value},{n_params},{gflops},{train_loss},{},{},{},{secs:.3}", rep.mse, rep.ssim, rep.psnr);
    }
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

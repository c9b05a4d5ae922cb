use vmrnn::checkpoint::load_checkpoint;
use vmrnn::data::{builtin_glyphs, generate_moving_sprites, SequenceDataset, SpriteConfig};
use vmrnn::metrics::Convention;
use vmrnn::train::{
    batch_loss, copy_last_baseline, cosine_lr, count_parameters, evaluate, evaluate_checkpoint, train, OptimConfig,
    TrainConfig, Trainer,
};
use vmrnn::{ModelConfig, RolloutPlan, Vmrnn};

fn tiny_config(observe: usize, horizon: usize, lr: f64, epochs: usize, batch: usize) -> TrainConfig {
    let mut model = ModelConfig::base([16, 16, 1], 4, 16, 1);
    model.state_dim = 4;
    TrainConfig {
        seed: 17,
        model,
        plan: RolloutPlan::new(observe, horizon).unwrap(),
        optim: OptimConfig::new(lr, epochs, batch),
        checkpoint_every: 1,
        convention: Convention::PerPixelMean,
        data_range: 1.0,
    }
}

fn tiny_data(seed: u64, n: usize, len: usize) -> SequenceDataset {
    let cfg = SpriteConfig { seed, n_sequences: n, seq_len: len, canvas: (16, 16), n_sprites: 1 };
    generate_moving_sprites(&cfg, &builtin_glyphs(7).unwrap()).unwrap()
}

#[test]
fn overfits_four_clips() {
    let mut cfg = tiny_config(2, 2, 1e-2, 1, 4);
    cfg.model.embed_dim = 32;
    let ds = tiny_data(1, 4, 4);
    let batch = ds.batch::<f32>(&[0, 1, 2, 3]).unwrap();
    let mut tr = Trainer::new(&cfg).unwrap();
    let first = tr.train_step(&batch, 1e-2).unwrap().loss;
    let mut last = first;
    for _ in 1..200 {
        last = tr.train_step(&batch, 1e-2).unwrap().loss;
    }
    assert!(last < 0.1 * first, "loss {first} -> {last}");

    let memorised = evaluate(&tr.model, &tr.params, &ds, &cfg.plan, Convention::PerPixelMean, 1.0, 4).unwrap();
    let baseline = copy_last_baseline(&ds, &cfg.plan, Convention::PerPixelMean, 1.0).unwrap();
    assert!(memorised.mse < baseline.mse, "{} vs {}", memorised.mse, baseline.mse);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = tiny_config(2, 2, 0.0, 1, 2);
    let ds = tiny_data(2, 4, 4);
    let out = train(&cfg, &ds, None, None).unwrap();
    let (_, init) = Vmrnn::init::<f32>(&cfg.model, cfg.seed).unwrap();
    for ((_, a), (_, b)) in out.params.iter().zip(init.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(out.log.step_losses.len(), 2);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let mut cfg = tiny_config(2, 2, 1e-3, 2, 2);
    let ds = tiny_data(3, 4, 5);
    let a = train(&cfg, &ds, None, None).unwrap();
    let b = train(&cfg, &ds, None, None).unwrap();
    assert_eq!(a.log.step_losses, b.log.step_losses);
    assert_eq!(a.params, b.params);
    let digests =
        |o: &vmrnn::train::TrainOutcome| o.log.epochs.iter().map(|e| e.rng_digest.clone()).collect::<Vec<_>>();
    assert_eq!(digests(&a), digests(&b));
    cfg.seed += 1;
    let c = train(&cfg, &ds, None, None).unwrap();
    assert_ne!(a.log.step_losses, c.log.step_losses);
}

#[test]
fn checkpoints_reproduce_metrics() {
    let cfg = tiny_config(2, 3, 1e-3, 2, 2);
    let train_ds = tiny_data(4, 4, 5);
    let val_ds = tiny_data(5, 3, 5);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &train_ds, Some(&val_ds), Some(dir.path())).unwrap();
    let last = out.last.clone().unwrap();
    assert!(out.best.as_ref().unwrap().exists());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let live = evaluate(&out.model, &out.params, &val_ds, &cfg.plan, cfg.convention, 1.0, 2).unwrap();
    let saved = evaluate_checkpoint(&last, &val_ds, &cfg.plan, cfg.convention, 1.0, 2).unwrap();
    assert_eq!(live, saved);
    assert_eq!(out.log.epochs.last().unwrap().val.as_ref(), Some(&live));
    let (model, params, meta) = load_checkpoint::<f32>(&last).unwrap();
    assert_eq!(model.config, cfg.model);
    assert_eq!(params, out.params);
    assert_eq!((meta.epoch, meta.step), (2, 4));
    assert_eq!(live.to_csv().lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 3);
}

#[test]
fn training_loss_matches_evaluated_mse_when_observing_one_frame() {
    // With a single observed frame every step is autoregressive, so the
    // training objective and the per-pixel evaluation MSE coincide.
    let cfg = tiny_config(1, 3, 1e-3, 1, 3);
    let ds = tiny_data(6, 3, 4);
    let (model, params) = Vmrnn::init::<f32>(&cfg.model, cfg.seed).unwrap();
    let batch = ds.batch::<f32>(&[0, 1, 2]).unwrap();
    let (loss, _) = batch_loss(&model, &params, &batch, &cfg.plan).unwrap();
    let rep = evaluate(&model, &params, &ds, &cfg.plan, Convention::PerPixelMean, 1.0, 3).unwrap();
    assert!((loss - rep.mse).abs() < 1e-6, "{loss} vs {}", rep.mse);
}

#[test]
fn clipping_bounds_the_applied_norm() {
    let mut cfg = tiny_config(2, 2, 1e-3, 1, 2);
    cfg.optim.grad_clip = Some(1e-3);
    let ds = tiny_data(7, 2, 4);
    let batch = ds.batch::<f32>(&[0, 1]).unwrap();
    let mut tr = Trainer::new(&cfg).unwrap();
    for _ in 0..3 {
        let s = tr.train_step(&batch, 1e-3).unwrap();
        assert!(s.grad_norm > 1e-3);
        assert!(s.applied_norm <= 1e-3 * (1.0 + 1e-5), "{}", s.applied_norm);
    }
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1e-3, 1e-5, 0, 100), 1e-3);
    assert!((cosine_lr(1e-3, 1e-5, 99, 100) - 1e-5).abs() < 1e-15);
    let mid = cosine_lr(1e-3, 0.0, 50, 101);
    assert!((mid - 5e-4).abs() < 1e-12);
    assert_eq!(cosine_lr(0.0, 1e-5, 10, 100), 0.0);
}

#[test]
fn parameter_count_is_linear_in_depth() {
    let count = |d: usize| {
        let cfg = ModelConfig::base([16, 16, 1], 4, 16, d);
        count_parameters(&Vmrnn::init::<f32>(&cfg, 0).unwrap().1) as i64
    };
    let (c1, c2, c3) = (count(1), count(2), count(3));
    assert!(c2 > c1);
    assert_eq!(c2 - c1, c3 - c2);
}

#[test]
fn too_short_clips_are_rejected() {
    let cfg = tiny_config(3, 3, 1e-3, 1, 2);
    assert!(train(&cfg, &tiny_data(8, 2, 5), None, None).is_err());
}

#[test]
fn memorised_single_clip_evaluates_near_perfectly() {
    let mut cfg = tiny_config(2, 2, 1e-2, 1, 1);
    cfg.model.embed_dim = 32;
    let ds = tiny_data(9, 1, 4);
    let batch = ds.batch::<f32>(&[0]).unwrap();
    let mut tr = Trainer::new(&cfg).unwrap();
    for _ in 0..300 {
        tr.train_step(&batch, 1e-2).unwrap();
    }
    let rep = evaluate(&tr.model, &tr.params, &ds, &cfg.plan, Convention::PerPixelMean, 1.0, 1).unwrap();
    assert!(rep.mse < 1e-3, "mse {}", rep.mse);
    assert!(rep.ssim > 0.95, "ssim {}", rep.ssim);
}

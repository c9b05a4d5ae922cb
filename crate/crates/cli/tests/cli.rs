use std::path::Path;
use std::process::{Command, Output};

fn vmrnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmrnn"))
        .args(args)
        .current_dir(dir)
        .env_remove("VMRNN_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

/// Small mnist-mini run shared by the train/eval/predict tests.
const TINY: [&str; 12] = [
    "--preset",
    "mnist-mini",
    "--sequences",
    "6",
    "--observe",
    "2",
    "--horizon",
    "3",
    "--embed-dim",
    "16",
    "--vsb-depth",
    "1",
];

fn tiny(extra: &[&str]) -> Vec<String> {
    TINY.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string()];
    args.extend(tiny(extra));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    vmrnn(dir, &refs)
}

#[test]
fn unknown_flags_print_usage_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = vmrnn(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    ok(&vmrnn(dir.path(), &["--help"]));
}

#[test]
fn config_errors_exit_one_and_runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(vmrnn(d, &["bench", "--preset", "nope"]).status.code(), Some(1));
    assert_eq!(vmrnn(d, &["bench"]).status.code(), Some(1));
    assert_eq!(vmrnn(d, &["bench", "--preset", "taxibj-b", "--patch-size", "3"]).status.code(), Some(1));
    assert_eq!(vmrnn(d, &["bench", "--preset", "taxibj-b", "--set", "optim.epochs=0"]).status.code(), Some(1));
    assert_eq!(vmrnn(d, &["ablate", "--preset", "mnist-mini", "--axis", "width"]).status.code(), Some(1));
    let o = vmrnn(d, &["eval", "--preset", "mnist-mini", "--checkpoint", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(d.join("bad.vmrn"), b"not a dataset").unwrap();
    assert_eq!(run(d, "train", &["--data", "bad.vmrn"]).status.code(), Some(2));
}

#[test]
fn bench_matches_library_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = vmrnn(dir.path(), &["bench", "--preset", "taxibj-b"]);
    ok(&o);
    let run = vmrnn::presets::preset("taxibj-b").unwrap();
    let (model, params) = vmrnn::Vmrnn::init::<f32>(&run.train.model, run.train.seed).unwrap();
    let count = vmrnn::train::count_parameters(&params);
    let flops = vmrnn::train::estimate_flops(&model, &run.train.plan);
    let text = stdout(&o);
    let value = |key: &str| -> u64 {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("{key} missing:\n{text}"));
        line.split_whitespace().last().unwrap().parse().unwrap()
    };
    assert_eq!(value("parameters"), count as u64);
    assert_eq!(value("FLOPs / step"), flops);
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(d, "generate", &["-o", "data/train.vmrn"]));
    ok(&run(d, "train", &["--data", "data/train.vmrn", "--epochs", "2", "--batch-size", "2", "-o", "run"]));
    for f in ["last.ckpt", "best.ckpt", "train_log.csv", "config.toml", "val_metrics.csv"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let o = vmrnn(
        d,
        &["eval", "--config", "run/config.toml", "--checkpoint", "run/last.ckpt", "--baseline", "-o", "eval.csv"],
    );
    ok(&o);
    assert!(stdout(&o).contains("copy-last baseline"));
    let csv = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 3);

    ok(&vmrnn(d, &["predict", "--config", "run/config.toml", "--checkpoint", "run/best.ckpt", "-o", "pred"]));
    for name in ["input_02.pgm", "target_03.pgm", "pred_01.pgm", "metrics.csv"] {
        assert!(d.join("pred").join(name).exists(), "{name} missing");
    }
    let img = std::fs::read(d.join("pred/pred_01.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(img.len(), b"P5\n32 32\n255\n".len() + 32 * 32);
}

#[test]
fn same_seed_runs_write_identical_logs_and_env_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(d, "train", &["--epochs", "1", "-o", "a"]));
    ok(&run(d, "train", &["--epochs", "1", "-o", "b"]));
    let losses = |p: &str| -> Vec<String> {
        std::fs::read_to_string(d.join(p).join("train_log.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().to_owned())
            .collect()
    };
    assert_eq!(losses("a"), losses("b"));
    assert_eq!(std::fs::read(d.join("a/last.ckpt")).unwrap(), std::fs::read(d.join("b/last.ckpt")).unwrap());

    let mut args = vec!["train".to_string()];
    args.extend(tiny(&["--epochs", "1", "-o", "c"]));
    let o =
        Command::new(env!("CARGO_BIN_EXE_vmrnn")).args(&args).current_dir(d).env("VMRNN_SEED", "7").output().unwrap();
    ok(&o);
    let cfg = std::fs::read_to_string(d.join("c/config.toml")).unwrap();
    assert!(cfg.lines().any(|l| l.trim() == "seed = 7"), "{cfg}");
    assert_ne!(losses("a"), losses("c"));
}

#[test]
fn run_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        "preset = \"taxibj-synth\"\nseed = 5\n\n[optim]\nepochs = 9\n\n[data]\nn_sequences = 4\n",
    )
    .unwrap();
    let o = vmrnn(d, &["train", "-c", "run.toml", "--epochs", "1", "--embed-dim", "16", "--vsb-depth", "1", "-o", "r"]);
    ok(&o);
    let cfg: toml::Table = std::fs::read_to_string(d.join("r/config.toml")).unwrap().parse().unwrap();
    assert_eq!(cfg["seed"].as_integer(), Some(5));
    assert_eq!(cfg["optim"]["epochs"].as_integer(), Some(1));
    assert_eq!(cfg["model"]["embed_dim"].as_integer(), Some(16));
    assert_eq!(cfg["data"]["n_sequences"].as_integer(), Some(4));
}

#[test]
fn taxibj_smoke_run_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let o = vmrnn(
        dir.path(),
        &[
            "train",
            "--preset",
            "taxibj-b",
            "--epochs",
            "1",
            "--sequences",
            "6",
            "--batch-size",
            "2",
            "--steps-per-epoch",
            "1",
            "-o",
            "tx",
        ],
    );
    ok(&o);
    assert!(dir.path().join("tx/last.ckpt").exists());
    assert!(dir.path().join("tx/train_log.csv").exists());
}

#[test]
fn ablate_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(d, "ablate", &["--axis", "vsb_depth", "--values", "2,4,6,8,10,12", "--val-size", "1", "-o", "ab.csv"]);
    ok(&o);
    let csv = std::fs::read_to_string(d.join("ab.csv")).unwrap();
    let values: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(values, ["2", "4", "6", "8", "10", "12"]);
    let params: Vec<u64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(params.windows(2).all(|w| w[1] > w[0]));

    for axis in ["conv_variant", "patch_size"] {
        ok(&run(d, "ablate", &["--axis", axis, "--val-size", "1", "--train-steps", "1"]));
    }
}

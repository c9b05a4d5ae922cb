//! Run-configuration flags shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use vmrnn::data::{load_dataset, load_external_grid, LayoutSpec, SequenceDataset, Split};
use vmrnn::presets::{preset, AblationAxis, RunConfig, PRESET_NAMES};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "VMRNN_SEED";

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    vmrnn::Error::Config(msg.into()).into()
}

/// Base configuration plus overrides. Precedence, lowest first: preset,
/// run file, `--set`, `VMRNN_SEED`, dedicated flags.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Named preset (mmnist-d, kth-b, kth40-b, taxibj-b, mnist-mini, taxibj-synth).
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML run file; may itself name a `preset`.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set optim.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, visible_alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Cap on optimiser steps per epoch.
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub observe: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// dw, conv2d or dw_dwd_1x1.
    #[arg(long)]
    pub conv_variant: Option<String>,
    /// VSS blocks in every cell.
    #[arg(long)]
    pub vsb_depth: Option<usize>,
    /// Number of synthetic sequences to generate.
    #[arg(long)]
    pub sequences: Option<usize>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(path), preset_name) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_error(format!("cannot read run file {}: {e}", path.display())))?;
                let mut table: toml::Table =
                    text.parse().map_err(|e| config_error(format!("invalid run file {}: {e}", path.display())))?;
                if let Some(name) = preset_name {
                    table.insert("preset".into(), toml::Value::String(name.clone()));
                }
                RunConfig::from_toml(&table.to_string())?
            }
            (None, Some(name)) => preset(name)?,
            (None, None) => {
                return Err(config_error(format!("pass --preset or --config; presets: {}", PRESET_NAMES.join(", "))))
            }
        };

        let mut overlay = toml::Table::new();
        for item in &self.set {
            let (key, value) =
                item.split_once('=').ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got {item:?}")))?;
            insert_path(&mut overlay, key.trim(), parse_value(value.trim()))?;
        }
        if let Some(seed) = env_seed()? {
            insert_path(&mut overlay, "seed", toml::Value::Integer(seed as i64))?;
        }
        let flags: [(&str, Option<toml::Value>); 11] = [
            ("seed", self.seed.map(|v| toml::Value::Integer(v as i64))),
            ("optim.epochs", self.epochs.map(int)),
            ("optim.batch_size", self.batch_size.map(int)),
            ("optim.learning_rate", self.learning_rate.map(toml::Value::Float)),
            ("optim.grad_clip", self.grad_clip.map(toml::Value::Float)),
            ("optim.steps_per_epoch", self.steps_per_epoch.map(int)),
            ("checkpoint_every", self.checkpoint_every.map(int)),
            ("plan.observe", self.observe.map(int)),
            ("plan.horizon", self.horizon.map(int)),
            ("model.embed_dim", self.embed_dim.map(int)),
            ("data.n_sequences", self.sequences.map(int)),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                insert_path(&mut overlay, key, v)?;
            }
        }
        let mut cfg = base.with_overrides(overlay)?;
        // A horizon override replaces the preset's evaluation horizons.
        if self.horizon.is_some() {
            cfg.eval_horizons.clear();
        }
        let axes = [
            (AblationAxis::PatchSize, self.patch_size.map(|v| v.to_string())),
            (AblationAxis::ConvVariant, self.conv_variant.clone()),
            (AblationAxis::VsbDepth, self.vsb_depth.map(|v| v.to_string())),
        ];
        for (axis, value) in axes {
            if let Some(v) = value {
                cfg.train.model = axis.apply(&cfg.train.model, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn int(v: usize) -> toml::Value {
    toml::Value::Integer(v as i64)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| config_error(format!("{SEED_ENV} must be a non-negative integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

/// Parses a TOML scalar or array, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn insert_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| config_error(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let slot = cur.entry(p.to_owned()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| config_error(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}

/// Where clips come from when a subcommand needs data.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset written by `vmrnn generate`; synthetic data is generated
    /// from the run config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Treat `--data` as a raw grid series described by this TOML layout.
    #[arg(long, requires = "data")]
    pub layout: Option<PathBuf>,
    /// Seed for generated data; defaults to the run seed for training and
    /// the run seed plus one for evaluation.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

impl DataArgs {
    pub fn load(&self, cfg: &RunConfig, default_seed: u64) -> Result<SequenceDataset> {
        let ds = match (&self.data, &self.layout) {
            (Some(path), Some(layout)) => {
                let text = std::fs::read_to_string(layout)
                    .map_err(|e| config_error(format!("cannot read layout {}: {e}", layout.display())))?;
                let spec = LayoutSpec::from_toml(&text)?;
                load_external_grid(path, &spec).with_context(|| format!("loading {}", path.display()))?
            }
            (Some(path), None) => load_dataset(path).with_context(|| format!("loading {}", path.display()))?,
            (None, _) => cfg.data.generate(self.data_seed.unwrap_or(default_seed))?,
        };
        let want = cfg.train.model.resolution;
        if ds.frame_shape() != want {
            return Err(config_error(format!(
                "dataset frames {:?} do not match model resolution {want:?}",
                ds.frame_shape()
            )));
        }
        Ok(ds)
    }
}

/// Default validation size: a tenth of the clips, at most 256.
pub fn default_val_size(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        (n / 10).clamp(1, 256)
    }
}

/// Splits off the last `val` clips.
pub fn split(ds: SequenceDataset, val: usize) -> Result<(SequenceDataset, Option<SequenceDataset>)> {
    if val == 0 {
        return Ok((ds, None));
    }
    if val >= ds.len() {
        return Err(config_error(format!("validation size {val} leaves no training clips out of {}", ds.len())));
    }
    let (train, val) = ds.split_tail(val, Split::Val)?;
    Ok((train, Some(val)))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

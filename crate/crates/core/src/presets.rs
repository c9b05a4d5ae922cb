//! Named run configurations and the declarative run-file format.
//!
//! A run file is TOML. An optional `preset` key selects a base
//! configuration; every other key overrides it:
//!
//! ```toml
//! preset = "taxibj-synth"
//! seed = 3
//!
//! [optim]
//! epochs = 2
//!
//! [data]
//! n_sequences = 64
//! ```

use serde::{Deserialize, Serialize};

use crate::config::{ConvVariant, ModelConfig, RolloutPlan, Variant};
use crate::data::{
    builtin_glyphs, default_glyph_size, generate_flow_fields, generate_moving_sprites, FlowConfig, SequenceDataset,
    SpriteConfig,
};
use crate::error::{config_err, Result};
use crate::metrics::Convention;
use crate::train::{OptimConfig, TrainConfig};

pub const PRESET_NAMES: [&str; 6] = ["mmnist-d", "kth-b", "kth40-b", "taxibj-b", "mnist-mini", "taxibj-synth"];

/// Embedding width of the TaxiBJ preset.
pub const TAXIBJ_EMBED_DIM: usize = 128;

/// Synthetic data used to train and evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Sprites {
        canvas: (usize, usize),
        n_sprites: usize,
        n_sequences: usize,
        seq_len: usize,
        #[serde(default)]
        glyph_size: Option<usize>,
    },
    Flows {
        canvas: (usize, usize),
        channels: usize,
        n_sequences: usize,
        seq_len: usize,
        period: usize,
    },
}

impl DataSpec {
    pub fn generate(&self, seed: u64) -> Result<SequenceDataset> {
        match *self {
            DataSpec::Sprites { canvas, n_sprites, n_sequences, seq_len, glyph_size } => {
                let glyphs = builtin_glyphs(glyph_size.unwrap_or_else(|| default_glyph_size(canvas)))?;
                generate_moving_sprites(&SpriteConfig { seed, n_sequences, seq_len, canvas, n_sprites }, &glyphs)
            }
            DataSpec::Flows { canvas, channels, n_sequences, seq_len, period } => {
                generate_flow_fields(&FlowConfig { seed, n_sequences, seq_len, canvas, channels, period })
            }
        }
    }

    pub fn with_sequences(mut self, n: usize) -> Self {
        match &mut self {
            DataSpec::Sprites { n_sequences, .. } | DataSpec::Flows { n_sequences, .. } => *n_sequences = n,
        }
        self
    }
}

/// A complete run: training setup, data source and evaluation horizons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataSpec,
    /// Horizons used at test time; defaults to the training horizon.
    #[serde(default)]
    pub eval_horizons: Vec<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let seq_len = match self.data {
            DataSpec::Sprites { seq_len, .. } | DataSpec::Flows { seq_len, .. } => seq_len,
        };
        let longest = self.eval_plans().iter().map(RolloutPlan::clip_len).max().unwrap_or(0);
        crate::error::ensure_config!(
            seq_len >= longest,
            "data clips of {seq_len} frames cannot cover observe + horizon = {longest}"
        );
        Ok(())
    }

    /// Training plan followed by every evaluation plan.
    pub fn eval_plans(&self) -> Vec<RolloutPlan> {
        let p = self.train.plan;
        if self.eval_horizons.is_empty() {
            vec![p]
        } else {
            self.eval_horizons.iter().map(|&h| RolloutPlan { observe: p.observe, horizon: h }).collect()
        }
    }

    /// Parses a run file, layering its keys over the named preset if any.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut overlay: toml::Table = text.parse().map_err(|e| config_err(format!("invalid run file: {e}")))?;
        let base = match overlay.remove("preset") {
            Some(toml::Value::String(name)) => preset(&name)?,
            Some(other) => return Err(config_err(format!("preset must be a string, got {other}"))),
            None => {
                let cfg: RunConfig =
                    toml::Value::Table(overlay).try_into().map_err(|e| config_err(format!("invalid run file: {e}")))?;
                cfg.validate()?;
                return Ok(cfg);
            }
        };
        base.with_overrides(overlay)
    }

    /// Deep-merges `overlay` onto this configuration.
    pub fn with_overrides(&self, overlay: toml::Table) -> Result<Self> {
        let mut merged =
            toml::Value::try_from(self).map_err(|e| config_err(format!("cannot serialise preset: {e}")))?;
        merge(&mut merged, toml::Value::Table(overlay));
        let cfg: RunConfig = merged.try_into().map_err(|e| config_err(format!("invalid run file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(format!("cannot serialise config: {e}")))
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn run(
    model: ModelConfig,
    plan: (usize, usize),
    optim: OptimConfig,
    convention: Convention,
    data: DataSpec,
    eval_horizons: Vec<usize>,
) -> RunConfig {
    RunConfig {
        train: TrainConfig {
            seed: 42,
            model,
            plan: RolloutPlan { observe: plan.0, horizon: plan.1 },
            optim,
            checkpoint_every: 1,
            convention,
            data_range: 1.0,
        },
        data,
        eval_horizons,
    }
}

fn sprites(side: usize, n_sprites: usize, n_sequences: usize, seq_len: usize) -> DataSpec {
    DataSpec::Sprites { canvas: (side, side), n_sprites, n_sequences, seq_len, glyph_size: None }
}

/// Looks up a named preset.
pub fn preset(name: &str) -> Result<RunConfig> {
    let cfg = match name {
        "mmnist-d" => {
            let mut m = ModelConfig::base([64, 64, 1], 2, 128, 2);
            m.variant = Variant::Deep;
            m.vsb_depths = vec![2, 6, 6, 2];
            run(
                m,
                (10, 10),
                OptimConfig::new(5e-5, 2000, 8),
                Convention::PerFrameSum,
                sprites(64, 2, 10_000, 20),
                vec![],
            )
        }
        "kth-b" => run(
            ModelConfig::base([128, 128, 1], 2, 128, 6),
            (10, 10),
            OptimConfig::new(5e-4, 100, 2),
            Convention::PerPixelMean,
            sprites(128, 1, 1_000, 30),
            vec![20],
        ),
        "kth40-b" => run(
            ModelConfig::base([128, 128, 1], 2, 128, 6),
            (10, 10),
            OptimConfig::new(1e-4, 100, 1),
            Convention::PerPixelMean,
            sprites(128, 1, 1_000, 50),
            vec![40],
        ),
        "taxibj-b" => run(
            ModelConfig::base([32, 32, 2], 4, TAXIBJ_EMBED_DIM, 12),
            (4, 4),
            OptimConfig::new(4e-4, 200, 16),
            Convention::PerPixelMean,
            DataSpec::Flows { canvas: (32, 32), channels: 2, n_sequences: 1_000, seq_len: 8, period: 48 },
            vec![],
        ),
        "mnist-mini" => {
            let mut optim = OptimConfig::new(2e-3, 1, 4);
            optim.grad_clip = Some(1.0);
            run(
                ModelConfig::base([32, 32, 1], 4, 64, 4),
                (10, 10),
                optim,
                Convention::PerFrameSum,
                sprites(32, 2, 1_000, 20),
                vec![],
            )
        }
        "taxibj-synth" => {
            let mut optim = OptimConfig::new(1e-3, 4, 8);
            optim.grad_clip = Some(1.0);
            run(
                ModelConfig::base([32, 32, 2], 4, 64, 4),
                (4, 4),
                optim,
                Convention::PerPixelMean,
                DataSpec::Flows { canvas: (32, 32), channels: 2, n_sequences: 256, seq_len: 8, period: 48 },
                vec![],
            )
        }
        other => {
            return Err(config_err(format!("unknown preset {other:?}; expected one of {}", PRESET_NAMES.join(", "))))
        }
    };
    Ok(cfg)
}

/// Ablation axes over a base model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    ConvVariant,
    PatchSize,
    VsbDepth,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv_variant" => Some(AblationAxis::ConvVariant),
            "patch_size" | "patch" => Some(AblationAxis::PatchSize),
            "vsb_depth" => Some(AblationAxis::VsbDepth),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::ConvVariant => "conv_variant",
            AblationAxis::PatchSize => "patch_size",
            AblationAxis::VsbDepth => "vsb_depth",
        }
    }

    /// Default sweep values.
    pub fn default_values(self) -> Vec<String> {
        match self {
            AblationAxis::ConvVariant => ConvVariant::ALL.iter().map(|c| c.name().to_owned()).collect(),
            AblationAxis::PatchSize => ["2", "4", "8"].map(String::from).to_vec(),
            AblationAxis::VsbDepth => (2..=18).step_by(2).map(|d| d.to_string()).collect(),
        }
    }

    /// Copy of `base` with this axis set to `value`. Depth applies to every
    /// cell of a D model.
    pub fn apply(self, base: &ModelConfig, value: &str) -> Result<ModelConfig> {
        let mut m = base.clone();
        let bad = || config_err(format!("invalid {} value {value:?}", self.name()));
        match self {
            AblationAxis::ConvVariant => m.conv_variant = ConvVariant::parse(value).ok_or_else(bad)?,
            AblationAxis::PatchSize => m.patch_size = value.parse().map_err(|_| bad())?,
            AblationAxis::VsbDepth => {
                let d: usize = value.parse().map_err(|_| bad())?;
                m.vsb_depths.iter_mut().for_each(|x| *x = d);
            }
        }
        m.validate()?;
        Ok(m)
    }
}

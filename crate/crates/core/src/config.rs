//! Declarative architecture and rollout descriptions.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_config, Result};

/// Single-cell base model or four-cell encoder–decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "B", alias = "b")]
    Base,
    #[serde(rename = "D", alias = "d")]
    Deep,
}

/// Spatial mixing layer in front of SS2D inside each VSS block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvVariant {
    /// 3×3 depth-wise convolution.
    #[default]
    Dw,
    /// Full 3×3 convolution.
    Conv2d,
    /// 5×5 depth-wise, 7×7 depth-wise dilated by 3, then 1×1.
    #[serde(rename = "dw_dwd_1x1")]
    DwDwd1x1,
}

impl ConvVariant {
    pub const ALL: [ConvVariant; 3] = [ConvVariant::Dw, ConvVariant::Conv2d, ConvVariant::DwDwd1x1];

    pub fn name(self) -> &'static str {
        match self {
            ConvVariant::Dw => "dw",
            ConvVariant::Conv2d => "conv2d",
            ConvVariant::DwDwd1x1 => "dw_dwd_1x1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

fn default_state_dim() -> usize {
    16
}

fn default_expand() -> usize {
    2
}

/// Architecture of a predictive model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub patch_size: usize,
    /// `[height, width, channels]` of input frames.
    pub resolution: [usize; 3],
    pub embed_dim: usize,
    /// VSS blocks per cell: one entry for `B`, four for `D`.
    pub vsb_depths: Vec<usize>,
    #[serde(default)]
    pub conv_variant: ConvVariant,
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    /// Inner width of a VSS block as a multiple of its token width.
    #[serde(default = "default_expand")]
    pub expand: usize,
    /// Rank of the Δ projection; `ceil(width / 16)` when unset.
    #[serde(default)]
    pub dt_rank: Option<usize>,
}

impl ModelConfig {
    pub fn base(resolution: [usize; 3], patch_size: usize, embed_dim: usize, depth: usize) -> Self {
        ModelConfig {
            variant: Variant::Base,
            patch_size,
            resolution,
            embed_dim,
            vsb_depths: vec![depth],
            conv_variant: ConvVariant::Dw,
            state_dim: default_state_dim(),
            expand: default_expand(),
            dt_rank: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.resolution;
        let p = self.patch_size;
        ensure_config!(p >= 1, "patch size must be positive");
        ensure_config!(h >= 1 && w >= 1 && c >= 1, "resolution {:?} has a zero dimension", self.resolution);
        ensure_config!(self.embed_dim >= 1, "embed_dim must be positive");
        ensure_config!(self.state_dim >= 1, "state_dim must be positive");
        ensure_config!(self.expand >= 1, "expand must be positive");
        ensure_config!(self.dt_rank != Some(0), "dt_rank must be positive");
        ensure_config!(h % p == 0 && w % p == 0, "resolution {h}x{w} is not divisible by patch size {p}");
        ensure_config!(self.vsb_depths.iter().all(|&d| d >= 1), "every VSS depth must be at least 1");
        match self.variant {
            Variant::Base => {
                ensure_config!(self.vsb_depths.len() == 1, "variant B takes one VSS depth, got {:?}", self.vsb_depths)
            }
            Variant::Deep => {
                ensure_config!(
                    self.vsb_depths.len() == 4,
                    "variant D takes four VSS depths, got {:?}",
                    self.vsb_depths
                );
                ensure_config!(
                    h % (4 * p) == 0 && w % (4 * p) == 0,
                    "variant D needs resolution divisible by 4x patch size ({})",
                    4 * p
                );
            }
        }
        Ok(())
    }

    /// Token grid `(H/P, W/P)` at full scale.
    pub fn grid(&self) -> (usize, usize) {
        (self.resolution[0] / self.patch_size, self.resolution[1] / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.resolution[2]
    }

    pub fn rank_for(&self, width: usize) -> usize {
        self.dt_rank.unwrap_or_else(|| width.div_ceil(16))
    }

    /// `(grid, token width, depth)` of every cell in forward order.
    pub fn cell_layout(&self) -> Vec<((usize, usize), usize, usize)> {
        let (gh, gw) = self.grid();
        let c = self.embed_dim;
        match self.variant {
            Variant::Base => vec![((gh, gw), c, self.vsb_depths[0])],
            Variant::Deep => {
                let d = &self.vsb_depths;
                vec![
                    ((gh, gw), c, d[0]),
                    ((gh / 2, gw / 2), 2 * c, d[1]),
                    ((gh / 2, gw / 2), 2 * c, d[2]),
                    ((gh, gw), c, d[3]),
                ]
            }
        }
    }
}

/// Warm-up and prediction lengths of a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutPlan {
    pub observe: usize,
    pub horizon: usize,
}

impl RolloutPlan {
    pub fn new(observe: usize, horizon: usize) -> Result<Self> {
        let plan = RolloutPlan { observe, horizon };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(self.observe >= 1, "observe must be at least 1");
        ensure_config!(self.horizon >= 1, "horizon must be at least 1");
        Ok(())
    }

    /// Frames a clip must contain to be scored.
    pub fn clip_len(&self) -> usize {
        self.observe + self.horizon
    }

    /// Recurrent steps in one rollout.
    pub fn steps(&self) -> usize {
        self.observe + self.horizon - 1
    }
}

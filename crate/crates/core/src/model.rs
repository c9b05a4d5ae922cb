//! Full predictive models: patch embedding, one (B) or four (D) recurrent
//! cells, patch merging/expanding between scales, and frame reconstruction.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::{CellState, StateVars, VmrnnCell};
use crate::config::{ModelConfig, RolloutPlan, Variant};
use crate::error::{ensure_config, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Row index mapping `[B, H, W, C]` pixels to `[B, L, P·P·C]` patch tokens
/// (row-major over patches, then over pixels within a patch).
pub fn patch_embed_index(batch: usize, height: usize, width: usize, patch: usize) -> Rc<[usize]> {
    let (gh, gw) = (height / patch, width / patch);
    let mut idx = Vec::with_capacity(batch * height * width);
    for b in 0..batch {
        for ti in 0..gh {
            for tj in 0..gw {
                for pi in 0..patch {
                    for pj in 0..patch {
                        idx.push((b * height + ti * patch + pi) * width + tj * patch + pj);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse of [`patch_embed_index`]: pixel `(y, x)` of the output frame is
/// row `token·P² + sub` of the token tensor viewed as `C`-wide rows.
pub fn depth_to_space_index(batch: usize, height: usize, width: usize, patch: usize) -> Rc<[usize]> {
    let (gh, gw) = (height / patch, width / patch);
    let per_token = patch * patch;
    let mut idx = Vec::with_capacity(batch * height * width);
    for b in 0..batch {
        for y in 0..height {
            for x in 0..width {
                let token = (b * gh + y / patch) * gw + x / patch;
                idx.push(token * per_token + (y % patch) * patch + x % patch);
            }
        }
    }
    idx.into()
}

/// Row index gathering each 2×2 neighbourhood of a `[B, H, W]` token grid in
/// the order (0,0), (1,0), (0,1), (1,1).
pub fn merge_index(batch: usize, height: usize, width: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(batch * height * width);
    for b in 0..batch {
        for i in 0..height / 2 {
            for j in 0..width / 2 {
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push((b * height + 2 * i + di) * width + 2 * j + dj);
                }
            }
        }
    }
    idx.into()
}

/// Row index scattering `[B, H, W, 4 sub-rows]` to a `[B, 2H, 2W]` grid;
/// sub-row `p1·2 + p2` lands at `(2i + p1, 2j + p2)`.
pub fn expand_index(batch: usize, height: usize, width: usize) -> Rc<[usize]> {
    let (oh, ow) = (2 * height, 2 * width);
    let mut idx = Vec::with_capacity(batch * oh * ow);
    for b in 0..batch {
        for y in 0..oh {
            for x in 0..ow {
                let src = (b * height + y / 2) * width + x / 2;
                idx.push(src * 4 + (y % 2) * 2 + x % 2);
            }
        }
    }
    idx.into()
}

/// Flattened non-overlapping patches mapped linearly to tokens.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
}

impl PatchEmbed {
    /// `[B, H, W, C_in] → [B, (H/P)·(W/P), embed]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, frame: Var) -> Result<Var> {
        let s = g.shape(frame).to_vec();
        ensure_config!(s.len() == 4, "frame must be [B, H, W, C], got {s:?}");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let p = self.patch;
        ensure_config!(h % p == 0 && w % p == 0, "frame {h}x{w} not divisible by patch {p}");
        ensure_config!(self.proj.in_dim == p * p * c, "patch dim {} != {}", p * p * c, self.proj.in_dim);
        let l = (h / p) * (w / p);
        let patches = g.gather_rows(frame, patch_embed_index(b, h, w, p), c, &[b, l, p * p * c])?;
        self.proj.forward(g, patches)
    }
}

/// 2×2 neighbourhood concatenation, layer norm, then `4C → 2C`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn norm_dim(&self) -> usize {
        self.reduce.in_dim
    }

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduce: Linear::new(store, &format!("{name}.reduce"), 4 * dim, 2 * dim, false, rng),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: Var,
        grid: (usize, usize),
    ) -> Result<(Var, (usize, usize))> {
        let s = g.shape(tokens).to_vec();
        let (h, w) = grid;
        ensure_config!(s.len() == 3 && s[1] == h * w, "merge input {s:?} does not match grid {h}x{w}");
        ensure_config!(h % 2 == 0 && w % 2 == 0, "patch merge needs an even grid, got {h}x{w}");
        let (b, c) = (s[0], s[2]);
        let out_grid = (h / 2, w / 2);
        let cat = g.gather_rows(tokens, merge_index(b, h, w), c, &[b, h * w / 4, 4 * c])?;
        let normed = self.norm.forward(g, cat)?;
        Ok((self.reduce.forward(g, normed)?, out_grid))
    }
}

/// `C → 2C` then a pixel shuffle to a grid twice as large with `C/2` channels.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
}

impl PatchExpand {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        PatchExpand { expand: Linear::new(store, &format!("{name}.expand"), dim, 2 * dim, false, rng) }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: Var,
        grid: (usize, usize),
    ) -> Result<(Var, (usize, usize))> {
        let s = g.shape(tokens).to_vec();
        let (h, w) = grid;
        ensure_config!(s.len() == 3 && s[1] == h * w, "expand input {s:?} does not match grid {h}x{w}");
        let (b, c) = (s[0], s[2]);
        ensure_config!(c % 2 == 0, "patch expand needs an even channel count, got {c}");
        let wide = self.expand.forward(g, tokens)?;
        let out = g.gather_rows(wide, expand_index(b, h, w), c / 2, &[b, 4 * h * w, c / 2])?;
        Ok((out, (2 * h, 2 * w)))
    }
}

/// Per-token linear map to `P·P·C_in` followed by depth-to-space.
#[derive(Clone, Debug)]
pub struct Reconstruct {
    pub proj: Linear,
    pub patch: usize,
    pub channels: usize,
}

impl Reconstruct {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        let (gh, gw) = grid;
        ensure_config!(s.len() == 3 && s[1] == gh * gw, "tokens {s:?} do not match grid {gh}x{gw}");
        let (p, c) = (self.patch, self.channels);
        let b = s[0];
        let pix = self.proj.forward(g, tokens)?;
        let (h, w) = (gh * p, gw * p);
        g.gather_rows(pix, depth_to_space_index(b, h, w, p), c, &[b, h, w, c])
    }
}

#[derive(Clone, Debug)]
pub enum Body {
    Base(VmrnnCell),
    Deep { cells: Vec<VmrnnCell>, merges: Vec<PatchMerge>, expands: Vec<PatchExpand> },
}

/// Recurrent state of every cell of a model.
pub type ModelState<T> = Vec<CellState<T>>;

/// An instantiated model; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Vmrnn {
    pub config: ModelConfig,
    pub embed: PatchEmbed,
    pub body: Body,
    pub head: Reconstruct,
}

impl Vmrnn {
    /// Builds the model, registering freshly initialised parameters.
    pub fn new<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let p = config.patch_size;
        let embed = PatchEmbed { proj: Linear::new(store, "embed", config.patch_dim(), c, true, rng), patch: p };
        let make_cell = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, i: usize, dim: usize, depth: usize| {
            VmrnnCell::new(
                store,
                &format!("cell{i}"),
                dim,
                depth,
                config.expand,
                config.state_dim,
                config.rank_for(config.expand * dim),
                config.conv_variant,
                rng,
            )
        };
        let body = match config.variant {
            Variant::Base => Body::Base(make_cell(store, rng, 0, c, config.vsb_depths[0])),
            Variant::Deep => {
                let d = &config.vsb_depths;
                let c0 = make_cell(store, rng, 0, c, d[0]);
                let m0 = PatchMerge::new(store, "merge0", c, rng);
                let c1 = make_cell(store, rng, 1, 2 * c, d[1]);
                let m1 = PatchMerge::new(store, "merge1", 2 * c, rng);
                let e0 = PatchExpand::new(store, "expand0", 4 * c, rng);
                let c2 = make_cell(store, rng, 2, 2 * c, d[2]);
                let e1 = PatchExpand::new(store, "expand1", 2 * c, rng);
                let c3 = make_cell(store, rng, 3, c, d[3]);
                Body::Deep { cells: vec![c0, c1, c2, c3], merges: vec![m0, m1], expands: vec![e0, e1] }
            }
        };
        let head = Reconstruct {
            proj: Linear::new(store, "head", c, config.patch_dim(), true, rng),
            patch: p,
            channels: config.resolution[2],
        };
        Ok(Vmrnn { config: config.clone(), embed, body, head })
    }

    /// Builds a model and its parameters from a seed.
    pub fn init<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Vmrnn::new(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn cells(&self) -> Vec<&VmrnnCell> {
        match &self.body {
            Body::Base(c) => vec![c],
            Body::Deep { cells, .. } => cells.iter().collect(),
        }
    }

    fn check_frame(&self, shape: &[usize]) -> Result<()> {
        let [h, w, c] = self.config.resolution;
        ensure_config!(
            shape.len() == 4 && shape[1..] == [h, w, c],
            "frame shape {shape:?} does not match model resolution {:?}",
            self.config.resolution
        );
        Ok(())
    }

    /// One recurrent step: frame `[B, H, W, C]` to the predicted next frame.
    pub fn forward_step<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        frame: Var,
        states: Option<&[StateVars]>,
    ) -> Result<(Var, Vec<StateVars>)> {
        self.check_frame(g.shape(frame))?;
        let cells = self.cells();
        if let Some(s) = states {
            ensure_config!(s.len() == cells.len(), "expected {} cell states, got {}", cells.len(), s.len());
        }
        let prev = |i: usize| states.map(|s| s[i]);
        let grid = self.config.grid();
        let tokens = self.embed.forward(g, frame)?;
        match &self.body {
            Body::Base(cell) => {
                let (h, s) = cell.step(g, tokens, prev(0), grid)?;
                let pred = self.head.forward(g, h, grid)?;
                Ok((pred, vec![s]))
            }
            Body::Deep { cells, merges, expands } => {
                let (h1, s1) = cells[0].step(g, tokens, prev(0), grid)?;
                let (m1, g2) = merges[0].forward(g, h1, grid)?;
                let (h2, s2) = cells[1].step(g, m1, prev(1), g2)?;
                let (m2, g4) = merges[1].forward(g, h2, g2)?;
                let (up1, _) = expands[0].forward(g, m2, g4)?;
                let x3 = g.add(up1, h2)?;
                let (h3, s3) = cells[2].step(g, x3, prev(2), g2)?;
                let (up2, _) = expands[1].forward(g, h3, g2)?;
                let x4 = g.add(up2, h1)?;
                let (h4, s4) = cells[3].step(g, x4, prev(3), grid)?;
                let pred = self.head.forward(g, h4, grid)?;
                Ok((pred, vec![s1, s2, s3, s4]))
            }
        }
    }

    /// [`Vmrnn::forward_step`] on plain tensors.
    pub fn step_values<T: Real>(
        &self,
        store: &ParamStore<T>,
        frame: &Tensor<T>,
        states: Option<&ModelState<T>>,
    ) -> Result<(Tensor<T>, ModelState<T>)> {
        let mut g = Graph::inference(store);
        let f = g.constant(frame.clone());
        let sv: Option<Vec<StateVars>> = states.map(|s| s.iter().map(|c| StateVars::constant(&mut g, c)).collect());
        let (pred, next) = self.forward_step(&mut g, f, sv.as_deref())?;
        Ok((g.value(pred).clone(), next.iter().map(|s| s.value(&g)).collect()))
    }

    /// Records a whole rollout. Returns one prediction per step: entry `t`
    /// predicts frame `t + 1`. Ground truth is fed for the first `observe`
    /// steps, the previous prediction afterwards.
    pub fn rollout_graph<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        frames: &Tensor<T>,
        plan: &RolloutPlan,
    ) -> Result<Vec<Var>> {
        plan.validate()?;
        ensure_config!(
            frames.rank() == 5 && frames.shape()[1] >= plan.observe,
            "need at least {} input frames, got shape {:?}",
            plan.observe,
            frames.shape()
        );
        let mut states: Option<Vec<StateVars>> = None;
        let mut preds: Vec<Var> = Vec::with_capacity(plan.steps());
        for t in 0..plan.steps() {
            let input = if t < plan.observe { g.constant(frames.select1(t)?) } else { preds[t - 1] };
            let (pred, next) = self.forward_step(g, input, states.as_deref())?;
            preds.push(pred);
            states = Some(next);
        }
        Ok(preds)
    }

    /// Inference rollout returning the `horizon` predicted frames
    /// `[B, horizon, H, W, C]`.
    pub fn rollout<T: Real>(&self, store: &ParamStore<T>, frames: &Tensor<T>, plan: &RolloutPlan) -> Result<Tensor<T>> {
        plan.validate()?;
        ensure_config!(
            frames.rank() == 5 && frames.shape()[1] >= plan.observe,
            "need at least {} input frames, got shape {:?}",
            plan.observe,
            frames.shape()
        );
        let mut states: Option<ModelState<T>> = None;
        let mut last: Option<Tensor<T>> = None;
        let mut out = Vec::with_capacity(plan.horizon);
        for t in 0..plan.steps() {
            let input = if t < plan.observe { frames.select1(t)? } else { last.take().expect("previous prediction") };
            let (pred, next) = self.step_values(store, &input, states.as_ref())?;
            if t + 1 >= plan.observe {
                out.push(pred.clone());
            }
            last = Some(pred);
            states = Some(next);
        }
        Tensor::stack1(&out)
    }
}

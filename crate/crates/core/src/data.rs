//! Synthetic sequence generators, the binary dataset format, external grid
//! loading and portable graymap/pixmap I/O.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, ensure_config, format_err, Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"VMRN";
pub const DATASET_VERSION: u16 = 1;
/// Magic, version, dtype and five `u64` dimensions.
pub const DATASET_HEADER_LEN: usize = 4 + 2 + 2 + 5 * 8;
/// Sprite speed range in pixels per frame.
pub const SPEED_RANGE: (f64, f64) = (2.0, 4.0);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Seed(u64),
    /// SHA-256 of the source file, hex encoded.
    Digest(String),
}

/// Clips of shape `[N, T, H, W, C]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub frames: Tensor<f32>,
    pub split: Split,
    pub provenance: Provenance,
}

impl SequenceDataset {
    pub fn new(frames: Tensor<f32>, split: Split, provenance: Provenance) -> Result<Self> {
        ensure_config!(frames.rank() == 5, "dataset must be [N, T, H, W, C], got {:?}", frames.shape());
        if let Some(i) = frames.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric { what: "dataset value outside [0, 1]".into(), index: i });
        }
        Ok(SequenceDataset { frames, split, provenance })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.frames.shape()[1]
    }

    /// `[H, W, C]`.
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[2], s[3], s[4]]
    }

    fn clip_size(&self) -> usize {
        self.frames.shape()[1..].iter().product()
    }

    /// Stacks the listed clips into `[indices.len(), T, H, W, C]`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let n = self.clip_size();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            ensure_config!(i < self.len(), "clip {i} out of range for {} clips", self.len());
            data.extend(self.frames.data()[i * n..(i + 1) * n].iter().map(|&v| T::lit(v as f64)));
        }
        let mut shape = self.frames.shape().to_vec();
        shape[0] = indices.len();
        Tensor::from_vec(&shape, data)
    }

    /// Splits off the last `n` clips as a new dataset with the given split.
    pub fn split_tail(&self, n: usize, split: Split) -> Result<(Self, Self)> {
        ensure_config!(n < self.len(), "cannot split {n} of {} clips", self.len());
        let head = self.frames.narrow0(0, self.len() - n)?;
        let tail = self.frames.narrow0(self.len() - n, n)?;
        Ok((
            SequenceDataset { frames: head, split: self.split, provenance: self.provenance.clone() },
            SequenceDataset { frames: tail, split, provenance: self.provenance.clone() },
        ))
    }

    /// SHA-256 of the serialised dataset.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(encode_header(self.frames.shape(), DType::F32));
        for v in self.frames.data() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Single-channel glyph with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Glyph {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Segments `a..g` lit for each digit.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// Binary seven-segment rendering of `digit` in a `size × size` box.
pub fn digit_glyph(digit: usize, size: usize) -> Result<Glyph> {
    ensure_config!(digit < 10, "digit {digit} out of range");
    ensure_config!(size >= 5, "glyph size must be at least 5, got {size}");
    let t = (size / 7).max(1);
    let left = size / 5;
    let right = size - 1 - size / 5;
    let (top, mid, bottom) = (0, size / 2, size - 1);
    let mut pixels = vec![0.0f32; size * size];
    let mut fill = |y0: usize, y1: usize, x0: usize, x1: usize| {
        for y in y0..=y1.min(size - 1) {
            for x in x0..=x1.min(size - 1) {
                pixels[y * size + x] = 1.0;
            }
        }
    };
    let lit = SEGMENTS[digit];
    let hbar = |y: usize| (y.saturating_sub(t / 2), y.saturating_sub(t / 2) + t - 1);
    let vbar = |x: usize| (x.saturating_sub(t / 2), x.saturating_sub(t / 2) + t - 1);
    let (ty0, ty1) = (top, top + t - 1);
    let (by0, by1) = (bottom + 1 - t, bottom);
    let (my0, my1) = hbar(mid);
    let (lx0, lx1) = vbar(left);
    let (rx0, rx1) = vbar(right);
    if lit[0] {
        fill(ty0, ty1, lx0, rx1);
    }
    if lit[1] {
        fill(top, mid, rx0, rx1);
    }
    if lit[2] {
        fill(mid, bottom, rx0, rx1);
    }
    if lit[3] {
        fill(by0, by1, lx0, rx1);
    }
    if lit[4] {
        fill(mid, bottom, lx0, lx1);
    }
    if lit[5] {
        fill(top, mid, lx0, lx1);
    }
    if lit[6] {
        fill(my0, my1, lx0, rx1);
    }
    Ok(Glyph { height: size, width: size, pixels })
}

/// The ten built-in digit glyphs.
pub fn builtin_glyphs(size: usize) -> Result<Vec<Glyph>> {
    (0..10).map(|d| digit_glyph(d, size)).collect()
}

/// Default glyph edge for a canvas: 28/64 of its smaller side.
pub fn default_glyph_size(canvas: (usize, usize)) -> usize {
    (canvas.0.min(canvas.1) * 28 / 64).max(5)
}

/// A glyph moving with constant velocity inside a canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitSprite {
    pub glyph: usize,
    /// Top-left corner `(x, y)` in pixels.
    pub position: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
}

fn reflect(p: f64, v: f64, max: f64) -> (f64, f64) {
    let mut p = p + v;
    let mut v = v;
    // Loop in case the step overshoots more than one wall span.
    loop {
        if p < 0.0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2.0 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

impl DigitSprite {
    /// Advances one frame, reflecting off the walls of a region whose
    /// top-left positions range over `[0, max_x] × [0, max_y]`.
    pub fn step(&mut self, max_x: f64, max_y: f64) {
        let (x, vx) =
            if max_x > 0.0 { reflect(self.position.0, self.velocity.0, max_x) } else { (0.0, -self.velocity.0) };
        let (y, vy) =
            if max_y > 0.0 { reflect(self.position.1, self.velocity.1, max_y) } else { (0.0, -self.velocity.1) };
        self.position = (x, y);
        self.velocity = (vx, vy);
    }

    pub fn speed(&self) -> f64 {
        self.velocity.0.hypot(self.velocity.1)
    }

    /// Max-composites the glyph onto a single-channel `height × width` canvas.
    pub fn draw(&self, glyph: &Glyph, canvas: &mut [f32], height: usize, width: usize) {
        let x0 = self.position.0.round() as usize;
        let y0 = self.position.1.round() as usize;
        for gy in 0..glyph.height {
            for gx in 0..glyph.width {
                let (y, x) = (y0 + gy, x0 + gx);
                if y < height && x < width {
                    let c = &mut canvas[y * width + x];
                    *c = c.max(glyph.at(gy, gx));
                }
            }
        }
    }
}

/// Parameters of the bouncing-sprite generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteConfig {
    pub seed: u64,
    pub n_sequences: usize,
    pub seq_len: usize,
    /// `(height, width)`.
    pub canvas: (usize, usize),
    pub n_sprites: usize,
}

/// Renders one sequence of `seq_len` frames into `out`.
pub fn render_sequence(
    sprites: &mut [DigitSprite],
    glyphs: &[Glyph],
    seq_len: usize,
    canvas: (usize, usize),
    out: &mut [f32],
) {
    let (h, w) = canvas;
    for t in 0..seq_len {
        let frame = &mut out[t * h * w..(t + 1) * h * w];
        for s in sprites.iter_mut() {
            let g = &glyphs[s.glyph];
            if t > 0 {
                s.step((w - g.width) as f64, (h - g.height) as f64);
            }
            s.draw(g, frame, h, w);
        }
    }
}

/// Bouncing glyphs at uniform random positions, uniform random directions
/// and a per-sequence speed in [`SPEED_RANGE`]; frames compose by max.
pub fn generate_moving_sprites(cfg: &SpriteConfig, glyphs: &[Glyph]) -> Result<SequenceDataset> {
    let (h, w) = cfg.canvas;
    ensure_config!(cfg.n_sprites >= 1, "at least one sprite is required");
    ensure_config!(cfg.n_sequences >= 1 && cfg.seq_len >= 1, "empty dataset requested");
    ensure_config!(!glyphs.is_empty(), "no glyphs supplied");
    for g in glyphs {
        ensure_config!(g.height <= h && g.width <= w, "glyph {}x{} larger than canvas {h}x{w}", g.height, g.width);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_seq = cfg.seq_len * h * w;
    let mut data = vec![0.0f32; cfg.n_sequences * per_seq];
    for seq in data.chunks_mut(per_seq) {
        let speed = rng.random_range(SPEED_RANGE.0..=SPEED_RANGE.1);
        let mut sprites: Vec<DigitSprite> = (0..cfg.n_sprites)
            .map(|_| {
                let glyph = rng.random_range(0..glyphs.len());
                let g = &glyphs[glyph];
                let x = rng.random_range(0.0..=(w - g.width) as f64);
                let y = rng.random_range(0.0..=(h - g.height) as f64);
                let theta = rng.random_range(0.0..2.0 * PI);
                DigitSprite { glyph, position: (x, y), velocity: (speed * theta.cos(), speed * theta.sin()) }
            })
            .collect();
        render_sequence(&mut sprites, glyphs, cfg.seq_len, cfg.canvas, seq);
    }
    let frames = Tensor::from_vec(&[cfg.n_sequences, cfg.seq_len, h, w, 1], data)?;
    SequenceDataset::new(frames, Split::Train, Provenance::Seed(cfg.seed))
}

/// Parameters of the smooth periodic flow generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub seed: u64,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub canvas: (usize, usize),
    pub channels: usize,
    /// Frames per period of the global cycle.
    pub period: usize,
}

/// Synthetic inflow/outflow-style heatmaps: a few drifting sinusoidal modes
/// per channel modulated by a global periodic cycle, in `[0, 1]`.
pub fn generate_flow_fields(cfg: &FlowConfig) -> Result<SequenceDataset> {
    let (h, w) = cfg.canvas;
    ensure_config!(h >= 1 && w >= 1 && cfg.channels >= 1, "empty flow canvas");
    ensure_config!(cfg.n_sequences >= 1 && cfg.seq_len >= 1 && cfg.period >= 1, "empty flow dataset requested");
    const MODES: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::with_capacity(cfg.n_sequences * cfg.seq_len * h * w * cfg.channels);
    for _ in 0..cfg.n_sequences {
        let offset = rng.random_range(0..cfg.period) as f64;
        let modes: Vec<[f64; 5]> = (0..cfg.channels * MODES)
            .map(|_| {
                [
                    rng.random_range(0.5..1.0),
                    rng.random_range(-2.0..2.0) * 2.0 * PI / w as f64,
                    rng.random_range(-2.0..2.0) * 2.0 * PI / h as f64,
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.0..2.0 * PI),
                ]
            })
            .collect();
        for t in 0..cfg.seq_len {
            let tt = t as f64;
            let cycle = 0.5 + 0.5 * (2.0 * PI * (tt + offset) / cfg.period as f64).sin();
            for y in 0..h {
                for x in 0..w {
                    for c in 0..cfg.channels {
                        let ms = &modes[c * MODES..(c + 1) * MODES];
                        let norm: f64 = ms.iter().map(|m| m[0]).sum();
                        let s: f64 = ms
                            .iter()
                            .map(|m| m[0] * (m[1] * x as f64 + m[2] * y as f64 + m[3] * tt + m[4]).sin())
                            .sum();
                        let field = 0.5 + 0.5 * s / norm;
                        data.push((0.2 * cycle + 0.8 * field).clamp(0.0, 1.0) as f32);
                    }
                }
            }
        }
    }
    let frames = Tensor::from_vec(&[cfg.n_sequences, cfg.seq_len, h, w, cfg.channels], data)?;
    SequenceDataset::new(frames, Split::Train, Provenance::Seed(cfg.seed))
}

fn encode_header(shape: &[usize], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

/// Writes the dataset as little-endian `f32`.
pub fn save_dataset(ds: &SequenceDataset, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_header(ds.frames.shape(), DType::F32))?;
    for v in ds.frames.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("eight bytes"))
}

/// Parses a dataset file produced by [`save_dataset`] (either dtype).
pub fn decode_dataset(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < DATASET_HEADER_LEN {
        return Err(format_err(format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let version = read_u16(bytes, 4);
    if version != DATASET_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(read_u16(bytes, 6))
        .ok_or_else(|| format_err(format!("unknown dtype code {}", read_u16(bytes, 6))))?;
    let mut shape = [0usize; 5];
    let mut count: usize = 1;
    for (i, d) in shape.iter_mut().enumerate() {
        let v = read_u64(bytes, 8 + 8 * i);
        *d = usize::try_from(v).map_err(|_| format_err("dimension overflows usize"))?;
        count = count.checked_mul(*d).ok_or_else(|| format_err("shape overflow"))?;
    }
    let body = count.checked_mul(dtype.size()).ok_or_else(|| format_err("shape overflow"))?;
    let expected = DATASET_HEADER_LEN.checked_add(body).ok_or_else(|| format_err("shape overflow"))?;
    if bytes.len() != expected {
        return Err(format_err(format!("expected {expected} bytes for shape {shape:?}, found {}", bytes.len())));
    }
    let raw = &bytes[DATASET_HEADER_LEN..];
    let data: Vec<f32> = match dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect(),
        DType::F64 => {
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")) as f32).collect()
        }
    };
    Tensor::from_vec(&shape, data)
}

/// Reads a dataset file; provenance is the file's SHA-256.
pub fn load_dataset(path: &Path) -> Result<SequenceDataset> {
    let bytes = fs::read(path)?;
    let frames = decode_dataset(&bytes)?;
    let digest = hex(&Sha256::digest(&bytes));
    SequenceDataset::new(frames, Split::Train, Provenance::Digest(digest))
}

/// Axis order of an external raw grid file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelOrder {
    /// `[T, H, W, C]`.
    #[default]
    Last,
    /// `[T, C, H, W]`.
    First,
}

/// Declared layout of a headerless little-endian time series of grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: DType,
    /// `[min, max]` mapped to `[0, 1]`.
    pub bounds: [f64; 2],
    #[serde(default)]
    pub channel_order: ChannelOrder,
    /// Frames per clip (observe + horizon).
    pub window: usize,
    #[serde(default)]
    pub header_bytes: usize,
}

impl LayoutSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(format!("invalid layout spec: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        ensure_config!(
            self.frames >= 1 && self.height >= 1 && self.width >= 1 && self.channels >= 1,
            "layout has a zero dimension"
        );
        ensure_config!(self.bounds[1] > self.bounds[0], "layout bounds must satisfy min < max");
        ensure_config!(
            self.window >= 1 && self.window <= self.frames,
            "window {} must be in 1..={}",
            self.window,
            self.frames
        );
        Ok(())
    }
}

/// Min-max normalises a raw series with the declared bounds and cuts it
/// into overlapping clips with stride 1.
pub fn load_external_grid(path: &Path, layout: &LayoutSpec) -> Result<SequenceDataset> {
    layout.validate()?;
    let bytes = fs::read(path)?;
    let per_frame = layout.height * layout.width * layout.channels;
    let count = layout.frames * per_frame;
    let expected = layout.header_bytes + count * layout.dtype.size();
    if bytes.len() != expected {
        return Err(format_err(format!("layout declares {expected} bytes, file has {}", bytes.len())));
    }
    let raw = &bytes[layout.header_bytes..];
    let values: Vec<f64> = match layout.dtype {
        DType::F32 => {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64).collect()
        }
        DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect(),
    };
    let [lo, hi] = layout.bounds;
    if let Some(i) = values.iter().position(|v| !(lo..=hi).contains(v)) {
        return Err(Error::Numeric {
            what: format!("value {} outside declared bounds [{lo}, {hi}]", values[i]),
            index: i,
        });
    }
    let (h, w, c) = (layout.height, layout.width, layout.channels);
    let mut series = vec![0.0f32; count];
    for t in 0..layout.frames {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let src = match layout.channel_order {
                        ChannelOrder::Last => ((t * h + y) * w + x) * c + ch,
                        ChannelOrder::First => ((t * c + ch) * h + y) * w + x,
                    };
                    series[((t * h + y) * w + x) * c + ch] = ((values[src] - lo) / (hi - lo)) as f32;
                }
            }
        }
    }
    let clips = layout.frames - layout.window + 1;
    let mut data = Vec::with_capacity(clips * layout.window * per_frame);
    for start in 0..clips {
        data.extend_from_slice(&series[start * per_frame..(start + layout.window) * per_frame]);
    }
    let frames = Tensor::from_vec(&[clips, layout.window, h, w, c], data)?;
    SequenceDataset::new(frames, Split::Train, Provenance::Digest(hex(&Sha256::digest(&bytes))))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `[H, W, C]` frame as binary PGM (`C = 1`) or PPM (`C = 2, 3`;
/// a missing third channel is written as zero).
pub fn write_frame_image(frame: &Tensor<f32>, path: &Path) -> Result<()> {
    ensure_config!(frame.rank() == 3, "image frames must be [H, W, C], got {:?}", frame.shape());
    let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    ensure_config!((1..=3).contains(&c), "cannot write {c}-channel frame as an image");
    let mut out = Vec::new();
    let magic = if c == 1 { "P5" } else { "P6" };
    out.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
    for px in frame.data().chunks_exact(c) {
        if c == 1 {
            out.push(to_byte(px[0]));
        } else {
            for k in 0..3 {
                out.push(px.get(k).copied().map_or(0, to_byte));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn pgm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let mut vals = Vec::with_capacity(count);
    let mut i = 0;
    while vals.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| format_err("invalid PGM header"))?;
        vals.push(tok.parse().map_err(|_| format_err(format!("invalid PGM token {tok:?}")))?);
    }
    Ok((vals, i))
}

/// Reads a binary (`P5`) or ASCII (`P2`) graymap as a glyph.
pub fn load_pgm_glyph(path: &Path) -> Result<Glyph> {
    let bytes = fs::read(path)?;
    ensure_format(bytes.len() >= 2 && (&bytes[..2] == b"P5" || &bytes[..2] == b"P2"), "not a PGM file")?;
    let binary = &bytes[..2] == b"P5";
    let (hdr, end) = pgm_tokens(&bytes[2..], 3)?;
    let (width, height, maxval) = (hdr[0], hdr[1], hdr[2]);
    ensure_format(maxval >= 1 && maxval <= 255, "only 8-bit graymaps are supported")?;
    let n = width * height;
    let body = &bytes[2 + end..];
    let raw: Vec<usize> = if binary {
        ensure_format(body.len() > n, "truncated PGM data")?;
        body[1..=n].iter().map(|&b| b as usize).collect()
    } else {
        pgm_tokens(body, n)?.0
    };
    let pixels = raw.into_iter().map(|v| (v.min(maxval) as f32) / maxval as f32).collect();
    Ok(Glyph { height, width, pixels })
}

fn ensure_format(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(format_err(msg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_glyphs_are_distinct_and_binary() {
        let gs = builtin_glyphs(12).unwrap();
        for (i, a) in gs.iter().enumerate() {
            assert!(a.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
            for b in &gs[i + 1..] {
                assert_ne!(a.pixels, b.pixels);
            }
        }
    }

    #[test]
    fn sprite_advances_then_reflects() {
        let mut s = DigitSprite { glyph: 0, position: (0.0, 3.0), velocity: (1.0, 0.0) };
        for k in 1..=4 {
            s.step(4.0, 10.0);
            assert_eq!(s.position, (k as f64, 3.0));
        }
        s.step(4.0, 10.0);
        assert_eq!(s.position, (3.0, 3.0));
        assert_eq!(s.velocity, (-1.0, 0.0));
    }

    #[test]
    fn glyph_larger_than_canvas_rejected() {
        let cfg = SpriteConfig { seed: 1, n_sequences: 1, seq_len: 2, canvas: (8, 8), n_sprites: 1 };
        let gs = builtin_glyphs(10).unwrap();
        assert!(matches!(generate_moving_sprites(&cfg, &gs), Err(Error::Config(_))));
    }

    #[test]
    fn header_length_matches_layout() {
        assert_eq!(encode_header(&[1, 2, 3, 4, 5], DType::F32).len(), DATASET_HEADER_LEN);
        assert_eq!(DATASET_HEADER_LEN, 48);
    }

    #[test]
    fn flows_stay_in_unit_range() {
        let cfg = FlowConfig { seed: 2, n_sequences: 2, seq_len: 5, canvas: (8, 8), channels: 2, period: 6 };
        let ds = generate_flow_fields(&cfg).unwrap();
        assert_eq!(ds.frames.shape(), &[2, 5, 8, 8, 2]);
    }
}

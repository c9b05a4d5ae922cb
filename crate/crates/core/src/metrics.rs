//! Frame-quality metrics: MSE, MAE, windowed SSIM and PSNR.
//!
//! Tensors are read as frames of shape `[..., H, W, C]`; every leading axis
//! counts towards the frame total. Accumulation is done in `f64`.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_config, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;

/// How squared and absolute errors are normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Mean over every element.
    #[default]
    PerPixelMean,
    /// Sum over each frame's pixels and channels, averaged over frames.
    PerFrameSum,
}

impl Convention {
    pub fn name(self) -> &'static str {
        match self {
            Convention::PerPixelMean => "per_pixel_mean",
            Convention::PerFrameSum => "per_frame_sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_pixel_mean" => Some(Convention::PerPixelMean),
            "per_frame_sum" => Some(Convention::PerFrameSum),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct FrameGeom {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
}

impl FrameGeom {
    fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

fn geometry<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<FrameGeom> {
    pred.check_same_shape(target)?;
    let s = pred.shape();
    ensure_config!(s.len() >= 3, "frames must have shape [..., H, W, C], got {s:?}");
    ensure_config!(!pred.is_empty(), "metrics of empty tensors");
    let r = s.len();
    Ok(FrameGeom { frames: s[..r - 3].iter().product(), height: s[r - 3], width: s[r - 2], channels: s[r - 1] })
}

fn reduce<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, convention: Convention, f: fn(f64) -> f64) -> Result<f64> {
    let g = geometry(pred, target)?;
    let total: f64 = pred.data().iter().zip(target.data()).map(|(&p, &t)| f(p.as_f64() - t.as_f64())).sum();
    let per_pixel = total / pred.len() as f64;
    Ok(match convention {
        Convention::PerPixelMean => per_pixel,
        Convention::PerFrameSum => per_pixel * g.pixels() as f64,
    })
}

/// Mean squared error under `convention`.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, convention: Convention) -> Result<f64> {
    reduce(pred, target, convention, |d| d * d)
}

/// Mean absolute error under `convention`.
pub fn mae<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, convention: Convention) -> Result<f64> {
    reduce(pred, target, convention, f64::abs)
}

/// Normalised 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn ssim_from_moments(mx: f64, my: f64, xx: f64, yy: f64, xy: f64, c1: f64, c2: f64) -> f64 {
    let vx = xx - mx * mx;
    let vy = yy - my * my;
    let cov = xy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM of one single-channel plane.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, data_range: f64) -> f64 {
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = (h * w) as f64;
        let mean = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&p, &q)| p * q).sum::<f64>() / n;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        return ssim_from_moments(mx, my, mean(x, x), mean(y, y), mean(x, y), c1, c2);
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // Separable filtering: rows first, then columns, over valid positions.
    let filter = |img: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for i in 0..h {
            for j in 0..ow {
                let mut acc = 0.0;
                for (k, &wk) in win.iter().enumerate() {
                    acc += wk * img(i * w + j + k);
                }
                rows[i * ow + j] = acc;
            }
        }
        let mut out = vec![0.0; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for (k, &wk) in win.iter().enumerate() {
                    acc += wk * rows[(i + k) * ow + j];
                }
                out[i * ow + j] = acc;
            }
        }
        out
    };
    let mx = filter(&|i| x[i]);
    let my = filter(&|i| y[i]);
    let xx = filter(&|i| x[i] * x[i]);
    let yy = filter(&|i| y[i] * y[i]);
    let xy = filter(&|i| x[i] * y[i]);
    let total: f64 = (0..oh * ow).map(|k| ssim_from_moments(mx[k], my[k], xx[k], yy[k], xy[k], c1, c2)).sum();
    total / (oh * ow) as f64
}

fn frame_planes<T: Real>(t: &Tensor<T>, g: &FrameGeom, frame: usize, channel: usize) -> Vec<f64> {
    let base = frame * g.pixels();
    (0..g.height * g.width).map(|p| t.data()[base + p * g.channels + channel].as_f64()).collect()
}

fn ssim_frame<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, g: &FrameGeom, frame: usize, data_range: f64) -> f64 {
    let total: f64 = (0..g.channels)
        .map(|c| {
            let x = frame_planes(pred, g, frame, c);
            let y = frame_planes(target, g, frame, c);
            ssim_plane(&x, &y, g.height, g.width, data_range)
        })
        .sum();
    total / g.channels as f64
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5) over
/// valid positions, averaged over windows, channels and frames. Frames
/// smaller than the window use global statistics.
pub fn ssim<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, data_range: f64) -> Result<f64> {
    let g = geometry(pred, target)?;
    ensure_config!(data_range > 0.0, "data_range must be positive, got {data_range}");
    let total: f64 = (0..g.frames).map(|f| ssim_frame(pred, target, &g, f, data_range)).sum();
    Ok(total / g.frames as f64)
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP)
}

/// Peak signal-to-noise ratio per frame, averaged; capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, data_range: f64) -> Result<f64> {
    let g = geometry(pred, target)?;
    ensure_config!(data_range > 0.0, "data_range must be positive, got {data_range}");
    let n = g.pixels();
    let total: f64 = (0..g.frames)
        .map(|f| {
            let range = f * n..(f + 1) * n;
            let se: f64 = pred.data()[range.clone()]
                .iter()
                .zip(&target.data()[range])
                .map(|(&p, &t)| (p.as_f64() - t.as_f64()).powi(2))
                .sum();
            psnr_from_mse(se / n as f64, data_range)
        })
        .sum();
    Ok(total / g.frames as f64)
}

/// Metrics of one predicted time step, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// Aggregated evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub per_frame: Vec<FrameMetrics>,
    pub convention: Convention,
}

impl MetricReport {
    /// CSV with one row per predicted frame followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,mse,mae,ssim,psnr\n");
        for (i, m) in self.per_frame.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", i + 1, m.mse, m.mae, m.ssim, m.psnr);
        }
        let _ = writeln!(out, "mean,{},{},{},{}", self.mse, self.mae, self.ssim, self.psnr);
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames  {}", self.per_frame.len())?;
        writeln!(f, "mse     {:.6} ({})", self.mse, self.convention.name())?;
        writeln!(f, "mae     {:.6} ({})", self.mae, self.convention.name())?;
        writeln!(f, "ssim    {:.6}", self.ssim)?;
        write!(f, "psnr    {:.4} dB", self.psnr)
    }
}

/// Streams batches of `[B, T, H, W, C]` predictions into a [`MetricReport`].
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    convention: Convention,
    data_range: f64,
    sums: Vec<FrameMetrics>,
    count: usize,
}

impl MetricAccumulator {
    pub fn new(horizon: usize, convention: Convention, data_range: f64) -> Self {
        MetricAccumulator { convention, data_range, sums: vec![FrameMetrics::default(); horizon], count: 0 }
    }

    pub fn add<T: Real>(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
        pred.check_same_shape(target)?;
        let s = pred.shape();
        ensure_config!(
            s.len() == 5 && s[1] == self.sums.len(),
            "expected [B, {}, H, W, C] predictions, got {s:?}",
            self.sums.len()
        );
        for b in 0..s[0] {
            for (t, acc) in self.sums.iter_mut().enumerate() {
                let frame = |x: &Tensor<T>| -> Result<Tensor<T>> {
                    let n = s[2] * s[3] * s[4];
                    let start = (b * s[1] + t) * n;
                    Tensor::from_vec(&s[2..], x.data()[start..start + n].to_vec())
                };
                let (p, q) = (frame(pred)?, frame(target)?);
                acc.mse += mse(&p, &q, self.convention)?;
                acc.mae += mae(&p, &q, self.convention)?;
                acc.ssim += ssim(&p, &q, self.data_range)?;
                acc.psnr += psnr(&p, &q, self.data_range)?;
            }
        }
        self.count += s[0];
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricReport> {
        ensure_config!(self.count > 0, "no predictions were accumulated");
        let n = self.count as f64;
        let per_frame: Vec<FrameMetrics> = self
            .sums
            .iter()
            .map(|s| FrameMetrics { mse: s.mse / n, mae: s.mae / n, ssim: s.ssim / n, psnr: s.psnr / n })
            .collect();
        let t = per_frame.len() as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| per_frame.iter().map(f).sum::<f64>() / t;
        Ok(MetricReport {
            mse: mean(|m| m.mse),
            mae: mean(|m| m.mae),
            ssim: mean(|m| m.ssim),
            psnr: mean(|m| m.psnr),
            convention: self.convention,
            per_frame,
        })
    }
}

/// One-shot [`MetricAccumulator`] over a single `[B, T, H, W, C]` pair.
pub fn report<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    convention: Convention,
    data_range: f64,
) -> Result<MetricReport> {
    ensure_config!(pred.rank() == 5, "report expects [B, T, H, W, C], got {:?}", pred.shape());
    let mut acc = MetricAccumulator::new(pred.shape()[1], convention, data_range);
    acc.add(pred, target)?;
    acc.finish()
}

//! Vertical upscalers: per-column linear and Catmull-Rom interpolation, and
//! the network with optional Monte-Carlo dropout filtering.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{denormalize, normalize, unproject, NormalizedImage, PointCloud, RangeImage, SensorIntrinsics};
use crate::io::{write_json, write_lsrs};
use crate::nn::{Mode, Network, Tensor4};
use crate::rng;

pub fn check_factor(factor: usize) -> Result<()> {
    match factor {
        2 | 4 | 8 => Ok(()),
        f => Err(Error::Config(format!("upscale factor must be 2, 4 or 8, got {f}"))),
    }
}

/// Catmull-Rom segment between `p1` (t = 0) and `p2` (t = 1).
pub fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    0.5 * (2.0 * p1
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kernel {
    Linear,
    Cubic,
}

/// Interpolates one column of anchors to `anchors.len() * factor` values.
/// Anchor `k` lands on output row `k * factor`; rows after the last anchor
/// repeat it. A span with a zero (no-return) endpoint yields zeros between
/// its anchors. Cubic spans substitute a missing or zero outer neighbour by
/// linear extrapolation of the span itself.
fn interpolate_column(anchors: &[f32], factor: usize, kernel: Kernel, out: &mut [f32]) {
    let n = anchors.len();
    for k in 0..n {
        let p1 = anchors[k];
        out[k * factor] = p1;
        if k + 1 == n {
            out[k * factor + 1..].fill(p1);
            break;
        }
        let p2 = anchors[k + 1];
        let span = &mut out[k * factor + 1..(k + 1) * factor];
        if p1 == 0.0 || p2 == 0.0 {
            span.fill(0.0);
            continue;
        }
        let (a, b) = (p1 as f64, p2 as f64);
        for (j, v) in span.iter_mut().enumerate() {
            let t = (j + 1) as f64 / factor as f64;
            *v = match kernel {
                Kernel::Linear => a + (b - a) * t,
                Kernel::Cubic => {
                    let p0 = match k.checked_sub(1).map(|i| anchors[i]) {
                        Some(v) if v != 0.0 => v as f64,
                        _ => 2.0 * a - b,
                    };
                    let p3 = match anchors.get(k + 2) {
                        Some(&v) if v != 0.0 => v as f64,
                        _ => 2.0 * b - a,
                    };
                    catmull_rom(p0, a, b, p3, t)
                }
            } as f32;
        }
    }
}

fn interpolate(low: &NormalizedImage, factor: usize, kernel: Kernel) -> Result<NormalizedImage> {
    check_factor(factor)?;
    let intr = low.intrinsics().upscaled(factor)?;
    let (rows, cols) = (low.rows(), low.cols());
    let mut out = vec![0.0f32; rows * factor * cols];
    let mut anchors = vec![0.0f32; rows];
    let mut column = vec![0.0f32; rows * factor];
    for c in 0..cols {
        for (r, a) in anchors.iter_mut().enumerate() {
            *a = low.get(r, c);
        }
        interpolate_column(&anchors, factor, kernel, &mut column);
        for (r, &v) in column.iter().enumerate() {
            out[r * cols + c] = v;
        }
    }
    NormalizedImage::new(intr, out)
}

pub fn upscale_linear(low: &NormalizedImage, factor: usize) -> Result<NormalizedImage> {
    interpolate(low, factor, Kernel::Linear)
}

/// Catmull-Rom interpolation; results are clamped to `[0, 1]`.
pub fn upscale_cubic(low: &NormalizedImage, factor: usize) -> Result<NormalizedImage> {
    interpolate(low, factor, Kernel::Cubic)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    /// Number of stochastic forward passes.
    pub passes: usize,
    /// A pixel is kept when its std is below `lambda` times its mean.
    pub lambda: f64,
    /// Overrides the dropout rate the network was built with.
    pub dropout_rate: Option<f32>,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { passes: 50, lambda: 0.03, dropout_rate: None, seed: 0 }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::Config("Monte-Carlo passes must be >= 1".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Per-pixel ensemble statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub mean: Vec<f32>,
    /// Population standard deviation.
    pub std: Vec<f32>,
    /// `mean` where `std < lambda * mean`, else 0.
    pub filtered: Vec<f32>,
    /// Percentage of positive-mean pixels that the filter zeroed.
    pub removed_pct: f64,
    pub removed_pixels: usize,
    pub positive_pixels: usize,
}

/// Mean, population std and threshold filter over equally sized passes.
/// Accumulates in f64 in pass order.
pub fn summarize_ensemble(passes: &[Vec<f32>], lambda: f64) -> Result<Ensemble> {
    let first = passes.first().ok_or_else(|| Error::Config("need at least one pass".into()))?;
    let n = first.len();
    if passes.iter().any(|p| p.len() != n) {
        return Err(Error::shape("summarize_ensemble", format!("passes of {n} values"), "ragged passes"));
    }
    let t = passes.len() as f64;
    let mut mean = vec![0.0f64; n];
    for p in passes {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    let mut var = vec![0.0f64; n];
    for p in passes {
        for ((s, &v), &m) in var.iter_mut().zip(p).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / t).sqrt()).collect();
    let mut positive = 0usize;
    let mut removed = 0usize;
    let filtered = mean
        .iter()
        .zip(&std)
        .map(|(&m, &s)| {
            let keep = s < lambda * m;
            if m > 0.0 {
                positive += 1;
                if !keep {
                    removed += 1;
                }
            }
            if keep {
                m as f32
            } else {
                0.0
            }
        })
        .collect();
    if !mean.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite ensemble mean".into()));
    }
    Ok(Ensemble {
        mean: mean.iter().map(|&v| v as f32).collect(),
        std: std.iter().map(|&v| v as f32).collect(),
        filtered,
        removed_pct: removed_points_pct(removed, positive),
        removed_pixels: removed,
        positive_pixels: positive,
    })
}

/// `100 * removed / positive`, or 0 when nothing was predicted.
pub fn removed_points_pct(removed: usize, positive: usize) -> f64 {
    if positive == 0 {
        log::warn!("no pixels with a positive mean; reporting 0% removed");
        0.0
    } else {
        100.0 * removed as f64 / positive as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    /// Ensemble mean, unfiltered.
    pub mean: NormalizedImage,
    /// Per-pixel standard deviation in normalized units.
    pub std: Vec<f32>,
    /// Mean with uncertain pixels set to 0.
    pub final_image: NormalizedImage,
    /// Percentage of positive-mean pixels zeroed by the filter, in [0, 100].
    pub removed_fraction: f64,
    pub removed_pixels: usize,
    pub positive_pixels: usize,
    pub passes: usize,
    pub lambda: f64,
}

fn to_tensor(img: &NormalizedImage) -> Tensor4<f32> {
    Tensor4::from_vec([1, 1, img.rows(), img.cols()], img.as_slice().to_vec()).unwrap()
}

fn check_input(low: &NormalizedImage, network: &Network<f32>) -> Result<SensorIntrinsics> {
    let factor = network.spec.upscale_factor;
    let [_, rows, cols] = network.spec.output_shape(low.rows(), low.cols())?;
    if rows != low.rows() * factor || cols != low.cols() {
        return Err(Error::shape("upscale", format!("{}x{}", low.rows() * factor, low.cols()), format!("{rows}x{cols}")));
    }
    low.intrinsics().upscaled(factor)
}

fn output_image(intr: SensorIntrinsics, y: Vec<f32>) -> Result<NormalizedImage> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("network produced non-finite values".into()));
    }
    NormalizedImage::new(intr, y)
}

/// One deterministic pass with dropout disabled.
pub fn nn_infer(low: &NormalizedImage, network: &Network<f32>) -> Result<NormalizedImage> {
    let intr = check_input(low, network)?;
    let y = network.forward(&to_tensor(low), Mode::Eval, &mut rng::stream(0, 0))?;
    output_image(intr, y.into_vec())
}

/// Raw outputs of `cfg.passes` dropout-active passes; pass `t` draws its
/// masks from stream `(cfg.seed, t)`.
pub fn mc_passes(low: &NormalizedImage, network: &Network<f32>, cfg: &McConfig) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    check_input(low, network)?;
    let rated;
    let net = match cfg.dropout_rate {
        Some(r) => {
            rated = Network { spec: network.spec.with_dropout_rate(r), params: network.params.clone() };
            rated.spec.validate()?;
            &rated
        }
        None => network,
    };
    let x = to_tensor(low);
    let pass = |t: usize| -> Result<Vec<f32>> {
        let mut r = rng::stream(cfg.seed, rng::stream_id([5, t as u16, (t >> 16) as u16, 0]));
        Ok(net.forward(&x, Mode::McDropout, &mut r)?.into_vec())
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..cfg.passes).into_par_iter().map(pass).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..cfg.passes).map(pass).collect()
    }
}

pub fn mc_infer(low: &NormalizedImage, network: &Network<f32>, cfg: &McConfig) -> Result<McResult> {
    let intr = check_input(low, network)?;
    let passes = mc_passes(low, network, cfg)?;
    let e = summarize_ensemble(&passes, cfg.lambda)?;
    Ok(McResult {
        mean: output_image(intr, e.mean)?,
        std: e.std,
        final_image: output_image(intr, e.filtered)?,
        removed_fraction: e.removed_pct,
        removed_pixels: e.removed_pixels,
        positive_pixels: e.positive_pixels,
        passes: cfg.passes,
        lambda: cfg.lambda,
    })
}

#[derive(Serialize)]
struct McSummary {
    passes: usize,
    lambda: f64,
    removed_fraction: f64,
}

impl McResult {
    /// Writes `mean.lsrs`, `std.lsrs`, `final.lsrs` (meters) and
    /// `mc_summary.json` into `dir`. The std file's intrinsics carry a
    /// minimum range of 1e-6 m so that small deviations are representable.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let intr = *self.mean.intrinsics();
        write_lsrs(&dir.join("mean.lsrs"), &denormalize(&self.mean))?;
        write_lsrs(&dir.join("final.lsrs"), &denormalize(&self.final_image))?;
        let std_intr = SensorIntrinsics { min_range_m: 1e-6, ..intr };
        let std_m = self.std.iter().map(|s| s * intr.max_range_m).collect();
        write_lsrs(&dir.join("std.lsrs"), &RangeImage::from_clamped(std_intr, std_m)?)?;
        write_json(
            &dir.join("mc_summary.json"),
            &McSummary { passes: self.passes, lambda: self.lambda, removed_fraction: self.removed_fraction },
        )
    }
}

/// Output of an [`Upscaler`].
#[derive(Debug, Clone, PartialEq)]
pub struct Upscaled {
    pub image: NormalizedImage,
    /// Image to score with L1: the unfiltered ensemble mean for Monte-Carlo
    /// upscalers, otherwise `image`.
    pub unfiltered: NormalizedImage,
    pub mc: Option<McResult>,
}

pub trait Upscaler {
    fn name(&self) -> &str;
    fn factor(&self) -> usize;
    fn upscale(&self, low: &NormalizedImage) -> Result<Upscaled>;
}

fn plain(image: NormalizedImage) -> Upscaled {
    Upscaled { unfiltered: image.clone(), image, mc: None }
}

pub struct Linear(pub usize);

pub struct Cubic(pub usize);

/// The network, with Monte-Carlo filtering when `mc` is set.
pub struct Neural<'a> {
    pub network: &'a Network<f32>,
    pub mc: Option<McConfig>,
}

impl Upscaler for Linear {
    fn name(&self) -> &str {
        "linear"
    }
    fn factor(&self) -> usize {
        self.0
    }
    fn upscale(&self, low: &NormalizedImage) -> Result<Upscaled> {
        upscale_linear(low, self.0).map(plain)
    }
}

impl Upscaler for Cubic {
    fn name(&self) -> &str {
        "cubic"
    }
    fn factor(&self) -> usize {
        self.0
    }
    fn upscale(&self, low: &NormalizedImage) -> Result<Upscaled> {
        upscale_cubic(low, self.0).map(plain)
    }
}

impl Upscaler for Neural<'_> {
    fn name(&self) -> &str {
        if self.mc.is_some() {
            "nn-mc"
        } else {
            "nn"
        }
    }
    fn factor(&self) -> usize {
        self.network.spec.upscale_factor
    }
    fn upscale(&self, low: &NormalizedImage) -> Result<Upscaled> {
        match &self.mc {
            None => nn_infer(low, self.network).map(plain),
            Some(cfg) => {
                let r = mc_infer(low, self.network, cfg)?;
                Ok(Upscaled { image: r.final_image.clone(), unfiltered: r.mean.clone(), mc: Some(r) })
            }
        }
    }
}

/// Result of running a scan through an upscaler back to 3D.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub upscaled: Upscaled,
    pub ranges: RangeImage,
    pub cloud: PointCloud,
    pub elapsed_ms: f64,
}

/// normalize, upscale, convert back to meters (values below the minimum
/// range become no-returns) and unproject.
pub fn upscale_pipeline(low: &RangeImage, upscaler: &dyn Upscaler) -> Result<PipelineOutput> {
    let start = Instant::now();
    let upscaled = upscaler.upscale(&normalize(low))?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let ranges = denormalize(&upscaled.image);
    let cloud = unproject(&ranges);
    Ok(PipelineOutput { upscaled, ranges, cloud, elapsed_ms })
}

//! Sensor model, range images, point clouds and the spherical projection
//! between them.
//!
//! Row 0 of a range image is the highest-elevation beam. Column `c` covers the
//! azimuth bin `[c, c + 1) * 2π / h_res - π`, so the panorama seam sits at the
//! rear of the sensor (azimuth ±π) and the forward direction lands in the
//! middle column.

use std::f64::consts::PI;

use nalgebra::{Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spinning lidar geometry. Beams are uniformly spaced in elevation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorIntrinsics {
    pub channels: usize,
    pub h_res: usize,
    pub v_fov_deg: f32,
    pub v_center_deg: f32,
    pub max_range_m: f32,
    pub min_range_m: f32,
}

impl Default for SensorIntrinsics {
    fn default() -> Self {
        SensorIntrinsics {
            channels: 16,
            h_res: 1024,
            v_fov_deg: 30.0,
            v_center_deg: 0.0,
            max_range_m: 100.0,
            min_range_m: 0.3,
        }
    }
}

impl SensorIntrinsics {
    pub fn new(channels: usize, h_res: usize) -> Result<Self> {
        let intr = SensorIntrinsics {
            channels,
            h_res,
            ..Default::default()
        };
        intr.validate()?;
        Ok(intr)
    }

    /// 16 beams over 30°, as on a VLP-16.
    pub fn vlp16(h_res: usize) -> Self {
        SensorIntrinsics {
            channels: 16,
            h_res,
            ..Default::default()
        }
    }

    /// A 64-beam sensor sharing the VLP-16 field of view.
    pub fn vlp64(h_res: usize) -> Self {
        SensorIntrinsics {
            channels: 64,
            h_res,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::Config(format!("channels must be >= 2, got {}", self.channels)));
        }
        if self.h_res < 4 {
            return Err(Error::Config(format!("h_res must be >= 4, got {}", self.h_res)));
        }
        if !(self.v_fov_deg > 0.0 && self.v_fov_deg < 180.0) {
            return Err(Error::Config(format!(
                "v_fov_deg must be in (0, 180), got {}",
                self.v_fov_deg
            )));
        }
        if !self.v_center_deg.is_finite() {
            return Err(Error::Config("v_center_deg must be finite".into()));
        }
        if !(self.min_range_m > 0.0 && self.max_range_m > self.min_range_m)
            || !self.max_range_m.is_finite()
        {
            return Err(Error::Config(format!(
                "need max_range_m > min_range_m > 0, got max {} min {}",
                self.max_range_m, self.min_range_m
            )));
        }
        Ok(())
    }

    /// Angular distance between adjacent beams, radians.
    pub fn beam_spacing(&self) -> f64 {
        (self.v_fov_deg as f64).to_radians() / (self.channels - 1) as f64
    }

    fn top_elevation(&self) -> f64 {
        (self.v_center_deg as f64 + self.v_fov_deg as f64 / 2.0).to_radians()
    }

    /// Elevation of `row` in radians (row 0 is the top beam).
    pub fn elevation(&self, row: usize) -> f64 {
        self.top_elevation() - row as f64 * self.beam_spacing()
    }

    /// Azimuth of the center of column `col`, radians in (-π, π).
    pub fn azimuth(&self, col: usize) -> f64 {
        (col as f64 + 0.5) / self.h_res as f64 * 2.0 * PI - PI
    }

    /// Intrinsics of the beams kept by [`subsample_rows`] with `factor`.
    pub fn subsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.channels % factor != 0 {
            return Err(Error::Config(format!(
                "factor {factor} does not divide {} channels",
                self.channels
            )));
        }
        if factor == 1 {
            return Ok(*self);
        }
        let kept = self.channels / factor;
        if kept < 2 {
            return Err(Error::Config(format!(
                "factor {factor} leaves fewer than 2 of {} channels",
                self.channels
            )));
        }
        let spacing = self.beam_spacing() * factor as f64;
        let fov = spacing * (kept - 1) as f64;
        let top = self.top_elevation();
        Ok(SensorIntrinsics {
            channels: kept,
            v_fov_deg: fov.to_degrees() as f32,
            v_center_deg: (top - fov / 2.0).to_degrees() as f32,
            ..*self
        })
    }

    /// Inverse of [`SensorIntrinsics::subsampled`]: the sensor whose every
    /// `factor`-th beam (starting at the top) matches this one.
    pub fn upscaled(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("upscale factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(*self);
        }
        let channels = self.channels * factor;
        let spacing = self.beam_spacing() / factor as f64;
        let fov = spacing * (channels - 1) as f64;
        let top = self.top_elevation();
        Ok(SensorIntrinsics {
            channels,
            v_fov_deg: fov.to_degrees() as f32,
            v_center_deg: (top - fov / 2.0).to_degrees() as f32,
            ..*self
        })
    }

    fn pixel_count(&self) -> usize {
        self.channels * self.h_res
    }
}

/// Beam elevations in radians, top beam first.
pub fn beam_elevations(intr: &SensorIntrinsics) -> Vec<f64> {
    (0..intr.channels).map(|r| intr.elevation(r)).collect()
}

fn check_dims(intr: &SensorIntrinsics, len: usize, op: &'static str) -> Result<()> {
    intr.validate()?;
    if len != intr.pixel_count() {
        return Err(Error::shape(
            op,
            format!("{}x{} = {}", intr.channels, intr.h_res, intr.pixel_count()),
            len,
        ));
    }
    Ok(())
}

/// Panoramic range image in meters; 0 marks a missing return.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    intrinsics: SensorIntrinsics,
    data: Vec<f32>,
}

impl RangeImage {
    pub fn zeros(intrinsics: SensorIntrinsics) -> Self {
        RangeImage {
            intrinsics,
            data: vec![0.0; intrinsics.pixel_count()],
        }
    }

    /// Builds an image, rejecting values outside `{0} ∪ [min, max]`.
    pub fn new(intrinsics: SensorIntrinsics, data: Vec<f32>) -> Result<Self> {
        check_dims(&intrinsics, data.len(), "RangeImage::new")?;
        let (lo, hi) = (intrinsics.min_range_m, intrinsics.max_range_m);
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && !(v >= lo && v <= hi))
        {
            return Err(Error::Format(format!(
                "range {v} at pixel {i} outside {{0}} ∪ [{lo}, {hi}]"
            )));
        }
        Ok(RangeImage { intrinsics, data })
    }

    /// Builds an image from arbitrary values: non-finite or below-minimum
    /// values become 0 and values above the maximum are clamped to it.
    pub fn from_clamped(intrinsics: SensorIntrinsics, mut data: Vec<f32>) -> Result<Self> {
        check_dims(&intrinsics, data.len(), "RangeImage::from_clamped")?;
        let (lo, hi) = (intrinsics.min_range_m, intrinsics.max_range_m);
        for v in &mut data {
            *v = if !v.is_finite() || *v < lo { 0.0 } else { v.min(hi) };
        }
        Ok(RangeImage { intrinsics, data })
    }

    pub fn intrinsics(&self) -> &SensorIntrinsics {
        &self.intrinsics
    }

    pub fn rows(&self) -> usize {
        self.intrinsics.channels
    }

    pub fn cols(&self) -> usize {
        self.intrinsics.h_res
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let w = self.cols();
        &self.data[row * w..(row + 1) * w]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Range image divided by the sensor's maximum range.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    intrinsics: SensorIntrinsics,
    data: Vec<f32>,
}

impl NormalizedImage {
    /// Values must be finite; they are clamped into `[0, 1]`.
    pub fn new(intrinsics: SensorIntrinsics, mut data: Vec<f32>) -> Result<Self> {
        check_dims(&intrinsics, data.len(), "NormalizedImage::new")?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at pixel {i}")));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(NormalizedImage { intrinsics, data })
    }

    pub fn intrinsics(&self) -> &SensorIntrinsics {
        &self.intrinsics
    }

    pub fn rows(&self) -> usize {
        self.intrinsics.channels
    }

    pub fn cols(&self) -> usize {
        self.intrinsics.h_res
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols() + col]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

pub fn normalize(img: &RangeImage) -> NormalizedImage {
    let max = img.intrinsics.max_range_m;
    NormalizedImage {
        intrinsics: img.intrinsics,
        data: img.data.iter().map(|&v| v / max).collect(),
    }
}

/// Scales back to meters. Values that land below the minimum range become
/// missing returns.
pub fn denormalize(img: &NormalizedImage) -> RangeImage {
    let intr = img.intrinsics;
    let data = img
        .data
        .iter()
        .map(|&v| {
            let r = (v * intr.max_range_m).min(intr.max_range_m);
            if r < intr.min_range_m {
                0.0
            } else {
                r
            }
        })
        .collect();
    RangeImage {
        intrinsics: intr,
        data,
    }
}

/// Keeps rows `0, factor, 2 * factor, ...`.
pub fn subsample_rows(img: &RangeImage, factor: usize) -> Result<RangeImage> {
    let intrinsics = img.intrinsics.subsampled(factor)?;
    let w = img.cols();
    let mut data = Vec::with_capacity(intrinsics.pixel_count());
    for r in (0..img.rows()).step_by(factor) {
        data.extend_from_slice(&img.data[r * w..(r + 1) * w]);
    }
    Ok(RangeImage { intrinsics, data })
}

/// Unordered points in the sensor frame, tagged with the beam that produced
/// them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub rings: Vec<u32>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: [f64; 3], ring: u32) {
        self.points.push(p);
        self.rings.push(ring);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `x,y,z,ring` per point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z,ring\n");
        for (p, r) in self.points.iter().zip(&self.rings) {
            out.push_str(&format!("{},{},{},{r}\n", p[0], p[1], p[2]));
        }
        out
    }
}

/// Sensor placement in the world frame. Rotation is applied as yaw about z,
/// then pitch about y, then roll about x (`R = Rz(yaw) Ry(pitch) Rx(roll)`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub pitch: f64,
    #[serde(default)]
    pub roll: f64,
}

impl Pose {
    pub fn new(position: [f64; 3], yaw: f64) -> Self {
        Pose {
            position,
            yaw,
            pitch: 0.0,
            roll: 0.0,
        }
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    pub fn origin(&self) -> Point3<f64> {
        Point3::from(self.position)
    }

    /// Sensor frame to world frame.
    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let w = self.rotation() * Vector3::from(p) + Vector3::from(self.position);
        [w.x, w.y, w.z]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.position.iter().all(|v| v.is_finite())
            && self.yaw.is_finite()
            && self.pitch.is_finite()
            && self.roll.is_finite();
        if finite {
            Ok(())
        } else {
            Err(Error::Config(format!("non-finite pose {self:?}")))
        }
    }
}

/// Result of [`project`]: the image plus the number of points that fell
/// outside the field of view or range limits.
#[derive(Debug, Clone)]
pub struct Projection {
    pub image: RangeImage,
    pub dropped: usize,
}

/// Relative slack when comparing a recomputed norm against the range limits,
/// so that pixels sitting exactly on a limit survive a round trip.
const RANGE_SLACK: f64 = 1e-9;

pub fn project(cloud: &PointCloud, intr: &SensorIntrinsics) -> Projection {
    let mut image = RangeImage::zeros(*intr);
    let spacing = intr.beam_spacing();
    let top = intr.top_elevation();
    let (lo, hi) = (intr.min_range_m as f64, intr.max_range_m as f64);
    let w = intr.h_res;
    let mut dropped = 0;
    for p in &cloud.points {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if !r.is_finite() || r < lo * (1.0 - RANGE_SLACK) || r > hi * (1.0 + RANGE_SLACK) {
            dropped += 1;
            continue;
        }
        let elev = (p[2] / r).clamp(-1.0, 1.0).asin();
        let pos = (top - elev) / spacing;
        let row = pos.round();
        if row < 0.0 || row > (intr.channels - 1) as f64 || (pos - row).abs() > 0.5 {
            dropped += 1;
            continue;
        }
        let az = p[1].atan2(p[0]);
        let col = (((az + PI) / (2.0 * PI) * w as f64).floor() as i64).rem_euclid(w as i64);
        let idx = row as usize * w + col as usize;
        let v = (r as f32).clamp(intr.min_range_m, intr.max_range_m);
        let slot = &mut image.data[idx];
        if *slot == 0.0 || v < *slot {
            *slot = v;
        }
    }
    Projection { image, dropped }
}

/// One point per non-zero pixel, placed on the beam axis through the column
/// center.
pub fn unproject(img: &RangeImage) -> PointCloud {
    let intr = img.intrinsics;
    let w = intr.h_res;
    let elev: Vec<(f64, f64)> = (0..intr.channels)
        .map(|r| {
            let e = intr.elevation(r);
            (e.cos(), e.sin())
        })
        .collect();
    let azim: Vec<(f64, f64)> = (0..w)
        .map(|c| {
            let a = intr.azimuth(c);
            (a.cos(), a.sin())
        })
        .collect();
    let mut cloud = PointCloud::new();
    for (i, &v) in img.data.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let (row, col) = (i / w, i % w);
        let r = v as f64;
        let (ce, se) = elev[row];
        let (ca, sa) = azim[col];
        cloud.push([r * ce * ca, r * ce * sa, r * se], row as u32);
    }
    cloud
}

//! Dense log-odds occupancy grids built from registered scans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{unproject, PointCloud, Pose, RangeImage};
use crate::io::{push_f32s, read_f32s, read_u32};

pub const LSRG_MAGIC: &[u8; 4] = b"LSRG";
pub const LSRG_VERSION: u32 = 1;
/// Half-width of the band around 0.5 read as unknown.
pub const STATE_DELTA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OccupancyParams {
    pub l_hit: f32,
    pub l_miss: f32,
    pub l_min: f32,
    pub l_max: f32,
}

impl Default for OccupancyParams {
    fn default() -> Self {
        OccupancyParams {
            l_hit: (0.7f64 / 0.3).ln() as f32,
            l_miss: (0.4f64 / 0.6).ln() as f32,
            l_min: -2.0,
            l_max: 3.5,
        }
    }
}

impl OccupancyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_hit > 0.0 && self.l_miss < 0.0 && self.l_min < 0.0 && self.l_max > 0.0) {
            return Err(Error::Config(format!("need l_hit > 0 > l_miss and l_min < 0 < l_max, got {self:?}")));
        }
        Ok(())
    }
}

/// Placement and size of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Minimum corner, meters.
    pub origin: [f64; 3],
    /// Edge length of a voxel, meters.
    pub resolution: f64,
    pub dims: [usize; 3],
    #[serde(default)]
    pub params: OccupancyParams,
}

impl GridConfig {
    /// Smallest grid at `resolution` covering the box `[lo, hi]`.
    pub fn covering(lo: [f64; 3], hi: [f64; 3], resolution: f64) -> Result<Self> {
        let mut dims = [0; 3];
        for i in 0..3 {
            if !(hi[i] > lo[i]) {
                return Err(Error::Config(format!("empty grid extent on axis {i}")));
            }
            dims[i] = ((hi[i] - lo[i]) / resolution).ceil().max(1.0) as usize;
        }
        let cfg = GridConfig { origin: lo, resolution, dims, params: OccupancyParams::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Config(format!("grid resolution must be positive, got {}", self.resolution)));
        }
        if self.dims.contains(&0) || self.dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).is_none() {
            return Err(Error::Config(format!("invalid grid dims {:?}", self.dims)));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        self.params.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VoxelState {
    Free,
    Unknown,
    Occupied,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    config: GridConfig,
    log_odds: Vec<f32>,
    touched: Vec<bool>,
}

/// Per-scan update mark.
const MARK_FREE: u8 = 1;
const MARK_HIT: u8 = 2;

impl VoxelGrid {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let n = config.dims.iter().product();
        Ok(VoxelGrid { config, log_odds: vec![0.0; n], touched: vec![false; n] })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn dims(&self) -> [usize; 3] {
        self.config.dims
    }

    pub fn len(&self) -> usize {
        self.log_odds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_odds.is_empty()
    }

    pub fn index(&self, v: [usize; 3]) -> Option<usize> {
        let [nx, ny, nz] = self.config.dims;
        (v[0] < nx && v[1] < ny && v[2] < nz).then(|| (v[2] * ny + v[1]) * nx + v[0])
    }

    pub fn voxel_of_index(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.config.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Voxel containing `p`, if inside the grid.
    pub fn voxel_at(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut v = [0; 3];
        for i in 0..3 {
            let f = ((p[i] - self.config.origin[i]) / self.config.resolution).floor();
            if !(f >= 0.0 && f < self.config.dims[i] as f64) {
                return None;
            }
            v[i] = f as usize;
        }
        Some(v)
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> [f64; 3] {
        let c = &self.config;
        [0, 1, 2].map(|i| c.origin[i] + (v[i] as f64 + 0.5) * c.resolution)
    }

    pub fn log_odds(&self, v: [usize; 3]) -> Result<f32> {
        Ok(self.log_odds[self.checked(v)?])
    }

    pub fn is_touched(&self, v: [usize; 3]) -> Result<bool> {
        Ok(self.touched[self.checked(v)?])
    }

    fn checked(&self, v: [usize; 3]) -> Result<usize> {
        self.index(v)
            .ok_or_else(|| Error::shape("VoxelGrid", format!("voxel inside {:?}", self.config.dims), format!("{v:?}")))
    }

    /// Occupancy probability; untouched voxels report 0.5.
    pub fn occupancy(&self, v: [usize; 3]) -> Result<f64> {
        let i = self.checked(v)?;
        Ok(self.probability_at(i))
    }

    pub(crate) fn probability_at(&self, i: usize) -> f64 {
        if self.touched[i] {
            logistic(self.log_odds[i] as f64)
        } else {
            0.5
        }
    }

    pub fn state(&self, v: [usize; 3]) -> Result<VoxelState> {
        let i = self.checked(v)?;
        Ok(self.state_at(i))
    }

    pub(crate) fn state_at(&self, i: usize) -> VoxelState {
        if !self.touched[i] {
            return VoxelState::Unknown;
        }
        let p = logistic(self.log_odds[i] as f64);
        if p > 0.5 + STATE_DELTA {
            VoxelState::Occupied
        } else if p < 0.5 - STATE_DELTA {
            VoxelState::Free
        } else {
            VoxelState::Unknown
        }
    }

    pub fn count_state(&self, state: VoxelState) -> usize {
        (0..self.len()).filter(|&i| self.state_at(i) == state).count()
    }

    /// Parametric interval `[t0, t1] ⊆ [0, 1]` of `a + t (b - a)` inside the
    /// grid box.
    fn clip(&self, a: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
        let c = &self.config;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for i in 0..3 {
            let lo = c.origin[i];
            let hi = lo + c.dims[i] as f64 * c.resolution;
            if d[i] == 0.0 {
                if a[i] < lo || a[i] >= hi {
                    return None;
                }
            } else {
                let (mut ta, mut tb) = ((lo - a[i]) / d[i], (hi - a[i]) / d[i]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        (t0 <= t1).then_some((t0, t1))
    }

    /// Voxels crossed by the segment `a -> b`, in order, restricted to the
    /// grid. Incremental stepping to the nearest voxel boundary along the
    /// segment parameter.
    pub fn traverse(&self, a: [f64; 3], b: [f64; 3]) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        self.traverse_with(a, b, |v| out.push(v));
        out
    }

    fn traverse_with(&self, a: [f64; 3], b: [f64; 3], mut visit: impl FnMut([usize; 3])) {
        let c = &self.config;
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let Some((t0, t1)) = self.clip(a, d) else { return };
        let mut v = [0usize; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for i in 0..3 {
            let p = a[i] + t0 * d[i];
            let f = ((p - c.origin[i]) / c.resolution).floor();
            v[i] = (f.max(0.0) as usize).min(c.dims[i] - 1);
            if d[i] > 0.0 {
                step[i] = 1;
                let edge = c.origin[i] + (v[i] + 1) as f64 * c.resolution;
                t_max[i] = (edge - a[i]) / d[i];
                t_delta[i] = c.resolution / d[i];
            } else if d[i] < 0.0 {
                step[i] = -1;
                let edge = c.origin[i] + v[i] as f64 * c.resolution;
                t_max[i] = (edge - a[i]) / d[i];
                t_delta[i] = -c.resolution / d[i];
            }
        }
        loop {
            visit(v);
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[axis] >= t1 {
                return;
            }
            let next = v[axis] as i64 + step[axis];
            if next < 0 || next >= c.dims[axis] as i64 {
                return;
            }
            v[axis] = next as usize;
            t_max[axis] += t_delta[axis];
        }
    }

    /// Integrates one scan given in the sensor frame. Every voxel on a ray
    /// from the sensor to its endpoint receives one miss and the endpoint
    /// voxel one hit, with each voxel updated at most once per scan and hits
    /// taking precedence. Rays longer than `max_range` are cut there and
    /// register no hit, as do endpoints outside the grid.
    pub fn integrate_scan(&mut self, cloud: &PointCloud, pose: &Pose, max_range: f64) -> Result<()> {
        pose.validate()?;
        if cloud.is_empty() {
            return Ok(());
        }
        let origin = pose.origin();
        let o = [origin.x, origin.y, origin.z];
        let mut marks = vec![0u8; self.len()];
        for p in &cloud.points {
            let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if !(range > 0.0) || !range.is_finite() {
                continue;
            }
            let (local, hit) = if range > max_range {
                let s = max_range / range;
                ([p[0] * s, p[1] * s, p[2] * s], false)
            } else {
                (*p, true)
            };
            let end = pose.transform(local);
            let end_voxel = if hit { self.voxel_at(end) } else { None };
            let dims = self.config.dims;
            self.traverse_with(o, end, |v| {
                let i = (v[2] * dims[1] + v[1]) * dims[0] + v[0];
                if Some(v) != end_voxel {
                    marks[i] |= MARK_FREE;
                }
            });
            if let Some(v) = end_voxel {
                let i = self.index(v).unwrap();
                marks[i] |= MARK_HIT;
            }
        }
        let prm = self.config.params;
        for (i, &m) in marks.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let delta = if m & MARK_HIT != 0 { prm.l_hit } else { prm.l_miss };
            self.log_odds[i] = (self.log_odds[i] + delta).clamp(prm.l_min, prm.l_max);
            self.touched[i] = true;
        }
        Ok(())
    }

    /// Binary export. Layout (little-endian): magic `LSRG`, u32 version,
    /// u32 nx, ny, nz, f64 origin x, y, z, f64 resolution, f32 l_hit, l_miss,
    /// l_min, l_max, then one f32 log-odds per voxel with x fastest and NaN
    /// marking unobserved voxels.
    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 4 * self.len());
        out.extend_from_slice(LSRG_MAGIC);
        out.extend_from_slice(&LSRG_VERSION.to_le_bytes());
        for d in c.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in c.origin.iter().chain([c.resolution].iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        push_f32s(&mut out, &[c.params.l_hit, c.params.l_miss, c.params.l_min, c.params.l_max]);
        let values: Vec<f32> = self.log_odds.iter().zip(&self.touched).map(|(&l, &t)| if t { l } else { f32::NAN }).collect();
        push_f32s(&mut out, &values);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.get(0..4) != Some(LSRG_MAGIC.as_slice()) {
            return Err(Error::Format("missing LSRG magic".into()));
        }
        let version = read_u32(bytes, 4)?;
        if version != LSRG_VERSION {
            return Err(Error::Format(format!("unsupported LSRG version {version}")));
        }
        let dims = [read_u32(bytes, 8)? as usize, read_u32(bytes, 12)? as usize, read_u32(bytes, 16)? as usize];
        let f64_at = |at: usize| -> Result<f64> {
            bytes
                .get(at..at + 8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::Format("truncated LSRG header".into()))
        };
        let origin = [f64_at(20)?, f64_at(28)?, f64_at(36)?];
        let resolution = f64_at(44)?;
        let p = read_f32s(bytes, 52, 4)?;
        let params = OccupancyParams { l_hit: p[0], l_miss: p[1], l_min: p[2], l_max: p[3] };
        let config = GridConfig { origin, resolution, dims, params };
        config.validate().map_err(|e| Error::Format(format!("LSRG header: {e}")))?;
        let n: usize = dims.iter().product();
        let expected = 68 + 4 * n;
        if bytes.len() != expected {
            return Err(Error::Format(format!("LSRG file is {} bytes, expected {expected}", bytes.len())));
        }
        let values = read_f32s(bytes, 68, n)?;
        let touched: Vec<bool> = values.iter().map(|v| !v.is_nan()).collect();
        let log_odds = values.iter().map(|&v| if v.is_nan() { 0.0 } else { v }).collect();
        Ok(VoxelGrid { config, log_odds, touched })
    }

    /// `x,y,z,p` rows for the centers of occupied voxels.
    pub fn occupied_csv(&self) -> String {
        let mut out = String::from("x,y,z,p\n");
        for i in 0..self.len() {
            if self.state_at(i) == VoxelState::Occupied {
                let c = self.voxel_center(self.voxel_of_index(i));
                out.push_str(&format!("{:.4},{:.4},{:.4},{:.6}\n", c[0], c[1], c[2], self.probability_at(i)));
            }
        }
        out
    }
}

pub fn logistic(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// Integrates scans in order into a fresh grid.
pub fn build_map<'a>(scans: impl IntoIterator<Item = (&'a PointCloud, &'a Pose)>, config: &GridConfig, max_range: f64) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::new(*config)?;
    for (cloud, pose) in scans {
        grid.integrate_scan(cloud, pose, max_range)?;
    }
    Ok(grid)
}

/// [`build_map`] over range images.
pub fn build_map_from_images<'a>(scans: impl IntoIterator<Item = (&'a RangeImage, &'a Pose)>, config: &GridConfig) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::new(*config)?;
    for (img, pose) in scans {
        grid.integrate_scan(&unproject(img), pose, img.intrinsics().max_range_m as f64)?;
    }
    Ok(grid)
}

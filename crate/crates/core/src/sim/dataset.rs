//! Trajectories, training-pair generation and augmentation.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{subsample_rows, Pose, RangeImage, SensorIntrinsics};
use crate::sim::scene::{raycast_scan, Scene};
use crate::{io, rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    /// Nominal distance between consecutive poses, meters.
    pub spacing_m: f64,
}

/// One trajectory file entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrajectoryRecord {
    position: [f64; 3],
    yaw_deg: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pitch_deg: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    roll_deg: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::Config("trajectory has no poses".into()));
        }
        for p in &poses {
            p.validate()?;
        }
        let spacing_m = if poses.len() > 1 {
            poses
                .windows(2)
                .map(|w| {
                    let (a, b) = (w[0].position, w[1].position);
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                })
                .sum::<f64>()
                / (poses.len() - 1) as f64
        } else {
            0.0
        };
        Ok(Trajectory { poses, spacing_m })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<TrajectoryRecord> = io::read_json(path)?;
        let poses = records
            .into_iter()
            .map(|r| Pose {
                position: r.position,
                yaw: r.yaw_deg.to_radians(),
                pitch: r.pitch_deg.to_radians(),
                roll: r.roll_deg.to_radians(),
            })
            .collect();
        Trajectory::new(poses).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<TrajectoryRecord> = self
            .poses
            .iter()
            .map(|p| TrajectoryRecord {
                position: p.position,
                yaw_deg: p.yaw.to_degrees(),
                pitch_deg: p.pitch.to_degrees(),
                roll_deg: p.roll.to_degrees(),
            })
            .collect();
        io::write_json(path, &records)
    }

    /// `count` collision-free poses at `height` inside the scene's bounded
    /// extent.
    pub fn random_in(scene: &Scene, count: usize, height: f64, seed: u64) -> Result<Self> {
        let (lo, hi) = scene
            .bounds()
            .ok_or_else(|| Error::Config("scene has no bounded primitives".into()))?;
        let mut r = rng::stream(seed, 0x7a7);
        let mut poses = Vec::with_capacity(count);
        let mut attempts = 0;
        while poses.len() < count {
            attempts += 1;
            if attempts > 10_000 * count.max(1) {
                return Err(Error::Config("could not place trajectory poses in free space".into()));
            }
            let p = [
                r.gen_range(lo[0] + 0.6..hi[0] - 0.6),
                r.gen_range(lo[1] + 0.6..hi[1] - 0.6),
                height,
            ];
            if scene.is_free(p, 0.5) {
                poses.push(Pose::new(p, r.gen_range(-std::f64::consts::PI..std::f64::consts::PI)));
            }
        }
        Trajectory::new(poses)
    }

    /// The 25-stop tour through [`Scene::office`] with the sensor 0.5 m above
    /// the floor.
    pub fn office_tour() -> Self {
        let stops = [
            (2.5, 3.1),
            (4.8, 3.1),
            (5.3, 5.3),
            (3.0, 5.4),
            (1.0, 5.4),
            (2.6, 8.2),
            (4.7, 8.6),
            (3.0, 11.0),
            (5.2, 10.9),
            (6.9, 8.2),
            (7.4, 6.6),
            (8.9, 6.0),
            (11.5, 5.9),
            (13.9, 5.4),
            (14.2, 2.9),
            (11.9, 2.8),
            (9.6, 2.9),
            (7.3, 3.0),
            (9.3, 8.2),
            (10.8, 8.6),
            (12.4, 8.4),
            (13.5, 9.4),
            (13.0, 11.2),
            (10.6, 11.2),
            (15.2, 8.5),
        ];
        let poses = stops
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Pose::new([x, y, 0.5], (i as f64 * 0.7).sin() * 2.5))
            .collect();
        Trajectory::new(poses).expect("static tour is valid")
    }
}

/// Low-res input, high-res target and the pose they were captured from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPair {
    pub low: RangeImage,
    pub high: RangeImage,
    pub pose: Pose,
}

impl ScanPair {
    pub fn from_high(high: RangeImage, factor: usize, pose: Pose) -> Result<Self> {
        let low = subsample_rows(&high, factor)?;
        Ok(ScanPair { low, high, pose })
    }

    pub fn factor(&self) -> usize {
        self.high.rows() / self.low.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability of reversing the row order.
    pub flip_topdown: f64,
    /// Probability of mirroring the panorama.
    pub flip_horizontal: f64,
    /// Largest circular column shift; the shift is drawn from `0..=shift_cols`.
    pub shift_cols: usize,
    /// Multiplicative range scale interval.
    pub range_scale: (f32, f32),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_topdown: 0.5,
            flip_horizontal: 0.5,
            shift_cols: usize::MAX,
            range_scale: (0.85, 1.15),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.flip_topdown) || !prob(self.flip_horizontal) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.range_scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("range_scale needs 0 < lo <= hi, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// How a dataset is synthesized from a scene and trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub factor: usize,
    /// Pairs emitted per pose: the raw capture plus `augment_mult - 1`
    /// augmented copies.
    pub augment_mult: usize,
    /// Uniform pitch/roll jitter applied to each capture, degrees.
    pub attitude_jitter_deg: f64,
    pub augment: AugmentConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            factor: 4,
            augment_mult: 1,
            attitude_jitter_deg: 3.0,
            augment: AugmentConfig::default(),
        }
    }
}

fn flip_rows(img: &RangeImage) -> Vec<f32> {
    (0..img.rows()).rev().flat_map(|r| img.row(r).iter().copied()).collect()
}

fn map_rows(img: &RangeImage, data: &mut [f32], f: impl Fn(&mut [f32])) {
    for row in data.chunks_exact_mut(img.cols()) {
        f(row);
    }
}

/// Applies one random draw of the configured augmentations. The high image is
/// transformed and the low image re-derived from it, so the pair keeps its
/// subsampling correspondence.
pub fn augment_pair<R: Rng>(pair: &ScanPair, cfg: &AugmentConfig, rng: &mut R) -> Result<ScanPair> {
    let factor = pair.factor();
    let high = &pair.high;
    let intr = *high.intrinsics();
    let mut data = if rng.gen_bool(cfg.flip_topdown) {
        flip_rows(high)
    } else {
        high.as_slice().to_vec()
    };
    if rng.gen_bool(cfg.flip_horizontal) {
        map_rows(high, &mut data, |row| row.reverse());
    }
    let shift = rng.gen_range(0..=cfg.shift_cols.min(high.cols()));
    if shift % high.cols() != 0 {
        map_rows(high, &mut data, |row| row.rotate_right(shift));
    }
    let (lo, hi) = cfg.range_scale;
    let scale: f32 = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    if scale != 1.0 {
        scale_ranges(&mut data, scale, &intr);
    }
    let high = RangeImage::new(intr, data)?;
    ScanPair::from_high(high, factor, pair.pose)
}

/// Multiplies non-zero ranges by `scale`, clamping into the sensor limits.
pub fn scale_ranges(data: &mut [f32], scale: f32, intr: &SensorIntrinsics) {
    for v in data.iter_mut().filter(|v| **v != 0.0) {
        *v = (*v * scale).clamp(intr.min_range_m, intr.max_range_m);
    }
}

fn jittered(pose: &Pose, jitter_deg: f64, rng: &mut impl Rng) -> Pose {
    if jitter_deg <= 0.0 {
        return *pose;
    }
    let j = jitter_deg.to_radians();
    Pose {
        pitch: pose.pitch + rng.gen_range(-j..=j),
        roll: pose.roll + rng.gen_range(-j..=j),
        ..*pose
    }
}

/// Ray casts one high-res scan per pose and derives the training pairs. The
/// result depends only on the arguments.
pub fn generate_dataset(
    scene: &Scene,
    trajectory: &Trajectory,
    hi_intr: &SensorIntrinsics,
    cfg: &DatasetConfig,
) -> Result<Vec<ScanPair>> {
    if trajectory.is_empty() {
        return Err(Error::Config("trajectory has no poses".into()));
    }
    if !matches!(cfg.factor, 2 | 4 | 8) {
        return Err(Error::Config(format!("factor must be 2, 4 or 8, got {}", cfg.factor)));
    }
    if cfg.augment_mult == 0 {
        return Err(Error::Config("augment_mult must be at least 1".into()));
    }
    cfg.augment.validate()?;
    hi_intr.subsampled(cfg.factor)?;
    let seed = cfg.augment.seed;
    let mut out = Vec::with_capacity(trajectory.len() * cfg.augment_mult);
    for (i, pose) in trajectory.poses.iter().enumerate() {
        let pose = jittered(pose, cfg.attitude_jitter_deg, &mut rng::stream(seed, rng::stream_id([1, i as u16, 0, 0])));
        let high = raycast_scan(scene, &pose, hi_intr)?;
        let raw = ScanPair::from_high(high, cfg.factor, pose)?;
        let copies = (1..cfg.augment_mult)
            .map(|copy| {
                let mut r = rng::stream(seed, rng::stream_id([2, i as u16, copy as u16, 0]));
                augment_pair(&raw, &cfg.augment, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(raw);
        out.extend(copies);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub low_path: PathBuf,
    pub high_path: PathBuf,
    pub pose: Pose,
}

/// Index of a dataset directory. Paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub intrinsics: SensorIntrinsics,
    pub factor: usize,
    pub pairs: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_dataset(dir: &Path, pairs: &[ScanPair]) -> Result<Manifest> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Config("refusing to write an empty dataset".into()))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let low_path = PathBuf::from(format!("low_{i:05}.lsrs"));
        let high_path = PathBuf::from(format!("high_{i:05}.lsrs"));
        io::write_lsrs(&dir.join(&low_path), &pair.low)?;
        io::write_lsrs(&dir.join(&high_path), &pair.high)?;
        entries.push(ManifestEntry { low_path, high_path, pose: pair.pose });
    }
    let manifest = Manifest {
        intrinsics: *first.high.intrinsics(),
        factor: first.factor(),
        pairs: entries,
    };
    io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<ScanPair>)> {
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for e in &manifest.pairs {
        let low = io::read_lsrs(&dir.join(&e.low_path))?;
        let high = io::read_lsrs(&dir.join(&e.high_path))?;
        if high.rows() != low.rows() * manifest.factor || high.cols() != low.cols() {
            return Err(Error::Format(format!(
                "{}: pair {} has shapes {}x{} / {}x{} inconsistent with factor {}",
                dir.display(),
                e.low_path.display(),
                low.rows(),
                low.cols(),
                high.rows(),
                high.cols(),
                manifest.factor
            )));
        }
        pairs.push(ScanPair { low, high, pose: e.pose });
    }
    Ok((manifest, pairs))
}

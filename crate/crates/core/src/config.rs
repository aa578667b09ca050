//! End-to-end run configuration with `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geom::SensorIntrinsics;
use crate::nn::{AdamConfig, SrNetConfig, TrainConfig};
use crate::sim::{AugmentConfig, DatasetConfig};
use crate::upscale::McConfig;

/// Where training scans come from. Without an explicit scene, `scenes`
/// random rooms are generated and each is visited at `poses_per_scene`
/// random poses, with the sensor height drawn per room from `height_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainDataConfig {
    pub scene: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub scenes: usize,
    pub outdoor_scenes: usize,
    pub poses_per_scene: usize,
    /// Sensor height interval for indoor rooms, meters.
    pub height_m: (f64, f64),
    /// Sensor height interval for outdoor blocks, meters.
    pub outdoor_height_m: (f64, f64),
    pub augment_mult: usize,
    pub attitude_jitter_deg: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainDataConfig {
    fn default() -> Self {
        TrainDataConfig {
            scene: None,
            trajectory: None,
            scenes: 10,
            outdoor_scenes: 0,
            poses_per_scene: 20,
            height_m: (0.3, 1.2),
            outdoor_height_m: (1.5, 2.1),
            augment_mult: 1,
            attitude_jitter_deg: 3.0,
            augment: AugmentConfig::default(),
        }
    }
}

/// Held-out evaluation scans. Defaults to the built-in office and its
/// 25-stop tour. With `outdoor_seed` set, a random outdoor block is
/// generated instead and visited at `poses` street positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestDataConfig {
    pub scene: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub outdoor_seed: Option<u64>,
    pub poses: usize,
    pub outdoor_height_m: f64,
}

impl Default for TestDataConfig {
    fn default() -> Self {
        TestDataConfig { scene: None, trajectory: None, outdoor_seed: None, poses: 25, outdoor_height_m: 1.8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub base_filters: usize,
    pub dropout: f32,
    pub bn_momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub crop_cols: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_filters: 8,
            dropout: 0.25,
            bn_momentum: 0.9,
            epochs: 50,
            batch_size: 8,
            lr: 1e-4,
            decay: 1e-5,
            crop_cols: None,
        }
    }
}

impl NetworkConfig {
    pub fn srnet(&self, factor: usize) -> SrNetConfig {
        SrNetConfig { factor, base_filters: self.base_filters, dropout_rate: self.dropout, bn_momentum: self.bn_momentum }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig { lr: self.lr, decay: self.decay, ..Default::default() },
            seed,
            crop_cols: self.crop_cols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Build occupancy maps and score them. Off for large outdoor scenes.
    pub enabled: bool,
    /// Voxel edge, meters.
    pub resolution: f64,
    /// Added around the scene's bounding box, meters.
    pub margin: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { enabled: true, resolution: 0.05, margin: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// The high-resolution sensor.
    pub sensor: SensorIntrinsics,
    pub factor: usize,
    pub train_data: TrainDataConfig,
    pub test_data: TestDataConfig,
    pub network: NetworkConfig,
    pub mc: McConfig,
    pub map: MapConfig,
    /// Any of `baseline`, `linear`, `cubic`, `nn`, `nn-mc`.
    pub methods: Vec<String>,
    /// Put wall-clock timings into metrics.csv (they always go to
    /// timing.csv). Off by default so reruns produce identical files.
    pub timing_in_metrics: bool,
}

pub const METHODS: [&str; 5] = ["baseline", "linear", "cubic", "nn", "nn-mc"];

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            sensor: SensorIntrinsics::vlp64(256),
            factor: 4,
            train_data: TrainDataConfig::default(),
            test_data: TestDataConfig::default(),
            network: NetworkConfig::default(),
            mc: McConfig::default(),
            map: MapConfig::default(),
            methods: METHODS.iter().map(|s| s.to_string()).collect(),
            timing_in_metrics: false,
        }
    }
}

impl PipelineConfig {
    /// The full-resolution variant: 1024 columns and 32 base filters.
    pub fn full() -> Self {
        let mut cfg = PipelineConfig { sensor: SensorIntrinsics::vlp64(1024), ..Default::default() };
        cfg.network.base_filters = 32;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        crate::upscale::check_factor(self.factor)?;
        self.sensor.subsampled(self.factor)?;
        if self.sensor.h_res % 8 != 0 {
            return Err(Error::Config(format!("h_res must be a multiple of 8, got {}", self.sensor.h_res)));
        }
        if self.sensor.channels % 8 != 0 {
            return Err(Error::Config(format!("channels must be a multiple of 8, got {}", self.sensor.channels)));
        }
        self.network.train(self.seed).validate()?;
        crate::nn::build_srnet(&self.network.srnet(self.factor))?;
        self.mc.validate()?;
        self.train_data.augment.validate()?;
        let t = &self.train_data;
        if t.scene.is_none() && t.scenes + t.outdoor_scenes == 0 {
            return Err(Error::Config("no training scenes".into()));
        }
        if t.augment_mult == 0 || t.poses_per_scene == 0 {
            return Err(Error::Config("augment_mult and poses_per_scene must be positive".into()));
        }
        for h in [t.height_m, t.outdoor_height_m] {
            if !(h.0 > 0.0 && h.0 <= h.1) {
                return Err(Error::Config(format!("invalid sensor height range {h:?}")));
            }
        }
        if self.test_data.poses == 0 {
            return Err(Error::Config("test_data.poses must be positive".into()));
        }
        if !(self.map.resolution > 0.0) || self.map.margin < 0.0 {
            return Err(Error::Config("map resolution must be positive and margin non-negative".into()));
        }
        for m in &self.methods {
            if !METHODS.contains(&m.as_str()) {
                return Err(Error::Config(format!("unknown method {m:?}; expected one of {METHODS:?}")));
            }
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            factor: self.factor,
            augment_mult: self.train_data.augment_mult,
            attitude_jitter_deg: self.train_data.attitude_jitter_deg,
            augment: AugmentConfig { seed: self.seed, ..self.train_data.augment.clone() },
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig { seed: self.seed, ..self.mc }
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_value(value)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.train_data.scene,
            &mut cfg.train_data.trajectory,
            &mut cfg.test_data.scene,
            &mut cfg.test_data.trajectory,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key.path=value` overrides. Values are parsed as JSON and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o.as_ref())?;
        }
        Self::from_value(value)
    }
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("override {key:?}: unknown key {part:?}")));
            }
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("override {key:?}: unknown key {part:?}")))?;
    }
    Ok(())
}

//! In-process orchestration: data generation, training, upscaling,
//! mapping and evaluation.

use std::path::Path;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{l1_metric, metrics_csv, roc_auc, MetricsRow, RocCurve};
use crate::geom::{normalize, RangeImage};
use crate::io::{self, write_file, write_json, write_lsrs};
use crate::mapping::{build_map_from_images, GridConfig, VoxelGrid};
use crate::nn::{build_srnet, loss_curve_csv, save_model, Network, SavedModel, TrainPair, Trainer};
use crate::rng;
use crate::sim::{generate_dataset, write_dataset, Scene, ScanPair, Trajectory};
use crate::upscale::{upscale_pipeline, Cubic, Linear, Neural, Upscaler};

use rand::Rng;

/// Ray casts the training pairs: from the configured scene and trajectory if
/// given, otherwise from freshly generated random rooms.
pub fn training_pairs(cfg: &PipelineConfig) -> Result<Vec<ScanPair>> {
    let t = &cfg.train_data;
    let ds = cfg.dataset();
    if let Some(scene_path) = &t.scene {
        let scene = Scene::load(scene_path)?;
        let traj = match &t.trajectory {
            Some(p) => Trajectory::load(p)?,
            None => Trajectory::random_in(&scene, t.poses_per_scene, t.height_m.0, cfg.seed)?,
        };
        return generate_dataset(&scene, &traj, &cfg.sensor, &ds);
    }
    let mut pairs = Vec::new();
    let total = t.scenes + t.outdoor_scenes;
    for k in 0..total {
        let scene_seed = cfg.seed.wrapping_mul(1000).wrapping_add(k as u64);
        let outdoor = k >= t.scenes;
        let scene = if outdoor { Scene::random_outdoor(scene_seed) } else { Scene::random_indoor(scene_seed) };
        let mut r = rng::stream(cfg.seed, rng::stream_id([6, k as u16, 0, 0]));
        let (lo, hi) = if outdoor { t.outdoor_height_m } else { t.height_m };
        let height = if lo < hi { r.gen_range(lo..=hi) } else { lo };
        let traj = if outdoor {
            outdoor_route(&scene, t.poses_per_scene, height, &mut r)?
        } else {
            Trajectory::random_in(&scene, t.poses_per_scene, height, scene_seed)?
        };
        let ds = crate::sim::DatasetConfig {
            augment: crate::sim::AugmentConfig { seed: ds.augment.seed.wrapping_add(k as u64 * 7919), ..ds.augment.clone() },
            ..ds.clone()
        };
        pairs.extend(generate_dataset(&scene, &traj, &cfg.sensor, &ds)?);
    }
    Ok(pairs)
}

/// Poses along the cleared streets of [`Scene::random_outdoor`].
fn outdoor_route(scene: &Scene, count: usize, height: f64, r: &mut impl Rng) -> Result<Trajectory> {
    let mut poses = Vec::with_capacity(count);
    for _ in 0..10_000 * count {
        if poses.len() == count {
            break;
        }
        let along = r.gen_range(-100.0..100.0);
        let side = r.gen_range(-2.0..2.0);
        let p = if r.gen_bool(0.5) { [along, side, height] } else { [side, along, height] };
        if scene.is_free(p, 0.5) {
            poses.push(crate::geom::Pose::new(p, r.gen_range(-std::f64::consts::PI..std::f64::consts::PI)));
        }
    }
    if poses.len() < count {
        return Err(Error::Config("could not place outdoor poses in free space".into()));
    }
    Trajectory::new(poses)
}

/// The held-out evaluation scans.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub scene: Scene,
    pub trajectory: Trajectory,
    pub pairs: Vec<ScanPair>,
}

pub fn test_set(cfg: &PipelineConfig) -> Result<TestSet> {
    let t = &cfg.test_data;
    let scene = match (&t.scene, t.outdoor_seed) {
        (Some(p), _) => Scene::load(p)?,
        (None, Some(seed)) => Scene::random_outdoor(seed),
        (None, None) => Scene::office(),
    };
    let trajectory = match (&t.trajectory, t.outdoor_seed) {
        (Some(p), _) => Trajectory::load(p)?,
        (None, Some(seed)) => {
            outdoor_route(&scene, t.poses, t.outdoor_height_m, &mut rng::stream(seed, rng::stream_id([7, 0, 0, 0])))?
        }
        (None, None) => Trajectory::office_tour(),
    };
    let ds = crate::sim::DatasetConfig { attitude_jitter_deg: 0.0, augment_mult: 1, ..cfg.dataset() };
    let pairs = generate_dataset(&scene, &trajectory, &cfg.sensor, &ds)?;
    Ok(TestSet { scene, trajectory, pairs })
}

pub fn to_train_pairs(pairs: &[ScanPair]) -> Vec<TrainPair> {
    pairs.iter().map(|p| TrainPair { low: normalize(&p.low), high: normalize(&p.high) }).collect()
}

pub fn new_trainer(cfg: &PipelineConfig) -> Result<Trainer> {
    let spec = build_srnet(&cfg.network.srnet(cfg.factor))?;
    let net = Network::init(spec, cfg.seed)?;
    Ok(Trainer::new(net, cfg.network.train(cfg.seed).adam))
}

pub fn train_network(cfg: &PipelineConfig, pairs: &[ScanPair]) -> Result<Trainer> {
    let mut trainer = new_trainer(cfg)?;
    trainer.train(&to_train_pairs(pairs), &cfg.network.train(cfg.seed))?;
    Ok(trainer)
}

/// Grid covering the scene's bounded primitives plus the margin.
pub fn grid_config(cfg: &PipelineConfig, scene: &Scene) -> Result<GridConfig> {
    let (lo, hi) = scene.bounds().ok_or_else(|| Error::Config("test scene has no bounded primitives".into()))?;
    let m = cfg.map.margin;
    let grid = GridConfig::covering([lo[0] - m, lo[1] - m, lo[2] - m], [hi[0] + m, hi[1] + m, hi[2] + m], cfg.map.resolution)?;
    let voxels: usize = grid.dims.iter().product();
    if voxels > MAX_VOXELS {
        return Err(Error::Config(format!(
            "map would need {voxels} voxels; raise map.resolution or set map.enabled=false"
        )));
    }
    Ok(grid)
}

const MAX_VOXELS: usize = 200_000_000;

/// A method's occupancy map and its ROC against the reference map.
#[derive(Debug, Clone)]
pub struct MethodMap {
    pub grid: VoxelGrid,
    pub roc: RocCurve,
}

/// Everything one method produced on the test set.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: String,
    /// Scans that were mapped, in meters.
    pub scans: Vec<RangeImage>,
    pub l1: Option<f64>,
    pub removed_pct: Option<f64>,
    pub ms_per_image: Option<f64>,
    pub map: Option<MethodMap>,
}

impl MethodResult {
    pub fn auc(&self) -> Option<f64> {
        self.map.as_ref().map(|m| m.roc.auc)
    }

    pub fn row(&self) -> MetricsRow {
        MetricsRow {
            method: self.method.clone(),
            l1: self.l1,
            removed_pct: self.removed_pct,
            auc: self.auc(),
            ms_per_image: self.ms_per_image,
            scan_count: self.scans.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Map built from the full-resolution scans, when mapping is enabled.
    pub truth: Option<VoxelGrid>,
    pub methods: Vec<MethodResult>,
}

impl Evaluation {
    pub fn get(&self, method: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn rows(&self) -> Vec<MetricsRow> {
        self.methods.iter().map(MethodResult::row).collect()
    }

    /// `method,threshold,fpr,tpr` for every mapped method.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("method,threshold,fpr,tpr\n");
        for m in &self.methods {
            for p in m.map.iter().flat_map(|m| &m.roc.points) {
                out.push_str(&format!("{},{},{},{}\n", m.method, p.threshold, p.fpr, p.tpr));
            }
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("method,ms_per_image\n");
        for m in &self.methods {
            out.push_str(&format!("{},{}\n", m.method, m.ms_per_image.map_or("N/A".into(), |v| format!("{v:.3}"))));
        }
        out
    }
}

struct Mapper<'a> {
    grid: GridConfig,
    truth: VoxelGrid,
    poses: &'a [crate::geom::Pose],
}

impl Mapper<'_> {
    fn score(&self, scans: &[RangeImage]) -> Result<MethodMap> {
        let grid = build_map_from_images(scans.iter().zip(self.poses), &self.grid)?;
        let roc = roc_auc(&grid, &self.truth)?;
        Ok(MethodMap { grid, roc })
    }
}

/// Runs every configured method over the test set and, with mapping enabled,
/// scores it against the map built from the full-resolution scans.
/// `network` is required for the `nn` and `nn-mc` methods.
pub fn evaluate(cfg: &PipelineConfig, network: Option<&Network<f32>>, test: &TestSet) -> Result<Evaluation> {
    let poses: Vec<_> = test.pairs.iter().map(|p| p.pose).collect();
    let mapper = if cfg.map.enabled {
        let grid = grid_config(cfg, &test.scene)?;
        let truth = build_map_from_images(test.pairs.iter().map(|p| &p.high).zip(&poses), &grid)?;
        Some(Mapper { grid, truth, poses: &poses })
    } else {
        None
    };
    let mut methods = Vec::new();
    for name in &cfg.methods {
        let result = if name == "baseline" {
            let scans: Vec<RangeImage> = test.pairs.iter().map(|p| p.low.clone()).collect();
            let map = mapper.as_ref().map(|m| m.score(&scans)).transpose()?;
            MethodResult { method: name.clone(), scans, l1: None, removed_pct: None, ms_per_image: None, map }
        } else {
            let net = || network.ok_or_else(|| Error::Config(format!("method {name} needs a trained model")));
            let upscaler: Box<dyn Upscaler> = match name.as_str() {
                "linear" => Box::new(Linear(cfg.factor)),
                "cubic" => Box::new(Cubic(cfg.factor)),
                "nn" => Box::new(Neural { network: net()?, mc: None }),
                "nn-mc" => Box::new(Neural { network: net()?, mc: Some(cfg.mc_config()) }),
                other => return Err(Error::Config(format!("unknown method {other:?}"))),
            };
            if upscaler.factor() != cfg.factor {
                return Err(Error::Config(format!(
                    "model upscales by {}, run is configured for {}",
                    upscaler.factor(),
                    cfg.factor
                )));
            }
            run_upscaler(upscaler.as_ref(), test, mapper.as_ref())?
        };
        log::info!("{}: auc {:?} l1 {:?}", result.method, result.auc(), result.l1);
        methods.push(result);
    }
    Ok(Evaluation { truth: mapper.map(|m| m.truth), methods })
}

fn run_upscaler(upscaler: &dyn Upscaler, test: &TestSet, mapper: Option<&Mapper>) -> Result<MethodResult> {
    let mut scans = Vec::with_capacity(test.pairs.len());
    let (mut l1_sum, mut ms_sum) = (0.0, 0.0);
    let (mut removed, mut positive) = (0usize, 0usize);
    let mut mc = false;
    for pair in &test.pairs {
        let out = upscale_pipeline(&pair.low, upscaler)?;
        l1_sum += l1_metric(&out.upscaled.unfiltered, &normalize(&pair.high))?;
        ms_sum += out.elapsed_ms;
        if let Some(r) = &out.upscaled.mc {
            mc = true;
            removed += r.removed_pixels;
            positive += r.positive_pixels;
        }
        scans.push(out.ranges);
    }
    let n = test.pairs.len() as f64;
    let map = mapper.map(|m| m.score(&scans)).transpose()?;
    Ok(MethodResult {
        method: upscaler.name().to_string(),
        scans,
        l1: Some(l1_sum / n),
        removed_pct: mc.then(|| crate::upscale::removed_points_pct(removed, positive)),
        ms_per_image: Some(ms_sum / n),
        map,
    })
}

/// Files written by [`run_pipeline`], relative to its output directory.
pub const METRICS_FILE: &str = "metrics.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const MODEL_FILE: &str = "model.lsrm";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub trainer: Option<Trainer>,
    pub evaluation: Evaluation,
}

/// Writes the per-method scans, maps and tables of an evaluation.
pub fn write_evaluation(dir: &Path, eval: &Evaluation, timing_in_metrics: bool) -> Result<()> {
    if let Some(truth) = &eval.truth {
        write_file(&dir.join("maps").join("truth.lsrg"), &truth.encode())?;
    }
    for m in &eval.methods {
        for (i, s) in m.scans.iter().enumerate() {
            write_lsrs(&dir.join("scans").join(&m.method).join(format!("scan_{i:05}.lsrs")), s)?;
        }
        if let Some(map) = &m.map {
            write_file(&dir.join("maps").join(format!("{}.lsrg", m.method)), &map.grid.encode())?;
        }
    }
    let rows = eval.rows();
    for r in &rows {
        r.validate()?;
    }
    write_file(&dir.join(METRICS_FILE), metrics_csv(&rows, timing_in_metrics).as_bytes())?;
    write_file(&dir.join(ROC_FILE), eval.roc_csv().as_bytes())?;
    write_file(&dir.join(TIMING_FILE), eval.timing_csv().as_bytes())
}

/// gen-data, train, upscale, map and eval in one go, writing every artifact
/// under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineReport> {
    cfg.validate()?;
    write_json(&out.join("config.json"), cfg)?;
    let needs_net = cfg.methods.iter().any(|m| m.starts_with("nn"));
    let trainer = if needs_net {
        let pairs = training_pairs(cfg)?;
        log::info!("generated {} training pairs", pairs.len());
        write_dataset(&out.join("train"), &pairs)?;
        let trainer = train_network(cfg, &pairs)?;
        let saved = SavedModel { network: trainer.network.clone(), history: trainer.history.clone(), adam: Some(trainer.adam.clone()) };
        save_model(&out.join(MODEL_FILE), &saved)?;
        write_file(&out.join(LOSS_FILE), loss_curve_csv(&trainer.history).as_bytes())?;
        Some(trainer)
    } else {
        None
    };
    let test = test_set(cfg)?;
    write_dataset(&out.join("test"), &test.pairs)?;
    let evaluation = evaluate(cfg, trainer.as_ref().map(|t| &t.network), &test)?;
    write_evaluation(out, &evaluation, cfg.timing_in_metrics)?;
    io::write_json(&out.join("summary.json"), &evaluation.rows())?;
    Ok(PipelineReport { trainer, evaluation })
}

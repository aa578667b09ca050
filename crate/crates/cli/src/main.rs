use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lidar_sr::config::PipelineConfig;
use lidar_sr::eval::{l1_metric, metrics_csv, roc_auc, MetricsRow};
use lidar_sr::geom::{normalize, RangeImage, SensorIntrinsics};
use lidar_sr::io::{read_file, read_lsrs, write_file, write_json, write_lsrs};
use lidar_sr::mapping::{build_map_from_images, GridConfig, VoxelGrid};
use lidar_sr::nn::{build_srnet, load_model, loss_curve_csv, save_model, AdamConfig, Network, SavedModel, SrNetConfig, TrainConfig, Trainer};
use lidar_sr::pipeline::{run_pipeline, to_train_pairs};
use lidar_sr::sim::{generate_dataset, read_dataset, write_dataset, AugmentConfig, DatasetConfig, Scene, Trajectory};
use lidar_sr::upscale::{upscale_pipeline, Cubic, Linear, McConfig, Neural, Upscaler};
use lidar_sr::{Error, Result};

/// Lidar super-resolution: simulate, train, upscale, map and evaluate.
#[derive(Parser)]
#[command(name = "lsr", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ray cast high-res scans along a trajectory and write low/high pairs.
    GenData(GenDataArgs),
    /// Train the upscaling network on a generated dataset.
    Train(TrainArgs),
    /// Upscale one low-res scan.
    Upscale(UpscaleArgs),
    /// Build an occupancy grid from scans and poses.
    Map(MapArgs),
    /// Compare occupancy grids (and optionally scans) against a reference.
    Eval(EvalArgs),
    /// gen-data, train, upscale, map and eval in one run.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Scene JSON. Defaults to the built-in office.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Trajectory JSON. Defaults to the office tour when no scene is given.
    #[arg(long = "traj")]
    trajectory: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 256)]
    columns: usize,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    /// Pairs per pose: the raw capture plus augmented copies.
    #[arg(long, default_value_t = 1)]
    augment_mult: usize,
    /// Pitch/roll jitter per capture, degrees.
    #[arg(long, default_value_t = 0.0)]
    jitter_deg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Must match the dataset.
    #[arg(long)]
    factor: Option<usize>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    decay: f64,
    #[arg(long, default_value_t = 8)]
    base_filters: usize,
    #[arg(long, default_value_t = 0.25)]
    dropout: f32,
    /// Train on random column windows of this width.
    #[arg(long)]
    crop_cols: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from a saved model and its optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss curve CSV. Defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Linear,
    Cubic,
    Nn,
    NnMc,
}

#[derive(Args)]
struct UpscaleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Required for nn and nn-mc.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Interpolation factor for linear and cubic.
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, default_value_t = 50)]
    passes: usize,
    #[arg(long, default_value_t = 0.03)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Which {
    Low,
    High,
}

#[derive(Args)]
struct MapArgs {
    /// Dataset directory; its manifest supplies scans and poses.
    #[arg(long, conflicts_with_all = ["scans", "poses"])]
    data: Option<PathBuf>,
    /// Which side of each dataset pair to map.
    #[arg(long, value_enum, default_value = "high")]
    which: Which,
    /// Directory of LSRS scans, matched in file-name order with `--poses`.
    #[arg(long, requires = "poses")]
    scans: Option<PathBuf>,
    /// Trajectory JSON with one pose per scan.
    #[arg(long, requires = "scans")]
    poses: Option<PathBuf>,
    /// Scene whose extent (plus margin) the grid covers. Defaults to the office.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    resolution: f64,
    #[arg(long, default_value_t = 0.3)]
    margin: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the occupied voxel centers as CSV.
    #[arg(long)]
    occupied_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference grid.
    #[arg(long)]
    truth: PathBuf,
    /// `NAME=grid.lsrg`, repeatable.
    #[arg(long = "map", value_parser = parse_named)]
    maps: Vec<(String, PathBuf)>,
    /// Reference scans for the L1 metric.
    #[arg(long)]
    truth_scans: Option<PathBuf>,
    /// `NAME=DIR` of predicted scans, matched by file name with `--truth-scans`.
    #[arg(long = "scans", value_parser = parse_named, requires = "truth_scans")]
    scans: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON config. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` override, repeatable.
    #[arg(long = "set")]
    overrides: Vec<String>,
    /// Start from the full-resolution defaults (1024 columns, 32 filters).
    #[arg(long, conflicts_with = "config")]
    full: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got {s:?}"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Honors `LSR_THREADS` by sizing the global worker pool.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("LSR_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("LSR_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Upscale(a) => upscale(a),
        Command::Map(a) => map(a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let scene = match &a.scene {
        Some(p) => Scene::load(p)?,
        None => Scene::office(),
    };
    let trajectory = match (&a.trajectory, &a.scene) {
        (Some(p), _) => Trajectory::load(p)?,
        (None, None) => Trajectory::office_tour(),
        (None, Some(_)) => return Err(Error::Config("--traj is required with --scene".into())),
    };
    let intr = SensorIntrinsics::new(a.channels, a.columns)?;
    let cfg = DatasetConfig {
        factor: a.factor,
        augment_mult: a.augment_mult,
        attitude_jitter_deg: a.jitter_deg,
        augment: AugmentConfig { seed: a.seed, ..Default::default() },
    };
    let pairs = generate_dataset(&scene, &trajectory, &intr, &cfg)?;
    write_dataset(&a.out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (manifest, pairs) = read_dataset(&a.data)?;
    if let Some(f) = a.factor {
        if f != manifest.factor {
            return Err(Error::Config(format!("--factor {f} does not match the dataset factor {}", manifest.factor)));
        }
    }
    let adam = AdamConfig { lr: a.lr, decay: a.decay, ..Default::default() };
    let mut trainer = match &a.resume {
        Some(path) => {
            let saved = load_model(path)?;
            let state = saved
                .adam
                .ok_or_else(|| Error::Config(format!("{} has no optimizer state to resume from", path.display())))?;
            Trainer::resume(saved.network, state, saved.history)?
        }
        None => {
            let spec = build_srnet(&SrNetConfig {
                factor: manifest.factor,
                base_filters: a.base_filters,
                dropout_rate: a.dropout,
                ..Default::default()
            })?;
            Trainer::new(Network::init(spec, a.seed)?, adam)
        }
    };
    let cfg = TrainConfig { epochs: a.epochs, batch_size: a.batch, adam, seed: a.seed, crop_cols: a.crop_cols };
    trainer.train(&to_train_pairs(&pairs), &cfg)?;
    let saved = SavedModel { network: trainer.network.clone(), history: trainer.history.clone(), adam: Some(trainer.adam.clone()) };
    save_model(&a.out, &saved)?;
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    write_file(&loss_path, loss_curve_csv(&trainer.history).as_bytes())?;
    match trainer.history.last() {
        Some(last) => println!("final train L1 {:.6} after {} epochs", last.train_l1, last.epoch),
        None => println!("no epochs run; wrote initialized model"),
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct UpscaleSummary<'a> {
    method: &'a str,
    factor: usize,
    points: usize,
    elapsed_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    removed_fraction: Option<f64>,
}

fn upscale(a: UpscaleArgs) -> Result<()> {
    let low = read_lsrs(&a.input)?;
    let model = match a.method {
        Method::Nn | Method::NnMc => {
            let path = a.model.as_ref().ok_or_else(|| Error::Config("--model is required for nn and nn-mc".into()))?;
            Some(load_model(path)?)
        }
        _ => None,
    };
    let mc = McConfig { passes: a.passes, lambda: a.lambda, seed: a.seed, ..Default::default() };
    let upscaler: Box<dyn Upscaler + '_> = match (a.method, &model) {
        (Method::Linear, _) => Box::new(Linear(a.factor)),
        (Method::Cubic, _) => Box::new(Cubic(a.factor)),
        (Method::Nn, Some(m)) => Box::new(Neural { network: &m.network, mc: None }),
        (Method::NnMc, Some(m)) => Box::new(Neural { network: &m.network, mc: Some(mc) }),
        _ => unreachable!("model loaded above for network methods"),
    };
    let out = upscale_pipeline(&low, upscaler.as_ref())?;
    write_lsrs(&a.out.join("upscaled.lsrs"), &out.ranges)?;
    write_file(&a.out.join("cloud.csv"), out.cloud.to_csv().as_bytes())?;
    if let Some(r) = &out.upscaled.mc {
        r.export(&a.out)?;
    }
    write_json(
        &a.out.join("summary.json"),
        &UpscaleSummary {
            method: upscaler.name(),
            factor: upscaler.factor(),
            points: out.cloud.len(),
            elapsed_ms: out.elapsed_ms,
            removed_fraction: out.upscaled.mc.as_ref().map(|r| r.removed_fraction),
        },
    )?;
    println!("{}: {} points written to {}", upscaler.name(), out.cloud.len(), a.out.display());
    Ok(())
}

/// `*.lsrs` files of a directory, sorted by name.
fn scan_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lsrs"))
        .collect();
    files.sort();
    Ok(files)
}

fn map(a: MapArgs) -> Result<()> {
    let (scans, poses): (Vec<RangeImage>, Vec<_>) = match (&a.data, &a.scans, &a.poses) {
        (Some(dir), _, _) => {
            let (_, pairs) = read_dataset(dir)?;
            pairs.into_iter().map(|p| (if a.which == Which::High { p.high } else { p.low }, p.pose)).unzip()
        }
        (None, Some(dir), Some(poses)) => {
            let traj = Trajectory::load(poses)?;
            let files = scan_files(dir)?;
            if files.len() != traj.len() {
                return Err(Error::Config(format!(
                    "{} scans in {} but {} poses in {}",
                    files.len(),
                    dir.display(),
                    traj.len(),
                    poses.display()
                )));
            }
            let scans = files.iter().map(|f| read_lsrs(f)).collect::<Result<Vec<_>>>()?;
            (scans, traj.poses)
        }
        _ => return Err(Error::Config("give either --data or --scans with --poses".into())),
    };
    let scene = match &a.scene {
        Some(p) => Scene::load(p)?,
        None => Scene::office(),
    };
    let (lo, hi) = scene.bounds().ok_or_else(|| Error::Config("scene has no bounded primitives".into()))?;
    let m = a.margin;
    let cfg = GridConfig::covering([lo[0] - m, lo[1] - m, lo[2] - m], [hi[0] + m, hi[1] + m, hi[2] + m], a.resolution)?;
    let grid = build_map_from_images(scans.iter().zip(&poses), &cfg)?;
    write_file(&a.out, &grid.encode())?;
    if let Some(csv) = &a.occupied_csv {
        write_file(csv, grid.occupied_csv().as_bytes())?;
    }
    println!("mapped {} scans into {:?} voxels", scans.len(), grid.dims());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let truth = VoxelGrid::decode(&read_file(&a.truth)?)?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut roc = String::from("method,threshold,fpr,tpr\n");
    for (name, path) in &a.maps {
        let grid = VoxelGrid::decode(&read_file(path)?)?;
        let curve = roc_auc(&grid, &truth)?;
        for p in &curve.points {
            roc.push_str(&format!("{name},{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        rows.push(MetricsRow { method: name.clone(), l1: None, removed_pct: None, auc: Some(curve.auc), ms_per_image: None, scan_count: 0 });
    }
    if let Some(truth_dir) = &a.truth_scans {
        for (name, dir) in &a.scans {
            let (l1, n) = mean_l1(dir, truth_dir)?;
            match rows.iter_mut().find(|r| &r.method == name) {
                Some(r) => (r.l1, r.scan_count) = (Some(l1), n),
                None => rows.push(MetricsRow { method: name.clone(), l1: Some(l1), removed_pct: None, auc: None, ms_per_image: None, scan_count: n }),
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("nothing to evaluate; pass --map and/or --scans".into()));
    }
    write_file(&a.out.join("metrics.csv"), metrics_csv(&rows, false).as_bytes())?;
    write_file(&a.out.join("roc.csv"), roc.as_bytes())?;
    print!("{}", metrics_csv(&rows, false));
    Ok(())
}

/// Mean normalized L1 over scans with the same file name in both directories.
fn mean_l1(pred_dir: &Path, truth_dir: &Path) -> Result<(f64, usize)> {
    let files = scan_files(truth_dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no .lsrs scans in {}", truth_dir.display())));
    }
    let mut sum = 0.0;
    for t in &files {
        let p = pred_dir.join(t.file_name().expect("listed files have names"));
        sum += l1_metric(&normalize(&read_lsrs(&p)?), &normalize(&read_lsrs(t)?))?;
    }
    Ok((sum / files.len() as f64, files.len()))
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let base = match (&a.config, a.full) {
        (Some(p), _) => PipelineConfig::load(p)?,
        (None, true) => PipelineConfig::full(),
        (None, false) => PipelineConfig::default(),
    };
    let cfg = base.with_overrides(&a.overrides)?;
    let report = run_pipeline(&cfg, &a.out)?;
    if let Some(t) = &report.trainer {
        if let Some(last) = t.history.last() {
            println!("final train L1 {:.6} after {} epochs", last.train_l1, last.epoch);
        }
    }
    print!("{}", metrics_csv(&report.evaluation.rows(), true));
    Ok(())
}

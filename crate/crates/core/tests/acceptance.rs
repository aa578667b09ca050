//! End-to-end acceptance checks, one line per criterion.
//!
//! Run with `cargo test -p lidar-sr --test acceptance`. Pass criterion
//! numbers as arguments (`-- 3 5`) to run a subset.

mod common;

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use common::{hermite_catmull_rom, mann_whitney_auc, marched_chords, sampled_voxels};
use lidar_sr::config::PipelineConfig;
use lidar_sr::eval::{roc_auc, RocCurve};
use lidar_sr::geom::{project, unproject, NormalizedImage, PointCloud, RangeImage, SensorIntrinsics};
use lidar_sr::mapping::{GridConfig, OccupancyParams, VoxelGrid};
use lidar_sr::nn::gradcheck::{check_all, STEP};
use lidar_sr::nn::{build_srnet, Network, SrNetConfig};
use lidar_sr::pipeline::{evaluate, run_pipeline, test_set, train_network, training_pairs, write_evaluation, Evaluation};
use lidar_sr::rng::stream;
use lidar_sr::upscale::{catmull_rom, mc_infer, summarize_ensemble, upscale_cubic, upscale_linear, McConfig};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lib<T>(r: lidar_sr::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("error: {e}"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cases = lib(check_all(2024, 3))?;
    let secs = start.elapsed().as_secs_f64();
    let shapes: std::collections::BTreeSet<_> = cases.iter().map(|c| (c.layer, c.shape)).collect();
    let worst = cases.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    check(
        worst.max_rel_error < 1e-4 && shapes.len() >= 20 && secs < 60.0,
        format!(
            "{} cases over {} layer/shape pairs, h={STEP}, worst rel error {:.2e} ({} {:?}), {secs:.1}s",
            cases.len(),
            shapes.len(),
            worst.max_rel_error,
            worst.layer,
            worst.shape
        ),
    )
}

fn random_image(rng: &mut impl Rng) -> RangeImage {
    let intr = SensorIntrinsics::new(rng.gen_range(2..=64), rng.gen_range(4..=512)).unwrap();
    let data = (0..intr.channels * intr.h_res)
        .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(intr.min_range_m..=intr.max_range_m) })
        .collect();
    RangeImage::new(intr, data).unwrap()
}

/// Points on each beam axis through the column centers, built from the
/// sensor description alone.
fn beam_cloud(img: &RangeImage) -> PointCloud {
    let intr = img.intrinsics();
    let top = (intr.v_center_deg as f64 + intr.v_fov_deg as f64 / 2.0).to_radians();
    let step = (intr.v_fov_deg as f64).to_radians() / (intr.channels - 1) as f64;
    let mut cloud = PointCloud::new();
    for r in 0..img.rows() {
        let e = top - r as f64 * step;
        for c in 0..img.cols() {
            let a = -PI + 2.0 * PI * (c as f64 + 0.5) / img.cols() as f64;
            let range = img.get(r, c) as f64;
            if range > 0.0 {
                cloud.push([range * e.cos() * a.cos(), range * e.cos() * a.sin(), range * e.sin()], r as u32);
            }
        }
    }
    cloud
}

fn projection() -> Outcome {
    let mut rng = stream(2, 0);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let img = random_image(&mut rng);
        let back = project(&unproject(&img), img.intrinsics());
        if back.dropped != 0 || back.image.as_slice() != img.as_slice() {
            return Err(format!("image {i} ({}x{}) did not survive project(unproject)", img.rows(), img.cols()));
        }
        let cloud = beam_cloud(&img);
        let recovered = unproject(&project(&cloud, img.intrinsics()).image);
        if recovered.len() != cloud.len() {
            return Err(format!("cloud {i}: {} points came back as {}", cloud.len(), recovered.len()));
        }
        for (p, q) in cloud.points.iter().zip(&recovered.points) {
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            worst = worst.max(d);
        }
    }
    check(worst < 1e-5, format!("100 images bit-identical; beam clouds recovered within {worst:.1e} m"))
}

fn normalized(rows: usize, cols: usize, values: Vec<f32>) -> NormalizedImage {
    NormalizedImage::new(SensorIntrinsics::new(rows, cols).unwrap(), values).unwrap()
}

fn interpolation() -> Outcome {
    let fixture = catmull_rom(0.0, 0.0, 1.0, 0.0, 0.5);
    let fixture_oracle = hermite_catmull_rom(0.0, 0.0, 1.0, 0.0, 0.5);
    if fixture != 0.5625 || (fixture_oracle - 0.5625).abs() > 1e-12 {
        return Err(format!("anchors (0,0,1,0) at t=0.5 gave {fixture}, oracle {fixture_oracle}"));
    }
    let mut rng = stream(3, 0);
    let (mut worst_lin, mut worst_cub) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let factor = [2, 4, 8][rng.gen_range(0..3)];
        let (rows, cols) = (rng.gen_range(2..12), 4);
        let lines: Vec<(f64, f64)> = (0..cols).map(|_| (rng.gen_range(0.3..0.6), rng.gen_range(-0.003..0.003))).collect();
        let low = normalized(rows, cols, (0..rows * cols).map(|i| {
            let (a, b) = lines[i % cols];
            (a + b * ((i / cols) * factor) as f64) as f32
        }).collect());
        for out in [lib(upscale_linear(&low, factor))?, lib(upscale_cubic(&low, factor))?].iter().enumerate() {
            for r in 0..=(rows - 1) * factor {
                for (c, &(a, b)) in lines.iter().enumerate() {
                    let err = (out.1.get(r, c) as f64 - (a + b * r as f64)).abs();
                    if out.0 == 0 {
                        worst_lin = worst_lin.max(err);
                    } else {
                        worst_cub = worst_cub.max(err);
                    }
                }
            }
        }
    }
    let mut worst_cr = 0.0f64;
    for _ in 0..10_000 {
        let p: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = rng.gen_range(0.0..=1.0);
        worst_cr = worst_cr.max((catmull_rom(p[0], p[1], p[2], p[3], t) - hermite_catmull_rom(p[0], p[1], p[2], p[3], t)).abs());
    }
    let mut worst_img = 0.0f64;
    for _ in 0..2_000 {
        let factor = [2, 4, 8][rng.gen_range(0..3)];
        let a: Vec<f32> = (0..4).map(|_| rng.gen_range(0.05..0.95)).collect();
        let low = normalized(4, 4, a.iter().flat_map(|&v| [v; 4]).collect());
        let out = lib(upscale_cubic(&low, factor))?;
        let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        for j in 0..factor {
            let want = hermite_catmull_rom(a[0], a[1], a[2], a[3], j as f64 / factor as f64).clamp(0.0, 1.0);
            worst_img = worst_img.max((out.get(factor + j, 0) as f64 - want).abs());
        }
    }
    check(
        worst_lin < 1e-6 && worst_cub < 1e-6 && worst_cr < 1e-6 && worst_img < 1e-6,
        format!(
            "fixture 0.5625; affine columns linear {worst_lin:.1e} cubic {worst_cub:.1e}; 10000 anchor sets {worst_cr:.1e}; upscaled spans {worst_img:.1e}"
        ),
    )
}

fn mc_semantics() -> Outcome {
    let spec = lib(build_srnet(&SrNetConfig::default()))?;
    let net: Network<f32> = lib(Network::init(spec, 4))?;
    let low = normalized(16, 64, (0..16 * 64).map(|i| 0.03 + 0.2 * ((i * 37 % 101) as f32 / 101.0)).collect());
    let mut means = Vec::new();
    for passes in [1, 3, 8] {
        let r = lib(mc_infer(&low, &net, &McConfig { passes, lambda: 0.03, dropout_rate: Some(0.0), seed: 11 }))?;
        if r.std.iter().any(|&s| s != 0.0) || r.removed_pixels != 0 || r.removed_fraction != 0.0 {
            return Err(format!("rate 0 with T={passes}: nonzero std or removed pixels"));
        }
        means.push(r.mean.into_data());
    }
    if means.windows(2).any(|w| w[0] != w[1]) {
        return Err("rate-0 means differ across T".into());
    }

    let kept_values = [10.0f32, 10.1, 9.9, 10.05, 9.95];
    let removed_values = [10.0f32, 20.0, 10.0, 20.0, 10.0];
    let mut detail = Vec::new();
    for (values, expect_kept) in [(kept_values, true), (removed_values, false)] {
        let passes: Vec<Vec<f32>> = values.iter().map(|&v| vec![v]).collect();
        let e = lib(summarize_ensemble(&passes, 0.03))?;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / 5.0;
        let std = (values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        let kept = e.filtered[0] != 0.0;
        let ok = kept == expect_kept
            && (e.mean[0] as f64 - mean).abs() < 1e-5
            && (e.std[0] as f64 - std).abs() < 1e-5
            && e.filtered[0] == if expect_kept { e.mean[0] } else { 0.0 }
            && e.removed_pct == if expect_kept { 0.0 } else { 100.0 };
        if !ok {
            return Err(format!("ensemble {values:?}: mean {} std {} kept {kept}", e.mean[0], e.std[0]));
        }
        detail.push(format!("{{{}}} mean {:.3} std {:.4} {}", values.map(|v| v.to_string()).join(","), e.mean[0], e.std[0], if kept { "kept" } else { "removed" }));
    }
    Ok(format!("rate 0: zero std, nothing removed for T in {{1,3,8}}; {}", detail.join("; ")))
}

fn grid_with(cfg: GridConfig, values: &[f32]) -> VoxelGrid {
    let mut bytes = VoxelGrid::new(cfg).unwrap().encode();
    let start = bytes.len() - 4 * values.len();
    for (chunk, v) in bytes[start..].chunks_exact_mut(4).zip(values) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    VoxelGrid::decode(&bytes).unwrap()
}

fn traversal_and_auc() -> Outcome {
    let mut rng = stream(5, 0);
    let mut unresolved = 0usize;
    for i in 0..1000 {
        let res = rng.gen_range(0.05..0.5);
        let dims = [rng.gen_range(1..20), rng.gen_range(1..20), rng.gen_range(1..20)];
        let origin = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let cfg = GridConfig { origin, resolution: res, dims, params: OccupancyParams::default() };
        let span = |k: usize, rng: &mut rand_chacha::ChaCha8Rng| rng.gen_range(origin[k] - 1.0..origin[k] + dims[k] as f64 * res + 1.0);
        let a = [span(0, &mut rng), span(1, &mut rng), span(2, &mut rng)];
        let b = [span(0, &mut rng), span(1, &mut rng), span(2, &mut rng)];
        let visited = VoxelGrid::new(cfg).unwrap().traverse(a, b);
        let chords = marched_chords(&cfg, a, b);
        let exact: Vec<[usize; 3]> = chords.iter().map(|c| c.0).collect();
        if visited != exact {
            return Err(format!("segment {i}: traversal {visited:?} vs marching {exact:?}"));
        }
        let dense = sampled_voxels(&cfg, a, b, 10_000);
        let mut sorted = visited.clone();
        sorted.sort();
        if dense.iter().any(|v| sorted.binary_search(v).is_err()) {
            return Err(format!("segment {i}: a densely sampled voxel was not visited"));
        }
        for (v, len) in &chords {
            if dense.binary_search(v).is_err() {
                if *len > 1e-4 {
                    return Err(format!("segment {i}: voxel {v:?} holds {len:.1e} of the segment but no sample"));
                }
                unresolved += 1;
            }
        }
    }

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dims = [rng.gen_range(2..10), rng.gen_range(2..10), rng.gen_range(2..10)];
        let cfg = GridConfig { origin: [0.0; 3], resolution: 0.1, dims, params: OccupancyParams::default() };
        let n: usize = dims.iter().product();
        let truth: Vec<f32> = (0..n).map(|_| [f32::NAN, -2.0, 3.5, 0.0, 1.2, -0.7][rng.gen_range(0..6)]).collect();
        let pred: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.2) { f32::NAN } else { rng.gen_range(-4i32..=7) as f32 * 0.5 }).collect();
        let p = |l: f32| if l.is_nan() { 0.5 } else { 1.0 / (1.0 + (-(l as f64)).exp()) };
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for (&t, &s) in truth.iter().zip(&pred) {
            let pt = p(t);
            if pt > 0.52 || pt < 0.48 {
                scores.push(p(s));
                labels.push(pt > 0.5);
            }
        }
        if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
            continue;
        }
        let roc: RocCurve = lib(roc_auc(&grid_with(cfg, &pred), &grid_with(cfg, &truth)))?;
        worst = worst.max((roc.auc - mann_whitney_auc(&scores, &labels)).abs());
    }
    check(
        worst < 1e-9,
        format!("1000 segments match exact marching ({unresolved} sub-1e-4 chords below sampling resolution); 100 grids AUC vs pairwise {worst:.1e}"),
    )
}

/// Outdoor training blocks and a held-out outdoor test block.
fn outdoor_config(factor: usize, epochs: usize, decay: f64, methods: &str) -> PipelineConfig {
    let overrides = [
        format!("factor={factor}"),
        "train_data.scenes=0".into(),
        "train_data.outdoor_scenes=10".into(),
        "train_data.poses_per_scene=20".into(),
        "test_data.outdoor_seed=424242".into(),
        "map.enabled=false".into(),
        format!("methods={methods}"),
        "network.crop_cols=64".into(),
        "network.lr=0.003".into(),
        format!("network.decay={decay}"),
        format!("network.epochs={epochs}"),
    ];
    PipelineConfig::default().with_overrides(&overrides).unwrap()
}

fn indoor_config(seed: u64) -> PipelineConfig {
    let overrides = [
        format!("seed={seed}"),
        r#"methods=["linear","cubic","nn","nn-mc"]"#.into(),
        "network.crop_cols=64".into(),
        "network.lr=0.003".into(),
        "network.decay=0.05".into(),
        "network.epochs=60".into(),
    ];
    PipelineConfig::default().with_overrides(&overrides).unwrap()
}

struct Trained {
    evaluation: Evaluation,
    pairs: usize,
    train_secs: f64,
}

fn train_and_evaluate(cfg: &PipelineConfig) -> Result<Trained, String> {
    let pairs = lib(training_pairs(cfg))?;
    let start = Instant::now();
    let trainer = lib(train_network(cfg, &pairs))?;
    let train_secs = start.elapsed().as_secs_f64();
    let test = lib(test_set(cfg))?;
    let evaluation = lib(evaluate(cfg, Some(&trainer.network), &test))?;
    Ok(Trained { evaluation, pairs: pairs.len(), train_secs })
}

fn l1_of(e: &Evaluation, method: &str) -> f64 {
    e.get(method).and_then(|m| m.l1).unwrap_or(f64::NAN)
}

fn auc_of(e: &Evaluation, method: &str) -> f64 {
    e.get(method).and_then(|m| m.auc()).unwrap_or(f64::NAN)
}

/// The network's score is the unfiltered Monte-Carlo mean.
fn outdoor_ordering() -> Outcome {
    let t = train_and_evaluate(&outdoor_config(4, 170, 0.053, r#"["linear","cubic","nn","nn-mc"]"#))?;
    let e = &t.evaluation;
    let (mean, single, lin, cub) = (l1_of(e, "nn-mc"), l1_of(e, "nn"), l1_of(e, "linear"), l1_of(e, "cubic"));
    check(
        mean < lin && mean < cub && t.pairs >= 200 && t.train_secs <= 1800.0,
        format!(
            "L1 neural mean {mean:.5} linear {lin:.5} cubic {cub:.5} (single pass {single:.5}); {} pairs, trained in {:.0}s",
            t.pairs, t.train_secs
        ),
    )
}

fn indoor_auc() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in [1, 2, 3] {
        let t = train_and_evaluate(&indoor_config(seed))?;
        let e = &t.evaluation;
        let (lin, cub, nn, mc) = (auc_of(e, "linear"), auc_of(e, "cubic"), auc_of(e, "nn"), auc_of(e, "nn-mc"));
        let removed = e.get("nn-mc").and_then(|m| m.removed_pct).unwrap_or(f64::NAN);
        let ok = mc >= nn && nn.min(mc) > lin.max(cub);
        wins += ok as usize;
        lines.push(format!("seed {seed}: nn-mc {mc:.4} ({removed:.1}% removed) nn {nn:.4} linear {lin:.4} cubic {cub:.4}"));
    }
    check(wins >= 2, format!("{wins}/3 seeds ordered; {}", lines.join("; ")))
}

/// Scored on the Monte-Carlo mean, like the outdoor ordering.
fn factor_sweep() -> Outcome {
    let dir = std::env::temp_dir().join("lidar-sr-acceptance");
    let mut table = String::from("factor,input_channels,method,l1\n");
    let mut nn = Vec::new();
    let mut single = Vec::new();
    for factor in [8, 4, 2] {
        let t = train_and_evaluate(&outdoor_config(factor, 60, 0.05, r#"["linear","cubic","nn","nn-mc"]"#))?;
        for m in &t.evaluation.methods {
            table.push_str(&format!("{factor},{},{},{:.6}\n", 64 / factor, m.method, m.l1.unwrap_or(f64::NAN)));
        }
        lib(write_evaluation(&dir.join(format!("factor{factor}")), &t.evaluation, false))?;
        nn.push(l1_of(&t.evaluation, "nn-mc"));
        single.push(l1_of(&t.evaluation, "nn"));
    }
    std::fs::write(dir.join("factor_sweep.csv"), &table).map_err(|e| e.to_string())?;
    check(
        nn[0] >= nn[1] && nn[1] >= nn[2],
        format!(
            "neural mean L1 8->64 {:.5}, 16->64 {:.5}, 32->64 {:.5} (single pass {:.5}, {:.5}, {:.5}); table in {}",
            nn[0],
            nn[1],
            nn[2],
            single[0],
            single[1],
            single[2],
            dir.join("factor_sweep.csv").display()
        ),
    )
}

fn latency() -> Outcome {
    let spec = lib(build_srnet(&SrNetConfig::default()))?;
    let net: Network<f32> = lib(Network::init(spec, 9))?;
    let low = normalized(16, 256, (0..16 * 256).map(|i| 0.02 + 0.3 * ((i * 53 % 97) as f32 / 97.0)).collect());
    let cfg = McConfig { passes: 50, lambda: 0.03, dropout_rate: None, seed: 1 };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let ms = pool.install(|| -> Result<f64, String> {
        lib(mc_infer(&low, &net, &McConfig { passes: 2, ..cfg }))?;
        let start = Instant::now();
        lib(mc_infer(&low, &net, &cfg))?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    })?;
    let per_pass = ms / cfg.passes as f64;
    check(per_pass < 100.0, format!("T=50 on 16x256, one thread: {ms:.0} ms total, {per_pass:.1} ms per pass"))
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let overrides = [
        "sensor.h_res=64",
        "network.epochs=2",
        "network.crop_cols=32",
        "train_data.scenes=2",
        "train_data.poses_per_scene=5",
        "test_data.poses=6",
        "mc.passes=4",
        "map.resolution=0.1",
    ];
    let cfg = lib(PipelineConfig::default().with_overrides(&overrides))?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    lib(run_pipeline(&cfg, &a))?;
    lib(run_pipeline(&cfg, &b))?;
    // Wall-clock timings are the only run-dependent outputs.
    let skip = ["timing.csv", "summary.json"];
    let files: Vec<_> = files_under(&a).into_iter().filter(|f| !skip.iter().any(|s| f.ends_with(s))).collect();
    if files_under(&b).into_iter().filter(|f| !skip.iter().any(|s| f.ends_with(s))).collect::<Vec<_>>() != files {
        return Err("runs wrote different file sets".into());
    }
    for f in &files {
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap() {
            return Err(format!("{} differs between runs", f.display()));
        }
    }
    let has = |p: &str| files.iter().any(|f| f.starts_with(p));
    check(
        has("model.lsrm") && has("scans") && has("maps") && has("metrics.csv"),
        format!("{} files bit-identical across two runs (model, scans, grids, metrics)", files.len()),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, &mut dyn FnMut() -> Outcome); 10] = [
        ("gradient correctness", &mut gradients),
        ("projection round trip", &mut projection),
        ("interpolation oracles", &mut interpolation),
        ("MC-dropout semantics", &mut mc_semantics),
        ("voxel traversal and AUC", &mut traversal_and_auc),
        ("outdoor L1 ordering", &mut outdoor_ordering),
        ("indoor map AUC ordering", &mut indoor_auc),
        ("upscaling factor sweep", &mut factor_sweep),
        ("inference latency", &mut latency),
        ("determinism", &mut determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

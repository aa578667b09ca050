mod common;

use common::{hermite_catmull_rom, marched_voxels, mann_whitney_auc, sampled_voxels};
use lidar_sr::eval::{l1_metric, RocCurve};
use lidar_sr::geom::{denormalize, normalize, project, subsample_rows, unproject, NormalizedImage, Pose, RangeImage, SensorIntrinsics};
use lidar_sr::io::{decode_lsrs, encode_lsrs};
use lidar_sr::mapping::{build_map_from_images, GridConfig, OccupancyParams, VoxelGrid, VoxelState};
use lidar_sr::nn::model::{decode_params, encode_params};
use lidar_sr::nn::ops::dropout_forward;
use lidar_sr::nn::{build_srnet, Mode, Network, SrNetConfig, Tensor4};
use lidar_sr::rng::stream;
use lidar_sr::sim::dataset::{augment_pair, generate_dataset, AugmentConfig, DatasetConfig, ScanPair, Trajectory};
use lidar_sr::sim::{raycast_scan, Primitive, Scene};
use lidar_sr::upscale::{catmull_rom, mc_infer, summarize_ensemble, upscale_cubic, upscale_linear, McConfig};
use proptest::prelude::*;

fn intrinsics() -> impl Strategy<Value = SensorIntrinsics> {
    (2usize..40, 4usize..200).prop_map(|(c, w)| SensorIntrinsics::new(c, w).unwrap())
}

/// A valid image with roughly a fifth of the pixels missing.
fn image_for(intr: SensorIntrinsics) -> impl Strategy<Value = RangeImage> {
    let (lo, hi) = (intr.min_range_m, intr.max_range_m);
    prop::collection::vec(prop_oneof![1 => Just(0.0f32), 4 => lo..=hi], intr.channels * intr.h_res)
        .prop_map(move |data| RangeImage::new(intr, data).unwrap())
}

fn image() -> impl Strategy<Value = RangeImage> {
    intrinsics().prop_flat_map(image_for)
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Direction that enters a convex surface with outward normal `n`. Backing
/// off from a surface point along such a direction leaves the solid, so the
/// point is the first hit at exactly the backed-off distance.
fn entering(raw: [f64; 3], n: [f64; 3]) -> Option<[f64; 3]> {
    let d = unit(raw);
    let c = dot(d, n);
    if !c.is_finite() || c.abs() < 0.05 {
        return None;
    }
    Some(if c < 0.0 { d } else { d.map(|x| -x) })
}

fn back_off(surface: [f64; 3], dir: [f64; 3], dist: f64) -> [f64; 3] {
    [surface[0] - dist * dir[0], surface[1] - dist * dir[1], surface[2] - dist * dir[2]]
}

fn tiny_network(factor: usize, rate: f32, seed: u64) -> Network<f32> {
    let spec = build_srnet(&SrNetConfig { factor, base_filters: 2, dropout_rate: rate, bn_momentum: 0.9 }).unwrap();
    Network::init(spec, seed).unwrap()
}

fn normalized(rows: usize, cols: usize, values: Vec<f32>) -> NormalizedImage {
    NormalizedImage::new(SensorIntrinsics::new(rows, cols).unwrap(), values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_inverts_unprojection(img in image()) {
        let cloud = unproject(&img);
        prop_assert_eq!(cloud.len(), img.valid_count());
        prop_assert!(cloud.rings.iter().all(|&r| (r as usize) < img.rows()));
        let back = project(&cloud, img.intrinsics());
        prop_assert_eq!(back.dropped, 0);
        prop_assert_eq!(back.image.as_slice(), img.as_slice());
    }

    #[test]
    fn projection_stays_in_range(
        intr in intrinsics(),
        pts in prop::collection::vec(prop::array::uniform3(-150.0f64..150.0), 0..300),
    ) {
        let mut cloud = lidar_sr::geom::PointCloud::new();
        for p in pts {
            cloud.push(p, 0);
        }
        let out = project(&cloud, &intr);
        let (lo, hi) = (intr.min_range_m, intr.max_range_m);
        prop_assert!(out.image.as_slice().iter().all(|&v| v == 0.0 || (lo..=hi).contains(&v)));
        prop_assert!(out.image.valid_count() + out.dropped <= cloud.len());
    }

    #[test]
    fn normalize_round_trips(img in image()) {
        let n = normalize(&img);
        prop_assert!(n.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = denormalize(&n);
        for (&a, &b) in img.as_slice().iter().zip(back.as_slice()) {
            prop_assert_eq!(a == 0.0, b == 0.0);
            prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn subsampling_keeps_every_kth_row(
        img in (1usize..6, prop::sample::select(vec![2usize, 4, 8]), 4usize..40)
            .prop_flat_map(|(k, f, w)| image_for(SensorIntrinsics::new(k * f, w).unwrap()))
            .prop_flat_map(|img| (Just(img), prop::sample::select(vec![2usize, 4, 8])))
            .prop_filter("factor divides channels", |(img, f)| img.rows() % f == 0 && img.rows() / f >= 2),
    ) {
        let (img, f) = img;
        let low = subsample_rows(&img, f).unwrap();
        prop_assert_eq!(low.rows(), img.rows() / f);
        for r in 0..low.rows() {
            let (a, b): (Vec<u32>, Vec<u32>) = (
                low.row(r).iter().map(|v| v.to_bits()).collect(),
                img.row(r * f).iter().map(|v| v.to_bits()).collect(),
            );
            prop_assert_eq!(a, b);
            let intr = low.intrinsics();
            prop_assert!((intr.elevation(r) - img.intrinsics().elevation(r * f)).abs() < 1e-6);
        }
    }

    #[test]
    fn lsrs_round_trips(img in image()) {
        let back = decode_lsrs(&encode_lsrs(&img).unwrap()).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn ground_hits_match_closed_form(
        z in -3.0f64..3.0, xy in prop::array::uniform2(-20.0f64..20.0), raw in prop::array::uniform3(-1.0f64..1.0), dist in 0.1f64..60.0,
    ) {
        let Some(dir) = entering(raw, [0.0, 0.0, 1.0]) else { return Ok(()) };
        let origin = back_off([xy[0], xy[1], z], dir, dist);
        let t = Primitive::Ground { z }.intersect(origin, dir).unwrap();
        prop_assert!((t - dist).abs() < 1e-6, "{} vs {}", t, dist);
    }

    #[test]
    fn sphere_hits_match_closed_form(
        center in prop::array::uniform3(-10.0f64..10.0), radius in 0.1f64..5.0,
        normal in prop::array::uniform3(-1.0f64..1.0), raw in prop::array::uniform3(-1.0f64..1.0), dist in 0.05f64..40.0,
    ) {
        let n = unit(normal);
        prop_assume!(n.iter().all(|v| v.is_finite()));
        let Some(dir) = entering(raw, n) else { return Ok(()) };
        let surface = [center[0] + radius * n[0], center[1] + radius * n[1], center[2] + radius * n[2]];
        let origin = back_off(surface, dir, dist);
        let t = Primitive::Sphere { center, radius }.intersect(origin, dir).unwrap();
        prop_assert!((t - dist).abs() < 1e-6, "{} vs {}", t, dist);
    }

    #[test]
    fn box_hits_match_closed_form(
        min in prop::array::uniform3(-10.0f64..10.0), size in prop::array::uniform3(0.2f64..5.0),
        axis in 0usize..3, upper in any::<bool>(), uv in prop::array::uniform2(0.05f64..0.95),
        raw in prop::array::uniform3(-1.0f64..1.0), dist in 0.05f64..40.0,
    ) {
        let max = [min[0] + size[0], min[1] + size[1], min[2] + size[2]];
        let mut n = [0.0; 3];
        n[axis] = if upper { 1.0 } else { -1.0 };
        let Some(dir) = entering(raw, n) else { return Ok(()) };
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut surface = [0.0; 3];
        surface[axis] = if upper { max[axis] } else { min[axis] };
        surface[a] = min[a] + uv[0] * size[a];
        surface[b] = min[b] + uv[1] * size[b];
        let origin = back_off(surface, dir, dist);
        let t = Primitive::Box { min, max }.intersect(origin, dir).unwrap();
        prop_assert!((t - dist).abs() < 1e-6, "{} vs {}", t, dist);
    }

    #[test]
    fn cylinder_side_hits_match_closed_form(
        center in prop::array::uniform2(-10.0f64..10.0), radius in 0.1f64..3.0, z0 in -2.0f64..2.0, height in 0.5f64..4.0,
        angle in 0.0f64..std::f64::consts::TAU, frac in 0.05f64..0.95, raw in prop::array::uniform3(-1.0f64..1.0), dist in 0.05f64..40.0,
    ) {
        let n = [angle.cos(), angle.sin(), 0.0];
        let Some(dir) = entering(raw, n) else { return Ok(()) };
        let surface = [center[0] + radius * n[0], center[1] + radius * n[1], z0 + frac * height];
        let origin = back_off(surface, dir, dist);
        let prim = Primitive::Cylinder { center, radius, z: [z0, z0 + height] };
        let t = prim.intersect(origin, dir).unwrap();
        prop_assert!((t - dist).abs() < 1e-6, "{} vs {}", t, dist);
    }

    #[test]
    fn cylinder_cap_hits_match_closed_form(
        center in prop::array::uniform2(-10.0f64..10.0), radius in 0.5f64..3.0, z0 in -2.0f64..2.0, height in 0.5f64..4.0,
        top in any::<bool>(), polar in (0.0f64..0.9, 0.0f64..std::f64::consts::TAU), raw in prop::array::uniform3(-1.0f64..1.0), dist in 0.05f64..40.0,
    ) {
        let n = [0.0, 0.0, if top { 1.0 } else { -1.0 }];
        let Some(dir) = entering(raw, n) else { return Ok(()) };
        let r = polar.0 * radius;
        let surface = [center[0] + r * polar.1.cos(), center[1] + r * polar.1.sin(), if top { z0 + height } else { z0 }];
        let origin = back_off(surface, dir, dist);
        let prim = Primitive::Cylinder { center, radius, z: [z0, z0 + height] };
        let t = prim.intersect(origin, dir).unwrap();
        prop_assert!((t - dist).abs() < 1e-6, "{} vs {}", t, dist);
    }

    #[test]
    fn augmentation_preserves_value_set(seed in any::<u64>(), img in (4usize..8).prop_flat_map(|k| image_for(SensorIntrinsics::new(4 * k, 32).unwrap()))) {
        let pair = ScanPair::from_high(img.clone(), 4, Pose::default()).unwrap();
        let cfg = AugmentConfig { range_scale: (1.0, 1.0), ..Default::default() };
        let out = augment_pair(&pair, &cfg, &mut stream(seed, 0)).unwrap();
        let mut a: Vec<u32> = img.as_slice().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = out.high.as_slice().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        prop_assert_eq!(out.low, subsample_rows(&out.high, 4).unwrap());

        let scaled = augment_pair(&pair, &AugmentConfig::default(), &mut stream(seed, 1)).unwrap();
        let (lo, hi) = (img.intrinsics().min_range_m, img.intrinsics().max_range_m);
        let nonzero: Vec<f32> = scaled.high.as_slice().iter().copied().filter(|&v| v != 0.0).collect();
        prop_assert_eq!(nonzero.len(), img.valid_count());
        prop_assert!(nonzero.iter().all(|v| (lo..=hi).contains(v)));
    }

    #[test]
    fn linear_and_cubic_exact_on_affine_columns(
        rows in 2usize..10, cols in 4usize..8, factor in prop::sample::select(vec![2usize, 4, 8]),
        coeffs in prop::collection::vec((0.3f64..0.6, -0.004f64..0.004), 8),
    ) {
        let (hi_rows, mut low) = (rows * factor, Vec::new());
        for r in 0..rows {
            for c in 0..cols {
                let (a, b) = coeffs[c];
                low.push((a + b * (r * factor) as f64) as f32);
            }
        }
        let low = normalized(rows, cols, low);
        for out in [upscale_linear(&low, factor).unwrap(), upscale_cubic(&low, factor).unwrap()] {
            prop_assert_eq!((out.rows(), out.cols()), (hi_rows, cols));
            for r in 0..(rows - 1) * factor + 1 {
                for c in 0..cols {
                    let (a, b) = coeffs[c];
                    let want = (a + b * r as f64) as f32;
                    prop_assert!((out.get(r, c) - want).abs() < 1e-6, "row {} col {}: {} vs {}", r, c, out.get(r, c), want);
                }
            }
        }
    }

    #[test]
    fn cubic_matches_hermite_form(p in prop::array::uniform4(0.01f64..1.0), t in 0.0f64..=1.0) {
        let got = catmull_rom(p[0], p[1], p[2], p[3], t);
        prop_assert!((got - hermite_catmull_rom(p[0], p[1], p[2], p[3], t)).abs() < 1e-9);
    }

    #[test]
    fn cubic_interior_spans_follow_closed_form(
        anchors in prop::collection::vec(0.05f32..0.95, 4..10), factor in prop::sample::select(vec![2usize, 4, 8]),
    ) {
        let n = anchors.len();
        let column: Vec<f32> = anchors.iter().flat_map(|&v| [v; 4]).collect();
        let out = upscale_cubic(&normalized(n, 4, column), factor).unwrap();
        let a: Vec<f64> = anchors.iter().map(|&v| v as f64).collect();
        for k in 1..n - 2 {
            for j in 0..factor {
                let t = j as f64 / factor as f64;
                let want = hermite_catmull_rom(a[k - 1], a[k], a[k + 1], a[k + 2], t).clamp(0.0, 1.0);
                prop_assert!((out.get(k * factor + j, 0) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn filter_is_monotone_in_lambda(
        passes in (1usize..8, 1usize..40).prop_flat_map(|(t, n)| prop::collection::vec(prop::collection::vec(prop_oneof![1 => Just(0.0f32), 6 => 0.0f32..1.0], n), t)),
        l1 in 1e-4f64..1.0, l2 in 1e-4f64..1.0,
    ) {
        let (lo, hi) = (l1.min(l2), l1.max(l2));
        let a = summarize_ensemble(&passes, lo).unwrap();
        let b = summarize_ensemble(&passes, hi).unwrap();
        for i in 0..a.mean.len() {
            prop_assert!(a.std[i] >= 0.0);
            prop_assert!(a.filtered[i] == 0.0 || a.filtered[i] == a.mean[i]);
            prop_assert!(b.filtered[i] == 0.0 || b.filtered[i] == b.mean[i]);
            if a.filtered[i] != 0.0 {
                prop_assert_eq!(b.filtered[i], b.mean[i]);
            }
        }
        prop_assert!(b.removed_pixels <= a.removed_pixels);
        prop_assert!((0.0..=100.0).contains(&a.removed_pct));
    }

    #[test]
    fn auc_equals_pairwise_estimate(
        data in prop::collection::vec((0u8..12, any::<bool>()), 2..300),
    ) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 11.0).collect();
        let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let roc = RocCurve::from_scores(&scores, &labels).unwrap();
        prop_assert!((roc.auc - mann_whitney_auc(&scores, &labels)).abs() < 1e-9);

        let first = roc.points.first().unwrap();
        let last = roc.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }

        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((RocCurve::from_scores(&warped, &labels).unwrap().auc - roc.auc).abs() < 1e-12);
    }

    #[test]
    fn l1_is_symmetric_and_subadditive(
        n in 1usize..50, seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = stream(seed, 0);
        let mut draw = || normalized(2, n + 3, (0..2 * (n + 3)).map(|_| rng.gen_range(0.0f32..1.0)).collect());
        let (a, b, c) = (draw(), draw(), draw());
        let ab = l1_metric(&a, &b).unwrap();
        prop_assert_eq!(ab, l1_metric(&b, &a).unwrap());
        prop_assert!(ab <= l1_metric(&a, &c).unwrap() + l1_metric(&c, &b).unwrap() + 1e-12);
        prop_assert_eq!(l1_metric(&a, &a).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn traversal_matches_marching(
        origin in prop::array::uniform3(-1.0f64..1.0), res in 0.1f64..0.7, dims in prop::array::uniform3(1usize..12),
        a in prop::array::uniform3(-2.0f64..6.0), b in prop::array::uniform3(-2.0f64..6.0),
    ) {
        let cfg = GridConfig { origin, resolution: res, dims, params: OccupancyParams::default() };
        let grid = VoxelGrid::new(cfg).unwrap();
        let visited = grid.traverse(a, b);
        prop_assert_eq!(&visited, &marched_voxels(&cfg, a, b));
        let mut sorted = visited.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), visited.len());
        for v in sampled_voxels(&cfg, a, b, 2000) {
            prop_assert!(sorted.binary_search(&v).is_ok(), "sampled voxel {:?} not visited", v);
        }
    }
}

fn room() -> Scene {
    Scene::new(vec![
        Primitive::Ground { z: 0.0 },
        Primitive::Box { min: [-4.0, -4.0, 0.0], max: [-3.8, 4.0, 2.0] },
        Primitive::Box { min: [3.8, -4.0, 0.0], max: [4.0, 4.0, 2.0] },
        Primitive::Box { min: [-4.0, 3.8, 0.0], max: [4.0, 4.0, 2.0] },
        Primitive::Sphere { center: [1.0, -2.0, 0.6], radius: 0.6 },
        Primitive::Cylinder { center: [-1.5, 1.5], radius: 0.3, z: [0.0, 1.5] },
    ])
    .unwrap()
}

fn room_grid() -> GridConfig {
    GridConfig::covering([-4.5, -4.5, -0.5], [4.5, 4.5, 2.5], 0.25).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mapping_invariants(x in -2.0f64..2.0, y in -2.0f64..1.5, yaw in -3.0f64..3.0, shuffle in any::<u64>()) {
        let intr = SensorIntrinsics::new(16, 90).unwrap();
        let scene = room();
        let poses: Vec<Pose> = (0..3).map(|k| Pose::new([x + 0.3 * k as f64, y, 0.5], yaw + k as f64)).collect();
        let scans: Vec<RangeImage> = poses.iter().map(|p| raycast_scan(&scene, p, &intr).unwrap()).collect();
        let cfg = room_grid();
        let pairs: Vec<(&RangeImage, &Pose)> = scans.iter().zip(&poses).collect();

        let grid = build_map_from_images(pairs.clone(), &cfg).unwrap();
        let again = build_map_from_images(pairs.clone(), &cfg).unwrap();
        prop_assert_eq!(grid.encode(), again.encode());
        prop_assert_eq!(VoxelGrid::decode(&grid.encode()).unwrap(), grid.clone());

        let prm = cfg.params;
        for i in 0..grid.len() {
            let v = grid.voxel_of_index(i);
            let l = grid.log_odds(v).unwrap();
            prop_assert!(l >= prm.l_min && l <= prm.l_max);
            let p = grid.occupancy(v).unwrap();
            prop_assert!(p > 0.0 && p < 1.0);
            if !grid.is_touched(v).unwrap() {
                prop_assert_eq!(p, 0.5);
            }
        }

        let mut twice = grid.clone();
        let last = pairs[shuffle as usize % pairs.len()];
        twice.integrate_scan(&unproject(last.0), last.1, intr.max_range_m as f64).unwrap();
        let mut once = VoxelGrid::new(cfg).unwrap();
        once.integrate_scan(&unproject(last.0), last.1, intr.max_range_m as f64).unwrap();
        let mut repeated = once.clone();
        repeated.integrate_scan(&unproject(last.0), last.1, intr.max_range_m as f64).unwrap();
        for i in 0..once.len() {
            let v = once.voxel_of_index(i);
            if once.state(v).unwrap() == VoxelState::Occupied {
                prop_assert_eq!(repeated.state(v).unwrap(), VoxelState::Occupied);
            }
        }
    }

    #[test]
    fn dataset_is_pure_and_low_is_subsampled(seed in any::<u64>(), count in 1usize..4) {
        let scene = room();
        let traj = Trajectory::random_in(&scene, count, 0.5, seed).unwrap();
        let cfg = DatasetConfig { augment_mult: 2, augment: AugmentConfig { seed, ..Default::default() }, ..Default::default() };
        let intr = SensorIntrinsics::new(16, 32).unwrap();
        let a = generate_dataset(&scene, &traj, &intr, &cfg).unwrap();
        prop_assert_eq!(&a, &generate_dataset(&scene, &traj, &intr, &cfg).unwrap());
        prop_assert_eq!(a.len(), 2 * count);
        for pair in &a {
            prop_assert_eq!(&pair.low, &subsample_rows(&pair.high, 4).unwrap());
        }
    }

    #[test]
    fn eval_forward_is_pure(seed in any::<u64>(), factor in prop::sample::select(vec![2usize, 4, 8]), values in prop::collection::vec(0.0f32..1.0, 32 / 2 * 16)) {
        let net = tiny_network(factor, 0.25, seed);
        let rows = 16 / factor;
        let x = Tensor4::from_vec([1, 1, rows, 16], values[..rows * 16].to_vec()).unwrap();
        let a = net.forward(&x, Mode::Eval, &mut stream(1, 0)).unwrap();
        let b = net.forward(&x, Mode::Eval, &mut stream(2, 9)).unwrap();
        prop_assert_eq!(a.shape(), [1, 1, 16, 16]);
        prop_assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn zero_rate_ensemble_is_constant(seed in any::<u64>(), t1 in 1usize..6, t2 in 1usize..6) {
        let net = tiny_network(4, 0.25, seed);
        let low = normalized(4, 16, (0..64).map(|i| 0.05 + (i % 7) as f32 * 0.01).collect());
        let run = |passes| mc_infer(&low, &net, &McConfig { passes, lambda: 0.03, dropout_rate: Some(0.0), seed }).unwrap();
        let (a, b) = (run(t1), run(t2));
        prop_assert_eq!(a.mean.as_slice(), b.mean.as_slice());
        prop_assert!(a.std.iter().all(|&s| s == 0.0));
        prop_assert_eq!(a.removed_pixels, 0);
    }
}

proptest! {
    #[test]
    fn inactive_dropout_is_identity(values in prop::collection::vec(-5.0f32..5.0, 1..64), rate in 0.0f32..0.9, seed in any::<u64>()) {
        let x = Tensor4::from_vec([1, 1, 1, values.len()], values).unwrap();
        let (y, mask) = dropout_forward(&x, rate, false, &mut stream(seed, 0)).unwrap();
        prop_assert!(mask.is_none());
        let bits = |t: &Tensor4<f32>| t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&y), bits(&x));
    }

    #[test]
    fn model_params_round_trip(seed in any::<u64>(), factor in prop::sample::select(vec![2usize, 4, 8])) {
        let net = tiny_network(factor, 0.25, seed);
        let (params, adam) = decode_params(&encode_params(&net.params, None), &net.spec).unwrap();
        prop_assert!(adam.is_none());
        prop_assert_eq!(params, net.params);
    }
}

#[test]
fn sensor_inside_sphere_sees_its_radius() {
    let scene = Scene::new(vec![Primitive::Sphere { center: [1.0, 2.0, 3.0], radius: 7.5 }]).unwrap();
    let intr = SensorIntrinsics::new(16, 64).unwrap();
    let img = raycast_scan(&scene, &Pose::new([1.0, 2.0, 3.0], 0.4), &intr).unwrap();
    assert!(img.as_slice().iter().all(|&v| (v - 7.5).abs() < 1e-5));
}

#[test]
fn ground_scan_matches_beam_geometry() {
    let scene = Scene::new(vec![Primitive::Ground { z: 0.0 }]).unwrap();
    let intr = SensorIntrinsics::new(16, 32).unwrap();
    let h = 1.8;
    let img = raycast_scan(&scene, &Pose::new([0.0, 0.0, h], 1.0), &intr).unwrap();
    for r in 0..intr.channels {
        let e = intr.elevation(r);
        let want = if e < 0.0 { h / (-e).sin() } else { 0.0 };
        let want = if want > intr.max_range_m as f64 { 0.0 } else { want };
        for &v in img.row(r) {
            assert!((v as f64 - want).abs() <= 1e-6 * want.max(1.0), "row {r}: {v} vs {want}");
        }
    }
}

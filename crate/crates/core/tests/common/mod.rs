//! Reference implementations used by the property and acceptance suites.
#![allow(dead_code)]

use lidar_sr::mapping::GridConfig;

/// Catmull-Rom through its Hermite form: tangents are half the central
/// differences at the inner points.
pub fn hermite_catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    let (m1, m2) = ((p2 - p0) / 2.0, (p3 - p1) / 2.0);
    let (t2, t3) = (t * t, t * t * t);
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    h00 * p1 + h10 * m1 + h01 * p2 + h11 * m2
}

/// Voxels crossed by the segment `a -> b`, found by sampling the midpoint
/// of every interval between consecutive grid-plane crossings. Consecutive
/// duplicates are merged.
pub fn marched_voxels(cfg: &GridConfig, a: [f64; 3], b: [f64; 3]) -> Vec<[usize; 3]> {
    marched_chords(cfg, a, b).into_iter().map(|(v, _)| v).collect()
}

/// [`marched_voxels`] with the fraction of the segment inside each voxel.
pub fn marched_chords(cfg: &GridConfig, a: [f64; 3], b: [f64; 3]) -> Vec<([usize; 3], f64)> {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let mut ts = vec![0.0, 1.0];
    for i in 0..3 {
        if d[i] == 0.0 {
            continue;
        }
        for k in 0..=cfg.dims[i] {
            let plane = cfg.origin[i] + k as f64 * cfg.resolution;
            let t = (plane - a[i]) / d[i];
            if t > 0.0 && t < 1.0 {
                ts.push(t);
            }
        }
    }
    ts.sort_by(f64::total_cmp);
    let mut out: Vec<([usize; 3], f64)> = Vec::new();
    for w in ts.windows(2) {
        if w[1] - w[0] < 1e-12 {
            continue;
        }
        let t = 0.5 * (w[0] + w[1]);
        if let Some(v) = voxel_of(cfg, [a[0] + t * d[0], a[1] + t * d[1], a[2] + t * d[2]]) {
            match out.last_mut() {
                Some((last, len)) if *last == v => *len += w[1] - w[0],
                _ => out.push((v, w[1] - w[0])),
            }
        }
    }
    out
}

/// Voxels containing any of `n` evenly spaced points along the segment.
pub fn sampled_voxels(cfg: &GridConfig, a: [f64; 3], b: [f64; 3], n: usize) -> Vec<[usize; 3]> {
    let mut out: Vec<[usize; 3]> = (0..n)
        .filter_map(|k| {
            let t = (k as f64 + 0.5) / n as f64;
            voxel_of(cfg, [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])])
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

pub fn voxel_of(cfg: &GridConfig, p: [f64; 3]) -> Option<[usize; 3]> {
    let mut v = [0; 3];
    for i in 0..3 {
        let f = ((p[i] - cfg.origin[i]) / cfg.resolution).floor();
        if f < 0.0 || f >= cfg.dims[i] as f64 {
            return None;
        }
        v[i] = f as usize;
    }
    Some(v)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Quadratic in the input size.
pub fn mann_whitney_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

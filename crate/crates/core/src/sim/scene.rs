//! Primitive scenes and the ray-cast lidar.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, RangeImage, SensorIntrinsics};
use crate::{io, rng};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    /// Infinite horizontal plane `z = z`.
    Ground { z: f64 },
    /// Solid axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Solid vertical cylinder with axis through `center` (x, y), capped at
    /// `z[0]` and `z[1]`.
    Cylinder { center: [f64; 2], radius: f64, z: [f64; 2] },
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            Primitive::Ground { z } => z.is_finite(),
            Primitive::Box { min, max } => {
                finite(min) && finite(max) && (0..3).all(|i| max[i] > min[i])
            }
            Primitive::Sphere { center, radius } => finite(center) && radius.is_finite() && *radius > 0.0,
            Primitive::Cylinder { center, radius, z } => {
                finite(center) && finite(z) && radius.is_finite() && *radius > 0.0 && z[1] > z[0]
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate or non-finite primitive {self:?}")))
        }
    }

    /// Distance along the unit direction `dir` to the first surface hit, if
    /// any. A ray starting inside a solid reports its exit point.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        match *self {
            Primitive::Ground { z } => {
                if dir[2] == 0.0 {
                    return None;
                }
                let t = (z - origin[2]) / dir[2];
                (t > HIT_EPS).then_some(t)
            }
            Primitive::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for i in 0..3 {
                    if dir[i] == 0.0 {
                        if origin[i] < min[i] || origin[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[i];
                    let (a, b) = ((min[i] - origin[i]) * inv, (max[i] - origin[i]) * inv);
                    t_near = t_near.max(a.min(b));
                    t_far = t_far.min(a.max(b));
                }
                if t_near > t_far || t_far <= HIT_EPS {
                    None
                } else if t_near > HIT_EPS {
                    Some(t_near)
                } else {
                    Some(t_far)
                }
            }
            Primitive::Sphere { center, radius } => {
                let oc = sub(origin, center);
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t > HIT_EPS)
            }
            Primitive::Cylinder { center, radius, z } => {
                let mut best: Option<f64> = None;
                let mut take = |t: f64| {
                    if t > HIT_EPS && best.map_or(true, |b| t < b) {
                        best = Some(t);
                    }
                };
                let (ox, oy) = (origin[0] - center[0], origin[1] - center[1]);
                let a = dir[0] * dir[0] + dir[1] * dir[1];
                if a > 0.0 {
                    let b = ox * dir[0] + oy * dir[1];
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            let hz = origin[2] + t * dir[2];
                            if hz >= z[0] && hz <= z[1] {
                                take(t);
                            }
                        }
                    }
                }
                if dir[2] != 0.0 {
                    for cap in z {
                        let t = (cap - origin[2]) / dir[2];
                        let (hx, hy) = (ox + t * dir[0], oy + t * dir[1]);
                        if hx * hx + hy * hy <= radius * radius {
                            take(t);
                        }
                    }
                }
                best
            }
        }
    }

    /// Whether `p` lies within `margin` of the solid (ground planes never
    /// contain points).
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        match *self {
            Primitive::Ground { .. } => false,
            Primitive::Box { min, max } => {
                (0..3).all(|i| p[i] >= min[i] - margin && p[i] <= max[i] + margin)
            }
            Primitive::Sphere { center, radius } => {
                let d = sub(p, center);
                dot(d, d) <= (radius + margin).powi(2)
            }
            Primitive::Cylinder { center, radius, z } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                dx * dx + dy * dy <= (radius + margin).powi(2)
                    && p[2] >= z[0] - margin
                    && p[2] <= z[1] + margin
            }
        }
    }

    /// Horizontal footprint `(min, max)` for bounded primitives.
    fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        match *self {
            Primitive::Ground { .. } => None,
            Primitive::Box { min, max } => Some((min, max)),
            Primitive::Sphere { center, radius } => Some((
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            )),
            Primitive::Cylinder { center, radius, z } => Some((
                [center[0] - radius, center[1] - radius, z[0]],
                [center[0] + radius, center[1] + radius, z[1]],
            )),
        }
    }
}

/// A static world made of primitives. Serialized as a plain JSON list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let scene = Scene { primitives };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::Config(format!("primitive #{i}: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let scene: Scene = io::read_json(path)?;
        scene
            .validate()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// Nearest hit distance from `origin` along unit `dir`.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(|a, b| a.total_cmp(b))
    }

    pub fn is_free(&self, p: [f64; 3], margin: f64) -> bool {
        !self.primitives.iter().any(|prim| prim.contains(p, margin))
    }

    /// Bounding box of all bounded primitives.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        self.primitives
            .iter()
            .filter_map(Primitive::bounds)
            .reduce(|(lo, hi), (a, b)| {
                (
                    [lo[0].min(a[0]), lo[1].min(a[1]), lo[2].min(a[2])],
                    [hi[0].max(b[0]), hi[1].max(b[1]), hi[2].max(b[2])],
                )
            })
    }

    /// A fixed 16 m x 12 m office: outer walls without a ceiling, two
    /// partitions with door gaps, desks, cabinets, pillars and a few round
    /// objects.
    pub fn office() -> Self {
        let mut b = RoomBuilder::new(16.0, 12.0, 2.6);
        b.partition_x(6.0, 0.0, 12.0, &[(3.0, 4.2), (8.5, 9.7)]);
        b.partition_y(7.5, 6.0, 16.0, &[(10.0, 11.2)]);
        for (x, y) in [(1.5, 1.5), (1.5, 4.0), (3.8, 1.5), (3.8, 4.0), (1.5, 9.5), (3.8, 9.5)] {
            b.boxed([x, y, 0.0], [x + 1.6, y + 0.8, 0.75]);
        }
        for (x, y) in [(8.0, 1.0), (10.5, 1.0), (13.0, 1.0), (8.0, 4.0), (10.5, 4.0)] {
            b.boxed([x, y, 0.0], [x + 1.2, y + 1.4, 0.75]);
        }
        b.boxed([14.9, 3.5, 0.0], [15.8, 6.5, 1.9]);
        b.boxed([0.2, 6.3, 0.0], [0.7, 8.3, 1.8]);
        b.boxed([7.0, 9.0, 0.0], [9.5, 11.0, 1.1]);
        b.boxed([11.5, 9.2, 0.0], [12.3, 10.0, 0.45]);
        for (x, y) in [(9.8, 6.8), (13.8, 6.8)] {
            b.cylinder([x, y], 0.3, 2.6);
        }
        b.cylinder([4.8, 7.0], 0.2, 1.2);
        b.sphere([4.8, 7.0, 1.45], 0.35);
        b.sphere([14.2, 10.8, 0.5], 0.5);
        b.sphere([8.6, 4.7, 1.05], 0.3);
        b.finish()
    }

    /// Randomly furnished rectangular room for training data.
    pub fn random_indoor(seed: u64) -> Self {
        let mut r = rng::stream(seed, 0x5ce4e);
        let (w, d) = (r.gen_range(9.0..22.0), r.gen_range(7.0..16.0));
        let height = r.gen_range(2.2..3.5);
        let mut b = RoomBuilder::new(w, d, height);
        if r.gen_bool(0.7) {
            let x = r.gen_range(0.35 * w..0.65 * w);
            let door = r.gen_range(1.0..d - 2.0);
            b.partition_x(x, 0.0, d, &[(door, door + 1.2)]);
        }
        if r.gen_bool(0.5) {
            let y = r.gen_range(0.35 * d..0.65 * d);
            let door = r.gen_range(1.0..w - 2.0);
            b.partition_y(y, 0.0, w, &[(door, door + 1.2)]);
        }
        let items = r.gen_range(8..26);
        for _ in 0..items {
            let x = r.gen_range(0.5..w - 0.5);
            let y = r.gen_range(0.5..d - 0.5);
            match r.gen_range(0..10) {
                0..=4 => {
                    let sx = r.gen_range(0.4..2.2);
                    let sy = r.gen_range(0.4..1.6);
                    let h = r.gen_range(0.3..2.0_f64).min(height);
                    b.boxed([x, y, 0.0], [(x + sx).min(w - 0.1), (y + sy).min(d - 0.1), h]);
                }
                5..=6 => {
                    let rad = r.gen_range(0.1..0.45);
                    let h = if r.gen_bool(0.5) { height } else { r.gen_range(0.5..1.5) };
                    b.cylinder([x, y], rad, h);
                }
                7..=8 => {
                    let rad = r.gen_range(0.2..0.7);
                    let z = r.gen_range(rad..1.6 + rad);
                    b.sphere([x, y, z], rad);
                }
                _ => {
                    // Table: thin top on a single leg.
                    let s = r.gen_range(0.6..1.4);
                    let h = r.gen_range(0.6..1.0);
                    b.boxed([x, y, h - 0.05], [(x + s).min(w - 0.1), (y + s).min(d - 0.1), h]);
                    b.cylinder([x + s / 2.0, y + s / 2.0], 0.05, h - 0.05);
                }
            }
        }
        b.finish()
    }

    /// Open-air block with buildings, trees and poles.
    pub fn random_outdoor(seed: u64) -> Self {
        let mut r = rng::stream(seed, 0x0d00e);
        let mut prims = vec![Primitive::Ground { z: 0.0 }];
        let extent: f64 = 120.0;
        for _ in 0..r.gen_range(20..40) {
            let x = r.gen_range(-extent..extent);
            let y = r.gen_range(-extent..extent);
            if x.abs() < 8.0 || y.abs() < 8.0 {
                continue; // keep the streets clear
            }
            let (sx, sy) = (r.gen_range(6.0..25.0), r.gen_range(6.0..25.0));
            prims.push(Primitive::Box {
                min: [x, y, 0.0],
                max: [x + sx, y + sy, r.gen_range(4.0..25.0)],
            });
        }
        for _ in 0..r.gen_range(20..50) {
            let along = r.gen_range(-extent..extent);
            let side = if r.gen_bool(0.5) { 1.0 } else { -1.0 } * r.gen_range(5.0..7.0);
            let (x, y) = if r.gen_bool(0.5) { (along, side) } else { (side, along) };
            if r.gen_bool(0.6) {
                let h = r.gen_range(2.0..4.0);
                prims.push(Primitive::Cylinder { center: [x, y], radius: 0.2, z: [0.0, h] });
                prims.push(Primitive::Sphere { center: [x, y, h + 1.0], radius: r.gen_range(1.2..2.5) });
            } else {
                prims.push(Primitive::Cylinder { center: [x, y], radius: 0.12, z: [0.0, r.gen_range(3.0..8.0)] });
            }
        }
        for _ in 0..r.gen_range(5..15) {
            let x = r.gen_range(-extent..extent);
            let y = if r.gen_bool(0.5) { 2.5 } else { -3.5 };
            let (x, y) = if r.gen_bool(0.5) { (x, y) } else { (y, x) };
            prims.push(Primitive::Box { min: [x, y, 0.0], max: [x + 4.5, y + 1.8, 1.5] });
        }
        Scene { primitives: prims }
    }
}

struct RoomBuilder {
    height: f64,
    prims: Vec<Primitive>,
}

const WALL: f64 = 0.2;

impl RoomBuilder {
    fn new(width: f64, depth: f64, height: f64) -> Self {
        let mut b = RoomBuilder {
            height,
            prims: vec![Primitive::Ground { z: 0.0 }],
        };
        b.boxed([-WALL, -WALL, 0.0], [width + WALL, 0.0, height]);
        b.boxed([-WALL, depth, 0.0], [width + WALL, depth + WALL, height]);
        b.boxed([-WALL, 0.0, 0.0], [0.0, depth, height]);
        b.boxed([width, 0.0, 0.0], [width + WALL, depth, height]);
        b
    }

    fn boxed(&mut self, min: [f64; 3], max: [f64; 3]) {
        if (0..3).all(|i| max[i] > min[i]) {
            self.prims.push(Primitive::Box { min, max });
        }
    }

    fn cylinder(&mut self, center: [f64; 2], radius: f64, top: f64) {
        self.prims.push(Primitive::Cylinder { center, radius, z: [0.0, top] });
    }

    fn sphere(&mut self, center: [f64; 3], radius: f64) {
        self.prims.push(Primitive::Sphere { center, radius });
    }

    fn wall_segments(from: f64, to: f64, doors: &[(f64, f64)]) -> Vec<(f64, f64)> {
        let mut cuts: Vec<(f64, f64)> = doors.to_vec();
        cuts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Vec::new();
        let mut at = from;
        for (a, b) in cuts {
            if a > at {
                out.push((at, a.min(to)));
            }
            at = at.max(b);
        }
        if to > at {
            out.push((at, to));
        }
        out
    }

    /// Wall at `x` running along y from `from` to `to`.
    fn partition_x(&mut self, x: f64, from: f64, to: f64, doors: &[(f64, f64)]) {
        let h = self.height;
        for (a, b) in Self::wall_segments(from, to, doors) {
            self.boxed([x - WALL / 2.0, a, 0.0], [x + WALL / 2.0, b, h]);
        }
    }

    /// Wall at `y` running along x.
    fn partition_y(&mut self, y: f64, from: f64, to: f64, doors: &[(f64, f64)]) {
        let h = self.height;
        for (a, b) in Self::wall_segments(from, to, doors) {
            self.boxed([a, y - WALL / 2.0, 0.0], [b, y + WALL / 2.0, h]);
        }
    }

    fn finish(self) -> Scene {
        Scene { primitives: self.prims }
    }
}

/// Unit beam direction in the sensor frame.
pub fn beam_direction(elevation: f64, azimuth: f64) -> [f64; 3] {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Casts one ray per pixel from the pose origin. Pixels whose nearest hit is
/// missing or outside `[min_range, max_range]` are 0.
pub fn raycast_scan(scene: &Scene, pose: &Pose, intr: &SensorIntrinsics) -> Result<RangeImage> {
    intr.validate()?;
    pose.validate()?;
    let rot = pose.rotation();
    let origin = pose.position;
    let w = intr.h_res;
    let azimuths: Vec<f64> = (0..w).map(|c| intr.azimuth(c)).collect();
    let (lo, hi) = (intr.min_range_m as f64, intr.max_range_m as f64);
    let cast_row = |row: usize| -> Vec<f32> {
        let elev = intr.elevation(row);
        azimuths
            .iter()
            .map(|&az| {
                let d = rot * nalgebra::Vector3::from(beam_direction(elev, az));
                match scene.intersect(origin, [d.x, d.y, d.z]) {
                    Some(t) if t >= lo && t <= hi => t as f32,
                    _ => 0.0,
                }
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<f32>> = {
        use rayon::prelude::*;
        (0..intr.channels).into_par_iter().map(cast_row).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<f32>> = (0..intr.channels).map(cast_row).collect();
    RangeImage::new(*intr, rows.concat())
}

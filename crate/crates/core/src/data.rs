//! Synthetic parametric shapes with exact occupancy, surface samplers,
//! partial views, and the on-disk dataset format.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::{Point3, PointCloud};

pub const PARTIAL_POINTS: usize = 1024;
pub const COMPLETE_POINTS: usize = 2048;
pub const QUERY_POINTS: usize = 2048;
const MAX_COMPLETE_POINTS: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Sphere { center: Point3, radius: f64 },
    Cuboid { center: Point3, half: Point3 },
    /// Axis along z.
    Cylinder { center: Point3, radius: f64, half_height: f64 },
    /// Segment along z of half length `half_length`, swept by `radius`.
    Capsule { center: Point3, radius: f64, half_length: f64 },
}

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: &Point3, b: &Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    loop {
        let v: Point3 = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

impl Primitive {
    fn tag(&self) -> u8 {
        match self {
            Primitive::Sphere { .. } => 0,
            Primitive::Cuboid { .. } => 1,
            Primitive::Cylinder { .. } => 2,
            Primitive::Capsule { .. } => 3,
        }
    }

    fn params(&self) -> Vec<f64> {
        match *self {
            Primitive::Sphere { center: c, radius } => vec![c[0], c[1], c[2], radius],
            Primitive::Cuboid { center: c, half: h } => vec![c[0], c[1], c[2], h[0], h[1], h[2]],
            Primitive::Cylinder { center: c, radius, half_height } => {
                vec![c[0], c[1], c[2], radius, half_height]
            }
            Primitive::Capsule { center: c, radius, half_length } => {
                vec![c[0], c[1], c[2], radius, half_length]
            }
        }
    }

    fn param_count(tag: u8) -> Result<usize> {
        match tag {
            0 => Ok(4),
            1 => Ok(6),
            2 | 3 => Ok(5),
            t => Err(Error::Parse(format!("unknown primitive tag {t}"))),
        }
    }

    fn from_params(tag: u8, p: &[f64]) -> Result<Self> {
        if p.len() != Self::param_count(tag)? {
            return Err(Error::Parse(format!("primitive {tag}: {} params", p.len())));
        }
        let c = [p[0], p[1], p[2]];
        Ok(match tag {
            0 => Primitive::Sphere { center: c, radius: p[3] },
            1 => Primitive::Cuboid { center: c, half: [p[3], p[4], p[5]] },
            2 => Primitive::Cylinder { center: c, radius: p[3], half_height: p[4] },
            _ => Primitive::Capsule { center: c, radius: p[3], half_length: p[4] },
        })
    }

    pub fn contains(&self, q: &Point3) -> bool {
        match *self {
            Primitive::Sphere { center, radius } => {
                let d = sub(q, &center);
                d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius
            }
            Primitive::Cuboid { center, half } => {
                (0..3).all(|a| (q[a] - center[a]).abs() <= half[a])
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let d = sub(q, &center);
                d[0] * d[0] + d[1] * d[1] <= radius * radius && d[2].abs() <= half_height
            }
            Primitive::Capsule { center, radius, half_length } => {
                let d = sub(q, &center);
                let t = d[2].clamp(-half_length, half_length);
                let dz = d[2] - t;
                d[0] * d[0] + d[1] * d[1] + dz * dz <= radius * radius
            }
        }
    }

    pub fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Cuboid { half: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Primitive::Cylinder { radius, half_height, .. } => {
                2.0 * PI * radius * 2.0 * half_height + 2.0 * PI * radius * radius
            }
            Primitive::Capsule { radius, half_length, .. } => {
                2.0 * PI * radius * 2.0 * half_length + 4.0 * PI * radius * radius
            }
        }
    }

    pub fn bounds(&self) -> (Point3, Point3) {
        let (c, e) = match *self {
            Primitive::Sphere { center, radius } => (center, [radius; 3]),
            Primitive::Cuboid { center, half } => (center, half),
            Primitive::Cylinder { center, radius, half_height } => (center, [radius, radius, half_height]),
            Primitive::Capsule { center, radius, half_length } => {
                (center, [radius, radius, half_length + radius])
            }
        };
        (sub(&c, &e), add(&c, &e))
    }

    /// Uniform point on the surface with its outward normal.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> (Point3, Point3) {
        use std::f64::consts::PI;
        match *self {
            Primitive::Sphere { center, radius } => {
                let n = unit_vector(rng);
                (add(&center, &[radius * n[0], radius * n[1], radius * n[2]]), n)
            }
            Primitive::Cuboid { center, half } => {
                let faces = [
                    half[1] * half[2],
                    half[1] * half[2],
                    half[0] * half[2],
                    half[0] * half[2],
                    half[0] * half[1],
                    half[0] * half[1],
                ];
                let face = pick(&faces, rng);
                let axis = face / 2;
                let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
                let mut p = [0.0; 3];
                let mut n = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        center[a] + sign * half[a]
                    } else {
                        center[a] + rng.gen_range(-half[a]..=half[a])
                    };
                }
                n[axis] = sign;
                (p, n)
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let cap = PI * radius * radius;
                match pick(&[side, cap, cap], rng) {
                    0 => {
                        let t = rng.gen_range(0.0..2.0 * PI);
                        let (s, c) = t.sin_cos();
                        let z = rng.gen_range(-half_height..=half_height);
                        (add(&center, &[radius * c, radius * s, z]), [c, s, 0.0])
                    }
                    k => {
                        let sign = if k == 1 { -1.0 } else { 1.0 };
                        let r = radius * rng.gen::<f64>().sqrt();
                        let t = rng.gen_range(0.0..2.0 * PI);
                        let (s, c) = t.sin_cos();
                        (add(&center, &[r * c, r * s, sign * half_height]), [0.0, 0.0, sign])
                    }
                }
            }
            Primitive::Capsule { center, radius, half_length } => {
                let side = 2.0 * PI * radius * 2.0 * half_length;
                let cap = 2.0 * PI * radius * radius;
                match pick(&[side, cap, cap], rng) {
                    0 => {
                        let t = rng.gen_range(0.0..2.0 * PI);
                        let (s, c) = t.sin_cos();
                        let z = rng.gen_range(-half_length..=half_length);
                        (add(&center, &[radius * c, radius * s, z]), [c, s, 0.0])
                    }
                    k => {
                        let sign = if k == 1 { -1.0 } else { 1.0 };
                        let mut n = unit_vector(rng);
                        n[2] = sign * n[2].abs();
                        let p = [radius * n[0], radius * n[1], sign * half_length + radius * n[2]];
                        (add(&center, &p), n)
                    }
                }
            }
        }
    }
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoolTop {
    Round,
    Square,
}

/// Family-tagged shape parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum ShapeSpec {
    Single(Primitive),
    Union2(Primitive, Primitive),
    /// Base plate, square column, and a round or square top. Everything
    /// below the top is shared between the two modes.
    Stool {
        mode: StoolTop,
        base_half: f64,
        column_half: f64,
        round_radius: f64,
        square_half: f64,
    },
}

const STOOL_BASE_Z: (f64, f64) = (-0.42, -0.32);
const STOOL_TOP_Z: (f64, f64) = (0.30, 0.40);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Sphere,
    Box,
    Cylinder,
    Capsule,
    Union2,
    Stool2Mode,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Sphere,
        Family::Box,
        Family::Cylinder,
        Family::Capsule,
        Family::Union2,
        Family::Stool2Mode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sphere => "sphere",
            Family::Box => "box",
            Family::Cylinder => "cylinder",
            Family::Capsule => "capsule",
            Family::Union2 => "union2",
            Family::Stool2Mode => "stool2mode",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown shape family `{s}`")))
    }

    fn tag(self) -> u8 {
        self as u8
    }

    /// Random parameters of this family, inside `[-0.45, 0.45]³`.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> ShapeSpec {
        match self {
            Family::Sphere => ShapeSpec::Single(random_primitive(0, 1.0, rng)),
            Family::Box => ShapeSpec::Single(random_primitive(1, 1.0, rng)),
            Family::Cylinder => ShapeSpec::Single(random_primitive(2, 1.0, rng)),
            Family::Capsule => ShapeSpec::Single(random_primitive(3, 1.0, rng)),
            Family::Union2 => {
                let a = random_primitive(rng.gen_range(0..4), 0.7, rng);
                let b = random_primitive(rng.gen_range(0..4), 0.7, rng);
                ShapeSpec::Union2(a, b)
            }
            Family::Stool2Mode => ShapeSpec::Stool {
                mode: if rng.gen_bool(0.5) { StoolTop::Round } else { StoolTop::Square },
                base_half: rng.gen_range(0.38..0.42),
                column_half: rng.gen_range(0.055..0.065),
                round_radius: rng.gen_range(0.22..0.26),
                square_half: rng.gen_range(0.33..0.37),
            },
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A primitive whose extent is scaled by `scale` and whose center keeps it
/// inside the margin.
fn random_primitive<R: Rng + ?Sized>(tag: u8, scale: f64, rng: &mut R) -> Primitive {
    let limit = 0.44;
    let center_for = |ext: Point3, rng: &mut R| -> Point3 {
        let mut c = [0.0; 3];
        for a in 0..3 {
            let room = (limit - ext[a]).max(0.0);
            c[a] = if room > 0.0 { rng.gen_range(-room..=room) } else { 0.0 };
        }
        c
    };
    match tag {
        0 => {
            let radius = rng.gen_range(0.2..0.4) * scale;
            let center = center_for([radius; 3], rng);
            Primitive::Sphere { center, radius }
        }
        1 => {
            let half = [0; 3].map(|_| rng.gen_range(0.1..0.4) * scale);
            let center = center_for(half, rng);
            Primitive::Cuboid { center, half }
        }
        2 => {
            let radius = rng.gen_range(0.15..0.4) * scale;
            let half_height = rng.gen_range(0.15..0.4) * scale;
            let center = center_for([radius, radius, half_height], rng);
            Primitive::Cylinder { center, radius, half_height }
        }
        _ => {
            let radius = rng.gen_range(0.1..0.22) * scale;
            let half_length = rng.gen_range(0.05..0.2) * scale;
            let center = center_for([radius, radius, radius + half_length], rng);
            Primitive::Capsule { center, radius, half_length }
        }
    }
}

impl ShapeSpec {
    pub fn family(&self) -> Family {
        match self {
            ShapeSpec::Single(p) => match p {
                Primitive::Sphere { .. } => Family::Sphere,
                Primitive::Cuboid { .. } => Family::Box,
                Primitive::Cylinder { .. } => Family::Cylinder,
                Primitive::Capsule { .. } => Family::Capsule,
            },
            ShapeSpec::Union2(..) => Family::Union2,
            ShapeSpec::Stool { .. } => Family::Stool2Mode,
        }
    }

    pub fn sphere(center: Point3, radius: f64) -> Self {
        ShapeSpec::Single(Primitive::Sphere { center, radius })
    }

    pub fn cuboid(center: Point3, half: Point3) -> Self {
        ShapeSpec::Single(Primitive::Cuboid { center, half })
    }

    /// The stool with the other top, all else equal.
    pub fn with_mode(&self, mode: StoolTop) -> Option<Self> {
        match *self {
            ShapeSpec::Stool { base_half, column_half, round_radius, square_half, .. } => {
                Some(ShapeSpec::Stool { mode, base_half, column_half, round_radius, square_half })
            }
            _ => None,
        }
    }

    pub fn stool_mode(&self) -> Option<StoolTop> {
        match self {
            ShapeSpec::Stool { mode, .. } => Some(*mode),
            _ => None,
        }
    }

    pub fn parts(&self) -> Vec<Primitive> {
        match *self {
            ShapeSpec::Single(p) => vec![p],
            ShapeSpec::Union2(a, b) => vec![a, b],
            ShapeSpec::Stool { mode, base_half, column_half, round_radius, square_half } => {
                let (b0, b1) = STOOL_BASE_Z;
                let (t0, t1) = STOOL_TOP_Z;
                let base = Primitive::Cuboid {
                    center: [0.0, 0.0, (b0 + b1) / 2.0],
                    half: [base_half, base_half, (b1 - b0) / 2.0],
                };
                let column = Primitive::Cuboid {
                    center: [0.0, 0.0, (b1 + t0) / 2.0],
                    half: [column_half, column_half, (t0 - b1) / 2.0],
                };
                let tc = [0.0, 0.0, (t0 + t1) / 2.0];
                let top = match mode {
                    StoolTop::Round => Primitive::Cylinder {
                        center: tc,
                        radius: round_radius,
                        half_height: (t1 - t0) / 2.0,
                    },
                    StoolTop::Square => Primitive::Cuboid {
                        center: tc,
                        half: [square_half, square_half, (t1 - t0) / 2.0],
                    },
                };
                vec![base, column, top]
            }
        }
    }

    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.parts() {
            let (a, b) = p.bounds();
            for i in 0..3 {
                lo[i] = lo[i].min(a[i]);
                hi[i] = hi[i].max(b[i]);
            }
        }
        (lo, hi)
    }

    fn params(&self) -> Vec<f64> {
        match *self {
            ShapeSpec::Single(p) => p.params(),
            ShapeSpec::Union2(a, b) => {
                let mut v = vec![a.tag() as f64];
                v.extend(a.params());
                v.push(b.tag() as f64);
                v.extend(b.params());
                v
            }
            ShapeSpec::Stool { mode, base_half, column_half, round_radius, square_half } => vec![
                if mode == StoolTop::Round { 0.0 } else { 1.0 },
                base_half,
                column_half,
                round_radius,
                square_half,
            ],
        }
    }

    fn from_params(tag: u8, p: &[f64]) -> Result<Self> {
        let bad = || Error::Parse(format!("bad parameters for shape tag {tag}"));
        Ok(match tag {
            0..=3 => ShapeSpec::Single(Primitive::from_params(tag, p)?),
            4 => {
                let ta = *p.first().ok_or_else(bad)? as u8;
                let na = Primitive::param_count(ta)?;
                let a = Primitive::from_params(ta, p.get(1..1 + na).ok_or_else(bad)?)?;
                let tb = *p.get(1 + na).ok_or_else(bad)? as u8;
                let b = Primitive::from_params(tb, p.get(2 + na..).ok_or_else(bad)?)?;
                ShapeSpec::Union2(a, b)
            }
            5 => {
                if p.len() != 5 {
                    return Err(bad());
                }
                ShapeSpec::Stool {
                    mode: if p[0] == 0.0 { StoolTop::Round } else { StoolTop::Square },
                    base_half: p[1],
                    column_half: p[2],
                    round_radius: p[3],
                    square_half: p[4],
                }
            }
            _ => return Err(bad()),
        })
    }
}

/// 1 inside or on the boundary, 0 outside.
pub fn occupancy_oracle(spec: &ShapeSpec, q: &Point3) -> u8 {
    spec.parts().iter().any(|p| p.contains(q)) as u8
}

/// Area-weighted surface samples of the union boundary with exact normals.
/// Samples of one part that fall inside another part are redrawn.
pub fn sample_surface<R: Rng + ?Sized>(spec: &ShapeSpec, count: usize, rng: &mut R) -> Result<PointCloud> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let parts = spec.parts();
    let areas: Vec<f64> = parts.iter().map(|p| p.area()).collect();
    let mut positions = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    while positions.len() < count {
        let k = pick(&areas, rng);
        let (p, n) = parts[k].sample_surface(rng);
        // Step just outside so faces shared by two parts count as hidden
        // regardless of rounding in the part boundaries.
        let probe = [p[0] + 1e-9 * n[0], p[1] + 1e-9 * n[1], p[2] + 1e-9 * n[2]];
        let hidden = parts
            .iter()
            .enumerate()
            .any(|(j, other)| j != k && other.contains(&probe));
        if !hidden {
            positions.push(p);
            normals.push(n);
        }
    }
    PointCloud::new(positions, Some(normals))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewMode {
    /// Points below the middle of the z extent.
    Bottom,
    /// Below the middle in z and left of the middle in x.
    Octant,
    /// Additionally below the middle in y.
    TrueOctant,
}

impl ViewMode {
    pub fn name(self) -> &'static str {
        match self {
            ViewMode::Bottom => "bottom",
            ViewMode::Octant => "octant",
            ViewMode::TrueOctant => "true-octant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "bottom" => ViewMode::Bottom,
            "octant" => ViewMode::Octant,
            "true-octant" => ViewMode::TrueOctant,
            other => return Err(Error::Manifest(format!("unknown view mode `{other}`"))),
        })
    }

    /// Axes cut at the middle of the cloud's extent.
    fn axes(self) -> &'static [usize] {
        match self {
            ViewMode::Bottom => &[2],
            ViewMode::Octant => &[2, 0],
            ViewMode::TrueOctant => &[2, 0, 1],
        }
    }

    /// Indices of points in the kept region.
    pub fn kept(self, cloud: &PointCloud) -> Vec<usize> {
        let (lo, hi) = cloud.bounds();
        let mid: Vec<f64> = (0..3).map(|a| (lo[a] + hi[a]) / 2.0).collect();
        cloud
            .positions()
            .iter()
            .enumerate()
            .filter(|(_, p)| self.axes().iter().all(|&a| p[a] < mid[a]))
            .map(|(i, _)| i)
            .collect()
    }

    /// Half-space test against precomputed middles; used for visible-region metrics.
    pub fn visible(self, p: &Point3, mid: &Point3) -> bool {
        self.axes().iter().all(|&a| p[a] < mid[a])
    }
}

/// Exactly [`PARTIAL_POINTS`] points of the kept region, uniformly chosen,
/// in their original order.
pub fn partial_view<R: Rng + ?Sized>(cloud: &PointCloud, mode: ViewMode, rng: &mut R) -> Result<PointCloud> {
    let kept = mode.kept(cloud);
    if kept.len() < PARTIAL_POINTS {
        return Err(Error::KeptRegionTooSmall {
            kept: kept.len(),
            needed: PARTIAL_POINTS,
        });
    }
    let mut chosen: Vec<usize> = sample_indices(rng, kept.len(), PARTIAL_POINTS)
        .into_iter()
        .map(|i| kept[i])
        .collect();
    chosen.sort_unstable();
    cloud.select(&chosen)
}

pub fn uniform_queries<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<Point3> {
    (0..count)
        .map(|_| [0; 3].map(|_| rng.gen_range(-0.5..0.5)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub families: Vec<(Family, f64)>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub view: ViewMode,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut families = None;
        let (mut train, mut val, mut test) = (None, None, None);
        let mut view = ViewMode::Bottom;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let count = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Manifest(format!("{k}: `{v}` is not a count")))
            };
            match k {
                "seed" => {
                    seed = Some(v.parse().map_err(|_| Error::Manifest(format!("seed: `{v}`")))?)
                }
                "families" => {
                    let mut list = Vec::new();
                    for item in v.split(',') {
                        let (name, w) = item
                            .split_once(':')
                            .ok_or_else(|| Error::Manifest(format!("families: `{item}` needs name:weight")))?;
                        let w: f64 = w
                            .trim()
                            .parse()
                            .map_err(|_| Error::Manifest(format!("families: bad weight `{w}`")))?;
                        list.push((Family::parse(name.trim())?, w));
                    }
                    families = Some(list);
                }
                "train" => train = Some(count(v)?),
                "val" => val = Some(count(v)?),
                "test" => test = Some(count(v)?),
                "view" => view = ViewMode::parse(v)?,
                other => return Err(Error::Manifest(format!("unknown manifest key `{other}`"))),
            }
        }
        let m = Self {
            seed: seed.ok_or_else(|| Error::Manifest("missing key `seed`".into()))?,
            families: families.ok_or_else(|| Error::Manifest("missing key `families`".into()))?,
            train: train.ok_or_else(|| Error::Manifest("missing key `train`".into()))?,
            val: val.ok_or_else(|| Error::Manifest("missing key `val`".into()))?,
            test: test.ok_or_else(|| Error::Manifest("missing key `test`".into()))?,
            view,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Manifest("train, val and test counts must be > 0".into()));
        }
        if self.families.is_empty() {
            return Err(Error::Manifest("at least one family is required".into()));
        }
        if self.families.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Manifest("family weights must be non-negative".into()));
        }
        let total: f64 = self.families.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Manifest(format!(
                "family weights must sum to 1 (got {total})"
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let fam: Vec<String> = self
            .families
            .iter()
            .map(|(f, w)| format!("{}:{}", f.name(), w))
            .collect();
        format!(
            "seed={}\nfamilies={}\ntrain={}\nval={}\ntest={}\nview={}\n",
            self.seed,
            fam.join(","),
            self.train,
            self.val,
            self.test,
            self.view.name()
        )
    }

    pub fn splits(&self) -> [(&'static str, usize); 3] {
        [("train", self.train), ("val", self.val), ("test", self.test)]
    }
}

/// One stored example.
#[derive(Clone, Debug, PartialEq)]
pub struct DataItem {
    pub spec: ShapeSpec,
    pub complete: PointCloud,
    pub partial: PointCloud,
    pub queries: Vec<Point3>,
    pub occupancy: Vec<u8>,
}

/// Item rng from the dataset seed and a global item index.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw a shape, its complete cloud and a partial view. If the kept region
/// is too small the complete cloud is redrawn, then drawn with twice as many
/// points, and as a last resort the shape is redrawn.
pub fn generate_item<R: Rng + ?Sized>(
    families: &[(Family, f64)],
    view: ViewMode,
    rng: &mut R,
) -> Result<DataItem> {
    let dist = WeightedIndex::new(families.iter().map(|(_, w)| *w))
        .map_err(|e| Error::Manifest(e.to_string()))?;
    loop {
        let family = families[dist.sample(rng)].0;
        let spec = family.sample(rng);
        if let Some(item) = views_for(spec, view, rng)? {
            return Ok(item);
        }
    }
}

/// Complete cloud, partial view and queries of a fixed shape; `None` if no
/// partial view can be cut at any allowed density.
pub fn views_for<R: Rng + ?Sized>(spec: ShapeSpec, view: ViewMode, rng: &mut R) -> Result<Option<DataItem>> {
    let mut n = COMPLETE_POINTS;
    while n <= MAX_COMPLETE_POINTS {
        for _ in 0..3 {
            let complete = sample_surface(&spec, n, rng)?;
            match partial_view(&complete, view, rng) {
                Ok(partial) => {
                    let queries = uniform_queries(QUERY_POINTS, rng);
                    let occupancy = queries.iter().map(|q| occupancy_oracle(&spec, q)).collect();
                    return Ok(Some(DataItem { spec, complete, partial, queries, occupancy }));
                }
                Err(Error::KeptRegionTooSmall { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        n *= 2;
    }
    Ok(None)
}

const ITEM_MAGIC: &[u8; 4] = b"HVSD";

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vals: impl ExactSizeIterator<Item = f64>) {
    put_u64(buf, vals.len() as u64);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl DataItem {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = ITEM_MAGIC.to_vec();
        buf.push(self.spec.family().tag());
        let params = self.spec.params();
        put_f64s(&mut buf, params.into_iter());
        let cloud = |c: &PointCloud| -> Vec<f64> {
            let normals = c.normals().expect("dataset clouds carry normals");
            c.positions()
                .iter()
                .zip(normals)
                .flat_map(|(p, n)| [p[0], p[1], p[2], n[0], n[1], n[2]])
                .collect()
        };
        put_f64s(&mut buf, cloud(&self.complete).into_iter());
        put_f64s(&mut buf, cloud(&self.partial).into_iter());
        let q: Vec<f64> = self
            .queries
            .iter()
            .zip(&self.occupancy)
            .flat_map(|(q, &o)| [q[0], q[1], q[2], o as f64])
            .collect();
        put_f64s(&mut buf, q.into_iter());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != ITEM_MAGIC {
            return Err(Error::BadMagic { expected: "HVSD" });
        }
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag)?;
        let params = read_f64s(&mut r)?;
        let spec = ShapeSpec::from_params(tag[0], &params)?;
        let cloud = |v: Vec<f64>| -> Result<PointCloud> {
            if !v.len().is_multiple_of(6) {
                return Err(Error::Parse("cloud array length not a multiple of 6".into()));
            }
            let pos = v.chunks(6).map(|c| [c[0], c[1], c[2]]).collect();
            let nor = v.chunks(6).map(|c| [c[3], c[4], c[5]]).collect();
            PointCloud::new(pos, Some(nor))
        };
        let complete = cloud(read_f64s(&mut r)?)?;
        let partial = cloud(read_f64s(&mut r)?)?;
        let q = read_f64s(&mut r)?;
        if q.len() % 4 != 0 {
            return Err(Error::Parse("query array length not a multiple of 4".into()));
        }
        let queries = q.chunks(4).map(|c| [c[0], c[1], c[2]]).collect();
        let occupancy = q.chunks(4).map(|c| c[3] as u8).collect();
        Ok(Self { spec, complete, partial, queries, occupancy })
    }
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    r.read_exact(out).map_err(|_| Error::Truncated)
}

fn read_f64s(r: &mut &[u8]) -> Result<Vec<f64>> {
    let mut n = [0u8; 8];
    read_exact(r, &mut n)?;
    let n = u64::from_le_bytes(n) as usize;
    if n.saturating_mul(8) > r.len() {
        return Err(Error::Truncated);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 8];
        read_exact(r, &mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.txt";

fn item_path(dir: &Path, split: &str, index: usize) -> PathBuf {
    dir.join(split).join(format!("{index:05}.hvsd"))
}

/// Generate every split in parallel; item `i` of the whole set uses stream `i`.
pub fn make_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<usize> {
    manifest.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    let mut jobs = Vec::new();
    let mut global = 0u64;
    for (split, count) in manifest.splits() {
        fs::create_dir_all(dir.join(split))?;
        for i in 0..count {
            jobs.push((split, i, global));
            global += 1;
        }
    }
    jobs.par_iter().try_for_each(|&(split, i, global)| -> Result<()> {
        let mut rng = item_rng(manifest.seed, global);
        let item = generate_item(&manifest.families, manifest.view, &mut rng)?;
        let mut f = fs::File::create(item_path(dir, split, i))?;
        f.write_all(&item.to_bytes())?;
        Ok(())
    })?;
    Ok(jobs.len())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<DataItem>> {
    let manifest = read_manifest(dir)?;
    let count = manifest
        .splits()
        .iter()
        .find(|(s, _)| *s == split)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{split}`")))?;
    (0..count)
        .map(|i| DataItem::from_bytes(&fs::read(item_path(dir, split, i))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sphere_oracle() {
        let s = ShapeSpec::sphere([0.0; 3], 0.4);
        assert_eq!(occupancy_oracle(&s, &[0.0; 3]), 1);
        assert_eq!(occupancy_oracle(&s, &[0.41, 0.0, 0.0]), 0);
        assert_eq!(occupancy_oracle(&s, &[0.4, 0.0, 0.0]), 1);
    }

    #[test]
    fn union_is_max_of_parts() {
        let mut r = rng(1);
        for _ in 0..20 {
            let spec = Family::Union2.sample(&mut r);
            let ShapeSpec::Union2(a, b) = spec else { panic!() };
            for q in uniform_queries(50, &mut r) {
                let expect = (a.contains(&q) as u8).max(b.contains(&q) as u8);
                assert_eq!(occupancy_oracle(&spec, &q), expect);
            }
        }
    }

    #[test]
    fn random_shapes_fit_with_margin() {
        let mut r = rng(2);
        for f in Family::ALL {
            for _ in 0..200 {
                let (lo, hi) = f.sample(&mut r).bounds();
                assert!(lo.iter().chain(&hi).all(|v| v.abs() < 0.45), "{f}: {lo:?} {hi:?}");
            }
        }
    }

    #[test]
    fn sphere_samples_on_surface() {
        let s = ShapeSpec::sphere([0.1, -0.05, 0.0], 0.3);
        let c = sample_surface(&s, 2000, &mut rng(3)).unwrap();
        for (p, n) in c.positions().iter().zip(c.normals().unwrap()) {
            let d = sub(p, &[0.1, -0.05, 0.0]);
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((r - 0.3).abs() < 1e-12);
            assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn box_faces_hit_in_area_proportion() {
        let half = [0.1, 0.2, 0.3];
        let s = ShapeSpec::cuboid([0.0; 3], half);
        let n = 100_000;
        let c = sample_surface(&s, n, &mut rng(4)).unwrap();
        let mut hits = [0usize; 6];
        for p in c.positions() {
            let on: Vec<usize> = (0..6)
                .filter(|&f| {
                    let a = f / 2;
                    let sign = if f % 2 == 0 { -1.0 } else { 1.0 };
                    (p[a] - sign * half[a]).abs() < 1e-15
                })
                .collect();
            assert!(!on.is_empty(), "{p:?} on no face");
            hits[on[0]] += 1;
        }
        let areas = [0.2 * 0.3, 0.2 * 0.3, 0.1 * 0.3, 0.1 * 0.3, 0.1 * 0.2, 0.1 * 0.2];
        let total: f64 = areas.iter().sum();
        for f in 0..6 {
            let expect = areas[f] / total * n as f64;
            assert!((hits[f] as f64 - expect).abs() / expect < 0.05, "face {f}");
        }
    }

    #[test]
    fn union_samples_lie_on_the_outer_boundary() {
        let spec = ShapeSpec::Stool {
            mode: StoolTop::Square,
            base_half: 0.4,
            column_half: 0.06,
            round_radius: 0.24,
            square_half: 0.35,
        };
        let c = sample_surface(&spec, 5000, &mut rng(5)).unwrap();
        for (p, n) in c.positions().iter().zip(c.normals().unwrap()) {
            let inside = [p[0] - 1e-9 * n[0], p[1] - 1e-9 * n[1], p[2] - 1e-9 * n[2]];
            assert_eq!(occupancy_oracle(&spec, &inside), 1, "{p:?}");
            let out = [p[0] + 1e-6 * n[0], p[1] + 1e-6 * n[1], p[2] + 1e-6 * n[2]];
            assert_eq!(occupancy_oracle(&spec, &out), 0, "{p:?}");
        }
    }

    #[test]
    fn stool_modes_share_the_bottom() {
        let round = ShapeSpec::Stool {
            mode: StoolTop::Round,
            base_half: 0.4,
            column_half: 0.06,
            round_radius: 0.24,
            square_half: 0.35,
        };
        let square = round.with_mode(StoolTop::Square).unwrap();
        let (lo, hi) = round.bounds();
        let (lo2, hi2) = square.bounds();
        assert_eq!(lo[2], lo2[2]);
        assert_eq!(hi[2], hi2[2]);
        let mid = (lo[2] + hi[2]) / 2.0;
        let mut r = rng(6);
        let mut differs = 0;
        for q in uniform_queries(20000, &mut r) {
            let (a, b) = (occupancy_oracle(&round, &q), occupancy_oracle(&square, &q));
            if q[2] < mid {
                assert_eq!(a, b);
            } else if a != b {
                differs += 1;
            }
        }
        assert!(differs > 100);
        let c = sample_surface(&square, 20000, &mut r).unwrap();
        let below = c.positions().iter().filter(|p| p[2] < mid).count();
        assert!(below as f64 / 20000.0 > 0.5);
    }

    #[test]
    fn bottom_view() {
        let s = ShapeSpec::sphere([0.0; 3], 0.4);
        let c = sample_surface(&s, 100_000, &mut rng(7)).unwrap();
        let kept = ViewMode::Bottom.kept(&c);
        assert!((kept.len() as f64 / 100_000.0 - 0.5).abs() < 0.05);
        let (lo, hi) = c.bounds();
        let mid = (lo[2] + hi[2]) / 2.0;
        let p = partial_view(&c, ViewMode::Bottom, &mut rng(8)).unwrap();
        assert_eq!(p.len(), PARTIAL_POINTS);
        assert!(p.positions().iter().all(|q| q[2] < mid));
        let o = partial_view(&c, ViewMode::Octant, &mut rng(8)).unwrap();
        assert_eq!(o.len(), PARTIAL_POINTS);
        let small = sample_surface(&s, 1500, &mut rng(9)).unwrap();
        assert!(matches!(
            partial_view(&small, ViewMode::Bottom, &mut rng(9)),
            Err(Error::KeptRegionTooSmall { .. })
        ));
    }

    #[test]
    fn items_round_trip_and_partial_is_subset() {
        let fams = vec![(Family::Union2, 0.5), (Family::Stool2Mode, 0.5)];
        for seed in 0..4 {
            for view in [ViewMode::Bottom, ViewMode::Octant] {
                let item = generate_item(&fams, view, &mut item_rng(3, seed)).unwrap();
                let complete: std::collections::HashSet<[u64; 3]> = item
                    .complete
                    .positions()
                    .iter()
                    .map(|p| p.map(f64::to_bits))
                    .collect();
                assert!(item.partial.positions().iter().all(|p| complete.contains(&p.map(f64::to_bits))));
                for (q, &o) in item.queries.iter().zip(&item.occupancy) {
                    assert_eq!(occupancy_oracle(&item.spec, q), o);
                }
                let back = DataItem::from_bytes(&item.to_bytes()).unwrap();
                assert_eq!(back, item);
            }
        }
        let item = generate_item(&fams, ViewMode::Bottom, &mut item_rng(3, 0)).unwrap();
        let bytes = item.to_bytes();
        assert!(matches!(DataItem::from_bytes(&bytes[..bytes.len() - 5]), Err(Error::Truncated)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DataItem::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn manifest_parsing() {
        let text = "seed=7\nfamilies=sphere:0.5,stool2mode:0.5\ntrain=3\nval=1\ntest=2\nview=octant\n";
        let m = DatasetManifest::parse(text).unwrap();
        assert_eq!(m.view, ViewMode::Octant);
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
        let err = DatasetManifest::parse("seed=1\nfamilies=sphere:0.5\ntrain=1\nval=1\ntest=1\n").unwrap_err();
        assert!(err.to_string().contains("sum to 1"));
        assert!(DatasetManifest::parse("seed=1\nfamilies=cone:1\ntrain=1\nval=1\ntest=1\n").is_err());
        assert!(DatasetManifest::parse("seed=1\nfamilies=sphere:1\ntrain=0\nval=1\ntest=1\n").is_err());
        assert!(DatasetManifest::parse("seed=1\nfamilies=sphere:1\ntrain=1\nval=1\ntest=1\ncolor=red\n").is_err());
    }

    #[test]
    fn dataset_is_deterministic() {
        let m = DatasetManifest::parse("seed=11\nfamilies=box:0.5,capsule:0.5\ntrain=3\nval=1\ntest=2\n").unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(make_dataset(&m, a.path()).unwrap(), 6);
        make_dataset(&m, b.path()).unwrap();
        for (split, n) in m.splits() {
            for i in 0..n {
                let x = fs::read(item_path(a.path(), split, i)).unwrap();
                let y = fs::read(item_path(b.path(), split, i)).unwrap();
                assert_eq!(x, y);
            }
        }
        assert_eq!(load_split(a.path(), "test").unwrap().len(), 2);
    }
}

//! Completion metrics, each with a brute-force twin that shares the same
//! distance arithmetic so the two agree exactly.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::data::{occupancy_oracle, ShapeSpec};
use crate::error::{Error, Result};
use crate::meshing::TriMesh;
use crate::pointcloud::{dist2, Point3, PointCloud};

pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_COMPLETIONS: usize = 10;
pub const COMPLETION_POINTS: usize = 2048;

/// Static 3-d tree for exact nearest-neighbour queries.
pub struct KdTree {
    points: Vec<Point3>,
    /// Permutation of point indices; node `[lo, hi)` splits at its midpoint.
    order: Vec<usize>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut tree = Self { points: points.to_vec(), order: Vec::new() };
        tree.split(&mut order, 0);
        tree.order = order;
        tree
    }

    fn split(&self, idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            self.points[a][axis].total_cmp(&self.points[b][axis]).then(a.cmp(&b))
        });
        let (left, right) = idx.split_at_mut(mid);
        self.split(left, depth + 1);
        self.split(&mut right[1..], depth + 1);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the closest point; ties go to the
    /// lower index.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.order.len(), 0, q, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn search(&self, lo: usize, hi: usize, depth: usize, q: &Point3, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid];
        let p = &self.points[i];
        let d = dist2(p, q);
        if d < best.1 || (d == best.1 && i < best.0) {
            *best = (i, d);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, depth + 1, q, best);
        if diff * diff <= best.1 {
            self.search(far.0, far.1, depth + 1, q, best);
        }
    }
}

pub fn brute_nearest(points: &[Point3], q: &Point3) -> Option<(usize, f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0 != usize::MAX).then_some(best)
}

fn nonempty(c: &PointCloud) -> Result<&[Point3]> {
    if c.is_empty() {
        Err(Error::EmptyCloud)
    } else {
        Ok(c.positions())
    }
}

/// Distance from every point of `from` to its nearest neighbour in `to`.
pub fn nearest_distances(from: &[Point3], to: &[Point3]) -> Vec<f64> {
    let tree = KdTree::build(to);
    from.par_iter().map(|q| tree.nearest(q).unwrap().1.sqrt()).collect()
}

pub fn brute_nearest_distances(from: &[Point3], to: &[Point3]) -> Vec<f64> {
    from.iter().map(|q| brute_nearest(to, q).unwrap().1.sqrt()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

type NearestFn = fn(&[Point3], &[Point3]) -> Vec<f64>;

fn chamfer_with(a: &PointCloud, b: &PointCloud, nn: NearestFn) -> Result<f64> {
    let (a, b) = (nonempty(a)?, nonempty(b)?);
    Ok(0.5 * (mean(&nn(a, b)) + mean(&nn(b, a))))
}

/// Symmetric mean nearest-neighbour L2 distance.
pub fn chamfer_l1(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_with(a, b, nearest_distances)
}

pub fn chamfer_l1_brute(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_with(a, b, brute_nearest_distances)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UhdMode {
    /// Hausdorff distance from the partial input to each completion.
    #[default]
    MaxMin,
    /// Mean nearest distance instead of the maximum.
    MeanMin,
}

impl UhdMode {
    pub fn name(self) -> &'static str {
        match self {
            UhdMode::MaxMin => "max-min",
            UhdMode::MeanMin => "mean-min",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max-min" => Ok(UhdMode::MaxMin),
            "mean-min" => Ok(UhdMode::MeanMin),
            _ => Err(Error::Config(format!("unknown uhd mode `{s}`"))),
        }
    }
}

fn uhd_with(partial: &PointCloud, completions: &[PointCloud], mode: UhdMode, nn: NearestFn) -> Result<f64> {
    let p = nonempty(partial)?;
    if completions.is_empty() {
        return Err(Error::Metric("uhd needs at least one completion".into()));
    }
    let mut total = 0.0;
    for c in completions {
        let d = nn(p, nonempty(c)?);
        total += match mode {
            UhdMode::MaxMin => max(&d),
            UhdMode::MeanMin => mean(&d),
        };
    }
    Ok(total / completions.len() as f64)
}

/// Unidirectional distance from the partial input to the completions,
/// averaged over completions.
pub fn uhd(partial: &PointCloud, completions: &[PointCloud], mode: UhdMode) -> Result<f64> {
    uhd_with(partial, completions, mode, nearest_distances)
}

pub fn uhd_brute(partial: &PointCloud, completions: &[PointCloud], mode: UhdMode) -> Result<f64> {
    uhd_with(partial, completions, mode, brute_nearest_distances)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TmdMode {
    /// Mean Chamfer distance over unordered pairs.
    #[default]
    MeanPairs,
    /// Sum over completions of the mean distance to the others.
    SumOfMeans,
}

impl TmdMode {
    pub fn name(self) -> &'static str {
        match self {
            TmdMode::MeanPairs => "mean-pairs",
            TmdMode::SumOfMeans => "sum-of-means",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean-pairs" => Ok(TmdMode::MeanPairs),
            "sum-of-means" => Ok(TmdMode::SumOfMeans),
            _ => Err(Error::Config(format!("unknown tmd mode `{s}`"))),
        }
    }
}

/// Diversity of a set of completions.
pub fn tmd(completions: &[PointCloud], mode: TmdMode) -> Result<f64> {
    let k = completions.len();
    if k < 2 {
        return Err(Error::Metric(format!("tmd needs at least two completions, got {k}")));
    }
    let mut pair = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = chamfer_l1(&completions[i], &completions[j])?;
            pair[i][j] = d;
            pair[j][i] = d;
        }
    }
    Ok(match mode {
        TmdMode::MeanPairs => {
            let mut s = 0.0;
            for i in 0..k {
                for j in i + 1..k {
                    s += pair[i][j];
                }
            }
            s / (k * (k - 1) / 2) as f64
        }
        TmdMode::SumOfMeans => (0..k).map(|i| pair[i].iter().sum::<f64>() / (k - 1) as f64).sum(),
    })
}

/// Occupancy to compare in the IoU.
#[derive(Clone, Copy, Debug)]
pub enum Occupancy<'a> {
    Shape(&'a ShapeSpec),
    /// Probabilities on the cell-center lattice, z fastest; occupied at >= 0.5.
    Grid { values: &'a [f64], side: usize },
}

impl Occupancy<'_> {
    pub fn occupied(&self, q: &Point3) -> bool {
        match *self {
            Occupancy::Shape(s) => occupancy_oracle(s, q) == 1,
            Occupancy::Grid { values, side } => {
                let cell = |x: f64| (((x + 0.5) * side as f64).floor().max(0.0) as usize).min(side - 1);
                values[(cell(q[0]) * side + cell(q[1])) * side + cell(q[2])] >= 0.5
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iou {
    pub value: f64,
    /// Neither side had any occupied sample; `value` is 1 by convention.
    pub both_empty: bool,
}

fn iou_from(inter: usize, union: usize) -> Iou {
    if union == 0 {
        Iou { value: 1.0, both_empty: true }
    } else {
        Iou { value: inter as f64 / union as f64, both_empty: false }
    }
}

/// Monte-Carlo IoU over uniform points of the unit cube.
pub fn volumetric_iou<R: Rng + ?Sized>(a: Occupancy, b: Occupancy, samples: usize, rng: &mut R) -> Result<Iou> {
    if samples == 0 {
        return Err(Error::Metric("iou needs at least one sample".into()));
    }
    let (mut inter, mut union) = (0, 0);
    for _ in 0..samples {
        let q: Point3 = [0; 3].map(|_| rng.gen_range(-0.5..0.5));
        let (x, y) = (a.occupied(&q), b.occupied(&q));
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(iou_from(inter, union))
}

/// IoU over the cells of two equally sized probability lattices.
pub fn grid_iou(a: &[f64], b: &[f64]) -> Result<Iou> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Metric(format!("grid sizes differ: {} vs {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0, 0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x >= 0.5, *y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(iou_from(inter, union))
}

fn directed_normal_agreement(from: &PointCloud, to: &PointCloud) -> f64 {
    let (fp, fnrm) = (from.positions(), from.normals().unwrap());
    let (tp, tn) = (to.positions(), to.normals().unwrap());
    let tree = KdTree::build(tp);
    let dots: Vec<f64> = fp
        .par_iter()
        .zip(fnrm.par_iter())
        .map(|(p, n)| {
            let m = &tn[tree.nearest(p).unwrap().0];
            (n[0] * m[0] + n[1] * m[1] + n[2] * m[2]).abs()
        })
        .collect();
    mean(&dots)
}

/// Mean |n·n'| between surface samples of each mesh and the nearest sample
/// of the other, averaged over both directions.
pub fn normal_consistency<R: Rng + ?Sized>(a: &TriMesh, b: &TriMesh, samples: usize, rng: &mut R) -> Result<f64> {
    let sa = a.sample_surface(samples, rng)?;
    let sb = b.sample_surface(samples, rng)?;
    Ok(0.5 * (directed_normal_agreement(&sa, &sb) + directed_normal_agreement(&sb, &sa)))
}

fn f_score_with(pred: &PointCloud, truth: &PointCloud, tau: f64, nn: NearestFn) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Metric(format!("tau must be > 0, got {tau}")));
    }
    let (p, t) = (nonempty(pred)?, nonempty(truth)?);
    let frac = |d: Vec<f64>| d.iter().filter(|&&x| x <= tau).count() as f64 / d.len() as f64;
    let precision = frac(nn(p, t));
    let recall = frac(nn(t, p));
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

pub fn f_score(pred: &PointCloud, truth: &PointCloud, tau: f64) -> Result<f64> {
    f_score_with(pred, truth, tau, nearest_distances)
}

pub fn f_score_brute(pred: &PointCloud, truth: &PointCloud, tau: f64) -> Result<f64> {
    f_score_with(pred, truth, tau, brute_nearest_distances)
}

/// One evaluated test item. Metrics that could not be computed are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub item: String,
    pub chamfer_l1: f64,
    pub iou: f64,
    pub normal_consistency: f64,
    pub f_score: f64,
    pub uhd: f64,
    pub tmd: f64,
}

pub const REPORT_HEADER: &str = "item,chamfer_l1,iou,normal_consistency,f_score,uhd,tmd";

/// CSV with one row per item and a final `mean` row over finite values.
pub fn report_csv(rows: &[EvalRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{REPORT_HEADER}");
    let cols = |r: &EvalRow| [r.chamfer_l1, r.iou, r.normal_consistency, r.f_score, r.uhd, r.tmd];
    for r in rows {
        let c = cols(r);
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.item, c[0], c[1], c[2], c[3], c[4], c[5]);
    }
    let means: Vec<String> = (0..6)
        .map(|k| {
            let v: Vec<f64> = rows.iter().map(|r| cols(r)[k]).filter(|x| x.is_finite()).collect();
            if v.is_empty() { "NaN".to_string() } else { mean(&v).to_string() }
        })
        .collect();
    let _ = writeln!(s, "mean,{}", means.join(","));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ShapeSpec;
    use crate::decoder::grid_points;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(p: Vec<Point3>) -> PointCloud {
        PointCloud::from_positions(p).unwrap()
    }

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        cloud((0..n).map(|_| [0; 3].map(|_| rng.gen_range(-0.5..0.5))).collect())
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for inst in 0..200 {
            let n = 1 + inst % 97;
            let pts = random_cloud(n, &mut rng);
            // Some duplicates and a coarse lattice make ties common.
            let mut p = pts.positions().to_vec();
            if inst % 3 == 0 {
                p.iter_mut().for_each(|x| *x = x.map(|v| (v * 4.0).round() / 4.0));
            }
            let tree = KdTree::build(&p);
            for _ in 0..20 {
                let q: Point3 = [0; 3].map(|_| rng.gen_range(-0.6..0.6));
                let (ti, td) = tree.nearest(&q).unwrap();
                let (bi, bd) = brute_nearest(&p, &q).unwrap();
                assert_eq!(td, bd);
                assert_eq!(ti, bi);
            }
        }
        assert!(KdTree::build(&[]).nearest(&[0.0; 3]).is_none());
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(vec![[0.0; 3]]);
        let b = cloud(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_l1(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer_l1(&a, &a).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = (random_cloud(100, &mut rng), random_cloud(100, &mut rng));
        assert_eq!(chamfer_l1(&x, &y).unwrap(), chamfer_l1_brute(&x, &y).unwrap());
        assert_eq!(chamfer_l1(&x, &y).unwrap(), chamfer_l1(&y, &x).unwrap());
    }

    #[test]
    fn uhd_examples() {
        let p = cloud(vec![[0.0; 3]]);
        let c = [cloud(vec![[1.0, 0.0, 0.0]]), cloud(vec![[0.0, 3.0, 0.0]])];
        assert_eq!(uhd(&p, &c, UhdMode::MaxMin).unwrap(), 2.0);
        let sup = cloud(vec![[0.0; 3], [0.3, 0.2, 0.1]]);
        assert_eq!(uhd(&p, std::slice::from_ref(&sup), UhdMode::MaxMin).unwrap(), 0.0);
        // Not symmetric.
        assert!(uhd(&sup, std::slice::from_ref(&p), UhdMode::MaxMin).unwrap() > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let part = random_cloud(60, &mut rng);
        let comps: Vec<_> = (0..4).map(|_| random_cloud(80, &mut rng)).collect();
        for mode in [UhdMode::MaxMin, UhdMode::MeanMin] {
            assert_eq!(uhd(&part, &comps, mode).unwrap(), uhd_brute(&part, &comps, mode).unwrap());
        }
        assert!(uhd(&part, &[], UhdMode::MaxMin).is_err());
    }

    #[test]
    fn tmd_examples() {
        let a = cloud(vec![[0.0; 3]]);
        let b = cloud(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(tmd(&[a.clone(), b.clone()], TmdMode::MeanPairs).unwrap(), 1.0);
        assert_eq!(tmd(&[a.clone(), a.clone(), a.clone()], TmdMode::MeanPairs).unwrap(), 0.0);
        assert!(tmd(std::slice::from_ref(&a), TmdMode::MeanPairs).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c: Vec<_> = (0..3).map(|_| random_cloud(50, &mut rng)).collect();
        let d = |i: usize, j: usize| chamfer_l1_brute(&c[i], &c[j]).unwrap();
        let expect = (d(0, 1) + d(0, 2) + d(1, 2)) / 3.0;
        assert!((tmd(&c, TmdMode::MeanPairs).unwrap() - expect).abs() < 1e-15);
        let sum = (d(0, 1) + d(0, 2)) / 2.0 + (d(0, 1) + d(1, 2)) / 2.0 + (d(0, 2) + d(1, 2)) / 2.0;
        assert!((tmd(&c, TmdMode::SumOfMeans).unwrap() - sum).abs() < 1e-14);
    }

    #[test]
    fn iou_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = ShapeSpec::cuboid([-0.1, 0.0, 0.0], [0.2; 3]);
        let b = ShapeSpec::cuboid([0.1, 0.0, 0.0], [0.2; 3]);
        let same = volumetric_iou(Occupancy::Shape(&a), Occupancy::Shape(&a), 1000, &mut rng).unwrap();
        assert_eq!(same.value, 1.0);
        let off = volumetric_iou(Occupancy::Shape(&a), Occupancy::Shape(&b), 1_000_000, &mut rng).unwrap();
        assert!((off.value - 1.0 / 3.0).abs() < 0.01, "{}", off.value);

        let s = ShapeSpec::sphere([0.0; 3], 0.4);
        let grid: Vec<f64> = grid_points(64).iter().map(|p| occupancy_oracle(&s, p) as f64).collect();
        let g = volumetric_iou(
            Occupancy::Shape(&s),
            Occupancy::Grid { values: &grid, side: 64 },
            200_000,
            &mut rng,
        )
        .unwrap();
        assert!(g.value >= 0.97, "{}", g.value);

        let empty = vec![0.0; 8];
        let e = grid_iou(&empty, &empty).unwrap();
        assert!(e.both_empty && e.value == 1.0);
        assert_eq!(grid_iou(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap().value, 0.5);
    }

    fn plane(z: f64, vertical: bool) -> TriMesh {
        let p = |a: f64, b: f64| if vertical { [z, a, b] } else { [a, b, z] };
        TriMesh::new(
            vec![p(-0.4, -0.4), p(0.4, -0.4), p(0.4, 0.4), p(-0.4, 0.4)],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn normal_consistency_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = crate::meshing::marching_cubes(
            &grid_points(32).iter().map(|p| 1.0 / (1.0 + ((crate::pointcloud::norm(p) - 0.3) * 40.0).exp())).collect::<Vec<_>>(),
            32,
            0.5,
        )
        .unwrap();
        assert!(normal_consistency(&s, &s, 5000, &mut rng).unwrap() >= 0.999);
        assert!((normal_consistency(&plane(0.0, false), &plane(0.2, false), 2000, &mut rng).unwrap() - 1.0).abs() < 1e-12);
        assert!(normal_consistency(&plane(0.0, false), &plane(0.0, true), 2000, &mut rng).unwrap() < 0.02);
    }

    #[test]
    fn f_score_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_cloud(200, &mut rng);
        assert_eq!(f_score(&a, &a, 1e-6).unwrap(), 1.0);
        let far = cloud(a.positions().iter().map(|p| [p[0] + 5.0, p[1], p[2]]).collect());
        assert_eq!(f_score(&a, &far, 0.01).unwrap(), 0.0);
        let b = random_cloud(150, &mut rng);
        for tau in [0.01, 0.05, 0.1] {
            assert_eq!(f_score(&a, &b, tau).unwrap(), f_score_brute(&a, &b, tau).unwrap());
        }
        assert!(f_score(&a, &b, 0.0).is_err());
    }

    #[test]
    fn report_has_summary_row() {
        let row = |item: &str, v: f64| EvalRow {
            item: item.into(),
            chamfer_l1: v,
            iou: v,
            normal_consistency: v,
            f_score: v,
            uhd: v,
            tmd: f64::NAN,
        };
        let csv = report_csv(&[row("a", 1.0), row("b", 3.0)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "mean,2,2,2,2,2,NaN");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn metrics_ignore_point_order(seed in 0u64..1000, n in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(n, &mut rng);
            let b = random_cloud(n + 3, &mut rng);
            let mut rev = a.positions().to_vec();
            rev.reverse();
            let ar = cloud(rev);
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + x.abs());
            prop_assert!(close(chamfer_l1(&a, &b).unwrap(), chamfer_l1(&ar, &b).unwrap()));
            prop_assert_eq!(uhd(&a, std::slice::from_ref(&b), UhdMode::MaxMin).unwrap(), uhd(&ar, std::slice::from_ref(&b), UhdMode::MaxMin).unwrap());
            prop_assert_eq!(f_score(&a, &b, 0.1).unwrap(), f_score(&ar, &b, 0.1).unwrap());
            let t = tmd(&[a.clone(), b.clone()], TmdMode::MeanPairs).unwrap();
            prop_assert!(t > 0.0);
        }
    }
}

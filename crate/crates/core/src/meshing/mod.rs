//! Marching cubes over occupancy lattices, vertex normals, OBJ files and
//! surface sampling.

mod table;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::{norm, Point3, PointCloud};
use table::TRIANGLE_TABLE;

pub const DEFAULT_ISO: f64 = 0.5;
pub const DEFAULT_GRID: usize = 64;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Vec<Point3>,
    /// Vertices whose star had zero area; their normal is +z.
    pub flat_vertices: usize,
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Where a crossing vertex lives: strictly inside a lattice edge, or snapped
/// onto a lattice point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum VertexKey {
    Edge(usize, u8),
    Point(usize),
}

struct Lattice<'a> {
    values: &'a [f64],
    dims: [usize; 3],
    origin: f64,
    spacing: f64,
}

impl Lattice<'_> {
    fn flat(&self, p: [usize; 3]) -> usize {
        (p[0] * self.dims[1] + p[1]) * self.dims[2] + p[2]
    }

    fn unflat(&self, f: usize) -> [usize; 3] {
        let k = f % self.dims[2];
        let j = (f / self.dims[2]) % self.dims[1];
        [f / (self.dims[1] * self.dims[2]), j, k]
    }

    fn coord(&self, p: [usize; 3]) -> Point3 {
        p.map(|i| self.origin + i as f64 * self.spacing)
    }

    fn key(&self, a: [usize; 3], b: [usize; 3], iso: f64) -> VertexKey {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (vl, vh) = (self.values[self.flat(lo)], self.values[self.flat(hi)]);
        let t = (iso - vl) / (vh - vl);
        if t <= 1e-9 {
            VertexKey::Point(self.flat(lo))
        } else if t >= 1.0 - 1e-9 {
            VertexKey::Point(self.flat(hi))
        } else {
            let axis = (0..3).find(|&d| lo[d] != hi[d]).unwrap() as u8;
            VertexKey::Edge(self.flat(lo), axis)
        }
    }

    fn position(&self, key: VertexKey, iso: f64) -> Point3 {
        match key {
            VertexKey::Point(f) => self.coord(self.unflat(f)),
            VertexKey::Edge(f, axis) => {
                let lo = self.unflat(f);
                let mut hi = lo;
                hi[axis as usize] += 1;
                let (vl, vh) = (self.values[f], self.values[self.flat(hi)]);
                let t = (iso - vl) / (vh - vl);
                let mut p = self.coord(lo);
                p[axis as usize] += t * self.spacing;
                p
            }
        }
    }

    fn extract(&self, iso: f64) -> TriMesh {
        let [nx, ny, nz] = self.dims;
        if nx < 2 || ny < 2 || nz < 2 {
            return TriMesh::default();
        }
        let slabs: Vec<Vec<[VertexKey; 3]>> = (0..nx - 1)
            .into_par_iter()
            .map(|i| {
                let mut tris = Vec::new();
                for j in 0..ny - 1 {
                    for k in 0..nz - 1 {
                        let corner = |c: usize| [i + CORNERS[c][0], j + CORNERS[c][1], k + CORNERS[c][2]];
                        let mut case = 0usize;
                        for c in 0..8 {
                            if self.values[self.flat(corner(c))] < iso {
                                case |= 1 << c;
                            }
                        }
                        for t in TRIANGLE_TABLE[case].chunks(3) {
                            if t[0] < 0 {
                                break;
                            }
                            let key = |e: i8| {
                                let [a, b] = EDGES[e as usize];
                                self.key(corner(a), corner(b), iso)
                            };
                            // Table winding faces the low corners.
                            tris.push([key(t[0]), key(t[1]), key(t[2])]);
                        }
                    }
                }
                tris
            })
            .collect();

        let mut index: HashMap<VertexKey, usize> = HashMap::new();
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for tri in slabs.into_iter().flatten() {
            let f = tri.map(|key| {
                *index.entry(key).or_insert_with(|| {
                    vertices.push(self.position(key, iso));
                    vertices.len() - 1
                })
            });
            if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
                faces.push(f);
            }
        }
        let mut mesh = TriMesh { vertices, faces, normals: Vec::new(), flat_vertices: 0 };
        mesh.drop_unused_vertices();
        mesh.compute_normals();
        mesh
    }
}

/// Extract the `iso` level set of a `side³` lattice laid out like
/// [`crate::decoder::grid_points`] (cell centers of the unit cube, z fastest).
/// Faces are wound so their normals point toward lower values.
pub fn marching_cubes(grid: &[f64], side: usize, iso: f64) -> Result<TriMesh> {
    check_grid(grid, side, iso)?;
    Ok(Lattice {
        values: grid,
        dims: [side; 3],
        origin: 0.5 / side as f64 - 0.5,
        spacing: 1.0 / side as f64,
    }
    .extract(iso))
}

/// Like [`marching_cubes`] but with one ring of empty cells around the
/// lattice, so occupied boundary cells still give a closed surface.
pub fn marching_cubes_closed(grid: &[f64], side: usize, iso: f64) -> Result<TriMesh> {
    check_grid(grid, side, iso)?;
    let p = side + 2;
    let mut padded = vec![0.0; p * p * p];
    for i in 0..side {
        for j in 0..side {
            let src = (i * side + j) * side;
            let dst = ((i + 1) * p + j + 1) * p + 1;
            padded[dst..dst + side].copy_from_slice(&grid[src..src + side]);
        }
    }
    Ok(Lattice {
        values: &padded,
        dims: [p; 3],
        origin: 0.5 / side as f64 - 0.5 - 1.0 / side as f64,
        spacing: 1.0 / side as f64,
    }
    .extract(iso))
}

fn check_grid(grid: &[f64], side: usize, iso: f64) -> Result<()> {
    if side < 2 {
        return Err(Error::InvalidArgument("grid side must be >= 2".into()));
    }
    if grid.len() != side * side * side {
        return Err(Error::InvalidArgument(format!(
            "grid has {} values, expected {}",
            grid.len(),
            side * side * side
        )));
    }
    if !(iso > 0.0 && iso < 1.0) {
        return Err(Error::InvalidArgument(format!("iso level {iso} outside (0, 1)")));
    }
    Ok(())
}

fn cross(a: &Point3, b: &Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        for f in &faces {
            if f.iter().any(|&i| i >= vertices.len()) {
                return Err(Error::InvalidArgument(format!("face {f:?} indexes past {} vertices", vertices.len())));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidArgument(format!("degenerate face {f:?}")));
            }
        }
        let mut mesh = Self { vertices, faces, normals: Vec::new(), flat_vertices: 0 };
        mesh.compute_normals();
        Ok(mesh)
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Twice the area, along the face normal.
    pub fn face_normal(&self, f: usize) -> Point3 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        cross(&sub(&b, &a), &sub(&c, &a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * norm(&self.face_normal(f))
    }

    /// Area-weighted vertex normals; vertices with a zero-area star get +z.
    pub fn compute_normals(&mut self) {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        for f in 0..self.faces.len() {
            let n = self.face_normal(f);
            for &v in &self.faces[f] {
                for a in 0..3 {
                    acc[v][a] += n[a];
                }
            }
        }
        self.flat_vertices = 0;
        self.normals = acc
            .into_iter()
            .map(|n| {
                let l = norm(&n);
                if l > 1e-300 {
                    n.map(|x| x / l)
                } else {
                    self.flat_vertices += 1;
                    [0.0, 0.0, 1.0]
                }
            })
            .collect();
        if self.flat_vertices > 0 {
            log::warn!("{} vertices have a zero-area star; normal set to +z", self.flat_vertices);
        }
    }

    fn drop_unused_vertices(&mut self) {
        let mut used = vec![usize::MAX; self.vertices.len()];
        let mut kept = Vec::new();
        for f in &mut self.faces {
            for i in f.iter_mut() {
                if used[*i] == usize::MAX {
                    used[*i] = kept.len();
                    kept.push(self.vertices[*i]);
                }
                *i = used[*i];
            }
        }
        self.vertices = kept;
    }

    /// Undirected edges with the number of faces using each.
    pub fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut m = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Every edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_counts().len() as i64 + self.faces.len() as i64
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.16e} {:.16e} {:.16e}", v[0], v[1], v[2]);
        }
        for n in &self.normals {
            let _ = writeln!(s, "vn {:.16e} {:.16e} {:.16e}", n[0], n[1], n[2]);
        }
        for f in &self.faces {
            let [a, b, c] = f.map(|i| i + 1);
            let _ = writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}");
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_obj())?;
        Ok(())
    }

    /// Reads `v`, `vn` and triangular `f` lines; other lines are skipped.
    /// Normals are recomputed when the file carries none.
    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut normals = Vec::new();
        let mut faces = Vec::new();
        let bad = |no: usize, what: &str| Error::Parse(format!("obj line {}: {what}", no + 1));
        for (no, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let Some(tag) = it.next() else { continue };
            match tag {
                "v" | "vn" => {
                    let xyz: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>().map_err(|_| bad(no, "bad number")))
                        .collect::<Result<_>>()?;
                    if xyz.len() != 3 {
                        return Err(bad(no, "expected three coordinates"));
                    }
                    let p = [xyz[0], xyz[1], xyz[2]];
                    if tag == "v" { vertices.push(p) } else { normals.push(p) }
                }
                "f" => {
                    let idx: Vec<usize> = it
                        .map(|t| {
                            t.split('/')
                                .next()
                                .and_then(|i| i.parse::<usize>().ok())
                                .filter(|&i| i >= 1)
                                .map(|i| i - 1)
                                .ok_or_else(|| bad(no, "bad face index"))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(bad(no, "only triangles are supported"));
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        let mut mesh = Self::new(vertices, faces)?;
        if !normals.is_empty() {
            if normals.len() != mesh.vertices.len() {
                return Err(Error::Parse("normal count differs from vertex count".into()));
            }
            mesh.normals = normals;
        }
        Ok(mesh)
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        Self::parse_obj(&fs::read_to_string(path)?)
    }

    /// Area-weighted uniform surface points with barycentric normals.
    pub fn sample_surface<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<PointCloud> {
        let areas: Vec<f64> = (0..self.faces.len()).map(|f| self.face_area(f)).collect();
        let dist = WeightedIndex::new(&areas).map_err(|_| Error::EmptyMesh)?;
        let mut positions = Vec::with_capacity(count);
        let mut normals = Vec::with_capacity(count);
        for _ in 0..count {
            let f = dist.sample(rng);
            let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let w = 1.0 - u - v;
            let [a, b, c] = self.faces[f];
            let bary = |x: &[Point3]| -> Point3 {
                [0, 1, 2].map(|k| w * x[a][k] + u * x[b][k] + v * x[c][k])
            };
            positions.push(bary(&self.vertices));
            let n = bary(&self.normals);
            let l = norm(&n);
            normals.push(if l > 1e-12 {
                n.map(|x| x / l)
            } else {
                let fnrm = self.face_normal(f);
                let fl = norm(&fnrm);
                fnrm.map(|x| x / fl)
            });
        }
        PointCloud::new(positions, Some(normals))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::grid_points;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere_grid(side: usize, r: f64) -> Vec<f64> {
        grid_points(side)
            .iter()
            .map(|p| if norm(p) <= r { 1.0 } else { 0.0 })
            .collect()
    }

    fn smooth_sphere(side: usize, r: f64) -> Vec<f64> {
        grid_points(side)
            .iter()
            .map(|p| 1.0 / (1.0 + ((norm(p) - r) * 40.0).exp()))
            .collect()
    }

    #[test]
    fn empty_grid() {
        let m = marching_cubes(&vec![0.1; 512], 8, 0.5).unwrap();
        assert!(m.vertices.is_empty() && m.faces.is_empty());
        assert!(marching_cubes(&[0.0; 8], 2, 1.0).is_err());
        assert!(marching_cubes(&[0.0; 7], 2, 0.5).is_err());
    }

    #[test]
    fn linear_field_gives_exact_plane() {
        let side = 10;
        let grid: Vec<f64> = grid_points(side).iter().map(|p| p[2] + 0.5 - 0.1).collect();
        let m = marching_cubes(&grid, side, 0.5).unwrap();
        assert!(!m.faces.is_empty());
        for v in &m.vertices {
            assert!((v[2] - 0.1).abs() < 1e-12, "{v:?}");
        }
        // Occupancy rises with z, so normals point down.
        for n in &m.normals {
            assert!((n[2] + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let m = marching_cubes(&sphere_grid(64, 0.4), 64, 0.5).unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        let s = marching_cubes(&smooth_sphere(64, 0.4), 64, 0.5).unwrap();
        assert!(s.is_watertight());
        assert_eq!(s.euler_characteristic(), 2);
        for (v, n) in s.vertices.iter().zip(&s.normals) {
            let r = norm(v);
            let cos = (v[0] * n[0] + v[1] * n[1] + v[2] * n[2]) / r;
            assert!(cos > (5.0f64).to_radians().cos(), "{v:?} {n:?}");
            assert!((norm(n) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn vertices_are_welded() {
        let m = marching_cubes(&smooth_sphere(24, 0.3), 24, 0.5).unwrap();
        let mut v = m.vertices.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in v.windows(2) {
            assert!(norm(&sub(&w[0], &w[1])) > 1e-12);
        }
        for f in &m.faces {
            assert!(f.iter().all(|&i| i < m.vertices.len()));
        }
    }

    #[test]
    fn iso_on_lattice_points_does_not_duplicate() {
        let side = 8;
        let grid: Vec<f64> = grid_points(side)
            .iter()
            .map(|p| if norm(p) < 0.2 { 1.0 } else if norm(p) < 0.3 { 0.5 } else { 0.0 })
            .collect();
        let m = marching_cubes(&grid, side, 0.5).unwrap();
        let mut v = m.vertices.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(v.windows(2).all(|w| w[0] != w[1]));
        assert!(m.faces.iter().all(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2]));
    }

    #[test]
    fn padding_closes_boundary_shapes() {
        let side = 8;
        let open = marching_cubes(&vec![1.0; 512], side, 0.5).unwrap();
        assert!(open.is_empty());
        let closed = marching_cubes_closed(&vec![1.0; 512], side, 0.5).unwrap();
        assert!(closed.is_watertight());
        assert_eq!(closed.euler_characteristic(), 2);
        for (v, n) in closed.vertices.iter().zip(&closed.normals) {
            assert!(v.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn single_triangle_normals() {
        let m = TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert!(m.normals.iter().all(|n| *n == [0.0, 0.0, 1.0]));
        assert!(TriMesh::new(vec![[0.0; 3]; 3], vec![[0, 0, 1]]).is_err());
        let flat = TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert_eq!(flat.flat_vertices, 3);
    }

    #[test]
    fn obj_round_trip_is_byte_exact() {
        let m = marching_cubes(&smooth_sphere(12, 0.3), 12, 0.5).unwrap();
        let text = m.to_obj();
        let back = TriMesh::parse_obj(&text).unwrap();
        assert_eq!(back.to_obj(), text);
        assert_eq!(back.vertices, m.vertices);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        m.write_obj(&p).unwrap();
        assert_eq!(TriMesh::read_obj(&p).unwrap(), back);
    }

    #[test]
    fn sampling_stays_in_triangle() {
        let m = TriMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let c = m.sample_surface(5000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in c.positions() {
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-15 && p[2] == 0.0);
        }
        assert!(matches!(
            TriMesh::default().sample_surface(3, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::EmptyMesh)
        ));
    }

    #[test]
    fn sampling_follows_area() {
        // Areas 1.5 and 0.5.
        let m = TriMesh::new(
            vec![[0.0; 3], [3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [10.0, 0.0, 0.0], [11.0, 0.0, 0.0], [10.0, 1.0, 0.0]],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let n = 100_000;
        let c = m.sample_surface(n, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let big = c.positions().iter().filter(|p| p[0] < 5.0).count() as f64;
        let ratio = big / (n as f64 - big);
        assert!((ratio - 3.0).abs() / 3.0 < 0.05, "{ratio}");
    }
}

//! Point clouds and their ASCII XYZ / PLY readers and writers.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point3>,
    normals: Option<Vec<Point3>>,
}

pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn norm(v: &Point3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, normals: Option<Vec<Point3>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite point coordinate".into()));
        }
        if let Some(n) = &normals {
            if n.len() != positions.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} normals for {} points",
                    n.len(),
                    positions.len()
                )));
            }
            if let Some(bad) = n.iter().position(|v| (norm(v) - 1.0).abs() > 1e-6) {
                return Err(Error::InvalidArgument(format!(
                    "normal {bad} is not unit length"
                )));
            }
        }
        Ok(Self { positions, normals })
    }

    pub fn from_positions(positions: Vec<Point3>) -> Result<Self> {
        Self::new(positions, None)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn normals(&self) -> Option<&[Point3]> {
        self.normals.as_deref()
    }

    /// Keep the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let positions = indices.iter().map(|&i| self.positions[i]).collect();
        let normals = self
            .normals
            .as_ref()
            .map(|n| indices.iter().map(|&i| n[i]).collect());
        Self::new(positions, normals)
    }

    pub fn check_unit_cube(&self) -> Result<()> {
        for p in &self.positions {
            if p.iter().any(|v| !(-0.5..=0.5).contains(v)) {
                return Err(Error::OutsideUnitCube {
                    x: p[0],
                    y: p[1],
                    z: p[2],
                });
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// One `x y z [nx ny nz]` line per point, shortest round-trip formatting.
    pub fn write_xyz(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.len() * 64);
        for (i, p) in self.positions.iter().enumerate() {
            out.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
            if let Some(n) = &self.normals {
                out.push_str(&format!(" {} {} {}", n[i][0], n[i][1], n[i][2]));
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_xyz(path: &Path) -> Result<Self> {
        let file = BufReader::new(fs::File::open(path)?);
        let mut positions = Vec::new();
        let mut normals = Vec::new();
        let mut with_normals = None;
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            let has_n = match vals.len() {
                3 => false,
                6 => true,
                n => {
                    return Err(Error::Parse(format!(
                        "line {}: expected 3 or 6 values, got {n}",
                        lineno + 1
                    )))
                }
            };
            if *with_normals.get_or_insert(has_n) != has_n {
                return Err(Error::Parse(format!(
                    "line {}: inconsistent column count",
                    lineno + 1
                )));
            }
            positions.push([vals[0], vals[1], vals[2]]);
            if has_n {
                normals.push([vals[3], vals[4], vals[5]]);
            }
        }
        let normals = (with_normals == Some(true)).then_some(normals);
        Self::new(positions, normals)
    }

    /// Binary little-endian PLY with double-precision vertex properties.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
            self.len()
        );
        if self.normals.is_some() {
            header.push_str("property double nx\nproperty double ny\nproperty double nz\n");
        }
        header.push_str("end_header\n");
        let mut buf = header.into_bytes();
        for (i, p) in self.positions.iter().enumerate() {
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(n) = &self.normals {
                for v in &n[i] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Read a PLY vertex element (binary little-endian or ASCII). Only
    /// x/y/z and optional nx/ny/nz are kept; other scalar properties are skipped.
    pub fn read_ply(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        let mut next_line = |reader: &mut BufReader<fs::File>| -> Result<String> {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Truncated);
            }
            Ok(line.trim().to_owned())
        };
        if next_line(&mut reader)? != "ply" {
            return Err(Error::BadMagic { expected: "ply" });
        }
        let mut binary = None;
        let mut count = 0usize;
        let mut props: Vec<(String, usize)> = Vec::new();
        let mut in_vertex = false;
        let mut elements_before_vertex = false;
        loop {
            let l = next_line(&mut reader)?;
            let tok: Vec<&str> = l.split_whitespace().collect();
            match tok.as_slice() {
                ["end_header"] => break,
                ["format", "binary_little_endian", _] => binary = Some(true),
                ["format", "ascii", _] => binary = Some(false),
                ["format", other, _] => {
                    return Err(Error::Parse(format!("unsupported PLY format {other}")))
                }
                ["element", "vertex", n] => {
                    count = n.parse().map_err(|_| Error::Parse("bad vertex count".into()))?;
                    in_vertex = true;
                }
                ["element", ..] => {
                    if !in_vertex {
                        elements_before_vertex = true;
                    }
                    in_vertex = false;
                }
                ["property", "list", ..] if in_vertex => {
                    return Err(Error::Parse("list properties on vertices unsupported".into()))
                }
                ["property", ty, name] if in_vertex => {
                    let size = match *ty {
                        "char" | "uchar" | "int8" | "uint8" => 1,
                        "short" | "ushort" | "int16" | "uint16" => 2,
                        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
                        "double" | "float64" => 8,
                        other => return Err(Error::Parse(format!("unknown PLY type {other}"))),
                    };
                    props.push((format!("{ty}:{name}"), size));
                }
                _ => {}
            }
        }
        if elements_before_vertex {
            return Err(Error::Parse("vertex must be the first PLY element".into()));
        }
        let binary = binary.ok_or_else(|| Error::Parse("missing PLY format line".into()))?;
        let index_of = |n: &str| props.iter().position(|(p, _)| p.ends_with(&format!(":{n}")));
        let (xi, yi, zi) = match (index_of("x"), index_of("y"), index_of("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(Error::Parse("PLY vertices need x, y, z".into())),
        };
        let normal_idx = match (index_of("nx"), index_of("ny"), index_of("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
        if binary {
            let stride: usize = props.iter().map(|p| p.1).sum();
            let mut raw = vec![0u8; stride * count];
            reader.read_exact(&mut raw).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Truncated,
                _ => Error::Io(e),
            })?;
            for chunk in raw.chunks(stride) {
                let mut off = 0;
                let mut row = Vec::with_capacity(props.len());
                for (p, size) in &props {
                    let b = &chunk[off..off + size];
                    let ty = p.split(':').next().unwrap();
                    row.push(decode_scalar(ty, b));
                    off += size;
                }
                rows.push(row);
            }
        } else {
            let mut rest = String::new();
            reader.read_to_string(&mut rest)?;
            let mut lines = rest.lines().filter(|l| !l.trim().is_empty());
            for _ in 0..count {
                let l = lines.next().ok_or(Error::Truncated)?;
                let row = l
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse(e.to_string()))?;
                if row.len() < props.len() {
                    return Err(Error::Truncated);
                }
                rows.push(row);
            }
        }
        let positions = rows.iter().map(|r| [r[xi], r[yi], r[zi]]).collect();
        let normals = normal_idx.map(|(a, b, c)| rows.iter().map(|r| [r[a], r[b], r[c]]).collect());
        Self::new(positions, normals)
    }

    /// Read by extension: `.ply`, otherwise XYZ.
    pub fn read(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => Self::read_ply(path),
            _ => Self::read_xyz(path),
        }
    }
}

fn decode_scalar(ty: &str, b: &[u8]) -> f64 {
    match ty {
        "char" | "int8" => b[0] as i8 as f64,
        "uchar" | "uint8" => b[0] as f64,
        "short" | "int16" => i16::from_le_bytes([b[0], b[1]]) as f64,
        "ushort" | "uint16" => u16::from_le_bytes([b[0], b[1]]) as f64,
        "int" | "int32" => i32::from_le_bytes(b.try_into().unwrap()) as f64,
        "uint" | "uint32" => u32::from_le_bytes(b.try_into().unwrap()) as f64,
        "float" | "float32" => f32::from_le_bytes(b.try_into().unwrap()) as f64,
        _ => f64::from_le_bytes(b.try_into().unwrap()),
    }
}

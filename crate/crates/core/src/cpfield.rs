//! CP-factored feature volumes: reconstruction, merging with observed
//! features, and trilinear sampling.

use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::{FeatureVolume, LocalFeatures};
use crate::error::{Error, Result};
use crate::pointcloud::Point3;

/// Three axis factor arrays `[H,R,d]`, `[W,R,d]`, `[D,R,d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSet {
    pub rank: usize,
    pub channels: usize,
    pub x: Tensor,
    pub y: Tensor,
    pub z: Tensor,
}

impl FactorSet {
    pub fn new(x: Tensor, y: Tensor, z: Tensor) -> Result<Self> {
        let ok = [&x, &y, &z].iter().all(|t| t.rank() == 3)
            && x.shape()[1..] == y.shape()[1..]
            && y.shape()[1..] == z.shape()[1..];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "FactorSet",
                lhs: x.shape().to_vec(),
                rhs: [y.shape(), z.shape()].concat(),
            });
        }
        Ok(Self {
            rank: x.shape()[1],
            channels: x.shape()[2],
            x,
            y,
            z,
        })
    }

    pub fn resolution(&self) -> [usize; 3] {
        [self.x.shape()[0], self.y.shape()[0], self.z.shape()[0]]
    }
}

/// Sum over rank of the outer product of the three factors, per channel.
pub fn reconstruct_volume(f: &FactorSet) -> Result<FeatureVolume> {
    let mut g = Graph::new();
    let (x, y, z) = (g.constant(f.x.clone()), g.constant(f.y.clone()), g.constant(f.z.clone()));
    let v = g.cp_volume(x, y, z)?;
    let [h, w, d] = f.resolution();
    FeatureVolume::new(g.value(v).clone(), vec![true; h * w * d])
}

/// `[pred | partial | mask]` along channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedVolume {
    pub resolution: [usize; 3],
    pub channels: usize,
    pub data: Tensor,
}

impl MergedVolume {
    /// Channel block `[start, start+len)` as an `[H,W,D,len]` tensor.
    pub fn channel_block(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.channels || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "channel block {start}+{len} outside {}",
                self.channels
            )));
        }
        let c = self.channels;
        let data = self
            .data
            .data()
            .chunks(c)
            .flat_map(|v| v[start..start + len].iter().copied())
            .collect();
        let [h, w, d] = self.resolution;
        Tensor::new(vec![h, w, d, len], data)
    }
}

pub fn merge(pred: &FeatureVolume, partial: &FeatureVolume) -> Result<MergedVolume> {
    if pred.resolution != partial.resolution || pred.channels != partial.channels {
        return Err(Error::ShapeMismatch {
            op: "merge",
            lhs: pred.data.shape().to_vec(),
            rhs: partial.data.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let p = g.constant(pred.data.clone());
    let lf = LocalFeatures {
        resolution: partial.resolution,
        volume: g.constant(partial.data.clone()),
        mask: partial.mask_tensor(),
    };
    let m = merge_vars(&mut g, p, &lf)?;
    Ok(MergedVolume {
        resolution: pred.resolution,
        channels: 2 * pred.channels + 1,
        data: g.value(m).clone(),
    })
}

/// Graph form of [`merge`].
pub fn merge_vars(g: &mut Graph, pred: Var, partial: &LocalFeatures) -> Result<Var> {
    let ps = g.shape(pred).to_vec();
    let qs = g.shape(partial.volume).to_vec();
    if ps != qs {
        return Err(Error::ShapeMismatch {
            op: "merge",
            lhs: ps,
            rhs: qs,
        });
    }
    let mask = g.constant(partial.mask.clone());
    g.concat(&[pred, partial.volume, mask], 3)
}

fn axis_stencil(q: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let u = ((q + 0.5) * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, i0 + 1, u - i0 as f64)
}

/// Eight flat voxel indices and trilinear weights for `q`, with voxel
/// centers at `(i + 0.5)/n − 0.5`. Queries beyond the outer centers clamp.
pub fn trilinear_stencil(q: &Point3, resolution: [usize; 3]) -> Result<([usize; 8], [f64; 8])> {
    if q.iter().any(|v| !(-0.5..=0.5).contains(v)) {
        return Err(Error::OutsideUnitCube {
            x: q[0],
            y: q[1],
            z: q[2],
        });
    }
    let [h, w, d] = resolution;
    let sx = axis_stencil(q[0], h);
    let sy = axis_stencil(q[1], w);
    let sz = axis_stencil(q[2], d);
    let mut rows = [0; 8];
    let mut weights = [0.0; 8];
    for c in 0..8 {
        let (bx, by, bz) = (c >> 2 & 1, c >> 1 & 1, c & 1);
        let i = if bx == 0 { sx.0 } else { sx.1 };
        let j = if by == 0 { sy.0 } else { sy.1 };
        let k = if bz == 0 { sz.0 } else { sz.1 };
        let wx = if bx == 0 { 1.0 - sx.2 } else { sx.2 };
        let wy = if by == 0 { 1.0 - sy.2 } else { sy.2 };
        let wz = if bz == 0 { 1.0 - sz.2 } else { sz.2 };
        rows[c] = (i * w + j) * d + k;
        weights[c] = wx * wy * wz;
    }
    Ok((rows, weights))
}

/// Sample a `[H,W,D,C]` graph volume at each query, giving `[Q,C]`.
pub fn sample_features(g: &mut Graph, volume: Var, queries: &[Point3]) -> Result<Var> {
    let s = g.shape(volume).to_vec();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "sample_features",
            lhs: s,
            rhs: vec![4],
        });
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no query points".into()));
    }
    let res = [s[0], s[1], s[2]];
    let mut rows = Vec::with_capacity(queries.len() * 8);
    let mut weights = Vec::with_capacity(queries.len() * 8);
    for q in queries {
        let (r, w) = trilinear_stencil(q, res)?;
        rows.extend_from_slice(&r);
        weights.extend_from_slice(&w);
    }
    let flat = g.reshape(volume, &[s[0] * s[1] * s[2], s[3]])?;
    g.weighted_gather(flat, &rows, &weights, 8)
}

/// Feature vector of `v` at `q`.
pub fn sample_feature(v: &MergedVolume, q: &Point3) -> Result<Vec<f64>> {
    let (rows, weights) = trilinear_stencil(q, v.resolution)?;
    let c = v.channels;
    let mut out = vec![0.0; c];
    for (r, w) in rows.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(&v.data.data()[r * c..(r + 1) * c]) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Latent counts `(factored, dense)` for one latent vector of size `d_z`
/// per axis cell versus per voxel.
pub fn latent_budget(resolution: [usize; 3], d_z: usize) -> (usize, usize) {
    let [h, w, d] = resolution;
    ((h + w + d) * d_z, h * w * d * d_z)
}

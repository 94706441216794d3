//! Point encoders: a global max-pooled code and a voxel-pooled feature volume.

use rand::Rng;

use crate::autodiff::{Graph, Reduce, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{affine, init_params, mlp_forward, Activation, MlpSpec, ParamStore};
use crate::pointcloud::{Point3, PointCloud};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Length of the global code.
    pub global_dim: usize,
    pub hidden: usize,
    /// Channels of the local feature volume.
    pub channels: usize,
    pub resolution: [usize; 3],
    pub pooling: Reduce,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            global_dim: 128,
            hidden: 64,
            channels: 32,
            resolution: [32; 3],
            pooling: Reduce::Max,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    fn global_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(
            vec![3, self.hidden, self.global_dim],
            self.activation,
            Activation::Identity,
        )
    }

    pub fn voxels(&self) -> usize {
        self.resolution.iter().product()
    }
}

pub const GLOBAL_PREFIX: &str = "enc.global";
pub const LOCAL_PRE: &str = "enc.local.pre.0";
pub const LOCAL_POST: &str = "enc.local.post.0";

pub fn init_encoder<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<()> {
    init_params(store, GLOBAL_PREFIX, &cfg.global_spec()?, rng)?;
    let pre = MlpSpec::new(vec![3, cfg.hidden], cfg.activation, cfg.activation)?;
    init_params(store, "enc.local.pre", &pre, rng)?;
    let post = MlpSpec::new(
        vec![2 * cfg.hidden, cfg.channels],
        Activation::Identity,
        Activation::Identity,
    )?;
    init_params(store, "enc.local.post", &post, rng)
}

/// Global code of a cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalCode {
    pub c: Vec<f64>,
}

/// Dense `[H,W,D,d]` feature grid plus its occupancy mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub resolution: [usize; 3],
    pub channels: usize,
    pub data: Tensor,
    pub mask: Vec<bool>,
}

impl FeatureVolume {
    pub fn new(data: Tensor, mask: Vec<bool>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || mask.len() != s[0] * s[1] * s[2] {
            return Err(Error::ShapeMismatch {
                op: "FeatureVolume",
                lhs: s.to_vec(),
                rhs: vec![mask.len()],
            });
        }
        Ok(Self {
            resolution: [s[0], s[1], s[2]],
            channels: s[3],
            data,
            mask,
        })
    }

    pub fn voxel(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let [_, w, d] = self.resolution;
        let at = ((i * w + j) * d + k) * self.channels;
        &self.data.data()[at..at + self.channels]
    }

    pub fn mask_tensor(&self) -> Tensor {
        let [h, w, d] = self.resolution;
        let m = self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_parts(vec![h, w, d, 1], m)
    }
}

/// A feature volume living in a graph.
#[derive(Clone, Debug)]
pub struct LocalFeatures {
    pub resolution: [usize; 3],
    /// `[H,W,D,d]`
    pub volume: Var,
    /// `[H,W,D,1]` of 0/1.
    pub mask: Tensor,
}

/// Voxel containing `p`; coordinates of exactly 0.5 land in the last cell.
pub fn voxel_index(p: &Point3, resolution: [usize; 3]) -> Result<[usize; 3]> {
    let mut idx = [0; 3];
    for a in 0..3 {
        let v = p[a];
        if !(-0.5..=0.5).contains(&v) {
            return Err(Error::OutsideUnitCube {
                x: p[0],
                y: p[1],
                z: p[2],
            });
        }
        let n = resolution[a];
        idx[a] = (((v + 0.5) * n as f64).floor().max(0.0) as usize).min(n - 1);
    }
    Ok(idx)
}

pub fn flat_voxel(idx: [usize; 3], resolution: [usize; 3]) -> usize {
    (idx[0] * resolution[1] + idx[1]) * resolution[2] + idx[2]
}

fn points_tensor(cloud: &PointCloud) -> Tensor {
    let data = cloud.positions().iter().flatten().copied().collect();
    Tensor::from_parts(vec![cloud.len(), 3], data)
}

/// `[1, n]` pooled global code.
pub fn encode_global(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    cloud: &PointCloud,
) -> Result<Var> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let pts = g.constant(points_tensor(cloud));
    let per_point = mlp_forward(g, &cfg.global_spec()?, store, GLOBAL_PREFIX, pts)?;
    g.scatter_reduce(per_point, &vec![0; cloud.len()], 1, cfg.pooling)
}

pub fn encode_global_value(
    store: &ParamStore,
    cfg: &EncoderConfig,
    cloud: &PointCloud,
) -> Result<GlobalCode> {
    let mut g = Graph::new();
    let c = encode_global(&mut g, store, cfg, cloud)?;
    Ok(GlobalCode {
        c: g.value(c).data().to_vec(),
    })
}

/// Per-point features pooled into the voxels of `cfg.resolution`.
///
/// Each point gets `h = act(W1 p)`; `h` is pooled per voxel and fed back
/// (`[h | pool(h)]`), projected to `channels`, then pooled again.
pub fn encode_local(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    cloud: &PointCloud,
) -> Result<LocalFeatures> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if cfg.resolution.iter().any(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "resolution extents must be >= 2, got {:?}",
            cfg.resolution
        )));
    }
    let res = cfg.resolution;
    let cells = cfg.voxels();
    let voxel_of = cloud
        .positions()
        .iter()
        .map(|p| voxel_index(p, res).map(|i| flat_voxel(i, res)))
        .collect::<Result<Vec<_>>>()?;

    let pts = g.constant(points_tensor(cloud));
    let h = affine(g, store, LOCAL_PRE, pts)?;
    let h = cfg.activation.apply(g, h);
    let pooled = g.scatter_reduce(h, &voxel_of, cells, cfg.pooling)?;
    let back = g.gather_rows(pooled, &voxel_of)?;
    let cat = g.concat(&[h, back], 1)?;
    let f = affine(g, store, LOCAL_POST, cat)?;
    let vol = g.scatter_reduce(f, &voxel_of, cells, cfg.pooling)?;
    let volume = g.reshape(vol, &[res[0], res[1], res[2], cfg.channels])?;

    let mut mask = vec![0.0; cells];
    for &v in &voxel_of {
        mask[v] = 1.0;
    }
    Ok(LocalFeatures {
        resolution: res,
        volume,
        mask: Tensor::from_parts(vec![res[0], res[1], res[2], 1], mask),
    })
}

pub fn encode_local_value(
    store: &ParamStore,
    cfg: &EncoderConfig,
    cloud: &PointCloud,
) -> Result<FeatureVolume> {
    let mut g = Graph::new();
    let lf = encode_local(&mut g, store, cfg, cloud)?;
    let mask = lf.mask.data().iter().map(|&m| m > 0.5).collect();
    FeatureVolume::new(g.value(lf.volume).clone(), mask)
}

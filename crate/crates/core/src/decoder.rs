//! Occupancy decoder: `[q | feature] -> probability`, with the input fed
//! again into the second layer.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor, Var};
use crate::cpfield::{sample_features, MergedVolume};
use crate::error::{Error, Result};
use crate::hvae::FieldVar;
use crate::model::ModelConfig;
use crate::nn::{affine, init_layer, ParamStore};
use crate::pointcloud::Point3;

pub const DECODER_PREFIX: &str = "dec";
const CHUNK: usize = 4096;

/// A completion detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub enum CompletedField {
    Volume(MergedVolume),
    Code(Vec<f64>),
}

impl CompletedField {
    pub fn from_var(g: &Graph, cfg: &ModelConfig, field: &FieldVar) -> Result<Self> {
        Ok(match field {
            FieldVar::Volume(v) => {
                let data = g.value(*v).clone();
                MergedVolume {
                    resolution: [cfg.resolution; 3],
                    channels: data.shape()[3],
                    data,
                }
            }
            .into(),
            FieldVar::Code(v) => CompletedField::Code(g.value(*v).data().to_vec()),
        })
    }

    pub fn to_var(&self, g: &mut Graph) -> Result<FieldVar> {
        Ok(match self {
            CompletedField::Volume(m) => FieldVar::Volume(g.constant(m.data.clone())),
            CompletedField::Code(c) => {
                FieldVar::Code(g.constant(Tensor::new(vec![1, c.len()], c.clone())?))
            }
        })
    }

    pub fn volume(&self) -> Option<&MergedVolume> {
        match self {
            CompletedField::Volume(m) => Some(m),
            CompletedField::Code(_) => None,
        }
    }
}

impl From<MergedVolume> for CompletedField {
    fn from(m: MergedVolume) -> Self {
        CompletedField::Volume(m)
    }
}

pub fn init_decoder<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let (inp, h) = (cfg.decoder_input(), cfg.decoder_hidden);
    let widths = [(inp, h), (h + inp, h), (h, h), (h, 1)];
    for (l, (a, b)) in widths.into_iter().enumerate() {
        init_layer(store, &format!("{DECODER_PREFIX}.{l}"), a, b, rng)?;
    }
    Ok(())
}

/// Logits `[Q, 1]` of the decoder on `[q | feature]` rows.
pub fn decode_rows(g: &mut Graph, cfg: &ModelConfig, store: &ParamStore, input: Var) -> Result<Var> {
    let width = g.shape(input)[1];
    if width != cfg.decoder_input() {
        return Err(Error::ShapeMismatch {
            op: "occupancy",
            lhs: g.shape(input).to_vec(),
            rhs: vec![cfg.decoder_input()],
        });
    }
    let act = cfg.activation;
    let h = affine(g, store, "dec.0", input)?;
    let h = act.apply(g, h);
    let skip = g.concat(&[h, input], 1)?;
    let h = affine(g, store, "dec.1", skip)?;
    let h = act.apply(g, h);
    let h = affine(g, store, "dec.2", h)?;
    let h = act.apply(g, h);
    affine(g, store, "dec.3", h)
}

/// Decoder inputs for `queries` against `field`.
pub fn decoder_inputs(g: &mut Graph, field: &FieldVar, queries: &[Point3]) -> Result<Var> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no query points".into()));
    }
    let q: Vec<f64> = queries.iter().flatten().copied().collect();
    let qv = g.constant(Tensor::new(vec![queries.len(), 3], q)?);
    let feats = match field {
        FieldVar::Volume(v) => sample_features(g, *v, queries)?,
        FieldVar::Code(c) => {
            if queries.iter().flatten().any(|v| !(-0.5..=0.5).contains(v)) {
                return Err(Error::InvalidArgument("query outside the unit cube".into()));
            }
            let w = g.shape(*c)[1];
            g.broadcast_to(*c, &[queries.len(), w])?
        }
    };
    g.concat(&[qv, feats], 1)
}

pub fn occupancy_logits(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    field: &FieldVar,
    queries: &[Point3],
) -> Result<Var> {
    let input = decoder_inputs(g, field, queries)?;
    decode_rows(g, cfg, store, input)
}

/// Occupancy probabilities, evaluated in independent chunks.
pub fn occupancy(
    cfg: &ModelConfig,
    store: &ParamStore,
    field: &CompletedField,
    queries: &[Point3],
) -> Result<Vec<f64>> {
    let parts = queries
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Graph::new();
            let f = field.to_var(&mut g)?;
            let logits = occupancy_logits(&mut g, cfg, store, &f, chunk)?;
            let p = g.logistic(logits);
            Ok(g.value(p).data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Cell centers of a `side³` lattice over the unit cube, `k` fastest.
pub fn grid_points(side: usize) -> Vec<Point3> {
    let c = |i: usize| (i as f64 + 0.5) / side as f64 - 0.5;
    let mut pts = Vec::with_capacity(side * side * side);
    for i in 0..side {
        for j in 0..side {
            for k in 0..side {
                pts.push([c(i), c(j), c(k)]);
            }
        }
    }
    pts
}

pub fn occupancy_grid(
    cfg: &ModelConfig,
    store: &ParamStore,
    field: &CompletedField,
    side: usize,
) -> Result<Vec<f64>> {
    if side < 8 {
        return Err(Error::InvalidArgument(format!("grid side must be >= 8, got {side}")));
    }
    occupancy(cfg, store, field, &grid_points(side))
}

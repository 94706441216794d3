//! Inference and evaluation on top of a trained model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::{
    item_rng, occupancy_oracle, sample_surface, views_for, DataItem, ShapeSpec, StoolTop, ViewMode, PARTIAL_POINTS,
};
use crate::decoder::{grid_points, occupancy, occupancy_grid, CompletedField};
use crate::error::{Error, Result};
use crate::hvae::Mode;
use crate::meshing::{marching_cubes_closed, TriMesh};
use crate::metrics::{chamfer_l1, f_score, normal_consistency, tmd, uhd, volumetric_iou, EvalRow, Occupancy};
use crate::model::complete_value;
use crate::nn::ParamStore;
use crate::pointcloud::{Point3, PointCloud};
use crate::train::{has_posterior, load_checkpoint};
use std::path::Path;

/// Side of the lattice used to mesh the analytic reference shape.
pub const REFERENCE_GRID: usize = 64;
/// Samples per mesh for normal consistency.
pub const NORMAL_SAMPLES: usize = 10_000;

/// Trained weights together with the config they were trained under.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub store: ParamStore,
}

/// Rng of the `index`-th draw under `seed` for a given purpose.
fn purpose_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

const SURFACE: u64 = 1;
const IOU: u64 = 2;
const NORMALS: u64 = 3;
const VIEW: u64 = 4;

impl Model {
    pub fn load(path: &Path) -> Result<Self> {
        let (store, cfg) = load_checkpoint(path)?;
        Ok(Self { cfg, store })
    }

    pub fn has_posterior(&self) -> bool {
        has_posterior(&self.cfg.model, &self.store)
    }

    /// Occupancy probabilities on the evaluation lattice.
    pub fn grid(&self, field: &CompletedField) -> Result<Vec<f64>> {
        occupancy_grid(&self.cfg.model, &self.store, field, self.cfg.grid)
    }

    /// Closed iso-surface of `grid`; an empty surface is an error.
    pub fn extract(&self, grid: &[f64]) -> Result<TriMesh> {
        let mesh = marching_cubes_closed(grid, self.cfg.grid, self.cfg.iso)?;
        if mesh.faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        Ok(mesh)
    }

    /// Prior-mode completion field of `partial` with latent seed `seed`.
    pub fn field(&self, partial: &PointCloud, seed: u64) -> Result<CompletedField> {
        Ok(complete_value(&self.cfg.model, &self.store, partial, None, Mode::Prior, seed)?.0)
    }

    /// Occupancy lattice of [`Model::field`].
    pub fn complete(&self, partial: &PointCloud, seed: u64) -> Result<Vec<f64>> {
        self.grid(&self.field(partial, seed)?)
    }

    /// IoU of `field` against the analytic shape over Monte-Carlo points in
    /// the visible region of `view` cut at `mid`. The field is queried at
    /// the points themselves, so no lattice resolution enters.
    pub fn visible_iou(
        &self,
        field: &CompletedField,
        spec: &ShapeSpec,
        view: ViewMode,
        mid: &Point3,
        samples: usize,
        seed: u64,
    ) -> Result<f64> {
        let points = visible_points(view, mid, samples, seed)?;
        let probs = occupancy(&self.cfg.model, &self.store, field, &points)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (q, p) in points.iter().zip(&probs) {
            let (a, b) = (*p >= 0.5, occupancy_oracle(spec, q) == 1);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// `count` completions with seeds `seed..seed+count`.
    pub fn completions(&self, partial: &PointCloud, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        (0..count as u64)
            .map(|i| self.complete(partial, seed + i))
            .collect()
    }

    /// Deterministic auto-encoding of a complete cloud through the posterior mean.
    pub fn reconstruct(&self, complete: &PointCloud) -> Result<Vec<f64>> {
        if !self.has_posterior() {
            return Err(Error::MissingPosterior);
        }
        let (field, _) = complete_value(
            &self.cfg.model,
            &self.store,
            complete,
            Some(complete),
            Mode::PosteriorMean,
            0,
        )?;
        self.grid(&field)
    }

    /// Surface samples of the extracted mesh, or `None` if it is empty.
    pub fn surface(&self, grid: &[f64], seed: u64, index: u64) -> Result<Option<PointCloud>> {
        match self.extract(grid) {
            Ok(mesh) => {
                let mut rng = purpose_rng(seed, SURFACE, index);
                Ok(Some(mesh.sample_surface(self.cfg.completion_points, &mut rng)?))
            }
            Err(Error::EmptyMesh) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Metrics for one test item. Fidelity columns are NaN when the model
    /// cannot auto-encode; diversity columns are NaN when fewer than two
    /// completions produced a surface.
    pub fn evaluate_item(&self, name: &str, index: u64, item: &DataItem, partial: &PointCloud, seed: u64) -> Result<EvalRow> {
        let cfg = &self.cfg;
        let clouds: Vec<PointCloud> = self
            .completions(partial, cfg.samples, seed)?
            .iter()
            .enumerate()
            .map(|(s, grid)| self.surface(grid, seed, index * 1000 + s as u64))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let (uhd_v, tmd_v) = if clouds.len() >= 2 {
            (uhd(partial, &clouds, cfg.uhd_mode)?, tmd(&clouds, cfg.tmd_mode)?)
        } else if clouds.len() == 1 {
            (uhd(partial, &clouds, cfg.uhd_mode)?, f64::NAN)
        } else {
            (f64::NAN, f64::NAN)
        };
        let mut row = EvalRow {
            item: name.to_string(),
            chamfer_l1: f64::NAN,
            iou: f64::NAN,
            normal_consistency: f64::NAN,
            f_score: f64::NAN,
            uhd: uhd_v,
            tmd: tmd_v,
        };
        if !self.has_posterior() {
            return Ok(row);
        }
        let grid = self.reconstruct(&item.complete)?;
        let mut rng = purpose_rng(seed, IOU, index);
        row.iou = volumetric_iou(
            Occupancy::Grid { values: &grid, side: cfg.grid },
            Occupancy::Shape(&item.spec),
            cfg.iou_samples,
            &mut rng,
        )?
        .value;
        if let Ok(mesh) = self.extract(&grid) {
            let mut rng = purpose_rng(seed, SURFACE, index * 1000 + 999);
            let pred = mesh.sample_surface(cfg.completion_points, &mut rng)?;
            row.chamfer_l1 = chamfer_l1(&pred, &item.complete)?;
            row.f_score = f_score(&pred, &item.complete, cfg.tau)?;
            let reference = reference_mesh(&item.spec)?;
            let mut rng = purpose_rng(seed, NORMALS, index);
            row.normal_consistency = normal_consistency(&mesh, &reference, NORMAL_SAMPLES, &mut rng)?;
        }
        Ok(row)
    }

    /// One row per item. When `view` differs from the view the items were
    /// generated with, partial inputs are regenerated from the item's shape.
    pub fn evaluate(&self, items: &[DataItem], view: Option<ViewMode>, seed: u64) -> Result<Vec<EvalRow>> {
        items
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let partial = match view {
                    Some(v) if v != self.cfg.view => {
                        let mut rng = purpose_rng(seed, VIEW, i as u64);
                        views_for(item.spec.clone(), v, &mut rng)?
                            .ok_or(Error::KeptRegionTooSmall { kept: 0, needed: PARTIAL_POINTS })?
                            .partial
                    }
                    _ => item.partial.clone(),
                };
                self.evaluate_item(&format!("{i:05}"), i as u64, item, &partial, seed)
            })
            .collect()
    }
}

/// Mesh of the analytic shape on the reference lattice.
pub fn reference_mesh(spec: &ShapeSpec) -> Result<TriMesh> {
    let grid: Vec<f64> = grid_points(REFERENCE_GRID)
        .iter()
        .map(|q| occupancy_oracle(spec, q) as f64)
        .collect();
    let mesh = marching_cubes_closed(&grid, REFERENCE_GRID, 0.5)?;
    if mesh.faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    Ok(mesh)
}

/// Middle of the cloud's bounding box, the cut used for partial views.
pub fn view_middle(cloud: &PointCloud) -> Point3 {
    let (lo, hi) = cloud.bounds();
    [0, 1, 2].map(|a| (lo[a] + hi[a]) / 2.0)
}

/// Uniform unit-cube points in the visible region of `view` cut at `mid`.
pub fn visible_points(view: ViewMode, mid: &Point3, samples: usize, seed: u64) -> Result<Vec<Point3>> {
    if samples == 0 {
        return Err(Error::Metric("iou needs at least one sample".into()));
    }
    let mut rng = purpose_rng(seed, IOU, u64::MAX);
    let mut points = Vec::with_capacity(samples);
    while points.len() < samples {
        let q: Point3 = [0; 3].map(|_| rng.gen_range(-0.5..0.5));
        if view.visible(&q, mid) {
            points.push(q);
        }
    }
    Ok(points)
}

/// Which stool top each completion is closer to by Chamfer-L1 against
/// dense samples of both modes.
pub fn assign_modes(spec: &ShapeSpec, clouds: &[PointCloud], seed: u64) -> Result<Vec<StoolTop>> {
    let mut rng = item_rng(seed, 0);
    let mut reference = |mode| -> Result<PointCloud> {
        let s = spec
            .with_mode(mode)
            .ok_or_else(|| Error::InvalidArgument("shape has no top modes".into()))?;
        sample_surface(&s, crate::data::COMPLETE_POINTS, &mut rng)
    };
    let round = reference(StoolTop::Round)?;
    let square = reference(StoolTop::Square)?;
    clouds
        .iter()
        .map(|c| {
            let r = chamfer_l1(c, &round)?;
            let s = chamfer_l1(c, &square)?;
            Ok(if r <= s { StoolTop::Round } else { StoolTop::Square })
        })
        .collect()
}

//! Finite-difference gradient checks over the model's composite functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor, Var};
use crate::cpfield::{merge_vars, sample_features};
use crate::data::{uniform_queries, views_for, ShapeSpec, ViewMode};
use crate::decoder::occupancy_logits;
use crate::encoder::{encode_global, encode_local};
use crate::error::Result;
use crate::hvae::{self, FieldVar, Mode};
use crate::model::{encode_input, init_model, ModelConfig};
use crate::nn::{grad_check_params, ParamStore};
use crate::pointcloud::PointCloud;
use crate::train::{item_loss, BatchItem};

/// Relative error threshold a component must stay below.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-4;
const QUERIES: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentError {
    pub component: &'static str,
    pub params: usize,
    pub max_rel_error: f64,
}

impl ComponentError {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Fixed random weights for reducing a tensor to a scalar.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

fn subset(store: &ParamStore, keep: impl Fn(&str) -> bool) -> ParamStore {
    let mut s = store.clone();
    s.retain(keep);
    s
}

/// Model weights with every entry jittered, so that zero-initialized
/// layers do not hide gradient paths.
fn jittered_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let base = init_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut store = ParamStore::new();
    for (name, t) in base.iter() {
        let data = t
            .data()
            .iter()
            .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        store.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(store)
}

fn check(
    component: &'static str,
    checked: &ParamStore,
    f: impl FnMut(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<ComponentError> {
    let max_rel_error = grad_check_params(checked, f, EPS)?;
    Ok(ComponentError {
        component,
        params: checked.num_scalars(),
        max_rel_error,
    })
}

/// Check encoder, CP field, latent hierarchy, decoder and the full ELBO of
/// `cfg` at a jittered initialization.
pub fn check_components(cfg: &ModelConfig, seed: u64) -> Result<Vec<ComponentError>> {
    cfg.validate()?;
    let store = jittered_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let item = loop {
        let spec = ShapeSpec::sphere([0.0; 3], 0.3);
        if let Some(item) = views_for(spec, ViewMode::Bottom, &mut rng)? {
            break item;
        }
    };
    // Small clouds keep the check fast; point count does not change the rules.
    let input = PointCloud::from_positions(item.partial.positions()[..64].to_vec())?;
    let target = PointCloud::from_positions(item.complete.positions()[..128].to_vec())?;
    let queries = uniform_queries(QUERIES, &mut rng);
    let labels: Vec<u8> = queries
        .iter()
        .map(|q| crate::data::occupancy_oracle(&item.spec, q))
        .collect();
    let enc = cfg.encoder();
    let mut out = Vec::new();

    let enc_params = subset(&store, |n| n.starts_with("enc."));
    out.push(check("encoder", &enc_params, |g, _| {
        let mut total = Vec::new();
        if cfg.variant.uses_global_code() {
            let c = encode_global(g, &store, &enc, &input)?;
            total.push(probe(g, c, 1)?);
        }
        if cfg.variant.uses_volume() {
            let l = encode_local(g, &store, &enc, &input)?;
            total.push(probe(g, l.volume, 2)?);
        }
        let mut acc = total[0];
        for &t in &total[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    })?);

    if cfg.variant.uses_volume() {
        // The CP field has no weights of its own; check it through the
        // local encoder that feeds the merge.
        let res = cfg.encoder().resolution;
        let factor_seed: Vec<Tensor> = (0..3)
            .map(|a| {
                let mut r = ChaCha8Rng::seed_from_u64(seed + 10 + a as u64);
                let n = res[a] * cfg.channels * cfg.rank;
                let v = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
                Tensor::new(vec![res[a], cfg.rank, cfg.channels], v)
            })
            .collect::<Result<_>>()?;
        let mut factors = ParamStore::new();
        for (a, t) in factor_seed.into_iter().enumerate() {
            factors.insert(format!("factor.{a}"), t)?;
        }
        let local_params = subset(&store, |n| n.starts_with("enc.local"));
        let mut both = factors.clone();
        for (n, t) in local_params.iter() {
            both.insert(n, t.clone())?;
        }
        out.push(check("cpfield", &both, |g, _| {
            let f: Vec<Var> = (0..3)
                .map(|a| factors.bind(g, &format!("factor.{a}")))
                .collect::<Result<_>>()?;
            let vol = g.cp_volume(f[0], f[1], f[2])?;
            let partial = encode_local(g, &store, &enc, &input)?;
            let merged = merge_vars(g, vol, &partial)?;
            let feats = sample_features(g, merged, &queries)?;
            probe(g, feats, 3)
        })?);
    }

    let latent_params = subset(&store, |n| !n.starts_with("dec."));
    out.push(check("hvae", &latent_params, |g, _| {
        let x = encode_input(g, cfg, &store, &input)?;
        let y = encode_input(g, cfg, &store, &target)?;
        let mut r = ChaCha8Rng::seed_from_u64(seed + 20);
        let c = hvae::complete(g, cfg, &store, &x, Some(&y), Mode::Posterior, &mut r)?;
        let field = match c.field {
            FieldVar::Volume(v) | FieldVar::Code(v) => v,
        };
        let p = probe(g, field, 4)?;
        g.add(p, c.kl)
    })?);

    let dec_params = subset(&store, |n| n.starts_with("dec."));
    let width = cfg.decoder_input() - 3;
    let field_value = {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 30);
        if cfg.variant.uses_volume() {
            let n = cfg.resolution;
            let v = (0..n * n * n * width).map(|_| r.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![n, n, n, width], v)?
        } else {
            let v = (0..width).map(|_| r.gen_range(-1.0..1.0)).collect();
            Tensor::new(vec![1, width], v)?
        }
    };
    out.push(check("decoder", &dec_params, |g, _| {
        let f = g.constant(field_value.clone());
        let field = if cfg.variant.uses_volume() {
            FieldVar::Volume(f)
        } else {
            FieldVar::Code(f)
        };
        let logits = occupancy_logits(g, cfg, &store, &field, &queries)?;
        crate::train::bce(g, logits, &labels)
    })?);

    let batch = BatchItem {
        input: input.clone(),
        target: target.clone(),
        queries: queries.clone(),
        labels: labels.clone(),
    };
    out.push(check("elbo", &store, |g, _| {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 40);
        Ok(item_loss(g, cfg, &store, &batch, 0.5, &mut r)?.loss)
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn micro_components_pass() {
        let rows = check_components(&ModelConfig::micro(), 0).unwrap();
        assert_eq!(rows.len(), 5);
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn global_variant_skips_cp_field() {
        let cfg = ModelConfig {
            variant: Variant::Global,
            ..ModelConfig::micro()
        };
        let rows = check_components(&cfg, 1).unwrap();
        assert!(rows.iter().all(|r| r.component != "cpfield"));
        assert!(rows.iter().all(ComponentError::passed), "{rows:?}");
    }
}

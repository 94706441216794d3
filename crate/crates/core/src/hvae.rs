//! Conditional latent hierarchy over three axis sequences, KL terms, and the
//! factor heads.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor, Var};
use crate::cpfield::{merge_vars, FactorSet};
use crate::encoder::LocalFeatures;
use crate::error::{Error, Result};
use crate::model::{EncodedInput, ModelConfig, Variant};
use crate::nn::{mlp_forward, ParamStore};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Prior,
    Posterior,
    PosteriorMean,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Prior => "prior",
            Mode::Posterior => "posterior",
            Mode::PosteriorMean => "posterior-mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "prior" => Mode::Prior,
            "posterior" => Mode::Posterior,
            "posterior-mean" => Mode::PosteriorMean,
            other => return Err(Error::Config(format!("unknown mode `{other}`"))),
        })
    }

    fn needs_target(self) -> bool {
        self != Mode::Prior
    }
}

/// Diagonal Gaussian as values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(Error::ShapeMismatch {
                op: "GaussianParams",
                lhs: mu.shape().to_vec(),
                rhs: log_var.shape().to_vec(),
            });
        }
        Ok(Self { mu, log_var })
    }
}

/// Diagonal Gaussian inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct GaussVar {
    pub mu: Var,
    pub log_var: Var,
}

impl GaussVar {
    pub fn value(&self, g: &Graph) -> GaussianParams {
        GaussianParams {
            mu: g.value(self.mu).clone(),
            log_var: g.value(self.log_var).clone(),
        }
    }
}

/// `KL(q || p)` summed over entries.
pub fn kl_diag_gauss(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.mu.shape() != p.mu.shape() || q.log_var.shape() != p.log_var.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_diag_gauss",
            lhs: q.mu.shape().to_vec(),
            rhs: p.mu.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    for i in 0..q.mu.numel() {
        let (mq, lq) = (q.mu.data()[i], q.log_var.data()[i]);
        let (mp, lp) = (p.mu.data()[i], p.log_var.data()[i]);
        let dm = mq - mp;
        total += 0.5 * (lp - lq) + 0.5 * ((lq - lp).exp() + dm * dm * (-lp).exp()) - 0.5;
    }
    Ok(total)
}

/// Graph form of [`kl_diag_gauss`]; returns a scalar.
pub fn kl_vars(g: &mut Graph, q: &GaussVar, p: &GaussVar) -> Result<Var> {
    let dlv = g.sub(p.log_var, q.log_var)?;
    let half_dlv = g.scale(dlv, 0.5);
    let neg = g.scale(dlv, -1.0);
    let ratio = g.exp(neg);
    let dm = g.sub(q.mu, p.mu)?;
    let dm2 = g.mul(dm, dm)?;
    let neg_lp = g.scale(p.log_var, -1.0);
    let inv_vp = g.exp(neg_lp);
    let quad = g.mul(dm2, inv_vp)?;
    let inner = g.add(ratio, quad)?;
    let inner = g.scale(inner, 0.5);
    let t = g.add(half_dlv, inner)?;
    let t = g.add_scalar(t, -0.5);
    Ok(g.sum(t))
}

fn split_gaussian(g: &mut Graph, out: Var, dz: usize) -> Result<GaussVar> {
    let mu = g.slice(out, 1, 0, dz)?;
    let lv = g.slice(out, 1, dz, dz)?;
    let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok(GaussVar { mu, log_var })
}

fn normals<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `μ + σ·ε` with fresh standard normals.
fn reparameterize<R: Rng + ?Sized>(g: &mut Graph, p: &GaussVar, rng: &mut R) -> Result<Var> {
    let eps = normals(g.shape(p.mu), rng);
    let eps = g.constant(eps);
    let half = g.scale(p.log_var, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul(sigma, eps)?;
    g.add(p.mu, noise)
}

fn draw<R: Rng + ?Sized>(
    g: &mut Graph,
    prior: &GaussVar,
    posterior: Option<&GaussVar>,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    match (mode, posterior) {
        (Mode::Prior, _) => reparameterize(g, prior, rng),
        (Mode::Posterior, Some(q)) => reparameterize(g, q, rng),
        (Mode::PosteriorMean, Some(q)) => Ok(q.mu),
        _ => Err(Error::MissingPosterior),
    }
}

/// Mask-weighted mean of a `[n,n,n,d]` volume over the two axes other than
/// `axis`, giving `[n, d]` at full resolution. Slabs without points give 0.
pub fn axis_means(g: &mut Graph, feats: &LocalFeatures, axis: usize) -> Result<Var> {
    let [h, w, dd] = feats.resolution;
    let c = g.shape(feats.volume)[3];
    let (first, second) = match axis {
        0 => (1, 1),
        1 => (0, 1),
        2 => (0, 0),
        _ => return Err(Error::InvalidArgument(format!("axis {axis} out of range"))),
    };
    let s = g.sum_axis(feats.volume, first)?;
    let s = g.sum_axis(s, second)?;
    let len = [h, w, dd][axis];
    let mut counts = vec![0.0; len];
    for i in 0..h {
        for j in 0..w {
            for k in 0..dd {
                counts[[i, j, k][axis]] += feats.mask.data()[(i * w + j) * dd + k];
            }
        }
    }
    let inv: Vec<f64> = counts
        .iter()
        .flat_map(|&n| std::iter::repeat_n(if n > 0.0 { 1.0 / n } else { 0.0 }, c))
        .collect();
    let inv = g.constant(Tensor::from_parts(vec![len, c], inv));
    g.mul(s, inv)
}

/// Average-pool `[len, d]` rows down to `cells` rows.
pub fn pool_cells(g: &mut Graph, x: Var, cells: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if cells == 0 || s.len() != 2 || !s[0].is_multiple_of(cells) {
        return Err(Error::InvalidArgument(format!(
            "cannot pool {} rows into {cells} cells",
            s.first().copied().unwrap_or(0)
        )));
    }
    if s[0] == cells {
        return Ok(x);
    }
    let r = g.reshape(x, &[cells, s[0] / cells, s[1]])?;
    g.mean_axis(r, 1)
}

/// Per-cell conditional features of one axis at `cells` resolution.
pub fn axis_condition(g: &mut Graph, feats: &LocalFeatures, cells: usize, axis: usize) -> Result<Var> {
    let m = axis_means(g, feats, axis)?;
    pool_cells(g, m, cells)
}

/// Conditioners of all three axes at every requested size.
fn conditioners(g: &mut Graph, feats: &LocalFeatures, sizes: &[usize]) -> Result<Vec<[Var; 3]>> {
    let full = [axis_means(g, feats, 0)?, axis_means(g, feats, 1)?, axis_means(g, feats, 2)?];
    sizes
        .iter()
        .map(|&n| {
            Ok([
                pool_cells(g, full[0], n)?,
                pool_cells(g, full[1], n)?,
                pool_cells(g, full[2], n)?,
            ])
        })
        .collect()
}

/// Parent window of cell `j`: `{j/2 − 1, j/2, j/2 + 1}` clamped to `[0, parents)`.
pub fn parent_window(j: usize, parents: usize) -> [usize; 3] {
    let p = j / 2;
    [p.saturating_sub(1), p, (p + 1).min(parents - 1)]
}

/// Latents and distributions of one level, per axis.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub z: [Var; 3],
    pub prior: [GaussVar; 3],
    pub posterior: Option<[GaussVar; 3]>,
}

/// Level-1 latents from the global codes.
pub fn root_layer<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    c_x: Var,
    c_y: Option<Var>,
    mode: Mode,
    rng: &mut R,
) -> Result<LayerVars> {
    if mode.needs_target() && c_y.is_none() {
        return Err(Error::MissingPosterior);
    }
    let n1 = cfg.level_sizes()[0];
    let dz = cfg.latent_dim;
    let split_axes = |g: &mut Graph, out: Var| -> Result<[GaussVar; 3]> {
        let rows = g.reshape(out, &[3 * n1, 2 * dz])?;
        let mut res = Vec::with_capacity(3);
        for a in 0..3 {
            let part = g.slice(rows, 0, a * n1, n1)?;
            res.push(split_gaussian(g, part, dz)?);
        }
        Ok([res[0], res[1], res[2]])
    };
    let p_out = mlp_forward(g, &cfg.root_spec(cfg.global_dim)?, store, "root.prior", c_x)?;
    let prior = split_axes(g, p_out)?;
    let posterior = match c_y {
        Some(c_y) if mode.needs_target() => {
            let both = g.concat(&[c_x, c_y], 1)?;
            let q_out = mlp_forward(g, &cfg.root_spec(2 * cfg.global_dim)?, store, "root.post", both)?;
            Some(split_axes(g, q_out)?)
        }
        _ => None,
    };
    let mut z = Vec::with_capacity(3);
    for a in 0..3 {
        z.push(draw(g, &prior[a], posterior.as_ref().map(|q| &q[a]), mode, rng)?);
    }
    Ok(LayerVars {
        z: [z[0], z[1], z[2]],
        prior,
        posterior,
    })
}

/// Level `level` (1-based index into the sizes, so level ≥ 1) from the
/// level below: each cell sees its parent window plus its conditioners and
/// adds a sampled residual to its parent latent.
#[allow(clippy::too_many_arguments)]
pub fn stochastic_layer<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    level: usize,
    z_prev: &[Var; 3],
    cond_x: &[Var; 3],
    cond_y: Option<&[Var; 3]>,
    mode: Mode,
    rng: &mut R,
) -> Result<LayerVars> {
    if mode.needs_target() && cond_y.is_none() {
        return Err(Error::MissingPosterior);
    }
    let dz = cfg.latent_dim;
    let mut z = Vec::with_capacity(3);
    let mut prior = Vec::with_capacity(3);
    let mut posterior = Vec::with_capacity(3);
    for a in 0..3 {
        let parents = g.shape(z_prev[a])[0];
        let n = g.shape(cond_x[a])[0];
        if n != 2 * parents || cond_y.is_some_and(|c| g.shape(c[a])[0] != n) {
            return Err(Error::ShapeMismatch {
                op: "stochastic_layer",
                lhs: g.shape(z_prev[a]).to_vec(),
                rhs: g.shape(cond_x[a]).to_vec(),
            });
        }
        let windows: Vec<[usize; 3]> = (0..n).map(|j| parent_window(j, parents)).collect();
        let taps: Vec<Var> = (0..3)
            .map(|t| {
                let rows: Vec<usize> = windows.iter().map(|w| w[t]).collect();
                g.gather_rows(z_prev[a], &rows)
            })
            .collect::<Result<_>>()?;
        let parent = taps[1];
        let window = g.concat(&taps, 1)?;
        let label = cfg.axis_label(a);

        let p_in = g.concat(&[window, cond_x[a]], 1)?;
        let spec = cfg.trunk(3 * dz + cfg.channels, 2 * dz)?;
        let p_out = mlp_forward(g, &spec, store, &format!("lvl{level}.{label}.prior"), p_in)?;
        let p = split_gaussian(g, p_out, dz)?;
        prior.push(p);

        let q = match cond_y {
            Some(cy) if mode.needs_target() => {
                let q_in = g.concat(&[window, cond_x[a], cy[a]], 1)?;
                let spec = cfg.trunk(3 * dz + 2 * cfg.channels, 2 * dz)?;
                let q_out = mlp_forward(g, &spec, store, &format!("lvl{level}.{label}.post"), q_in)?;
                Some(split_gaussian(g, q_out, dz)?)
            }
            _ => None,
        };
        let residual = draw(g, &p, q.as_ref(), mode, rng)?;
        z.push(g.add(parent, residual)?);
        if let Some(q) = q {
            posterior.push(q);
        }
    }
    Ok(LayerVars {
        z: [z[0], z[1], z[2]],
        prior: [prior[0], prior[1], prior[2]],
        posterior: (posterior.len() == 3).then(|| [posterior[0], posterior[1], posterior[2]]),
    })
}

/// Single stochastic layer of the local variant: no parent, no global code.
fn local_layer<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    cond_x: &[Var; 3],
    cond_y: Option<&[Var; 3]>,
    mode: Mode,
    rng: &mut R,
) -> Result<LayerVars> {
    let dz = cfg.latent_dim;
    let d = cfg.channels;
    let mut z = Vec::new();
    let mut prior = Vec::new();
    let mut posterior = Vec::new();
    for a in 0..3 {
        let label = cfg.axis_label(a);
        let out = mlp_forward(g, &cfg.trunk(d, 2 * dz)?, store, &format!("local.{label}.prior"), cond_x[a])?;
        let p = split_gaussian(g, out, dz)?;
        let q = match cond_y {
            Some(cy) if mode.needs_target() => {
                let q_in = g.concat(&[cond_x[a], cy[a]], 1)?;
                let out = mlp_forward(g, &cfg.trunk(2 * d, 2 * dz)?, store, &format!("local.{label}.post"), q_in)?;
                Some(split_gaussian(g, out, dz)?)
            }
            _ => None,
        };
        z.push(draw(g, &p, q.as_ref(), mode, rng)?);
        prior.push(p);
        if let Some(q) = q {
            posterior.push(q);
        }
    }
    Ok(LayerVars {
        z: [z[0], z[1], z[2]],
        prior: [prior[0], prior[1], prior[2]],
        posterior: (posterior.len() == 3).then(|| [posterior[0], posterior[1], posterior[2]]),
    })
}

/// Map last-level latents `[n, d_z]` per axis into `[n, R, d]` factors.
pub fn decode_factors(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    z_last: &[Var; 3],
) -> Result<[Var; 3]> {
    let spec = cfg.head_spec()?;
    let mut out = Vec::with_capacity(3);
    for a in 0..3 {
        let n = g.shape(z_last[a])[0];
        if n != cfg.resolution {
            return Err(Error::ShapeMismatch {
                op: "decode_factors",
                lhs: g.shape(z_last[a]).to_vec(),
                rhs: vec![cfg.resolution],
            });
        }
        let f = mlp_forward(g, &spec, store, &format!("head.{}", cfg.axis_label(a)), z_last[a])?;
        out.push(g.reshape(f, &[n, cfg.rank, cfg.channels])?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Factor values out of a graph.
pub fn factor_values(g: &Graph, f: &[Var; 3]) -> Result<FactorSet> {
    FactorSet::new(g.value(f[0]).clone(), g.value(f[1]).clone(), g.value(f[2]).clone())
}

/// Decoder-ready field of one completion.
#[derive(Clone, Debug)]
pub enum FieldVar {
    /// `[H,W,D,2d+1]` merged volume.
    Volume(Var),
    /// `[1, g + n]` code for the global decoder.
    Code(Var),
}

#[derive(Clone, Debug)]
pub struct Completion {
    pub field: FieldVar,
    /// Summed KL; a zero constant in prior mode.
    pub kl: Var,
    /// Coarse to fine.
    pub levels: Vec<LayerVars>,
    pub factors: Option<[Var; 3]>,
}

/// One stochastic level as values.
#[derive(Clone, Debug)]
pub struct LevelValues {
    pub cells: usize,
    pub z: Vec<Tensor>,
    pub prior: Vec<GaussianParams>,
    pub posterior: Option<Vec<GaussianParams>>,
}

#[derive(Clone, Debug)]
pub struct LatentHierarchy {
    pub levels: Vec<LevelValues>,
}

impl LatentHierarchy {
    pub fn total_cells(&self) -> usize {
        self.levels.iter().map(|l| l.cells * l.z.len()).sum()
    }
}

impl Completion {
    pub fn hierarchy(&self, g: &Graph) -> LatentHierarchy {
        LatentHierarchy {
            levels: self
                .levels
                .iter()
                .map(|l| LevelValues {
                    cells: g.shape(l.z[0])[0],
                    z: l.z.iter().map(|&v| g.value(v).clone()).collect(),
                    prior: l.prior.iter().map(|p| p.value(g)).collect(),
                    posterior: l.posterior.map(|q| q.iter().map(|p| p.value(g)).collect()),
                })
                .collect(),
        }
    }
}

fn level_kl(g: &mut Graph, layer: &LayerVars) -> Result<Option<Var>> {
    let Some(post) = &layer.posterior else {
        return Ok(None);
    };
    let mut total = None;
    for a in 0..3 {
        let k = kl_vars(g, &post[a], &layer.prior[a])?;
        total = Some(match total {
            None => k,
            Some(t) => g.add(t, k)?,
        });
    }
    Ok(total)
}

/// Run the latent model on encoded inputs and produce a decoder-ready field.
pub fn complete<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    x: &EncodedInput,
    y: Option<&EncodedInput>,
    mode: Mode,
    rng: &mut R,
) -> Result<Completion> {
    if mode.needs_target() && y.is_none() {
        return Err(Error::MissingPosterior);
    }
    let y = if mode.needs_target() { y } else { None };
    let missing = |what: &str| Error::InvalidArgument(format!("encoded input lacks {what}"));
    let mut levels = Vec::new();
    let mut factors = None;
    let field = match cfg.variant {
        Variant::Hierarchical | Variant::Local => {
            let fx = x.local.as_ref().ok_or_else(|| missing("local features"))?;
            let sizes = cfg.level_sizes();
            let cx = conditioners(g, fx, &sizes)?;
            let cy = match y {
                Some(y) => Some(conditioners(g, y.local.as_ref().ok_or_else(|| missing("local features"))?, &sizes)?),
                None => None,
            };
            if cfg.variant == Variant::Hierarchical {
                let c_x = x.global.ok_or_else(|| missing("global code"))?;
                let c_y = y.map(|y| y.global.ok_or_else(|| missing("global code"))).transpose()?;
                levels.push(root_layer(g, cfg, store, c_x, c_y, mode, rng)?);
                for level in 1..sizes.len() {
                    let prev = levels[level - 1].z;
                    let layer = stochastic_layer(
                        g,
                        cfg,
                        store,
                        level,
                        &prev,
                        &cx[level],
                        cy.as_ref().map(|c| &c[level]),
                        mode,
                        rng,
                    )?;
                    levels.push(layer);
                }
            } else {
                levels.push(local_layer(g, cfg, store, &cx[0], cy.as_ref().map(|c| &c[0]), mode, rng)?);
            }
            let last = levels.last().unwrap().z;
            let f = decode_factors(g, cfg, store, &last)?;
            let pred = g.cp_volume(f[0], f[1], f[2])?;
            factors = Some(f);
            FieldVar::Volume(merge_vars(g, pred, fx)?)
        }
        Variant::Global | Variant::GlobalFactors => {
            let c_x = x.global.ok_or_else(|| missing("global code"))?;
            let gdim = cfg.global_latent_dim;
            let p_out = mlp_forward(g, &cfg.root_spec(cfg.global_dim)?, store, "root.prior", c_x)?;
            let prior = split_gaussian(g, p_out, gdim)?;
            let posterior = match y {
                Some(y) => {
                    let c_y = y.global.ok_or_else(|| missing("global code"))?;
                    let both = g.concat(&[c_x, c_y], 1)?;
                    let q_out = mlp_forward(g, &cfg.root_spec(2 * cfg.global_dim)?, store, "root.post", both)?;
                    Some(split_gaussian(g, q_out, gdim)?)
                }
                None => None,
            };
            let z = draw(g, &prior, posterior.as_ref(), mode, rng)?;
            levels.push(LayerVars {
                z: [z, z, z],
                prior: [prior; 3],
                posterior: posterior.map(|q| [q; 3]),
            });
            if cfg.variant == Variant::Global {
                FieldVar::Code(g.concat(&[z, c_x], 1)?)
            } else {
                let fx = x.local.as_ref().ok_or_else(|| missing("local features"))?;
                let n = cfg.resolution;
                let zb = g.broadcast_to(z, &[n, gdim])?;
                let mut eye = vec![0.0; n * n];
                for j in 0..n {
                    eye[j * n + j] = 1.0;
                }
                let onehot = g.constant(Tensor::from_parts(vec![n, n], eye));
                let inp = g.concat(&[zb, onehot], 1)?;
                let spec = cfg.head_spec()?;
                let mut f = Vec::with_capacity(3);
                for a in 0..3 {
                    let out = mlp_forward(g, &spec, store, &format!("head.{}", cfg.axis_label(a)), inp)?;
                    f.push(g.reshape(out, &[n, cfg.rank, cfg.channels])?);
                }
                let f = [f[0], f[1], f[2]];
                let pred = g.cp_volume(f[0], f[1], f[2])?;
                factors = Some(f);
                FieldVar::Volume(merge_vars(g, pred, fx)?)
            }
        }
    };

    let kl = if matches!(cfg.variant, Variant::Global | Variant::GlobalFactors) {
        // one latent, recorded three times for uniform access
        match &levels[0].posterior {
            Some(q) => Some(kl_vars(g, &q[0], &levels[0].prior[0])?),
            None => None,
        }
    } else {
        let mut total = None;
        for layer in &levels {
            if let Some(k) = level_kl(g, layer)? {
                total = Some(match total {
                    None => k,
                    Some(t) => g.add(t, k)?,
                });
            }
        }
        total
    };
    let kl = match kl {
        Some(k) => k,
        None => g.scalar(0.0),
    };
    Ok(Completion {
        field,
        kl,
        levels,
        factors,
    })
}

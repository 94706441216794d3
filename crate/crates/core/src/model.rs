//! Model configuration, parameter initialization, and inference entry points.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Reduce, Var};
use crate::decoder::{self, CompletedField};
use crate::encoder::{encode_global, encode_local, init_encoder, EncoderConfig, LocalFeatures};
use crate::error::{Error, Result};
use crate::hvae::{self, Mode};
use crate::nn::{init_params, zero_layer, Activation, MlpSpec, ParamStore};
use crate::pointcloud::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// One global latent; the decoder reads `[q | z | c]` with no volume.
    Global,
    /// One global latent decoded straight into axis factors.
    GlobalFactors,
    /// Only the finest stochastic layer, conditioned on local features.
    Local,
    /// The full coarse-to-fine chain.
    Hierarchical,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Global => "global",
            Variant::GlobalFactors => "global-factors",
            Variant::Local => "local",
            Variant::Hierarchical => "hierarchical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "global" => Variant::Global,
            "global-factors" => Variant::GlobalFactors,
            "local" => Variant::Local,
            "hierarchical" => Variant::Hierarchical,
            other => return Err(Error::Config(format!("unknown variant `{other}`"))),
        })
    }

    pub fn uses_volume(self) -> bool {
        self != Variant::Global
    }

    pub fn uses_global_code(self) -> bool {
        self != Variant::Local
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const AXES: [&str; 3] = ["x", "y", "z"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Cube side of the feature volume, equal to the finest latent level.
    pub resolution: usize,
    pub channels: usize,
    pub rank: usize,
    pub levels: usize,
    pub latent_dim: usize,
    pub global_dim: usize,
    /// Latent size of the two global variants.
    pub global_latent_dim: usize,
    pub encoder_hidden: usize,
    pub layer_hidden: usize,
    pub head_hidden: usize,
    pub decoder_hidden: usize,
    pub pooling: Reduce,
    pub activation: Activation,
    pub share_axes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Hierarchical,
            resolution: 32,
            channels: 32,
            rank: 8,
            levels: 4,
            latent_dim: 16,
            global_dim: 128,
            global_latent_dim: 64,
            encoder_hidden: 64,
            layer_hidden: 64,
            head_hidden: 64,
            decoder_hidden: 128,
            pooling: Reduce::Max,
            activation: Activation::Relu,
            share_axes: false,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checks.
    pub fn micro() -> Self {
        Self {
            resolution: 8,
            channels: 8,
            rank: 2,
            levels: 3,
            latent_dim: 4,
            global_dim: 8,
            global_latent_dim: 4,
            encoder_hidden: 8,
            layer_hidden: 8,
            head_hidden: 8,
            decoder_hidden: 8,
            pooling: Reduce::Mean,
            activation: Activation::Softplus,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("resolution", self.resolution),
            ("channels", self.channels),
            ("rank", self.rank),
            ("levels", self.levels),
            ("latent_dim", self.latent_dim),
            ("global_dim", self.global_dim),
            ("global_latent_dim", self.global_latent_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("layer_hidden", self.layer_hidden),
            ("head_hidden", self.head_hidden),
            ("decoder_hidden", self.decoder_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.resolution < 2 {
            return Err(Error::Config("resolution must be >= 2".into()));
        }
        if self.levels > 1 && !self.resolution.is_multiple_of(1 << (self.levels - 1)) {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^(levels-1) = {}",
                self.resolution,
                1usize << (self.levels - 1)
            )));
        }
        Ok(())
    }

    /// Cells per axis at each stochastic level, coarse to fine.
    pub fn level_sizes(&self) -> Vec<usize> {
        match self.variant {
            Variant::Hierarchical => (0..self.levels)
                .map(|i| self.resolution >> (self.levels - 1 - i))
                .collect(),
            Variant::Local => vec![self.resolution],
            Variant::Global | Variant::GlobalFactors => vec![],
        }
    }

    /// Number of latent cells summed over levels and axes.
    pub fn latent_cells(&self) -> usize {
        3 * self.level_sizes().iter().sum::<usize>()
    }

    /// Scalar latent dimensions that the KL term is normalized by.
    pub fn latent_dims(&self) -> usize {
        match self.variant {
            Variant::Global | Variant::GlobalFactors => self.global_latent_dim,
            _ => self.latent_cells() * self.latent_dim,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            global_dim: self.global_dim,
            hidden: self.encoder_hidden,
            channels: self.channels,
            resolution: [self.resolution; 3],
            pooling: self.pooling,
            activation: self.activation,
        }
    }

    pub(crate) fn axis_label(&self, axis: usize) -> &'static str {
        if self.share_axes {
            "shared"
        } else {
            AXES[axis]
        }
    }

    pub(crate) fn trunk(&self, input: usize, output: usize) -> Result<MlpSpec> {
        MlpSpec::new(
            vec![input, self.layer_hidden, self.layer_hidden, output],
            Activation::Tanh,
            Activation::Identity,
        )
    }

    pub(crate) fn root_spec(&self, input: usize) -> Result<MlpSpec> {
        let out = match self.variant {
            Variant::Global | Variant::GlobalFactors => 2 * self.global_latent_dim,
            _ => {
                let n1 = self.level_sizes()[0];
                6 * n1 * self.latent_dim
            }
        };
        MlpSpec::new(
            vec![input, self.layer_hidden, out],
            Activation::Tanh,
            Activation::Identity,
        )
    }

    pub(crate) fn head_spec(&self) -> Result<MlpSpec> {
        let input = match self.variant {
            Variant::GlobalFactors => self.global_latent_dim + self.resolution,
            _ => self.latent_dim,
        };
        MlpSpec::new(
            vec![input, self.head_hidden, self.rank * self.channels],
            self.activation,
            Activation::Identity,
        )
    }

    /// Width of the decoder input `[q | feature]`.
    pub fn decoder_input(&self) -> usize {
        match self.variant {
            Variant::Global => 3 + self.global_latent_dim + self.global_dim,
            _ => 3 + 2 * self.channels + 1,
        }
    }
}

/// Networks that emit `[mu | log_var]` start with a zero last layer, so
/// prior and posterior agree and the KL is zero at step 0.
fn init_gaussian_net<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: &MlpSpec, rng: &mut R) -> Result<()> {
    init_params(store, prefix, spec, rng)?;
    zero_layer(store, prefix, spec.layers() - 1)
}

/// Initialize every parameter of `cfg` from `seed`, in a fixed order.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_encoder(&mut store, &cfg.encoder(), &mut rng)?;
    let (n, d, dz) = (cfg.global_dim, cfg.channels, cfg.latent_dim);
    let axes: &[usize] = if cfg.share_axes { &[0] } else { &[0, 1, 2] };
    match cfg.variant {
        Variant::Hierarchical => {
            init_gaussian_net(&mut store, "root.prior", &cfg.root_spec(n)?, &mut rng)?;
            init_gaussian_net(&mut store, "root.post", &cfg.root_spec(2 * n)?, &mut rng)?;
            for level in 1..cfg.levels {
                for &a in axes {
                    let label = cfg.axis_label(a);
                    let p = cfg.trunk(3 * dz + d, 2 * dz)?;
                    init_gaussian_net(&mut store, &format!("lvl{level}.{label}.prior"), &p, &mut rng)?;
                    let q = cfg.trunk(3 * dz + 2 * d, 2 * dz)?;
                    init_gaussian_net(&mut store, &format!("lvl{level}.{label}.post"), &q, &mut rng)?;
                }
            }
        }
        Variant::Local => {
            for &a in axes {
                let label = cfg.axis_label(a);
                init_gaussian_net(&mut store, &format!("local.{label}.prior"), &cfg.trunk(d, 2 * dz)?, &mut rng)?;
                init_gaussian_net(&mut store, &format!("local.{label}.post"), &cfg.trunk(2 * d, 2 * dz)?, &mut rng)?;
            }
        }
        Variant::Global | Variant::GlobalFactors => {
            init_gaussian_net(&mut store, "root.prior", &cfg.root_spec(n)?, &mut rng)?;
            init_gaussian_net(&mut store, "root.post", &cfg.root_spec(2 * n)?, &mut rng)?;
        }
    }
    if cfg.variant != Variant::Global {
        for &a in axes {
            init_params(&mut store, &format!("head.{}", cfg.axis_label(a)), &cfg.head_spec()?, &mut rng)?;
        }
    }
    decoder::init_decoder(&mut store, cfg, &mut rng)?;
    Ok(store)
}

/// Encoded view of one cloud.
#[derive(Clone, Debug)]
pub struct EncodedInput {
    /// `[1, n]`
    pub global: Option<Var>,
    pub local: Option<LocalFeatures>,
}

pub fn encode_input(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    cloud: &PointCloud,
) -> Result<EncodedInput> {
    let enc = cfg.encoder();
    let global = if cfg.variant.uses_global_code() {
        Some(encode_global(g, store, &enc, cloud)?)
    } else {
        None
    };
    let local = if cfg.variant.uses_volume() {
        Some(encode_local(g, store, &enc, cloud)?)
    } else {
        None
    };
    Ok(EncodedInput { global, local })
}

/// Complete `partial` outside of any training graph. `complete` is required
/// in the posterior modes. Returns the field and the total KL.
pub fn complete_value(
    cfg: &ModelConfig,
    store: &ParamStore,
    partial: &PointCloud,
    complete: Option<&PointCloud>,
    mode: Mode,
    seed: u64,
) -> Result<(CompletedField, f64)> {
    let mut g = Graph::new();
    let x = encode_input(&mut g, cfg, store, partial)?;
    let y = complete
        .map(|c| encode_input(&mut g, cfg, store, c))
        .transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = hvae::complete(&mut g, cfg, store, &x, y.as_ref(), mode, &mut rng)?;
    let kl = g.value(out.kl).item();
    Ok((CompletedField::from_var(&g, cfg, &out.field)?, kl))
}

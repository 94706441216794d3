//! Flat `key=value` configuration for training, evaluation and extraction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Reduce;
use crate::data::ViewMode;
use crate::error::{Error, Result};
use crate::meshing::{DEFAULT_GRID, DEFAULT_ISO};
use crate::metrics::{TmdMode, UhdMode, COMPLETION_POINTS, DEFAULT_COMPLETIONS, DEFAULT_TAU};
use crate::model::{ModelConfig, Variant};
use crate::nn::Activation;

/// Which cloud the encoder sees during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainInput {
    Partial,
    /// Auto-encoding: the complete cloud is both condition and target.
    Complete,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lambda_max: f64,
    pub warmup: usize,
    pub queries: usize,
    pub seed: u64,
    pub train_input: TrainInput,
    /// Draw new uniform queries every step instead of reusing the stored ones.
    pub fresh_queries: bool,
    /// Evaluate batch items on worker threads; results are reduced in item
    /// order so losses are identical to the sequential path.
    pub parallel_batch: bool,
    pub dataset: String,
    pub checkpoint: String,
    pub checkpoint_every: usize,
    pub log: String,
    /// Iterations already taken by the weights this config travels with.
    pub checkpoint_iter: usize,
    pub samples: usize,
    pub uhd_mode: UhdMode,
    pub tmd_mode: TmdMode,
    pub tau: f64,
    pub iou_samples: usize,
    pub completion_points: usize,
    pub view: ViewMode,
    pub grid: usize,
    pub iso: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch: 8,
            iterations: 20_000,
            lr: 1e-4,
            lambda_max: 0.1,
            warmup: 10_000,
            queries: 2048,
            seed: 0,
            train_input: TrainInput::Partial,
            fresh_queries: true,
            parallel_batch: true,
            dataset: String::new(),
            checkpoint: String::new(),
            checkpoint_every: 1000,
            log: String::new(),
            checkpoint_iter: 0,
            samples: DEFAULT_COMPLETIONS,
            uhd_mode: UhdMode::MaxMin,
            tmd_mode: TmdMode::MeanPairs,
            tau: DEFAULT_TAU,
            iou_samples: 100_000,
            completion_points: COMPLETION_POINTS,
            view: ViewMode::Bottom,
            grid: DEFAULT_GRID,
            iso: DEFAULT_ISO,
        }
    }
}

/// Every accepted key with its meaning, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("variant", "global | global-factors | local | hierarchical"),
    ("resolution", "feature volume side, also the finest latent level"),
    ("channels", "feature channels per voxel"),
    ("rank", "CP rank of the predicted volume"),
    ("levels", "number of latent levels"),
    ("latent_dim", "latent size per cell"),
    ("global_dim", "length of the global shape code"),
    ("global_latent_dim", "latent size of the global variants"),
    ("encoder_hidden", "point MLP width"),
    ("layer_hidden", "latent MLP width"),
    ("head_hidden", "factor head width"),
    ("decoder_hidden", "occupancy decoder width"),
    ("pooling", "max | mean"),
    ("activation", "encoder, factor head and decoder activation: relu | softplus | tanh"),
    ("share_axes", "one latent network for all three axes"),
    ("batch", "items per iteration"),
    ("iterations", "total optimizer steps"),
    ("lr", "Adam learning rate"),
    ("lambda_max", "final KL weight"),
    ("warmup", "steps of the linear KL ramp"),
    ("queries", "occupancy queries per item and step"),
    ("seed", "seed for initialization, batching and sampling"),
    ("train_input", "partial | complete"),
    ("fresh_queries", "new uniform queries each step (false: reuse stored ones)"),
    ("parallel_batch", "evaluate batch items on worker threads"),
    ("dataset", "dataset directory"),
    ("checkpoint", "checkpoint output path"),
    ("checkpoint_every", "steps between checkpoints"),
    ("log", "CSV training log path"),
    ("checkpoint_iter", "steps already taken (set in saved checkpoints)"),
    ("samples", "completions per partial input"),
    ("uhd_mode", "max-min | mean-min"),
    ("tmd_mode", "mean-pairs | sum-of-means"),
    ("tau", "F-score distance threshold"),
    ("iou_samples", "Monte-Carlo points for IoU"),
    ("completion_points", "surface points sampled per extracted mesh"),
    ("view", "bottom | octant | true-octant"),
    ("grid", "marching cubes lattice side"),
    ("iso", "occupancy iso level"),
];

fn reduce_name(r: Reduce) -> &'static str {
    match r {
        Reduce::Max => "max",
        Reduce::Mean => "mean",
    }
}

fn bad(key: &str, v: &str) -> Error {
    Error::Config(format!("{key}: invalid value `{v}`"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v))
}

impl TrainConfig {
    pub fn micro() -> Self {
        Self {
            model: ModelConfig::micro(),
            batch: 1,
            queries: 32,
            ..Self::default()
        }
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.model;
        match key {
            "variant" => m.variant.name().into(),
            "resolution" => m.resolution.to_string(),
            "channels" => m.channels.to_string(),
            "rank" => m.rank.to_string(),
            "levels" => m.levels.to_string(),
            "latent_dim" => m.latent_dim.to_string(),
            "global_dim" => m.global_dim.to_string(),
            "global_latent_dim" => m.global_latent_dim.to_string(),
            "encoder_hidden" => m.encoder_hidden.to_string(),
            "layer_hidden" => m.layer_hidden.to_string(),
            "head_hidden" => m.head_hidden.to_string(),
            "decoder_hidden" => m.decoder_hidden.to_string(),
            "pooling" => reduce_name(m.pooling).into(),
            "activation" => m.activation.name().into(),
            "share_axes" => m.share_axes.to_string(),
            "batch" => self.batch.to_string(),
            "iterations" => self.iterations.to_string(),
            "lr" => self.lr.to_string(),
            "lambda_max" => self.lambda_max.to_string(),
            "warmup" => self.warmup.to_string(),
            "queries" => self.queries.to_string(),
            "seed" => self.seed.to_string(),
            "train_input" => match self.train_input {
                TrainInput::Partial => "partial".into(),
                TrainInput::Complete => "complete".into(),
            },
            "fresh_queries" => self.fresh_queries.to_string(),
            "parallel_batch" => self.parallel_batch.to_string(),
            "dataset" => self.dataset.clone(),
            "checkpoint" => self.checkpoint.clone(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "log" => self.log.clone(),
            "checkpoint_iter" => self.checkpoint_iter.to_string(),
            "samples" => self.samples.to_string(),
            "uhd_mode" => self.uhd_mode.name().into(),
            "tmd_mode" => self.tmd_mode.name().into(),
            "tau" => self.tau.to_string(),
            "iou_samples" => self.iou_samples.to_string(),
            "completion_points" => self.completion_points.to_string(),
            "view" => self.view.name().into(),
            "grid" => self.grid.to_string(),
            "iso" => self.iso.to_string(),
            _ => unreachable!("key list and serializer disagree on `{key}`"),
        }
    }

    /// Apply one `key=value` pair.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "variant" => m.variant = Variant::parse(v).map_err(|_| bad(key, v))?,
            "resolution" => m.resolution = num(key, v)?,
            "channels" => m.channels = num(key, v)?,
            "rank" => m.rank = num(key, v)?,
            "levels" => m.levels = num(key, v)?,
            "latent_dim" => m.latent_dim = num(key, v)?,
            "global_dim" => m.global_dim = num(key, v)?,
            "global_latent_dim" => m.global_latent_dim = num(key, v)?,
            "encoder_hidden" => m.encoder_hidden = num(key, v)?,
            "layer_hidden" => m.layer_hidden = num(key, v)?,
            "head_hidden" => m.head_hidden = num(key, v)?,
            "decoder_hidden" => m.decoder_hidden = num(key, v)?,
            "pooling" => {
                m.pooling = match v {
                    "max" => Reduce::Max,
                    "mean" => Reduce::Mean,
                    _ => return Err(bad(key, v)),
                }
            }
            "activation" => m.activation = Activation::parse(v).map_err(|_| bad(key, v))?,
            "share_axes" => m.share_axes = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lambda_max" => self.lambda_max = num(key, v)?,
            "warmup" => self.warmup = num(key, v)?,
            "queries" => self.queries = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "train_input" => {
                self.train_input = match v {
                    "partial" => TrainInput::Partial,
                    "complete" => TrainInput::Complete,
                    _ => return Err(bad(key, v)),
                }
            }
            "fresh_queries" => self.fresh_queries = num(key, v)?,
            "parallel_batch" => self.parallel_batch = num(key, v)?,
            "dataset" => self.dataset = v.into(),
            "checkpoint" => self.checkpoint = v.into(),
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "log" => self.log = v.into(),
            "checkpoint_iter" => self.checkpoint_iter = num(key, v)?,
            "samples" => self.samples = num(key, v)?,
            "uhd_mode" => self.uhd_mode = UhdMode::parse(v)?,
            "tmd_mode" => self.tmd_mode = TmdMode::parse(v)?,
            "tau" => self.tau = num(key, v)?,
            "iou_samples" => self.iou_samples = num(key, v)?,
            "completion_points" => self.completion_points = num(key, v)?,
            "view" => self.view = ViewMode::parse(v).map_err(|_| bad(key, v))?,
            "grid" => self.grid = num(key, v)?,
            "iso" => self.iso = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse over the defaults. Blank lines and `#` comments are ignored;
    /// repeated or unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
            let k = k.trim();
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(Error::Config(format!("key `{k}` given twice")));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k}={}", self.value_of(k));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let counts = [
            ("batch", self.batch),
            ("iterations", self.iterations),
            ("warmup", self.warmup),
            ("queries", self.queries),
            ("checkpoint_every", self.checkpoint_every),
            ("samples", self.samples),
            ("iou_samples", self.iou_samples),
            ("completion_points", self.completion_points),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be > 0")));
            }
        }
        if self.warmup > self.iterations {
            return Err(Error::Config(format!(
                "warmup ({}) exceeds iterations ({})",
                self.warmup, self.iterations
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::Config("lambda_max must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if self.grid < 2 {
            return Err(Error::Config("grid must be >= 2".into()));
        }
        if !(self.iso > 0.0 && self.iso < 1.0) {
            return Err(Error::Config("iso must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

//! Training objective, KL schedule, the optimization loop and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{TrainConfig, TrainInput};
use crate::data::{occupancy_oracle, uniform_queries, DataItem};
use crate::decoder::occupancy_logits;
use crate::error::{Error, Result};
use crate::hvae::{self, Mode};
use crate::model::{encode_input, init_model, ModelConfig, Variant};
use crate::nn::{Adam, ParamStore};
use crate::pointcloud::{Point3, PointCloud};

pub const PROB_EPS: f64 = 1e-7;
pub const LOG_HEADER: &str = "iter,loss,recon,kl,lambda";

/// KL weight at `step`: a linear ramp to `lambda_max` over `warmup` steps.
pub fn anneal(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.lambda_max * (step as f64 / cfg.warmup as f64).min(1.0)
}

/// Mean binary cross-entropy of `logits` `[Q,1]` against 0/1 labels, with
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let q = labels.len();
    if g.shape(logits) != [q, 1] {
        return Err(Error::ShapeMismatch {
            op: "bce",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![q, 1],
        });
    }
    let o: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let not_o: Vec<f64> = o.iter().map(|v| 1.0 - v).collect();
    let o = g.constant(Tensor::new(vec![q, 1], o)?);
    let not_o = g.constant(Tensor::new(vec![q, 1], not_o)?);
    let p = g.logistic(logits);
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(p);
    let neg = g.scale(p, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_q = g.log(one_minus);
    let a = g.mul(o, log_p)?;
    let b = g.mul(not_o, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// Inputs of one training example.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub input: PointCloud,
    pub target: PointCloud,
    pub queries: Vec<Point3>,
    pub labels: Vec<u8>,
}

impl BatchItem {
    /// Queries for one step: fresh uniform points labelled by the item's
    /// shape, or a subset of the stored queries.
    pub fn draw<R: Rng + ?Sized>(item: &DataItem, cfg: &TrainConfig, rng: &mut R) -> Self {
        let (queries, labels) = if cfg.fresh_queries {
            let q = uniform_queries(cfg.queries, rng);
            let l = q.iter().map(|p| occupancy_oracle(&item.spec, p)).collect();
            (q, l)
        } else if cfg.queries >= item.queries.len() {
            (item.queries.clone(), item.occupancy.clone())
        } else {
            let mut idx = sample_indices(rng, item.queries.len(), cfg.queries).into_vec();
            idx.sort_unstable();
            (idx.iter().map(|&i| item.queries[i]).collect(), idx.iter().map(|&i| item.occupancy[i]).collect())
        };
        Self {
            input: match cfg.train_input {
                TrainInput::Partial => item.partial.clone(),
                TrainInput::Complete => item.complete.clone(),
            },
            target: item.complete.clone(),
            queries,
            labels,
        }
    }
}

pub struct ItemLoss {
    pub loss: Var,
    pub recon: Var,
    /// KL divided by the number of latent dimensions.
    pub kl: Var,
}

/// Loss graph of one item, sampling latents from the posterior.
pub fn item_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    item: &BatchItem,
    lambda: f64,
    rng: &mut R,
) -> Result<ItemLoss> {
    let x = encode_input(g, cfg, store, &item.input)?;
    let y = encode_input(g, cfg, store, &item.target)?;
    let out = hvae::complete(g, cfg, store, &x, Some(&y), Mode::Posterior, rng)?;
    let logits = occupancy_logits(g, cfg, store, &out.field, &item.queries)?;
    let recon = bce(g, logits, &item.labels)?;
    let kl = g.scale(out.kl, 1.0 / cfg.latent_dims() as f64);
    let weighted = g.scale(kl, lambda);
    let loss = g.add(recon, weighted)?;
    Ok(ItemLoss { loss, recon, kl })
}

/// Batch means and summed parameter gradients.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Mean ELBO over `batch`. Item `i` samples with `seeds[i]`; gradients are
/// reduced in item order whether or not items ran in parallel.
pub fn elbo_loss(
    cfg: &ModelConfig,
    store: &ParamStore,
    batch: &[BatchItem],
    seeds: &[u64],
    lambda: f64,
    parallel: bool,
) -> Result<StepOutput> {
    if batch.is_empty() || batch.len() != seeds.len() {
        return Err(Error::InvalidArgument("batch and seeds must be non-empty and equally long".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let scale = 1.0 / batch.len() as f64;
    let run = |(item, &seed): (&BatchItem, &u64)| -> Result<(f64, f64, f64, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = item_loss(&mut g, cfg, store, item, lambda, &mut rng)?;
        let scaled = g.scale(l.loss, scale);
        let grads = g.backward(scaled)?;
        Ok((
            g.value(l.loss).item(),
            g.value(l.recon).item(),
            g.value(l.kl).item(),
            g.named_grads(&grads),
        ))
    };
    let parts: Vec<_> = if parallel {
        batch.par_iter().zip(seeds.par_iter()).map(run).collect::<Result<_>>()?
    } else {
        batch.iter().zip(seeds.iter()).map(run).collect::<Result<_>>()?
    };
    let mut out = StepOutput { loss: 0.0, recon: 0.0, kl: 0.0, grads: BTreeMap::new() };
    for (loss, recon, kl, grads) in parts {
        out.loss += loss * scale;
        out.recon += recon * scale;
        out.kl += kl * scale;
        for (name, g) in grads {
            match out.grads.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.grads.insert(name, g);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub lambda: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.iter, self.loss, self.recon, self.kl, self.lambda)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!("log row `{line}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("log value `{s}`")));
        Ok(Self {
            iter: f[0].parse().map_err(|_| Error::Parse(format!("log iter `{}`", f[0])))?,
            loss: num(f[1])?,
            recon: num(f[2])?,
            kl: num(f[3])?,
            lambda: num(f[4])?,
        })
    }
}

/// Weights plus the number of optimizer steps already taken.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub iter: usize,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self { store: init_model(&cfg.model, cfg.seed)?, iter: 0 })
    }
}

/// Rng of iteration `iter`; resuming at any step replays the same batches.
fn iteration_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e_6c6f_6f70);
    rng.set_stream(iter as u64);
    rng
}

/// The batch and per-item sampling seeds of iteration `iter`.
pub fn batch_for(cfg: &TrainConfig, items: &[DataItem], iter: usize) -> (Vec<BatchItem>, Vec<u64>) {
    let mut rng = iteration_rng(cfg.seed, iter);
    let mut batch = Vec::with_capacity(cfg.batch);
    let mut seeds = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let i = rng.gen_range(0..items.len());
        batch.push(BatchItem::draw(&items[i], cfg, &mut rng));
        seeds.push(rng.gen());
    }
    (batch, seeds)
}

/// Run steps `state.iter + 1 ..= cfg.iterations`, calling `on_step` after each.
pub fn train_loop<F>(cfg: &TrainConfig, items: &[DataItem], state: &mut TrainState, mut on_step: F) -> Result<Vec<LogRow>>
where
    F: FnMut(&LogRow, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let adam = Adam { lr: cfg.lr, ..Adam::default() };
    let mut rows = Vec::new();
    while state.iter < cfg.iterations {
        let iter = state.iter + 1;
        let lambda = anneal(state.iter, cfg);
        let (batch, seeds) = batch_for(cfg, items, iter);
        let out = elbo_loss(&cfg.model, &state.store, &batch, &seeds, lambda, cfg.parallel_batch)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss(iter));
        }
        adam.step(&mut state.store, &out.grads).map_err(|e| match e {
            Error::NonFiniteGradient(_) => Error::NonFiniteLoss(iter),
            e => e,
        })?;
        state.iter = iter;
        let row = LogRow { iter, loss: out.loss, recon: out.recon, kl: out.kl, lambda };
        if iter.is_multiple_of(100) || iter == 1 {
            log::info!("iter {iter}: loss {:.5} recon {:.5} kl {:.5} lambda {:.4}", row.loss, row.recon, row.kl, lambda);
        }
        on_step(&row, state)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Train with file outputs: the CSV log at `cfg.log` and checkpoints at
/// `cfg.checkpoint` every `checkpoint_every` steps and at the end. When
/// resuming, log rows past the resumed step are dropped first.
pub fn run_training(cfg: &TrainConfig, items: &[DataItem], mut state: TrainState) -> Result<(TrainState, Vec<LogRow>)> {
    let mut log = if cfg.log.is_empty() {
        None
    } else {
        let path = Path::new(&cfg.log);
        let mut kept = String::from(LOG_HEADER);
        kept.push('\n');
        if state.iter > 0 && path.exists() {
            for line in fs::read_to_string(path)?.lines().skip(1) {
                if LogRow::parse(line)?.iter <= state.iter {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        fs::write(path, kept)?;
        Some(fs::OpenOptions::new().append(true).open(path)?)
    };
    let rows = train_loop(cfg, items, &mut state, |row, st| {
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", row.to_csv())?;
        }
        if !cfg.checkpoint.is_empty() && (st.iter % cfg.checkpoint_every == 0 || st.iter == cfg.iterations) {
            save_checkpoint(&st.store, cfg, st.iter, Path::new(&cfg.checkpoint))?;
        }
        Ok(())
    })?;
    Ok((state, rows))
}

const CKPT_MAGIC: &[u8; 4] = b"HVCP";
pub const CKPT_VERSION: u32 = 1;
const ADAM_FIRST: &str = "adam.m/";
const ADAM_SECOND: &str = "adam.v/";

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u64).to_le_bytes());
    buf.extend_from_slice(b);
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_bytes(buf, name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize weights, Adam moments and the config (with `checkpoint_iter`
/// set to `iter`).
pub fn checkpoint_bytes(store: &ParamStore, cfg: &TrainConfig, iter: usize) -> Vec<u8> {
    let mut cfg = cfg.clone();
    cfg.checkpoint_iter = iter;
    let mut buf = CKPT_MAGIC.to_vec();
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    put_bytes(&mut buf, cfg.to_text().as_bytes());
    for (name, t) in store.iter() {
        put_tensor(&mut buf, name, t.shape(), t.data());
    }
    for (name, t) in store.iter() {
        if let Some((m, v)) = store.moments(name) {
            put_tensor(&mut buf, &format!("{ADAM_FIRST}{name}"), t.shape(), m);
            put_tensor(&mut buf, &format!("{ADAM_SECOND}{name}"), t.shape(), v);
        }
    }
    buf
}

/// Write atomically through a sibling temp file.
pub fn save_checkpoint(store: &ParamStore, cfg: &TrainConfig, iter: usize, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, checkpoint_bytes(store, cfg, iter))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Truncated);
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse("checkpoint string is not UTF-8".into()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ParamStore, TrainConfig)> {
    let mut r = Reader(bytes);
    let mut magic = [0u8; 4];
    (&mut r.0).read_exact(&mut magic).map_err(|_| Error::Truncated)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::BadMagic { expected: "HVCP" });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CKPT_VERSION });
    }
    let cfg = TrainConfig::parse(&r.string()?)?;
    let mut store = ParamStore::new();
    let mut moments: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    while !r.0.is_empty() {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or(Error::Truncated)?)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(p) = name.strip_prefix(ADAM_FIRST) {
            moments.entry(p.to_string()).or_default().0 = data;
        } else if let Some(p) = name.strip_prefix(ADAM_SECOND) {
            moments.entry(p.to_string()).or_default().1 = data;
        } else {
            store.insert(name, Tensor::new(shape, data)?)?;
        }
    }
    store.set_optimizer_state(cfg.checkpoint_iter as u64, moments)?;
    Ok((store, cfg))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, TrainConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

/// Whether `store` holds the encoder-side networks that read complete clouds.
pub fn has_posterior(cfg: &ModelConfig, store: &ParamStore) -> bool {
    match cfg.variant {
        Variant::Hierarchical => {
            store.contains("root.post.0.w")
                && (1..cfg.levels).all(|l| store.contains(&format!("lvl{l}.{}.post.0.w", cfg.axis_label(0))))
        }
        Variant::Local => store.contains(&format!("local.{}.post.0.w", cfg.axis_label(0))),
        Variant::Global | Variant::GlobalFactors => store.contains("root.post.0.w"),
    }
}

/// Remove every posterior network, leaving a sampling-only model.
pub fn strip_posterior(store: &mut ParamStore) {
    store.retain(|name| !name.split('.').any(|part| part == "post"));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{views_for, ShapeSpec, ViewMode};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 12,
            warmup: 4,
            lr: 3e-3,
            queries: 64,
            batch: 2,
            ..TrainConfig::micro()
        }
    }

    fn sphere_item(seed: u64) -> DataItem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        views_for(ShapeSpec::sphere([0.0; 3], 0.3), ViewMode::Bottom, &mut rng).unwrap().unwrap()
    }

    #[test]
    fn anneal_ramp() {
        let cfg = TrainConfig { warmup: 100, iterations: 200, lambda_max: 0.1, ..TrainConfig::default() };
        assert_eq!(anneal(0, &cfg), 0.0);
        assert_eq!(anneal(100, &cfg), 0.1);
        assert!((anneal(50, &cfg) - 0.05).abs() < 1e-15);
        assert_eq!(anneal(150, &cfg), 0.1);
    }

    #[test]
    fn bce_of_perfect_prediction_is_tiny() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![4, 1], vec![40.0, -40.0, 40.0, -40.0]).unwrap());
        let l = bce(&mut g, logits, &[1, 0, 1, 0]).unwrap();
        let v = g.value(l).item();
        assert!(v > 0.0 && v < 2e-7, "{v}");
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
        let l = bce(&mut g, logits, &[1, 0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_parts_and_lambda() {
        let cfg = tiny_cfg();
        let store = init_model(&cfg.model, 1).unwrap();
        let items = vec![sphere_item(1)];
        let (batch, seeds) = batch_for(&cfg, &items, 1);
        let zero = elbo_loss(&cfg.model, &store, &batch, &seeds, 0.0, false).unwrap();
        assert_eq!(zero.loss, zero.recon);
        assert!(zero.recon >= 0.0 && zero.kl >= 0.0);
        let one = elbo_loss(&cfg.model, &store, &batch, &seeds, 0.5, true).unwrap();
        assert_eq!(one.recon, zero.recon);
        assert!((one.loss - (one.recon + 0.5 * one.kl)).abs() < 1e-12);
    }

    #[test]
    fn parallel_and_sequential_batches_agree() {
        let cfg = tiny_cfg();
        let store = init_model(&cfg.model, 2).unwrap();
        let items = vec![sphere_item(2), sphere_item(3)];
        let (batch, seeds) = batch_for(&cfg, &items, 5);
        let a = elbo_loss(&cfg.model, &store, &batch, &seeds, 0.1, false).unwrap();
        let b = elbo_loss(&cfg.model, &store, &batch, &seeds, 0.1, true).unwrap();
        assert_eq!(a.loss, b.loss);
        for (k, t) in &a.grads {
            assert!(t.bit_eq(&b.grads[k]));
        }
    }

    #[test]
    fn singleton_loss_drops_and_runs_repeat() {
        let cfg = TrainConfig { iterations: 10, warmup: 10, queries: 2048, fresh_queries: false, ..tiny_cfg() };
        let items = vec![sphere_item(4)];
        let run = || {
            let mut st = TrainState::fresh(&cfg).unwrap();
            train_loop(&cfg, &items, &mut st, |_, _| Ok(())).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 10);
        assert!(a[9].loss < a[0].loss, "{} vs {}", a[9].loss, a[0].loss);
        assert!(a.iter().all(|r| r.kl >= 0.0));
        assert_eq!(a, run());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let cfg = tiny_cfg();
        let items = vec![sphere_item(5)];
        let mut st = TrainState::fresh(&cfg).unwrap();
        train_loop(&TrainConfig { iterations: 3, warmup: 3, ..cfg.clone() }, &items, &mut st, |_, _| Ok(())).unwrap();
        let bytes = checkpoint_bytes(&st.store, &cfg, st.iter);
        let (store, loaded) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.checkpoint_iter, 3);
        assert_eq!(store.len(), st.store.len());
        for ((na, ta), (nb, tb)) in store.iter().zip(st.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert!(ta.bit_eq(tb));
            assert_eq!(store.moments(na), st.store.moments(nb));
        }
        assert_eq!(store.step(), 3);
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated)));
        assert!(matches!(parse_checkpoint(&bytes[..2]), Err(Error::Truncated)));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(parse_checkpoint(&ver), Err(Error::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let items = vec![sphere_item(6), sphere_item(7)];
        let full_log = dir.path().join("full.csv");
        let cfg = TrainConfig { log: full_log.to_string_lossy().into(), ..tiny_cfg() };
        let (full, _) = run_training(&cfg, &items, TrainState::fresh(&cfg).unwrap()).unwrap();

        let ckpt = dir.path().join("part.hvcp");
        let part_log = dir.path().join("part.csv");
        let first = TrainConfig {
            iterations: 5,
            warmup: 4,
            log: part_log.to_string_lossy().into(),
            checkpoint: ckpt.to_string_lossy().into(),
            ..tiny_cfg()
        };
        run_training(&first, &items, TrainState::fresh(&first).unwrap()).unwrap();
        let (store, saved) = load_checkpoint(&ckpt).unwrap();
        let second = TrainConfig { iterations: 12, ..saved.clone() };
        let (resumed, _) = run_training(&second, &items, TrainState { store, iter: saved.checkpoint_iter }).unwrap();

        assert_eq!(fs::read_to_string(&full_log).unwrap(), fs::read_to_string(&part_log).unwrap());
        for ((_, a), (_, b)) in full.store.iter().zip(resumed.store.iter()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn posterior_presence() {
        for variant in [Variant::Hierarchical, Variant::Local, Variant::Global, Variant::GlobalFactors] {
            let cfg = ModelConfig { variant, ..ModelConfig::micro() };
            let mut store = init_model(&cfg, 0).unwrap();
            assert!(has_posterior(&cfg, &store));
            strip_posterior(&mut store);
            assert!(!has_posterior(&cfg, &store));
            assert!(store.contains("dec.0.w"));
        }
    }
}

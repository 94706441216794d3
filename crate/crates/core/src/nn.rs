//! Affine layers, tiny MLPs, the named parameter store, and Adam.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{grad_check, Graph, Tensor, Unary, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softplus,
    Logistic,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.unary(x, Unary::Relu),
            Activation::Tanh => g.unary(x, Unary::Tanh),
            Activation::Softplus => g.unary(x, Unary::Softplus),
            Activation::Logistic => g.unary(x, Unary::Logistic),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Logistic => "logistic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Activation::Identity,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "softplus" => Activation::Softplus,
            "logistic" => Activation::Logistic,
            other => return Err(Error::Parse(format!("unknown activation `{other}`"))),
        })
    }
}

/// Layer widths of a fully connected net, input first.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    pub activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        widths: Vec<usize>,
        activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least one affine layer".into(),
            ));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "MLP widths must be >= 1, got {widths:?}"
            )));
        }
        Ok(Self {
            widths,
            activation,
            output_activation,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Named parameters plus Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    /// Drop parameters (and their optimizer state) for which `keep` is false.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
        let params = &self.params;
        self.moments.retain(|k, _| params.contains_key(k));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Bind a parameter into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.bind_param(name, self.get(name)?, true))
    }

    /// Adam moment arrays for `name`, if any step touched it.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|m| (m.first.as_slice(), m.second.as_slice()))
    }

    /// Restore optimizer state (used when loading checkpoints).
    pub fn set_optimizer_state(
        &mut self,
        step: u64,
        moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    ) -> Result<()> {
        for (name, (first, second)) in &moments {
            let n = self.get(name)?.numel();
            if first.len() != n || second.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "moment arrays for `{name}` do not match its shape"
                )));
            }
        }
        self.step = step;
        self.moments = moments
            .into_iter()
            .map(|(k, (first, second))| (k, Moments { first, second }))
            .collect();
        Ok(())
    }
}

/// Glorot-uniform weights `[fan_in, fan_out]` and zero biases for every
/// layer, named `{prefix}.{layer}.w` / `{prefix}.{layer}.b`.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut R,
) -> Result<()> {
    for l in 0..spec.layers() {
        init_layer(store, &format!("{prefix}.{l}"), spec.widths[l], spec.widths[l + 1], rng)?;
    }
    Ok(())
}

/// One Glorot-uniform layer `{name}.w` plus zero bias `{name}.b`.
pub fn init_layer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    store.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w)?)?;
    store.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out])?)
}

/// Zero the weights and bias of one layer.
pub fn zero_layer(store: &mut ParamStore, prefix: &str, layer: usize) -> Result<()> {
    for suffix in ["w", "b"] {
        let t = store.get_mut(&format!("{prefix}.{layer}.{suffix}"))?;
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

/// `x·W + b` for a rank-2 `x`.
pub fn affine(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = store.bind(g, &format!("{name}.w"))?;
    let b = store.bind(g, &format!("{name}.b"))?;
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if xs.len() != 2 || xs[1] != ws[0] {
        return Err(Error::ShapeMismatch {
            op: "affine",
            lhs: xs,
            rhs: ws,
        });
    }
    let h = g.matmul(x, w)?;
    let out_shape = g.shape(h).to_vec();
    let bb = g.broadcast_to(b, &out_shape)?;
    g.add(h, bb)
}

/// Forward a rank-2 `[rows, in]` input through the MLP named `prefix`.
pub fn mlp_forward(
    g: &mut Graph,
    spec: &MlpSpec,
    store: &ParamStore,
    prefix: &str,
    input: Var,
) -> Result<Var> {
    let shape = g.shape(input).to_vec();
    if shape.len() != 2 || shape[1] != spec.input_width() {
        return Err(Error::ShapeMismatch {
            op: "mlp_forward",
            lhs: shape,
            rhs: vec![spec.input_width()],
        });
    }
    let mut h = input;
    for l in 0..spec.layers() {
        h = affine(g, store, &format!("{prefix}.{l}"), h)?;
        let act = if l + 1 == spec.layers() {
            spec.output_activation
        } else {
            spec.activation
        };
        h = act.apply(g, h);
    }
    Ok(h)
}

/// [`grad_check`] over every parameter of `store`. `f` sees the store, but
/// the parameters are pre-bound to the checker's leaves.
pub fn grad_check_params<F>(store: &ParamStore, mut f: F, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
    let values: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |g, vars| {
            for (name, &v) in names.iter().zip(vars) {
                g.register_param(name, v);
            }
            f(g, store)
        },
        &values,
        eps,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update. Any non-finite gradient aborts the
    /// whole step before a single parameter changes.
    pub fn step(&self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = store.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let n = g.numel();
            let m = store.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            let p = store
                .params
                .get_mut(name)
                .expect("checked above")
                .data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                m.first[i] = self.beta1 * m.first[i] + (1.0 - self.beta1) * gi;
                m.second[i] = self.beta2 * m.second[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.first[i] / c1;
                let vhat = m.second[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(spec: &MlpSpec, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut store, "net", spec, &mut rng).unwrap();
        store
    }

    #[test]
    fn init_bounds_zero_biases_and_determinism() {
        let spec = MlpSpec::new(vec![4, 8], Activation::Relu, Activation::Identity).unwrap();
        let store = store_for(&spec, 3);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(store.get("net.0.w").unwrap().data().iter().all(|w| w.abs() <= bound));
        assert!(store.get("net.0.b").unwrap().data().iter().all(|&b| b == 0.0));
        assert_eq!(store, store_for(&spec, 3));
        assert_ne!(store, store_for(&spec, 4));
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, Activation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::Relu, Activation::Identity).is_err());
    }

    #[test]
    fn zero_layer_outputs_zero() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Relu, Activation::Identity).unwrap();
        let mut store = store_for(&spec, 1);
        zero_layer(&mut store, "net", 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).unwrap());
        let y = mlp_forward(&mut g, &spec, &store, "net", x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_is_identity() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu, Activation::Identity).unwrap();
        let mut store = ParamStore::new();
        store.insert("id.0.w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        store.insert("id.0.b", Tensor::zeros(vec![2]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = mlp_forward(&mut g, &spec, &store, "id", x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn two_layer_net_matches_hand_composition() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Relu, Activation::Identity).unwrap();
        let store = store_for(&spec, 11);
        let input: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 3], input.clone()).unwrap());
        let y = mlp_forward(&mut g, &spec, &store, "net", x).unwrap();

        let w0 = store.get("net.0.w").unwrap().data();
        let b0 = store.get("net.0.b").unwrap().data();
        let w1 = store.get("net.1.w").unwrap().data();
        let b1 = store.get("net.1.b").unwrap().data();
        for r in 0..4 {
            let mut hidden = [0.0; 5];
            for (j, h) in hidden.iter_mut().enumerate() {
                let pre: f64 = (0..3).map(|i| input[r * 3 + i] * w0[i * 5 + j]).sum::<f64>() + b0[j];
                *h = pre.max(0.0);
            }
            for k in 0..2 {
                let out: f64 = (0..5).map(|j| hidden[j] * w1[j * 2 + k]).sum::<f64>() + b1[k];
                assert!((g.value(y).data()[r * 2 + k] - out).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Relu, Activation::Identity).unwrap();
        let store = store_for(&spec, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 4]).unwrap());
        assert!(mlp_forward(&mut g, &spec, &store, "net", x).is_err());
    }

    #[test]
    fn mlp_gradients_pass_gradcheck() {
        for (seed, widths) in [(1u64, vec![3, 4, 2]), (2, vec![2, 6, 5, 1]), (3, vec![4, 3])] {
            let spec = MlpSpec::new(widths.clone(), Activation::Tanh, Activation::Softplus).unwrap();
            let store = store_for(&spec, seed);
            let input = Tensor::new(
                vec![3, widths[0]],
                (0..3 * widths[0]).map(|i| (i as f64 * 1.3).cos()).collect(),
            )
            .unwrap();
            let err = grad_check_params(
                &store,
                |g, s| {
                    let x = g.constant(input.clone());
                    let y = mlp_forward(g, &spec, s, "net", x)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                },
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{widths:?}: {err}");
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap()).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_owned(), Tensor::new(vec![3], vec![0.3, -2.0, 1e-3]).unwrap());
        let adam = Adam { lr: 0.01, ..Adam::default() };
        adam.step(&mut store, &grads).unwrap();
        let p = store.get("p").unwrap().data();
        let expect = [1.0 - 0.01, -1.0 + 0.01, 0.5 - 0.01];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr_leave_params() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(vec![2], vec![0.25, -4.0]).unwrap()).unwrap();
        let before = store.get("p").unwrap().clone();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_owned(), Tensor::zeros(vec![2]).unwrap());
        Adam::default().step(&mut store, &grads).unwrap();
        assert!(store.get("p").unwrap().bit_eq(&before));
        grads.insert("p".to_owned(), Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
        Adam { lr: 0.0, ..Adam::default() }.step(&mut store, &grads).unwrap();
        assert!(store.get("p").unwrap().bit_eq(&before));
    }

    #[test]
    fn adam_non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        store.insert("b", Tensor::scalar(1.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_owned(), Tensor::scalar(0.5));
        grads.insert("b".to_owned(), Tensor::scalar(f64::NAN));
        match Adam::default().step(&mut store, &grads) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "b"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.get("a").unwrap().item(), 1.0);
        assert_eq!(store.step(), 0);
    }

    #[test]
    fn adam_runs_are_bit_identical() {
        let run = || {
            let spec = MlpSpec::new(vec![2, 3, 1], Activation::Relu, Activation::Identity).unwrap();
            let mut store = store_for(&spec, 5);
            for _ in 0..5 {
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(vec![2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap());
                let y = mlp_forward(&mut g, &spec, &store, "net", x).unwrap();
                let s = g.sum(y);
                let grads = g.backward(s).unwrap();
                Adam::default().step(&mut store, &g.named_grads(&grads)).unwrap();
            }
            store
        };
        let (a, b) = (run(), run());
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert!(x.bit_eq(y));
        }
    }
}

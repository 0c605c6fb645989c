use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Gradients, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Whether stochastic layers (dropout, hard-concrete noise) sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward/backward pass: a fresh graph, lazily bound parameters and the
/// run's random stream.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            rng,
        }
    }

    /// Deterministic session without randomness.
    pub fn eval(store: &'a ParamStore) -> Self {
        Session::new(store, Mode::Eval, None)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The graph leaf of a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    /// The run's random stream. Panics in a session built without one while
    /// in train mode, which is a programming error.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
            .as_deref_mut()
            .expect("train-mode session needs a random stream")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Gradients of `loss` with respect to every parameter touched in this session.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads, TensorError> {
        let mut grads = self.graph.backward(loss)?;
        Ok(ParamGrads::collect(&self.bound, &mut grads))
    }
}

/// Per-parameter gradients; untouched parameters have none.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    fn collect(bound: &[Option<Var>], grads: &mut Gradients) -> Self {
        ParamGrads {
            grads: bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }

    /// True when the gradient exists and has a nonzero entry.
    pub fn touches(&self, id: ParamId) -> bool {
        self.get(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
    }
}

/// Central-difference check of every parameter gradient of the loss built by
/// `f`, with the same error measure as [`crate::tensor::finite_diff_check`].
///
/// Each evaluation gets a fresh session in `mode` whose random stream is
/// seeded with `noise_seed`, so stochastic layers draw identical samples on
/// every pass. `coords` selects which `(param, flat index)` pairs to perturb;
/// `None` checks all of them.
pub fn param_finite_diff_check<F, E>(
    store: &ParamStore,
    f: F,
    mode: Mode,
    noise_seed: u64,
    coords: Option<&[(ParamId, usize)]>,
    eps: f64,
) -> Result<f64, E>
where
    F: Fn(&mut Session<'_>) -> Result<Var, E>,
    E: From<TensorError>,
{
    use rand::SeedableRng;

    let run = |store: &ParamStore, want_grads: bool| -> Result<(f64, Option<ParamGrads>), E> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut s = Session::new(store, mode, Some(&mut rng));
        let loss = f(&mut s)?;
        let value = s.value(loss).item();
        let grads = if want_grads { Some(s.backward(loss)?) } else { None };
        Ok((value, grads))
    };
    let (_, grads) = run(store, true)?;
    let grads = grads.expect("requested");
    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = store
                .ids()
                .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
                .collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for &(id, i) in coords {
        let orig = store.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let (fp, _) = run(&probe, false)?;
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let (fm, _) = run(&probe, false)?;
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        worst = worst.max((analytic - numeric).abs() / (numeric.abs() + 1e-12));
    }
    Ok(worst)
}

//! Parameter storage, layers, initialization, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical dotted names
//! (`decoder.stage8.afam.se.fc1.weight`). A forward pass runs inside a
//! [`Session`], which binds store entries onto the autodiff tape and records
//! the (parameter, node) association for the optimizer.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array1, ArrayD, IxDyn};
#[allow(unused_imports)]
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Gradients, Tape, TensorRef};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(usize);

struct Entry<F: Elem> {
    name: String,
    value: Rc<ArrayD<F>>,
    trainable: bool,
}

/// Named parameter and buffer storage.
pub struct ParamStore<F: Elem> {
    entries: Vec<Option<Entry<F>>>,
    by_name: BTreeMap<String, usize>,
}

impl<F: Elem> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(Some(Entry {
            name,
            value: Rc::new(value),
            trainable,
        }));
        ParamId(idx)
    }

    pub fn remove(&mut self, id: ParamId) {
        if let Some(entry) = self.entries[id.0].take() {
            self.by_name.remove(&entry.name);
        }
    }

    pub fn value(&self, id: ParamId) -> Rc<ArrayD<F>> {
        Rc::clone(&self.entries[id.0].as_ref().expect("live param").value)
    }

    pub fn array(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].as_ref().expect("live param").value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].as_ref().expect("live param").name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].as_ref().expect("live param").trainable
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<F>) {
        let entry = self.entries[id.0].as_mut().expect("live param");
        assert_eq!(
            entry.value.shape(),
            value.shape(),
            "set: shape change for {}",
            entry.name
        );
        entry.value = Rc::new(value);
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// All live entries sorted by name: `(name, value, trainable)`.
    pub fn iter_sorted(&self) -> impl Iterator<Item = (&str, &ArrayD<F>, bool)> {
        self.by_name.iter().map(|(name, &idx)| {
            let e = self.entries[idx].as_ref().expect("live param");
            (name.as_str(), &*e.value, e.trainable)
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.by_name.keys().cloned().collect()
    }

    /// Total scalar count over live entries, optionally trainable-only.
    pub fn element_count(&self, trainable_only: bool) -> usize {
        self.iter_sorted()
            .filter(|(_, _, t)| !trainable_only || *t)
            .map(|(_, v, _)| v.len())
            .sum()
    }
}

/// One forward (and optionally backward) pass over a store.
pub struct Session<'s, F: Elem> {
    pub tape: Tape<F>,
    pub store: &'s mut ParamStore<F>,
    pub training: bool,
    bindings: Vec<(ParamId, TensorRef)>,
}

impl<'s, F: Elem> Session<'s, F> {
    pub fn new(store: &'s mut ParamStore<F>, training: bool) -> Self {
        Session {
            tape: Tape::new(training),
            store,
            training,
            bindings: Vec::new(),
        }
    }

    /// Bind a parameter onto the tape.
    pub fn param(&mut self, id: ParamId) -> TensorRef {
        let trainable = self.store.is_trainable(id);
        let node = self.tape.leaf_shared(self.store.value(id), trainable);
        self.bindings.push((id, node));
        node
    }

    pub fn input(&mut self, value: ArrayD<F>) -> TensorRef {
        self.tape.leaf(value, false)
    }

    /// Backpropagate from `loss` and gather gradients per bound parameter.
    pub fn grads(&mut self, loss: TensorRef) -> Vec<(ParamId, ArrayD<F>)> {
        self.backward(loss).params
    }

    /// Backpropagate from `loss`; returns per-parameter gradients plus the
    /// raw node gradients (for inspecting e.g. input gradients).
    pub fn backward(&mut self, loss: TensorRef) -> SessionGrads<F> {
        let grads: Gradients<F> = self.tape.backward(loss);
        let mut params: Vec<(ParamId, ArrayD<F>)> = Vec::new();
        let mut index: BTreeMap<usize, usize> = BTreeMap::new();
        for &(pid, node) in &self.bindings {
            if let Some(g) = grads.get(node).cloned() {
                match index.get(&pid.0) {
                    Some(&slot) => {
                        let acc = &mut params[slot].1;
                        *acc += &g;
                    }
                    None => {
                        index.insert(pid.0, params.len());
                        params.push((pid, g));
                    }
                }
            }
        }
        SessionGrads {
            nodes: grads,
            params,
        }
    }
}

/// Result of [`Session::backward`].
pub struct SessionGrads<F: Elem> {
    pub nodes: Gradients<F>,
    pub params: Vec<(ParamId, ArrayD<F>)>,
}

// ---------------------------------------------------------------------------
// Initialization

/// He-normal init for convolutions feeding ReLU: `N(0, sqrt(2 / fan_in))`.
/// Sampling happens in f64 so f32 and f64 models share init sequences.
pub fn he_normal<F: Elem>(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    gaussian(rng, dims, std)
}

/// Xavier-normal init for linear layers: `N(0, sqrt(2 / (fan_in+fan_out)))`.
pub fn xavier_normal<F: Elem>(
    rng: &mut ChaCha8Rng,
    dims: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> ArrayD<F> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    gaussian(rng, dims, std)
}

pub fn gaussian<F: Elem>(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> ArrayD<F> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f64, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(dims), |_| F::from_f64(normal.sample(rng)))
}

// ---------------------------------------------------------------------------
// Layers

pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub pad: (usize, usize),
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new<F: Elem>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.add(
            format!("{name}.weight"),
            he_normal(rng, &[cout, cin, k, k], fan_in),
            true,
        );
        let b =
            bias.then(|| store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])), true));
        Conv2d {
            w,
            b,
            pad: (k / 2, k / 2),
            cin,
            cout,
            k,
        }
    }

    pub fn forward<F: Elem>(&self, sess: &mut Session<F>, x: TensorRef) -> TensorRef {
        let w = sess.param(self.w);
        let b = self.b.map(|b| sess.param(b));
        sess.tape.conv2d(x, w, b, self.pad)
    }

    pub fn n_params(&self) -> usize {
        self.cout * self.cin * self.k * self.k + if self.b.is_some() { self.cout } else { 0 }
    }

    /// Multiply-accumulate count for an `oh x ow` output.
    pub fn madds(&self, oh: usize, ow: usize) -> u128 {
        (self.cout * self.cin * self.k * self.k) as u128 * (oh * ow) as u128
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<F: Elem>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ArrayD::ones(IxDyn(&[channels])),
            true,
        );
        let beta = store.add(
            format!("{name}.beta"),
            ArrayD::zeros(IxDyn(&[channels])),
            true,
        );
        let running_mean = store.add(
            format!("{name}.running_mean"),
            ArrayD::zeros(IxDyn(&[channels])),
            false,
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            ArrayD::ones(IxDyn(&[channels])),
            false,
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<F: Elem>(&self, sess: &mut Session<F>, x: TensorRef) -> TensorRef {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        if sess.training {
            let n = {
                let shape = sess.tape.value(x).shape();
                (shape[1] * shape[2]) as f64
            };
            let (y, mean, var) = sess.tape.batch_norm_train(x, gamma, beta, self.eps);
            // Running stats use the unbiased variance, batch norm convention.
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mom = F::from_f64(self.momentum);
            let keep = F::from_f64(1.0 - self.momentum);
            let rm = sess.store.array(self.running_mean).clone();
            let rv = sess.store.array(self.running_var).clone();
            let new_mean =
                ArrayD::from_shape_fn(rm.raw_dim(), |ix| rm[&ix] * keep + mean[ix[0]] * mom);
            let new_var = ArrayD::from_shape_fn(rv.raw_dim(), |ix| {
                rv[&ix] * keep + var[ix[0]] * F::from_f64(unbiased) * mom
            });
            sess.store.set(self.running_mean, new_mean);
            sess.store.set(self.running_var, new_var);
            y
        } else {
            let mean = flat1(sess.store.array(self.running_mean));
            let var = flat1(sess.store.array(self.running_var));
            sess.tape
                .batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }

    pub fn n_params(&self) -> usize {
        2 * self.channels
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new<F: Elem>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            xavier_normal(rng, &[fout, fin], fin, fout),
            true,
        );
        let b = store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[fout])), true);
        Linear { w, b, fin, fout }
    }

    pub fn forward<F: Elem>(&self, sess: &mut Session<F>, x: TensorRef) -> TensorRef {
        let w = sess.param(self.w);
        let b = sess.param(self.b);
        sess.tape.linear(x, w, Some(b))
    }

    pub fn n_params(&self) -> usize {
        self.fout * self.fin + self.fout
    }

    pub fn madds(&self, rows: usize) -> u128 {
        (self.fout * self.fin) as u128 * rows as u128
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Elem>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[dim])), true);
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])), true);
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<F: Elem>(&self, sess: &mut Session<F>, x: TensorRef) -> TensorRef {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        sess.tape.layer_norm(x, gamma, beta, self.eps)
    }
}

fn flat1<F: Elem>(a: &ArrayD<F>) -> Array1<F> {
    a.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("1-d buffer")
        .to_owned()
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with optional weight decay. Moment state is keyed by parameter name
/// so it serializes alongside checkpoints.
pub struct Adam<F: Elem> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub m: BTreeMap<String, ArrayD<F>>,
    pub v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Elem> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, ArrayD<F>)]) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let (ob1, ob2) = (F::from_f64(1.0 - self.beta1), F::from_f64(1.0 - self.beta2));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        let wd = F::from_f64(self.weight_decay);
        let (ibc1, ibc2) = (F::from_f64(1.0 / bc1), F::from_f64(1.0 / bc2));
        for (pid, grad) in grads {
            let name = store.name(*pid).to_string();
            let mut g = grad.clone();
            if self.weight_decay > 0.0 {
                g += &store.array(*pid).mapv(|p| p * wd);
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &gv| {
                *m = *m * b1 + gv * ob1;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &gv| {
                *v = *v * b2 + gv * gv * ob2;
            });
            let mut new = store.array(*pid).clone();
            ndarray::Zip::from(&mut new)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m * ibc1;
                    let vhat = v * ibc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
            store.set(*pid, new);
        }
    }
}

/// Load values into matching names of a store. Returns the list of names in
/// `values` that did not match a live entry with identical shape.
pub fn load_named<F: Elem>(
    store: &mut ParamStore<F>,
    values: &BTreeMap<String, ArrayD<F>>,
) -> Result<()> {
    let mut mismatched: Vec<String> = Vec::new();
    let mut missing: Vec<String> = Vec::new();
    let expected = store.names();
    for name in &expected {
        match values.get(name) {
            Some(v) => {
                let id = store.lookup(name).expect("listed name");
                if store.array(id).shape() != v.shape() {
                    mismatched.push(format!(
                        "{name}: expected {:?}, found {:?}",
                        store.array(id).shape(),
                        v.shape()
                    ));
                } else {
                    store.set(id, v.clone());
                }
            }
            None => missing.push(name.clone()),
        }
    }
    let extra: Vec<String> = values
        .keys()
        .filter(|k| !expected.contains(k))
        .cloned()
        .collect();
    if mismatched.is_empty() && missing.is_empty() && extra.is_empty() {
        Ok(())
    } else {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing: {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            parts.push(format!("unexpected: {}", extra.join(", ")));
        }
        if !mismatched.is_empty() {
            parts.push(format!("shape mismatch: {}", mismatched.join("; ")));
        }
        Err(Error::Checkpoint(format!(
            "parameter mapping failed — {}",
            parts.join(" | ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", ArrayD::from_elem(IxDyn(&[2]), 3.0), true);
        let mut adam = Adam::new(0.1);
        for _ in 0..200 {
            let g = store.array(p).mapv(|x| 2.0 * x);
            adam.step(&mut store, &[(p, g)]);
        }
        for &v in store.array(p).iter() {
            assert!(v.abs() < 1e-2, "param should approach 0, got {v}");
        }
    }

    #[test]
    fn session_collects_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 3, 3, true);
        let mut sess = Session::new(&mut store, true);
        let x = sess.input(ArrayD::from_elem(IxDyn(&[2, 4, 4]), 0.5));
        let y = conv.forward(&mut sess, x);
        let loss = sess.tape.mean_all(y);
        let grads = sess.grads(loss);
        assert_eq!(grads.len(), 2);
        let names: Vec<&str> = grads.iter().map(|(id, _)| store.name(*id)).collect();
        assert!(names.contains(&"c.weight") && names.contains(&"c.bias"));
    }

    #[test]
    fn bn_running_stats_track_batches() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        for _ in 0..200 {
            let mut sess = Session::new(&mut store, true);
            let x = sess.input(ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |ix| {
                2.0 + (ix[1] as f64 - 1.5) * 0.1
            }));
            let _ = bn.forward(&mut sess, x);
        }
        let rm = store.array(bn.running_mean)[[0]];
        assert!(
            (rm - 2.0).abs() < 1e-3,
            "running mean {rm} should approach 2"
        );
    }

    #[test]
    fn load_named_reports_mismatches() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", ArrayD::zeros(IxDyn(&[2])), true);
        store.add("b", ArrayD::zeros(IxDyn(&[3])), true);
        let mut values = BTreeMap::new();
        values.insert("a".to_string(), ArrayD::zeros(IxDyn(&[2])));
        values.insert("c".to_string(), ArrayD::zeros(IxDyn(&[1])));
        let err = load_named(&mut store, &values).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing: b"), "got: {msg}");
        assert!(msg.contains("unexpected: c"), "got: {msg}");
    }
}

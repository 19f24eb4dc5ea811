//! Parameter storage, layers, and the ADAM optimizer.

use std::collections::HashMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Arr, Gradients, Graph, Var};

/// Stable identifier of a named parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

/// Flat store of named parameter tensors. Construction order is fixed
/// by the model builders, which keeps seeded initialization and
/// checkpoint layout deterministic.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), self.values.len() - 1);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Arr)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// All parameters whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

impl Graph {
    /// Bind a stored parameter as a leaf. Repeated binds of the same
    /// parameter within one graph share a node so gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, node)) = self
            .param_bindings
            .iter()
            .find(|(pid, _)| *pid == id.0)
        {
            return Var(node);
        }
        let v = self.leaf(store.value(id).clone());
        self.param_bindings.push((id.0, v.0));
        v
    }

    /// Gradients of all bound parameters, keyed by [`ParamId`].
    pub fn param_grads(&self, grads: &Gradients) -> HashMap<ParamId, Arr> {
        let mut out = HashMap::new();
        for &(pid, node) in &self.param_bindings {
            if let Some(g) = grads.wrt(Var(node)) {
                out.insert(ParamId(pid), g.clone());
            }
        }
        out
    }
}

/// Normal(0, std) initialization.
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    let dist = Normal::new(0.0, std).expect("valid normal");
    let mut a = Arr::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = dist.sample(rng);
    }
    a
}

/// He initialization for a fan-in of `fan_in`.
pub fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    normal_init(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// 2-D convolution stored as an im2col weight matrix `(cout, cin*k*k)`.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            he_init(rng, &[cout, cin * k * k], cin * k * k),
        );
        let b = store.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[cout])));
        Conv2d {
            w,
            b,
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    /// Same-resolution 3x3 convolution.
    pub fn same(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, 3, 1, 1)
    }

    /// Stride-2 downsampling 3x3 convolution.
    pub fn down(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, 3, 2, 1)
    }

    /// 1x1 projection.
    pub fn proj(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, 1, 1, 0)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let sh = g.value(x).shape().to_vec();
        assert_eq!(sh.len(), 3, "conv input must be (C, H, W)");
        assert_eq!(sh[0], self.cin, "conv input channels mismatch");
        let hout = (sh[1] + 2 * self.pad - self.k) / self.stride + 1;
        let wout = (sh[2] + 2 * self.pad - self.k) / self.stride + 1;
        let cols = g.unfold(x, self.k, self.stride, self.pad);
        let wv = g.param(store, self.w);
        let y = g.matmul(wv, cols);
        let y = g.reshape(y, &[self.cout, hout, wout]);
        let bv = g.param(store, self.b);
        g.add_bias(y, bv)
    }
}

/// Pre-activation residual block of two 3x3 convolutions.
pub struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        ResBlock {
            c1: Conv2d::same(store, rng, &format!("{name}.c1"), c, c),
            c2: Conv2d::same(store, rng, &format!("{name}.c2"), c, c),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let a = g.leaky_relu(x, 0.2);
        let a = self.c1.forward(g, store, a);
        let a = g.leaky_relu(a, 0.2);
        let a = self.c2.forward(g, store, a);
        g.add(x, a)
    }
}

/// ADAM over a fixed subset of parameters.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    params: Vec<ParamId>,
    m: HashMap<ParamId, Arr>,
    v: HashMap<ParamId, Arr>,
}

impl Adam {
    pub fn new(params: Vec<ParamId>, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            params,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// One update from a gradient map; parameters without a gradient
    /// entry are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Arr>) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for &pid in &self.params {
            let Some(grad) = grads.get(&pid) else { continue };
            let m = self
                .m
                .entry(pid)
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(pid)
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            let w = store.value_mut(pid);
            let (ws, ms, vs, gs) = (
                w.as_slice_mut().unwrap(),
                m.as_slice_mut().unwrap(),
                v.as_slice_mut().unwrap(),
                grad.as_slice().unwrap(),
            );
            for i in 0..gs.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ws[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Moment access for checkpointing.
    pub fn moments(&self, pid: ParamId) -> Option<(&Arr, &Arr)> {
        match (self.m.get(&pid), self.v.get(&pid)) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    pub fn set_moments(&mut self, pid: ParamId, m: Arr, v: Arr) {
        self.m.insert(pid, m);
        self.v.insert(pid, v);
    }
}

/// Convenience: sample a fresh seeded RNG.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use ndarray::Array3;

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = seeded_rng(7);
        let mut store = ParamStore::new();
        let conv = Conv2d::same(&mut store, &mut rng, "t", 2, 3);
        let x = normal_init(&mut rng, &[2, 5, 5], 1.0);
        let w0 = store.value(conv.w).clone();
        let b0 = store.value(conv.b).clone();
        let rep = finite_diff_check(
            &|g, vars| {
                // rebuild a store whose params are the gradcheck leaves
                let cols = g.unfold(vars[0], 3, 1, 1);
                let y = g.matmul(vars[1], cols);
                let y = g.reshape(y, &[3, 5, 5]);
                let y = g.add_bias(y, vars[2]);
                let y = g.square(y);
                g.sum(y)
            },
            &[x, w0, b0],
            1e-5,
        );
        assert!(rep.passes(1e-7), "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn adam_decreases_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("w", Arr::from_elem(IxDyn(&[1]), 4.0));
        let mut opt = Adam::new(vec![p], 0.1, 0.5, 0.999);
        for _ in 0..200 {
            let mut g = Graph::new();
            let w = g.param(&store, p);
            let loss = g.square(w);
            let loss = g.sum(loss);
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads);
            opt.step(&mut store, &pg);
        }
        assert!(store.value(p)[[0]].abs() < 0.05);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y + x) as f64).into_dyn());
        let up = g.upsample_nearest2(x);
        let down = g.avg_pool2(up);
        assert_eq!(g.value(down), g.value(x));
    }
}

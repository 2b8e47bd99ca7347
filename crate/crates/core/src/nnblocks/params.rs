//! Named trainable tensors with a deterministic flat-vector view.

use crate::autodiff::{GradBuf, Tape, Var};
use crate::error::{CoreError, Result};
use crate::util::{truncated_normal, SeededRng};
use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;

/// Ordered collection of named tensors. The flat view concatenates entries
/// in registration order, so two sets built by the same registration walk
/// are layout-compatible.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[idx].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn tensor_count(&self) -> usize {
        self.entries.len()
    }

    /// Total scalar count across all tensors.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Deterministic concatenation of all tensors in registration order.
    pub fn flat_view(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, v) in &self.entries {
            out.extend(v.iter());
        }
        out
    }

    /// Writes a flat vector back into the named tensors; exact inverse of
    /// [`flat_view`](Self::flat_view).
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(CoreError::shape(format!(
                "flat vector length {} != parameter count {}",
                flat.len(),
                self.total_len()
            )));
        }
        let mut ofs = 0;
        for (_, v) in &mut self.entries {
            let n = v.len();
            for (dst, src) in v.iter_mut().zip(&flat[ofs..ofs + n]) {
                *dst = *src;
            }
            ofs += n;
        }
        Ok(())
    }

    /// Same-shaped set with every tensor zeroed.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, v) in &self.entries {
            out.insert(n, ArrayD::zeros(v.raw_dim()));
        }
        out
    }
}

/// Registers tensors with seeded initialization. Every walk over the same
/// architecture with the same seed yields bit-identical parameters.
pub struct ParamBuilder {
    pub set: ParamSet,
    rng: SeededRng,
    init_std: f64,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            set: ParamSet::new(),
            rng: crate::util::rng_from_seed(seed),
            init_std: 0.02,
        }
    }

    fn normal_tensor(&mut self, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| truncated_normal(self.init_std, &mut self.rng))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Conv kernel (cout, k, k, cin) with truncated-normal weights and a
    /// zero bias under `<name>.w` / `<name>.b`.
    pub fn conv(&mut self, name: &str, cout: usize, k: usize, cin: usize) {
        let w = self.normal_tensor(&[cout, k, k, cin]);
        self.set.insert(&format!("{name}.w"), w);
        self.set
            .insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
    }

    /// Conv kernel with both weights and bias zeroed.
    pub fn conv_zero(&mut self, name: &str, cout: usize, k: usize, cin: usize) {
        self.set
            .insert(&format!("{name}.w"), ArrayD::zeros(IxDyn(&[cout, k, k, cin])));
        self.set
            .insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
    }

    /// Dense layer (out, in) with truncated-normal weights and zero bias.
    pub fn linear(&mut self, name: &str, n_out: usize, n_in: usize) {
        let w = self.normal_tensor(&[n_out, n_in]);
        self.set.insert(&format!("{name}.w"), w);
        self.set
            .insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[n_out])));
    }

    /// Dense layer with an explicit bias initialization.
    pub fn linear_with_bias(&mut self, name: &str, n_out: usize, n_in: usize, bias: Vec<f64>) {
        assert_eq!(bias.len(), n_out);
        let w = self.normal_tensor(&[n_out, n_in]);
        self.set.insert(&format!("{name}.w"), w);
        self.set.insert(
            &format!("{name}.b"),
            ArrayD::from_shape_vec(IxDyn(&[n_out]), bias).unwrap(),
        );
    }
}

/// A tape bound to a parameter set: parameters enter the graph lazily and
/// their gradients come back aligned with the set's registration order.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: HashMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    /// Variable for a named parameter, creating the leaf on first use.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = self.tape.leaf(self.params.get(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.tape.leaf(value)
    }

    /// Collects parameter gradients from a finished backward sweep into a
    /// set shaped exactly like the bound parameters (zero where a parameter
    /// never entered the graph).
    pub fn param_grads(&self, buf: &mut GradBuf) -> ParamSet {
        let mut grads = self.params.zeros_like();
        for (name, var) in &self.bound {
            if let Some(g) = buf.take(*var) {
                *grads.get_mut(name) = g;
            }
        }
        grads
    }
}

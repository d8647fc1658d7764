use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::matrix::Matrix;

/// Named learnable arrays. Names are dotted paths whose first segment is
/// the owning parameter group (`enc`, `lr`, `dec`, `gen`, `disc`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    /// # Panics
    /// If `name` is already registered.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        self.params.insert(name, value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    /// Names belonging to one parameter group (prefix before the first dot).
    pub fn group(&self, group: &str) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.split('.').next() == Some(group))
            .cloned()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Matrix::is_finite)
    }

    /// `U(-1/√fan_in, 1/√fan_in)` weight.
    pub fn init_uniform(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Matrix::from_vec(fan_in, fan_out, data));
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.insert(name, Matrix::zeros(rows, cols));
    }

    /// Uniform in `[-scale, scale]`.
    pub fn init_scaled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        self.insert(name, Matrix::from_vec(rows, cols, data));
    }
}

/// Affine map `x·W + b` whose arrays live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        store.init_uniform(&weight, fan_in, fan_out, rng);
        store.init_zeros(&bias, 1, fan_out);
        Self {
            weight,
            bias: Some(bias),
            fan_in,
            fan_out,
        }
    }

    /// Layer whose weight and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        store.init_zeros(&weight, fan_in, fan_out);
        store.init_zeros(&bias, 1, fan_out);
        Self {
            weight,
            bias: Some(bias),
            fan_in,
            fan_out,
        }
    }

    /// Bias-free layer, linear through the origin.
    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = format!("{name}.w");
        store.init_uniform(&weight, fan_in, fan_out, rng);
        Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, &self.weight);
        let y = g.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stack of [`Linear`] layers with SiLU between them (none after the last).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    /// Activation after every layer, including the last.
    pub fn forward_activated(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        for layer in &self.layers {
            x = layer.forward(g, store, x);
            x = g.silu(x);
        }
        x
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x);
            if i != last {
                x = g.silu(x);
            }
        }
        x
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

//! Dense building blocks and parameter registration.

use rand::Rng as _;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, value)
    }

    /// Uniform in `±bound`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound));
        self.param(name, t)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.param(name, Tensor::zeros(rows, cols))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, g: &Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Silu => g.silu(x),
        }
    }
}

/// `x · W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.sub(name);
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let weight = s.uniform("w", fan_in, fan_out, bound);
        let bias = Some(s.uniform("b", 1, fan_out, bound));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn without_bias(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.sub(name);
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let weight = s.uniform("w", fan_in, fan_out, bound);
        Self { weight, bias: None, fan_in, fan_out }
    }

    /// Zero weight and zero bias, an exact no-op at initialization.
    pub fn zero(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.sub(name);
        let weight = s.zeros("w", fan_in, fan_out);
        let bias = Some(s.zeros("b", 1, fan_out));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let y = g.matmul(x, g.param(self.weight));
        match self.bias {
            Some(b) => g.add_row(y, g.param(b)),
            None => y,
        }
    }
}

/// Two-layer perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, dims: [usize; 3], act: Activation) -> Self {
        let mut s = b.sub(name);
        Self { first: Linear::new(&mut s, "0", dims[0], dims[1]), second: Linear::new(&mut s, "1", dims[1], dims[2]), act }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let h = self.act.apply(g, self.first.forward(g, x));
        self.second.forward(g, h)
    }
}

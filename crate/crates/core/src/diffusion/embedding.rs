//! Sinusoidal timestep features followed by a learned perceptron.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::nn::{Activation, Builder, Mlp};
use crate::tensor::Tensor;

/// Frequency of pair `i` (1-based) for a `d`-wide embedding.
pub fn frequency(i: usize, d: usize) -> f64 {
    10f64.powf(-(i as f64) / d as f64)
}

/// `(sin ϖ_1 t, cos ϖ_1 t, …, sin ϖ_{d/2} t, cos ϖ_{d/2} t)`.
pub fn temporal_embedding_raw(t: f64, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding width must be even and positive, got {d}")));
    }
    let mut out = Vec::with_capacity(d);
    for i in 1..=d / 2 {
        let (s, c) = (frequency(i, d) * t).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub raw_width: usize,
    pub mlp: Mlp,
}

impl TimeEmbedding {
    pub fn new(b: &mut Builder, name: &str, raw_width: usize, out: usize) -> Result<Self> {
        if raw_width == 0 || raw_width % 2 != 0 {
            return Err(Error::InvalidArgument(format!("embedding width must be even and positive, got {raw_width}")));
        }
        let mlp = Mlp::new(b, name, [raw_width, out, out], Activation::Silu);
        Ok(Self { raw_width, mlp })
    }

    /// A `1 x out` row.
    pub fn forward(&self, g: &Graph, t: usize) -> Result<Var> {
        let raw = temporal_embedding_raw(t as f64, self.raw_width)?;
        let x = g.constant(Tensor::from_vec(1, self.raw_width, raw)?);
        Ok(self.mlp.forward(g, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;
    use crate::rng;

    #[test]
    fn zero_time_alternates() {
        let raw = temporal_embedding_raw(0.0, 8).unwrap();
        assert_eq!(raw, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn bounded_entries() {
        for t in [1.0, 17.0, 100.0, 1e6] {
            assert!(temporal_embedding_raw(t, 64).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn first_frequency() {
        assert!((frequency(1, 64) - 0.9646616199111991).abs() < 1e-15);
        let raw = temporal_embedding_raw(1.0, 64).unwrap();
        assert!((raw[0] - 0.9646616199111991f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(temporal_embedding_raw(3.0, 7).is_err());
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0);
        assert!(TimeEmbedding::new(&mut Builder::new(&mut store, &mut r), "t", 5, 8).is_err());
    }

    #[test]
    fn learned_embedding_shape() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0);
        let e = TimeEmbedding::new(&mut Builder::new(&mut store, &mut r), "t", 16, 12).unwrap();
        let g = Graph::new(&store);
        let v = e.forward(&g, 7).unwrap();
        assert_eq!(g.shape(v), (1, 12));
    }
}

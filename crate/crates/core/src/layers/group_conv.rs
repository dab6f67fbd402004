//! Convolution along the group axis of a group feature map.
//!
//! `out[p, g] = Σ_{s ∈ S} in[p, g·s] · W_s + b` where `S` is the identity and
//! its nearest group elements. Left-translating the input's group axis
//! left-translates the output.

use std::rc::Rc;

use crate::autograd::{Csr, Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::geometry::group::RotationGroup;

use super::nn::Builder;

#[derive(Clone, Debug)]
pub struct GroupConv {
    /// `(|S|·d_in) x d_out`, row block `s` holding `W_s`.
    pub weight: ParamId,
    pub bias: ParamId,
    pub offsets: Vec<usize>,
    pub d_in: usize,
    pub d_out: usize,
}

impl GroupConv {
    pub fn new(b: &mut Builder, name: &str, group: &RotationGroup, d_in: usize, d_out: usize) -> Self {
        let offsets = group.neighborhood();
        let mut s = b.sub(name);
        let bound = (3.0 / (offsets.len() * d_in) as f64).sqrt();
        let weight = s.uniform("w", offsets.len() * d_in, d_out, bound);
        let bias = s.zeros("b", 1, d_out);
        Self { weight, bias, offsets, d_in, d_out }
    }

    pub fn forward(&self, g: &Graph, x: Var, points: usize, group: &RotationGroup) -> Result<Var> {
        let y = se3_group_conv(g, x, points, group, &self.offsets, g.param(self.weight))?;
        Ok(g.add_row(y, g.param(self.bias)))
    }
}

/// Functional form: `x` is `(points·|G|) x d_in`, `weight` is `(|offsets|·d_in) x d_out`.
pub fn se3_group_conv(
    g: &Graph,
    x: Var,
    points: usize,
    group: &RotationGroup,
    offsets: &[usize],
    weight: Var,
) -> Result<Var> {
    let n_g = group.len();
    let (rows, d_in) = g.shape(x);
    if rows != points * n_g {
        return Err(Error::Shape(format!("{rows} rows do not hold {points} points x {n_g} group elements")));
    }
    if g.shape(weight).0 != offsets.len() * d_in {
        return Err(Error::Shape(format!("group conv weight has {} rows, expected {}", g.shape(weight).0, offsets.len() * d_in)));
    }
    let mut idx = Vec::with_capacity(rows * offsets.len());
    for p in 0..points {
        for e in 0..n_g {
            for &s in offsets {
                idx.push(p * n_g + group.compose(e, s));
            }
        }
    }
    let stacked = g.sparse(Rc::new(Csr::gather(&idx, rows)), x);
    let wide = g.reshape(stacked, rows, offsets.len() * d_in);
    Ok(g.matmul(wide, weight))
}

/// Mean over the group axis: `(points·|G|) x d` to `points x d`.
pub fn group_mean(g: &Graph, x: Var, points: usize, n_g: usize) -> Var {
    let mut m = Csr::builder(points * n_g);
    for p in 0..points {
        for e in 0..n_g {
            m.push(p * n_g + e, 1.0 / n_g as f64);
        }
        m.finish_row();
    }
    g.sparse(Rc::new(m), x)
}

/// Permutes the group axis by left multiplication: `out[p, h·e] = x[p, e]`.
pub fn left_translate(x: &crate::tensor::Tensor, points: usize, group: &RotationGroup, h: usize) -> crate::tensor::Tensor {
    let n_g = group.len();
    let mut out = x.clone();
    for p in 0..points {
        for e in 0..n_g {
            out.row_mut(p * n_g + group.compose(h, e)).copy_from_slice(x.row(p * n_g + e));
        }
    }
    out
}

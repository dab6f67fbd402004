use crate::autograd::{Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::nn::{Builder, Linear};

/// `softmax(Q_h K_hᵀ / √d) V_h` per head, heads concatenated along columns.
///
/// `wq`, `wk`, `wv` are `d x d`; head `h` uses column block `h`.
pub fn multi_head_attention(
    g: &Graph,
    query_src: Var,
    key_src: Var,
    value_src: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
) -> Result<Var> {
    let d = g.shape(query_src).1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!("width {d} is not divisible by {heads} heads")));
    }
    if g.shape(key_src).1 != d || g.shape(value_src).1 != d || g.shape(key_src).0 != g.shape(value_src).0 {
        return Err(Error::Shape("attention operands disagree in shape".into()));
    }
    let dh = d / heads;
    let q = g.matmul(query_src, wq);
    let k = g.matmul(key_src, wk);
    let v = g.matmul(value_src, wv);
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh));
        let a = g.softmax(g.scale(g.matmul_bt(qh, kh), scale));
        outs.push(g.matmul(a, vh));
    }
    Ok(if heads == 1 { outs[0] } else { g.concat_cols(&outs) })
}

/// Attention weights of one head, for inspection.
pub fn attention_weights(query: &Tensor, key: &Tensor, d: usize) -> Tensor {
    let g = Graph::detached();
    let logits = g.scale(g.matmul_bt(g.constant(query.clone()), g.constant(key.clone())), 1.0 / (d as f64).sqrt());
    let a = g.softmax(logits);
    let out = g.value(a).clone();
    out
}

/// Attention followed by a residual layer norm and a ReLU feed-forward residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ff: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(b: &mut Builder, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!("width {d} is not divisible by {heads} heads")));
        }
        let mut s = b.sub(name);
        let bound = (1.0 / d as f64).sqrt();
        Ok(Self {
            wq: s.uniform("wq", d, d, bound),
            wk: s.uniform("wk", d, d, bound),
            wv: s.uniform("wv", d, d, bound),
            ff: Linear::new(&mut s, "ff", d, d),
            heads,
        })
    }

    /// Rows of `query_src` attend over rows of `context`; output has the query's shape.
    pub fn forward(&self, g: &Graph, query_src: Var, context: Var) -> Result<Var> {
        let a = multi_head_attention(
            g,
            query_src,
            context,
            context,
            g.param(self.wq),
            g.param(self.wk),
            g.param(self.wv),
            self.heads,
        )?;
        let y = g.layer_norm(g.add(a, query_src), 1e-5);
        Ok(g.add(y, g.relu(self.ff.forward(g, y))))
    }
}

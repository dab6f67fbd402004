//! Graph layer whose inputs depend on geometry only through unit directions
//! and distance ratios, so uniform rescaling of the scene leaves it unchanged.

use std::rc::Rc;

use crate::autograd::{Csr, Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::geometry::pose::{norm, sub};
use crate::tensor::Tensor;

use super::nn::{Activation, Builder, Linear, Mlp};

/// Edge list of a neighbourhood graph with its scale-free attributes.
#[derive(Clone, Debug)]
pub struct GraphEdges {
    pub center: Vec<usize>,
    pub source: Vec<usize>,
    /// `E x 3` unit directions from centre to neighbour.
    pub directions: Tensor,
    /// `E x 1` ratios `‖x_j − x_i‖ / (‖x_j − x_i‖ + r)`.
    pub weights: Tensor,
    /// `C x 1` neighbour counts.
    pub counts: Tensor,
    segment: Rc<Csr>,
}

impl GraphEdges {
    pub fn new(centers: &Tensor, sources: &Tensor, neighbors: &[Vec<usize>], r: f64) -> Result<Self> {
        if neighbors.len() != centers.rows() {
            return Err(Error::Shape("one neighbour list per centre is required".into()));
        }
        let e: usize = neighbors.iter().map(Vec::len).sum();
        let mut center = Vec::with_capacity(e);
        let mut source = Vec::with_capacity(e);
        let mut directions = Tensor::zeros(e, 3);
        let mut weights = Tensor::zeros(e, 1);
        let mut segment = Csr::builder(e);
        let mut k = 0;
        for (c, row) in neighbors.iter().enumerate() {
            let xc = centers.point(c);
            for &j in row {
                let d = sub(&sources.point(j), &xc);
                let len = norm(&d);
                let dir = if len > 0.0 { d.map(|v| v / len) } else { [0.0, 0.0, 1.0] };
                directions.row_mut(k).copy_from_slice(&dir);
                weights.set(k, 0, len / (len + r));
                center.push(c);
                source.push(j);
                segment.push(k, 1.0);
                k += 1;
            }
            segment.finish_row();
        }
        let counts = Tensor::from_fn(neighbors.len(), 1, |c, _| neighbors[c].len() as f64);
        Ok(Self { center, source, directions, weights, counts, segment: Rc::new(segment) })
    }

    /// Edges built from explicit directions and ratios (all belonging to centre 0..C).
    pub fn from_parts(center: Vec<usize>, source: Vec<usize>, directions: Tensor, weights: Tensor, centers: usize) -> Result<Self> {
        let e = center.len();
        if source.len() != e || directions.shape() != (e, 3) || weights.shape() != (e, 1) {
            return Err(Error::Shape("edge attribute lengths differ".into()));
        }
        for i in 0..e {
            let n = directions.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("edge {i} direction has norm {n}")));
            }
        }
        let mut segment = Csr::builder(e);
        let mut counts = Tensor::zeros(centers, 1);
        for c in 0..centers {
            for (k, &ec) in center.iter().enumerate() {
                if ec == c {
                    segment.push(k, 1.0);
                    counts.data_mut()[c] += 1.0;
                }
            }
            segment.finish_row();
        }
        Ok(Self { center, source, directions, weights, counts, segment: Rc::new(segment) })
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct GraphConv {
    /// Lifts `[h_j^k ; r̄_j]` to the working width.
    pub lift: Linear,
    pub edge_in: Linear,
    pub edge_out_w: ParamId,
    pub edge_out_b: ParamId,
    pub node: Mlp,
    pub width: usize,
}

impl GraphConv {
    pub fn new(b: &mut Builder, name: &str, d_center: usize, d_kernel: usize, width: usize, d_out: usize) -> Self {
        let mut s = b.sub(name);
        let lift = Linear::new(&mut s, "lift", d_kernel + 3, width);
        let edge_in = Linear::new(&mut s, "edge.0", d_center + width + 1, width);
        let bound = (1.0 / width as f64).sqrt();
        let mut e1 = s.sub("edge.1");
        let edge_out_w = e1.uniform("w", width, width, bound);
        let edge_out_b = e1.uniform("b", 1, width, bound);
        let node = Mlp::new(&mut s, "node", [d_center + width, width, d_out], Activation::Silu);
        Self { lift, edge_in, edge_out_w, edge_out_b, node, width }
    }

    /// `center_feats`: `C x d_center`; `kernel_feats`: `S x d_kernel`. Returns `C x d_out`.
    pub fn forward(&self, g: &Graph, center_feats: Var, kernel_feats: Var, edges: &GraphEdges) -> Var {
        let hk = g.gather_rows(kernel_feats, &edges.source);
        let hj = self.lift.forward(g, g.concat_cols(&[hk, g.constant(edges.directions.clone())]));
        let hi = g.gather_rows(center_feats, &edges.center);
        let e_in = g.concat_cols(&[hi, hj, g.constant(edges.weights.clone())]);
        let a = g.silu(self.edge_in.forward(g, e_in));
        // the second edge layer is linear, so it is applied after the neighbour sum
        let summed = g.sparse(edges.segment.clone(), a);
        let msg = g.add(
            g.matmul(summed, g.param(self.edge_out_w)),
            g.matmul(g.constant(edges.counts.clone()), g.param(self.edge_out_b)),
        );
        self.node.forward(g, g.concat_cols(&[center_feats, msg]))
    }
}

/// Single-centre form: `h_i` is `1 x d`, one row of `kernel_feats`, `directions` and `weights` per neighbour.
pub fn scale_invariant_graph_conv(
    g: &Graph,
    layer: &GraphConv,
    center: Var,
    kernel_feats: Var,
    directions: &Tensor,
    weights: &[f64],
) -> Result<Var> {
    let m = weights.len();
    let edges = GraphEdges::from_parts(
        vec![0; m],
        (0..m).collect(),
        directions.clone(),
        Tensor::from_vec(m, 1, weights.to_vec())?,
        1,
    )?;
    Ok(layer.forward(g, center, kernel_feats, &edges))
}

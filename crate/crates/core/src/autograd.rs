//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns the gradient of that scalar with respect to every recorded node,
//! including the trainable entries of the [`ParamStore`] the graph reads from.
//!
//! Parameters marked frozen enter the tape as constants, so they never
//! receive gradient.
//!
//! ```
//! use equipose::autograd::{Graph, ParamStore};
//! use equipose::tensor::Tensor;
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::from_rows(&[[2.0]]).unwrap());
//! let g = Graph::new(&store);
//! let x = g.constant(Tensor::from_rows(&[[3.0]]).unwrap());
//! let y = g.matmul(x, g.param(w));
//! let loss = g.sum_all(g.square(y));
//! let grads = g.backward(loss);
//! // d/dw (3w)^2 = 18w
//! assert_eq!(grads.param(w).unwrap().get(0, 0), 36.0);
//! ```

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameter tensors with explicit frozen-set membership.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable tensor.
    ///
    /// Panics if `name` is already registered; names are the checkpoint keys.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, frozen: false });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Compressed sparse row matrix used for constant linear maps on the tape
/// (gathers, segment sums, pooling and the geometric point-convolution maps).
#[derive(Clone, Debug, Default)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    /// Incremental builder: call [`Csr::push`] for row 0 entries, then
    /// [`Csr::finish_row`], and so on.
    pub fn builder(cols: usize) -> Self {
        Self { rows: 0, cols, row_ptr: vec![0], col_idx: Vec::new(), vals: Vec::new() }
    }

    pub fn push(&mut self, col: usize, val: f64) {
        debug_assert!(col < self.cols);
        self.col_idx.push(col);
        self.vals.push(val);
    }

    pub fn finish_row(&mut self) {
        self.rows += 1;
        self.row_ptr.push(self.col_idx.len());
    }

    /// One-hot rows selecting `idx[r]` for each output row.
    pub fn gather(idx: &[usize], cols: usize) -> Self {
        let mut m = Self::builder(cols);
        for &i in idx {
            m.push(i, 1.0);
            m.finish_row();
        }
        m
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn apply(&self, a: &Tensor) -> Tensor {
        assert_eq!(self.cols, a.rows(), "sparse map width does not match input rows");
        let c = a.cols();
        let mut out = Tensor::zeros(self.rows, c);
        for r in 0..self.rows {
            let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let dst = &mut out.data_mut()[r * c..(r + 1) * c];
            for k in s..e {
                let v = self.vals[k];
                let src = a.row(self.col_idx[k]);
                for (d, x) in dst.iter_mut().zip(src) {
                    *d += v * x;
                }
            }
        }
        out
    }

    fn apply_transpose_into(&self, g: &Tensor, out: &mut Tensor) {
        let c = g.cols();
        for r in 0..self.rows {
            let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let src = g.row(r);
            for k in s..e {
                let v = self.vals[k];
                let dst = out.row_mut(self.col_idx[k]);
                for j in 0..c {
                    dst[j] += v * src[j];
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm { a: Var, eps: f64 },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Sparse { map: Rc<Csr>, a: Var },
    Reshape(Var),
    MaxRows { a: Var, argmax: Vec<usize> },
    SumAll(Var),
    QuatToMat(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of tensor operations.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<HashMap<usize, Var>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params: Some(params), nodes: RefCell::new(Vec::new()), param_vars: RefCell::default() }
    }

    /// A graph without parameters, for evaluating layers on plain inputs.
    pub fn detached() -> Self {
        Self { params: None, nodes: RefCell::new(Vec::new()), param_vars: RefCell::default() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params.expect("graph has no parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradient (used for inputs under test).
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The tape node for a stored parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id.0) {
            return *v;
        }
        let store = self.store();
        let v = self.push(store.get(id).clone(), Op::Leaf, !store.is_frozen(id));
        self.param_vars.borrow_mut().insert(id.0, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let m = if ta { x.cols() } else { x.rows() };
            let n = if tb { y.rows() } else { y.cols() };
            let mut out = Tensor::zeros(m, n);
            gemm(x, ta, y, tb, &mut out, 0.0);
            out
        };
        let ng = self.needs(&[a, b]);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.shape(), y.shape(), "elementwise operands differ in shape");
            x.zip_map(y, f)
        };
        let ng = self.needs(&[a, b]);
        self.push(value, op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!((1, x.cols()), r.shape(), "add_row operand shape");
            let mut out = x.clone();
            for i in 0..out.rows() {
                for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                    *o += b;
                }
            }
            out
        };
        let ng = self.needs(&[a, row]);
        self.push(value, Op::AddRow { a, row }, ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!((1, x.cols()), r.shape(), "mul_row operand shape");
            let mut out = x.clone();
            for i in 0..out.rows() {
                for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                    *o *= b;
                }
            }
            out
        };
        let ng = self.needs(&[a, row]);
        self.push(value, Op::MulRow { a, row }, ng)
    }

    /// Multiplies row `i` of `a` by the scalar `col[i]` of an `n x 1` column.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, c) = (&nodes[a.0].value, &nodes[col.0].value);
            assert_eq!((x.rows(), 1), c.shape(), "mul_col operand shape");
            let mut out = x.clone();
            for i in 0..out.rows() {
                let s = c.data()[i];
                for o in out.row_mut(i) {
                    *o *= s;
                }
            }
            out
        };
        let ng = self.needs(&[a, col]);
        self.push(value, Op::MulCol { a, col }, ng)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f);
        let ng = self.needs(&[a]);
        self.push(value, op, ng)
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for i in 0..out.rows() {
                softmax_in_place(out.row_mut(i));
            }
            out
        };
        let ng = self.needs(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for i in 0..out.rows() {
                let r = out.row_mut(i);
                let (mean, inv) = moments(r, eps);
                for v in r.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            out
        };
        let ng = self.needs(&[a]);
        self.push(value, Op::LayerNorm { a, eps }, ng)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ts: Vec<&Tensor> = parts.iter().map(|v| &nodes[v.0].value).collect();
            Tensor::concat_cols(&ts).expect("concat_cols operands")
        };
        let ng = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let ts: Vec<&Tensor> = parts.iter().map(|v| &nodes[v.0].value).collect();
            Tensor::concat_rows(&ts).expect("concat_rows operands")
        };
        let ng = self.needs(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            assert!(start + len <= x.cols(), "slice_cols out of range");
            Tensor::from_fn(x.rows(), len, |r, c| x.get(r, start + c))
        };
        let ng = self.needs(&[a]);
        self.push(value, Op::SliceCols { a, start }, ng)
    }

    /// `map · a` for a constant sparse `map`.
    pub fn sparse(&self, map: Rc<Csr>, a: Var) -> Var {
        let value = map.apply(&self.nodes.borrow()[a.0].value);
        let ng = self.needs(&[a]);
        self.push(value, Op::Sparse { map, a }, ng)
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let rows = self.shape(a).0;
        self.sparse(Rc::new(Csr::gather(idx, rows)), a)
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&self, a: Var, n: usize) -> Var {
        self.gather_rows(a, &vec![0; n])
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&self, a: Var) -> Var {
        let n = self.shape(a).0;
        let mut m = Csr::builder(n);
        for i in 0..n {
            m.push(i, 1.0 / n as f64);
        }
        m.finish_row();
        self.sparse(Rc::new(m), a)
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.nodes.borrow()[a.0].value.clone().reshape(rows, cols).expect("reshape");
        let ng = self.needs(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Column-wise maximum over rows (ties resolve to the lowest row).
    pub fn max_rows(&self, a: Var) -> Var {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            assert!(x.rows() > 0, "max over zero rows");
            let mut best = x.row(0).to_vec();
            let mut arg = vec![0; x.cols()];
            for r in 1..x.rows() {
                for (c, v) in x.row(r).iter().enumerate() {
                    if *v > best[c] {
                        best[c] = *v;
                        arg[c] = r;
                    }
                }
            }
            (Tensor::from_vec(1, x.cols(), best).unwrap(), arg)
        };
        let ng = self.needs(&[a]);
        self.push(value, Op::MaxRows { a, argmax }, ng)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes.borrow()[a.0].value.sum());
        let ng = self.needs(&[a]);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Rotation matrix of the normalized quaternion `(w, x, y, z)` held in a `1 x 4` row.
    pub fn quat_to_mat(&self, q: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let d = nodes[q.0].value.data();
            assert_eq!(d.len(), 4, "quat_to_mat expects four entries");
            let m = quat_matrix_unnormalized([d[0], d[1], d[2], d[3]]);
            Tensor::from_vec(3, 3, m.iter().flatten().copied().collect()).unwrap()
        };
        let ng = self.needs(&[q]);
        self.push(value, Op::QuatToMat(q), ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.needs_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let param_vars = self.param_vars.borrow().clone();
        Gradients { grads, param_vars }
    }
}

/// Gradients from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<usize, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, `None` if it was unused or frozen.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars.get(&id.0).and_then(|v| self.wrt(*v))
    }

    /// Adds `scale ×` every parameter gradient into `acc`, indexed by parameter id.
    pub fn accumulate_into(&self, acc: &mut [Option<Tensor>], scale: f64) {
        let mut ids: Vec<_> = self.param_vars.iter().collect();
        ids.sort_by_key(|(k, _)| **k);
        for (id, var) in ids {
            if let Some(g) = self.wrt(*var) {
                let slot = &mut acc[*id];
                match slot {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                            *a += scale * b;
                        }
                    }
                    None => {
                        let mut t = g.clone();
                        t.scale_assign(scale);
                        *slot = Some(t);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize), f: impl FnOnce(&mut Tensor)) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.0, shape.1));
    }
    f(slot.as_mut().unwrap());
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let wants = |v: &Var| nodes[v.0].needs_grad;
    let val = |v: &Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (x, y) = (val(a), val(b));
            if wants(a) {
                // d op(a) = g · op(b)ᵀ
                accumulate_with(grads, *a, x.shape(), |acc| {
                    if *ta {
                        gemm(y, *tb, g, true, acc, 1.0);
                    } else {
                        gemm(g, false, y, !*tb, acc, 1.0);
                    }
                });
            }
            if wants(b) {
                // d op(b) = op(a)ᵀ · g
                accumulate_with(grads, *b, y.shape(), |acc| {
                    if *tb {
                        gemm(g, true, x, *ta, acc, 1.0);
                    } else {
                        gemm(x, !*ta, g, false, acc, 1.0);
                    }
                });
            }
        }
        Op::Add(a, b) => {
            if wants(a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if wants(a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(b) {
                accumulate(grads, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if wants(a) {
                accumulate(grads, *a, g.zip_map(val(b), |u, v| u * v));
            }
            if wants(b) {
                accumulate(grads, *b, g.zip_map(val(a), |u, v| u * v));
            }
        }
        Op::AddRow { a, row } => {
            if wants(a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(row) {
                let mut s = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *row, s);
            }
        }
        Op::MulRow { a, row } => {
            let (x, w) = (val(a), val(row));
            if wants(a) {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    for (o, s) in d.row_mut(r).iter_mut().zip(w.data()) {
                        *o *= s;
                    }
                }
                accumulate(grads, *a, d);
            }
            if wants(row) {
                let mut s = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for ((o, gv), xv) in s.data_mut().iter_mut().zip(g.row(r)).zip(x.row(r)) {
                        *o += gv * xv;
                    }
                }
                accumulate(grads, *row, s);
            }
        }
        Op::MulCol { a, col } => {
            let (x, c) = (val(a), val(col));
            if wants(a) {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let s = c.data()[r];
                    for o in d.row_mut(r) {
                        *o *= s;
                    }
                }
                accumulate(grads, *a, d);
            }
            if wants(col) {
                let d = Tensor::from_fn(c.rows(), 1, |r, _| {
                    g.row(r).iter().zip(x.row(r)).map(|(u, v)| u * v).sum()
                });
                accumulate(grads, *col, d);
            }
        }
        Op::Scale(a, k) => accumulate(grads, *a, g.map(|v| v * k)),
        Op::Relu(a) => {
            accumulate(grads, *a, g.zip_map(val(a), |u, x| if x > 0.0 { u } else { 0.0 }));
        }
        Op::Silu(a) => {
            accumulate(
                grads,
                *a,
                g.zip_map(val(a), |u, x| {
                    let s = sigmoid(x);
                    u * s * (1.0 + x * (1.0 - s))
                }),
            );
        }
        Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |u, y| u * y)),
        Op::Square(a) => accumulate(grads, *a, g.zip_map(val(a), |u, x| 2.0 * u * x)),
        Op::Sqrt(a) => accumulate(grads, *a, g.zip_map(&node.value, |u, y| 0.5 * u / y)),
        Op::Softmax(a) => {
            let y = &node.value;
            let mut d = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(u, v)| u * v).sum();
                for ((o, u), v) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *o = v * (u - dot);
                }
            }
            accumulate(grads, *a, d);
        }
        Op::LayerNorm { a, eps } => {
            let x = val(a);
            let y = &node.value;
            let c = x.cols() as f64;
            let mut d = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let (_, inv) = moments(x.row(r), *eps);
                let gm: f64 = g.row(r).iter().sum::<f64>() / c;
                let gy: f64 = g.row(r).iter().zip(y.row(r)).map(|(u, v)| u * v).sum::<f64>() / c;
                for ((o, u), v) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *o = inv * (u - gm - v * gy);
                }
            }
            accumulate(grads, *a, d);
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let w = val(p).cols();
                if wants(p) {
                    let d = Tensor::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                    accumulate(grads, *p, d);
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let h = val(p).rows();
                if wants(p) {
                    let d = Tensor::from_fn(h, g.cols(), |r, c| g.get(off + r, c));
                    accumulate(grads, *p, d);
                }
                off += h;
            }
        }
        Op::SliceCols { a, start } => {
            let x = val(a);
            accumulate_with(grads, *a, x.shape(), |acc| {
                for r in 0..g.rows() {
                    for (c, v) in g.row(r).iter().enumerate() {
                        acc.data_mut()[r * x.cols() + start + c] += v;
                    }
                }
            });
        }
        Op::Sparse { map, a } => {
            let x = val(a);
            accumulate_with(grads, *a, x.shape(), |acc| map.apply_transpose_into(g, acc));
        }
        Op::Reshape(a) => {
            let (r, c) = val(a).shape();
            accumulate(grads, *a, g.clone().reshape(r, c).unwrap());
        }
        Op::MaxRows { a, argmax } => {
            let x = val(a);
            accumulate_with(grads, *a, x.shape(), |acc| {
                for (c, &r) in argmax.iter().enumerate() {
                    acc.data_mut()[r * x.cols() + c] += g.data()[c];
                }
            });
        }
        Op::SumAll(a) => {
            let (r, c) = val(a).shape();
            accumulate(grads, *a, Tensor::full(r, c, g.data()[0]));
        }
        Op::QuatToMat(q) => {
            let d = val(q).data();
            let jac = quat_matrix_jacobian([d[0], d[1], d[2], d[3]]);
            let mut out = [0.0; 4];
            for (k, o) in out.iter_mut().enumerate() {
                *o = (0..9).map(|e| g.data()[e] * jac[k][e]).sum();
            }
            accumulate(grads, *q, Tensor::from_vec(1, 4, out.to_vec()).unwrap());
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(r: &mut [f64]) {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in r.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in r.iter_mut() {
        *v /= s;
    }
}

fn moments(r: &[f64], eps: f64) -> (f64, f64) {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `R(q / |q|)` written as `P(q) / |q|²` with `P` quadratic.
fn quat_matrix_unnormalized(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n: f64 = q.iter().map(|v| v * v).sum();
    let p = quat_quadratic(q);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = p[i * 3 + j] / n;
        }
    }
    m
}

fn quat_quadratic([w, x, y, z]: [f64; 4]) -> [f64; 9] {
    [
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    ]
}

/// `∂R_e / ∂q_k` for the nine entries `e` of `R = P(q)/|q|²`.
fn quat_matrix_jacobian(q: [f64; 4]) -> [[f64; 9]; 4] {
    let [w, x, y, z] = q;
    let n = w * w + x * x + y * y + z * z;
    let p = quat_quadratic(q);
    // ∂P/∂w, ∂P/∂x, ∂P/∂y, ∂P/∂z
    let dp: [[f64; 9]; 4] = [
        [2.0 * w, -2.0 * z, 2.0 * y, 2.0 * z, 2.0 * w, -2.0 * x, -2.0 * y, 2.0 * x, 2.0 * w],
        [2.0 * x, 2.0 * y, 2.0 * z, 2.0 * y, -2.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -2.0 * x],
        [-2.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 2.0 * y, 2.0 * z, -2.0 * w, 2.0 * z, -2.0 * y],
        [-2.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -2.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 2.0 * z],
    ];
    let mut jac = [[0.0; 9]; 4];
    for k in 0..4 {
        for e in 0..9 {
            jac[k][e] = dp[k][e] / n - 2.0 * q[k] * p[e] / (n * n);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check(x: Tensor, build: impl Fn(&Graph, Var) -> Var) {
        // weight outputs so that uniform-sum cancellations do not hide errors
        let weighted = |g: &Graph, v: Var| {
            let y = build(g, v);
            let (r, c) = g.shape(y);
            let w = g.constant(Tensor::from_fn(r, c, |i, j| 0.3 + 0.1 * ((i * 7 + j * 3) % 5) as f64));
            g.sum_all(g.mul(y, w))
        };
        let g = Graph::detached();
        let v = g.input(x.clone());
        let loss = weighted(&g, v);
        let analytic = g.backward(loss).wrt(v).unwrap().clone();
        let numeric = numeric_grad(&x, &|t: &Tensor| {
            let g = Graph::detached();
            let v = g.input(t.clone());
            let s = weighted(&g, v);
            let out = g.value(s).get(0, 0);
            out
        });
        let err = analytic.zip_map(&numeric, |a, b| (a - b).abs()).max_abs();
        let scale = numeric.max_abs().max(1e-3);
        assert!(err / scale < 1e-6, "gradient mismatch: {err} (scale {scale})\n{analytic:?}\n{numeric:?}");
    }

    fn sample(r: usize, c: usize, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(r, c, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn elementwise_gradients() {
        let x = sample(3, 4, 1);
        check(x.clone(), |g, v| g.silu(v));
        check(x.clone(), |g, v| g.exp(v));
        check(x.clone(), |g, v| g.square(v));
        check(x.map(|v| v.abs() + 0.5), |g, v| g.sqrt(v));
        check(x.clone(), |g, v| g.scale(v, -2.5));
        check(x.clone(), |g, v| g.mul(v, g.square(v)));
        check(x.clone(), |g, v| g.sub(g.exp(v), v));
    }

    #[test]
    fn matmul_gradients_all_transpose_modes() {
        let b = sample(4, 5, 2);
        let bt = b.transpose();
        let x = sample(3, 4, 3);
        check(x.clone(), |g, v| g.matmul(v, g.constant(b.clone())));
        check(x.clone(), |g, v| g.matmul_bt(v, g.constant(bt.clone())));
        check(x.clone(), |g, v| g.matmul_t(g.constant(sample(3, 2, 4)), true, v, false));
        check(x.clone(), |g, v| g.matmul_t(v, true, g.constant(sample(3, 2, 5)), false));
        check(x.clone(), |g, v| g.matmul_bt(v, v));
        check(x, |g, v| g.matmul_t(v, true, v, false));
    }

    #[test]
    fn row_and_reduction_gradients() {
        let x = sample(4, 3, 6);
        let row = sample(1, 3, 7);
        let col = sample(4, 1, 8);
        check(x.clone(), |g, v| g.add_row(v, g.constant(row.clone())));
        check(row.clone(), |g, v| g.add_row(g.constant(x.clone()), v));
        check(row.clone(), |g, v| g.mul_row(g.constant(x.clone()), v));
        check(x.clone(), |g, v| g.mul_row(v, g.constant(row.clone())));
        check(col.clone(), |g, v| g.mul_col(g.constant(x.clone()), v));
        check(x.clone(), |g, v| g.mul_col(v, g.constant(col.clone())));
        check(x.clone(), |g, v| g.softmax(v));
        check(x.clone(), |g, v| g.layer_norm(v, 1e-5));
        check(x.clone(), |g, v| g.max_rows(v));
        check(x.clone(), |g, v| g.mean_rows(v));
        check(x.clone(), |g, v| g.broadcast_rows(g.slice_cols(g.mean_rows(v), 1, 2), 3));
        check(x.clone(), |g, v| g.reshape(v, 2, 6));
        check(x.clone(), |g, v| g.gather_rows(v, &[3, 0, 0, 2]));
        check(x.clone(), |g, v| g.concat_cols(&[v, g.square(v)]));
        check(x, |g, v| g.concat_rows(&[v, g.exp(v)]));
    }

    #[test]
    fn quaternion_matrix_gradient() {
        let q = Tensor::from_rows(&[[0.9, -0.3, 0.2, 0.4]]).unwrap();
        check(q, |g, v| g.quat_to_mat(v));
    }

    #[test]
    fn quaternion_matrix_is_a_rotation() {
        let g = Graph::detached();
        let q = g.constant(Tensor::from_rows(&[[2.0, 1.0, -1.0, 0.5]]).unwrap());
        let r = g.value(g.quat_to_mat(q)).clone();
        let rtr = r.transpose().matmul(&r).unwrap();
        let err = rtr.zip_map(&Tensor::identity(3), |a, b| a - b).max_abs();
        assert!(err < 1e-12);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = store.add("b", Tensor::from_rows(&[[3.0, 4.0]]).unwrap());
        store.set_frozen(a, true);
        let g = Graph::new(&store);
        let loss = g.sum_all(g.mul(g.param(a), g.param(b)));
        let grads = g.backward(loss);
        assert!(grads.param(a).is_none());
        assert_eq!(grads.param(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn repeated_param_lookup_shares_one_node() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(3.0));
        let g = Graph::new(&store);
        assert_eq!(g.param(a), g.param(a));
        let loss = g.sum_all(g.mul(g.param(a), g.param(a)));
        assert_eq!(g.backward(loss).param(a).unwrap().get(0, 0), 6.0);
    }
}

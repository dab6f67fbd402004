//! Nearest-neighbour queries. Every routine orders candidates by
//! `(squared distance, index)`, so accelerated and brute-force answers agree
//! bit for bit.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[inline]
fn cmp_candidate(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

fn check(query: &Tensor, reference: &Tensor, k: usize) -> Result<()> {
    if query.cols() != reference.cols() {
        return Err(Error::Shape(format!("query width {} vs reference width {}", query.cols(), reference.cols())));
    }
    if k > reference.rows() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} reference rows", reference.rows())));
    }
    Ok(())
}

/// The `k` nearest reference rows of every query row, nearest first.
pub fn knn(query: &Tensor, reference: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    check(query, reference, k)?;
    if reference.cols() == 3 && reference.rows() > 64 {
        let tree = KdTree::new(reference);
        return Ok((0..query.rows()).map(|i| tree.nearest(&query.point(i), k)).collect());
    }
    knn_brute(query, reference, k)
}

pub fn knn_brute(query: &Tensor, reference: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    check(query, reference, k)?;
    Ok((0..query.rows())
        .map(|i| {
            let q = query.row(i);
            let mut c: Vec<(f64, usize)> = (0..reference.rows()).map(|j| (sq_dist(q, reference.row(j)), j)).collect();
            if k < c.len() {
                c.select_nth_unstable_by(k, cmp_candidate);
                c.truncate(k);
            }
            c.sort_unstable_by(cmp_candidate);
            c.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Reference rows within distance `r` (inclusive) of each query row, nearest first.
pub fn within_radius(query: &Tensor, reference: &Tensor, r: f64) -> Result<Vec<Vec<usize>>> {
    check(query, reference, 0)?;
    let r2 = r * r;
    Ok((0..query.rows())
        .map(|i| {
            let q = query.row(i);
            let mut c: Vec<(f64, usize)> = (0..reference.rows())
                .map(|j| (sq_dist(q, reference.row(j)), j))
                .filter(|(d, _)| *d <= r2)
                .collect();
            c.sort_unstable_by(cmp_candidate);
            c.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

const LEAF: usize = 8;

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// A 3-d tree over a fixed reference set.
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn new(reference: &Tensor) -> Self {
        assert_eq!(reference.cols(), 3, "kd-tree needs three-column points");
        let points = reference.to_points();
        let mut tree = Self { order: (0..points.len()).collect(), points, nodes: Vec::new() };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for c in 0..3 {
                lo[c] = lo[c].min(self.points[i][c]);
                hi[c] = hi[c].max(self.points[i][c]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap()).unwrap();
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].partial_cmp(&pts[b][axis]).unwrap().then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(KdNode::Split { axis, value, left: 0, right: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of the `k` nearest points, nearest first, ties by index.
    pub fn nearest(&self, q: &[f64; 3], k: usize) -> Vec<usize> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.search(0, q, k, &mut best);
        }
        best.into_iter().map(|(_, i)| i).collect()
    }

    /// Nearest point and its squared distance.
    pub fn nearest_one(&self, q: &[f64; 3]) -> (usize, f64) {
        let mut best = Vec::with_capacity(2);
        self.search(0, q, 1, &mut best);
        (best[0].1, best[0].0)
    }

    fn search(&self, node: usize, q: &[f64; 3], k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = (sq_dist(q, &self.points[i]), i);
                    if best.len() == k && cmp_candidate(&c, &best[k - 1]) != Ordering::Less {
                        continue;
                    }
                    let pos = best.partition_point(|b| cmp_candidate(b, &c) == Ordering::Less);
                    best.insert(pos, c);
                    best.truncate(k);
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, best);
                // points beyond the plane are at least diff² away; equality may still win on index
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

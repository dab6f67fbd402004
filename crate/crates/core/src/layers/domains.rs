//! The four ball neighbourhoods linking observed and prior points.

use crate::error::{Error, Result};
use crate::geometry::knn::sq_dist;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Observed,
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub index: usize,
    pub source: Source,
}

#[derive(Clone, Debug)]
pub struct NeighborDomain {
    /// 1: prior centres, observed neighbours. 2: observed centres, prior neighbours.
    /// 3: observed centres, both sets. 4: observed centres, observed neighbours.
    pub kind: u8,
    pub radius: f64,
    pub adjacency: Vec<Vec<Neighbor>>,
}

impl NeighborDomain {
    pub fn centers(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    /// Neighbour indices into the stacked `[observed; prior]` point table.
    pub fn stacked_indices(&self, observed: usize) -> Vec<Vec<usize>> {
        self.adjacency
            .iter()
            .map(|row| {
                row.iter()
                    .map(|n| match n.source {
                        Source::Observed => n.index,
                        Source::Prior => observed + n.index,
                    })
                    .collect()
            })
            .collect()
    }
}

fn ball(
    centers: &Tensor,
    sets: &[(&Tensor, Source)],
    r: f64,
    cap: Option<usize>,
) -> Vec<Vec<Neighbor>> {
    let r2 = r * r;
    (0..centers.rows())
        .map(|c| {
            let q = centers.row(c);
            let mut hits: Vec<(f64, Source, usize)> = Vec::new();
            for (pts, src) in sets {
                for j in 0..pts.rows() {
                    let d = sq_dist(q, pts.row(j));
                    if d <= r2 {
                        hits.push((d, *src, j));
                    }
                }
            }
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            if let Some(k) = cap {
                hits.truncate(k);
            }
            hits.into_iter().map(|(_, source, index)| Neighbor { index, source }).collect()
        })
        .collect()
}

/// All four domains, each neighbour list nearest first and at most `cap` long.
pub fn build_neighbor_domains(
    observed: &Tensor,
    prior: &Tensor,
    r: f64,
    cap: Option<usize>,
) -> Result<[NeighborDomain; 4]> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {r}")));
    }
    let obs = (observed, Source::Observed);
    let pri = (prior, Source::Prior);
    let mk = |kind, adjacency| NeighborDomain { kind, radius: r, adjacency };
    Ok([
        mk(1, ball(prior, &[obs], r, cap)),
        mk(2, ball(observed, &[pri], r, cap)),
        mk(3, ball(observed, &[obs, pri], r, cap)),
        mk(4, ball(observed, &[obs], r, cap)),
    ])
}

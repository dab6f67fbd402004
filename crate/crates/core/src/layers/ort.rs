//! The observation-related transformer block and its reduced decoder variant.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::group::RotationGroup;
use crate::geometry::knn::sq_dist;
use crate::geometry::pose::Vec3;
use crate::tensor::Tensor;

use super::attention::AttentionBlock;
use super::domains::{build_neighbor_domains, NeighborDomain};
use super::graph_conv::{GraphConv, GraphEdges};
use super::group_conv::{group_mean, GroupConv};
use super::kernel::{canonical_offsets, radial_kernel_points, ConvSupport, KernelLayout, RadialConv};
use super::nn::{Builder, Linear};
use super::seed::{generate_seed_points, SeedCloud};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    pub width: usize,
    pub group_width: usize,
    pub heads: usize,
    /// Adaptive kernel size including the centre.
    pub kernel_size: usize,
    pub k_seed: usize,
    pub max_neighbors: usize,
    /// Kernel influence distance as a fraction of the neighbourhood radius.
    pub sigma_ratio: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { width: 32, group_width: 8, heads: 4, kernel_size: 16, k_seed: 4, max_neighbors: 16, sigma_ratio: 0.5 }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        if self.kernel_size < 2 || self.k_seed == 0 || self.max_neighbors == 0 || self.group_width == 0 {
            return Err(Error::InvalidArgument("kernel size, seed count, neighbour cap and group width must be positive".into()));
        }
        if !(self.sigma_ratio > 0.0) {
            return Err(Error::InvalidArgument("sigma ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Kernel points projected from the `k - 1` feature-space nearest sources of each centre.
pub fn adaptive_kernels(
    centers: &Tensor,
    center_feats: &Tensor,
    sources: &Tensor,
    source_feats: &Tensor,
    skip_same_index: bool,
    k: usize,
    r: f64,
) -> Result<KernelLayout> {
    let mut out = Vec::with_capacity(centers.rows());
    for c in 0..centers.rows() {
        let mut cand: Vec<(f64, usize)> = (0..sources.rows())
            .filter(|&j| !(skip_same_index && j == c))
            .map(|j| (sq_dist(center_feats.row(c), source_feats.row(j)), j))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut init: Vec<Vec3> = cand.iter().take(k - 1).map(|&(_, j)| sources.point(j)).collect();
        let center = centers.point(c);
        while init.len() < k - 1 {
            init.push(init.last().copied().unwrap_or(center));
        }
        let kernel = radial_kernel_points(center, r, &init)?;
        out.push(kernel.offsets());
    }
    Ok(KernelLayout::PerCenter(out))
}

/// Inputs of one block; `radius` is the neighbourhood radius at this stage.
#[derive(Clone, Copy)]
pub struct BlockInput<'a> {
    pub observed: &'a Tensor,
    pub observed_feats: Var,
    pub prior: &'a Tensor,
    pub prior_feats: Var,
    pub radius: f64,
}

pub struct BlockOutput {
    /// Fused observed-point features, `n x d`.
    pub feats: Var,
    pub prior_feats: Var,
    /// `(n·|G|) x group_width` group feature map, when the block has a group branch.
    pub group_map: Option<Var>,
    pub seeds: SeedCloud,
}

#[derive(Clone, Debug)]
pub struct GroupBranch {
    pub lift: RadialConv,
    pub conv: GroupConv,
    pub pool: Linear,
}

#[derive(Clone, Debug)]
pub struct OrtBlock {
    pub config: BlockConfig,
    pub prior_conv: RadialConv,
    pub to_prior_conv: RadialConv,
    pub union_conv: RadialConv,
    pub self_conv: RadialConv,
    pub graph: GraphConv,
    pub group: Option<GroupBranch>,
    pub attention: AttentionBlock,
}

impl OrtBlock {
    pub fn new(b: &mut Builder, name: &str, config: &BlockConfig, group: Option<&RotationGroup>) -> Result<Self> {
        config.validate()?;
        let (d, k) = (config.width, config.kernel_size);
        let mut s = b.sub(name);
        let prior_conv = RadialConv::new(&mut s, "n1", k, d, d, false);
        let to_prior_conv = RadialConv::new(&mut s, "n2", k, d, d, false);
        let union_conv = RadialConv::new(&mut s, "n3", k, d, d, false);
        let self_conv = RadialConv::new(&mut s, "n4", k, d, d, false);
        let graph = GraphConv::new(&mut s, "graph", d, d, d, d);
        let group = group.map(|grp| GroupBranch {
            lift: RadialConv::new(&mut s, "group.lift", 13, d, config.group_width, false),
            conv: GroupConv::new(&mut s, "group.conv", grp, config.group_width, config.group_width),
            pool: Linear::new(&mut s, "group.pool", config.group_width, d),
        });
        let attention = AttentionBlock::new(&mut s, "attn", d, config.heads)?;
        Ok(Self { config: config.clone(), prior_conv, to_prior_conv, union_conv, self_conv, graph, group, attention })
    }

    pub fn forward(&self, g: &Graph, input: BlockInput, group: &RotationGroup) -> Result<BlockOutput> {
        let cfg = &self.config;
        let n = input.observed.rows();
        let obs_f = g.value(input.observed_feats).clone();
        let pri_f = g.value(input.prior_feats).clone();
        let seeds = generate_seed_points(input.observed, &obs_f, input.prior, &pri_f, cfg.k_seed.min(n))?;
        let prior_pts = seeds.prior_points();
        let r = input.radius;
        let sigma = cfg.sigma_ratio * r;
        let domains = build_neighbor_domains(input.observed, &prior_pts, r, Some(cfg.max_neighbors))?;
        let stacked_pts = seeds.points.clone();
        let stacked_f = Tensor::concat_rows(&[&obs_f, &pri_f])?;
        let stacked_var = g.concat_rows(&[input.observed_feats, input.prior_feats]);
        let trivial = RotationGroup::new(crate::geometry::group::GroupKind::Trivial);
        let k = cfg.kernel_size;

        let adj = |dom: &NeighborDomain| -> Vec<Vec<usize>> {
            dom.adjacency.iter().map(|row| row.iter().map(|nb| nb.index).collect()).collect()
        };
        let conv = |layer: &RadialConv,
                    centers: &Tensor,
                    neighbors: &[Vec<usize>],
                    kernel: &KernelLayout,
                    sources: &Tensor,
                    feats: Var|
         -> Result<Var> {
            let support = ConvSupport { centers, sources, neighbors, kernel, sigma };
            layer.forward(g, &support, feats, None, &trivial)
        };

        // prior centres gather from observed points
        let k1 = adaptive_kernels(&prior_pts, &pri_f, input.observed, &obs_f, false, k, r)?;
        let n1 = adj(&domains[0]);
        let to_prior = conv(&self.prior_conv, &prior_pts, &n1, &k1, input.observed, input.observed_feats)?;
        let prior_feats = g.add(g.silu(to_prior), input.prior_feats);

        // observed centres gather from prior, union and observed sets
        let k2 = adaptive_kernels(input.observed, &obs_f, &prior_pts, &pri_f, false, k, r)?;
        let k3 = adaptive_kernels(input.observed, &obs_f, &stacked_pts, &stacked_f, true, k, r)?;
        let k4 = adaptive_kernels(input.observed, &obs_f, input.observed, &obs_f, true, k, r)?;
        let n3 = domains[2].stacked_indices(n);
        let c2 = conv(&self.to_prior_conv, input.observed, &adj(&domains[1]), &k2, &prior_pts, input.prior_feats)?;
        let c3 = conv(&self.union_conv, input.observed, &n3, &k3, &stacked_pts, stacked_var)?;
        let n4 = adj(&domains[3]);
        let c4 = conv(&self.self_conv, input.observed, &n4, &k4, input.observed, input.observed_feats)?;
        let mut feats = g.add(g.silu(g.add(g.add(c2, c3), c4)), input.observed_feats);

        let edges = GraphEdges::new(input.observed, input.observed, &n4, r)?;
        feats = g.add(feats, self.graph.forward(g, feats, feats, &edges));

        let mut group_map = None;
        if let Some(branch) = &self.group {
            let kernel = KernelLayout::Shared(canonical_offsets(r));
            let support = ConvSupport { centers: input.observed, sources: &stacked_pts, neighbors: &n3, kernel: &kernel, sigma };
            let lifted = g.silu(branch.lift.forward(g, &support, stacked_var, None, group)?);
            let map = branch.conv.forward(g, lifted, n, group)?;
            let pooled = group_mean(g, map, n, group.len());
            feats = g.add(feats, branch.pool.forward(g, pooled));
            group_map = Some(map);
        }

        let fused = self.attention.forward(g, feats, prior_feats)?;
        Ok(BlockOutput { feats: fused, prior_feats, group_map, seeds })
    }
}

/// Adaptive point convolution plus graph layer, without group branch or attention.
#[derive(Clone, Debug)]
pub struct SimpleBlock {
    pub conv: RadialConv,
    pub graph: GraphConv,
    pub kernel_size: usize,
    pub max_neighbors: usize,
    pub sigma_ratio: f64,
}

impl SimpleBlock {
    pub fn new(b: &mut Builder, name: &str, config: &BlockConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut s = b.sub(name);
        Ok(Self {
            conv: RadialConv::new(&mut s, "conv", config.kernel_size, d, d, false),
            graph: GraphConv::new(&mut s, "graph", d, d, d, d),
            kernel_size: config.kernel_size,
            max_neighbors: config.max_neighbors,
            sigma_ratio: config.sigma_ratio,
        })
    }

    pub fn forward(&self, g: &Graph, points: &Tensor, feats: Var, r: f64) -> Result<Var> {
        let f = g.value(feats).clone();
        let nb = super::domains::build_neighbor_domains(points, points, r, Some(self.max_neighbors))?;
        let n4: Vec<Vec<usize>> = nb[3].adjacency.iter().map(|row| row.iter().map(|x| x.index).collect()).collect();
        let kernel = adaptive_kernels(points, &f, points, &f, true, self.kernel_size, r)?;
        let trivial = RotationGroup::new(crate::geometry::group::GroupKind::Trivial);
        let support = ConvSupport { centers: points, sources: points, neighbors: &n4, kernel: &kernel, sigma: self.sigma_ratio * r };
        let c = self.conv.forward(g, &support, feats, None, &trivial)?;
        let h = g.add(g.silu(c), feats);
        let edges = GraphEdges::new(points, points, &n4, r)?;
        Ok(g.add(h, self.graph.forward(g, h, h, &edges)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;
    use crate::geometry::group::icosahedral_group;
    use crate::geometry::pose::rotate_points;
    use crate::layers::group_conv::left_translate;
    use crate::rng;

    fn setup(group: &RotationGroup) -> (ParamStore, OrtBlock) {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(21);
        let cfg = BlockConfig { width: 8, group_width: 4, heads: 2, kernel_size: 6, k_seed: 2, max_neighbors: 8, sigma_ratio: 0.5 };
        let block = OrtBlock::new(&mut Builder::new(&mut store, &mut r), "ort", &cfg, Some(group)).unwrap();
        (store, block)
    }

    fn run(store: &ParamStore, block: &OrtBlock, group: &RotationGroup, obs: &Tensor, pri: &Tensor, of: &Tensor, pf: &Tensor) -> (Tensor, Tensor) {
        let g = Graph::new(store);
        let input = BlockInput {
            observed: obs,
            observed_feats: g.constant(of.clone()),
            prior: pri,
            prior_feats: g.constant(pf.clone()),
            radius: 0.8,
        };
        let out = block.forward(&g, input, group).unwrap();
        let f = g.value(out.feats).clone();
        let m = g.value(out.group_map.unwrap()).clone();
        (f, m)
    }

    #[test]
    fn group_map_shape_and_equivariance() {
        let group = icosahedral_group();
        let (store, block) = setup(&group);
        let mut r = rng::seeded(5);
        let obs = rng::uniform_tensor(&mut r, 12, 3, -1.0, 1.0);
        let pri = rng::uniform_tensor(&mut r, 10, 3, -1.0, 1.0);
        let of = rng::normal_tensor(&mut r, 12, 8);
        let pf = rng::normal_tensor(&mut r, 10, 8);
        let (f, m) = run(&store, &block, &group, &obs, &pri, &of, &pf);
        assert_eq!(f.shape(), (12, 8));
        assert_eq!(m.shape(), (12 * 60, 4));
        let (f2, _) = run(&store, &block, &group, &obs, &pri, &of, &pf);
        assert_eq!(f, f2);
        for h in [3, 40] {
            let rot = group.element(h);
            let (_, mr) = run(&store, &block, &group, &rotate_points(&obs, rot), &rotate_points(&pri, rot), &of, &pf);
            let want = left_translate(&m, 12, &group, h);
            assert!(mr.zip_map(&want, |a, b| (a - b).abs()).max_abs() < 1e-9);
        }
        let shift = |t: &Tensor| t.map(|v| v + 3.25);
        let (ft, mt) = run(&store, &block, &group, &shift(&obs), &shift(&pri), &of, &pf);
        assert!(ft.zip_map(&f, |a, b| (a - b).abs()).max_abs() < 1e-10);
        assert!(mt.zip_map(&m, |a, b| (a - b).abs()).max_abs() < 1e-10);
    }
}

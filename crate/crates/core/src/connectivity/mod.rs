//! Neighbor search and the bipartite edge sets connecting a point cloud to a
//! grid.

mod kdtree;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use kdtree::{dist2, Candidates, KdTree};

/// Below this many targets a linear scan beats building a tree.
const EXHAUSTIVE_BELOW: usize = 64;

/// Which side of the bipartite graph the edges leave from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    CloudToGrid,
    GridToCloud,
    /// Neighborhoods inside a single cloud, used by point-native convolution.
    CloudToCloud,
}

impl Direction {
    pub fn inverse(self) -> Self {
        match self {
            Direction::CloudToGrid => Direction::GridToCloud,
            Direction::GridToCloud => Direction::CloudToGrid,
            Direction::CloudToCloud => Direction::CloudToCloud,
        }
    }
}

/// Directed edges `src -> dst`, deduplicated and sorted by `(dst, src)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    edges: Vec<(usize, usize)>,
    direction: Direction,
    n_src: usize,
    n_dst: usize,
}

impl EdgeSet {
    /// Builds an edge set from arbitrary pairs, sorting and deduplicating them.
    pub fn new(
        mut edges: Vec<(usize, usize)>,
        direction: Direction,
        n_src: usize,
        n_dst: usize,
    ) -> Result<Self> {
        if let Some(&(s, d)) = edges.iter().find(|&&(s, d)| s >= n_src || d >= n_dst) {
            return Err(Error::Data(format!(
                "edge {s}->{d} out of bounds for {n_src} sources and {n_dst} destinations"
            )));
        }
        edges.sort_unstable_by_key(|&(s, d)| (d, s));
        edges.dedup();
        Ok(Self {
            edges,
            direction,
            n_src,
            n_dst,
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn n_src(&self) -> usize {
        self.n_src
    }

    pub fn n_dst(&self) -> usize {
        self.n_dst
    }

    /// Number of edges entering each destination.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = alloc::vec![0; self.n_dst];
        for &(_, d) in &self.edges {
            deg[d] += 1;
        }
        deg
    }

    /// Number of edges leaving each source.
    pub fn out_degrees(&self) -> Vec<usize> {
        let mut deg = alloc::vec![0; self.n_src];
        for &(s, _) in &self.edges {
            deg[s] += 1;
        }
        deg
    }
}

/// Swaps source and destination of every edge and flips the direction tag.
pub fn invert_edges(edges: &EdgeSet) -> EdgeSet {
    let mut flipped: Vec<(usize, usize)> = edges.edges.iter().map(|&(s, d)| (d, s)).collect();
    flipped.sort_unstable_by_key(|&(s, d)| (d, s));
    EdgeSet {
        edges: flipped,
        direction: edges.direction.inverse(),
        n_src: edges.n_dst,
        n_dst: edges.n_src,
    }
}

fn check_points(name: &str, coords: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || !coords.len().is_multiple_of(dim) {
        return Err(Error::Data(format!(
            "{name}: buffer length {} is not a multiple of dim {dim}",
            coords.len()
        )));
    }
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::Data(format!("{name}: non-finite coordinate")));
    }
    Ok(coords.len() / dim)
}

/// For every query, the indices of its `k` nearest targets sorted by
/// `(distance, index)`. Returned flat, `k` entries per query.
pub fn knn(queries: &[f64], targets: &[f64], dim: usize, k: usize) -> Result<Vec<usize>> {
    let m = check_points("queries", queries, dim)?;
    let t = check_points("targets", targets, dim)?;
    if k == 0 || k > t {
        return Err(Error::Config(format!(
            "k = {k} must be in 1..={t} (number of targets)"
        )));
    }
    if t < EXHAUSTIVE_BELOW {
        return Ok(knn_scan(queries, targets, dim, k));
    }
    let tree = KdTree::build(targets, dim);
    let mut out = Vec::with_capacity(m * k);
    let mut cands = Candidates::new(k);
    for q in queries.chunks_exact(dim) {
        tree.query(q, &mut cands);
        out.extend(cands.indices());
    }
    Ok(out)
}

/// Exhaustive `O(M·T)` k-nearest-neighbor scan with the same ordering as
/// [`knn`].
pub fn knn_exhaustive(
    queries: &[f64],
    targets: &[f64],
    dim: usize,
    k: usize,
) -> Result<Vec<usize>> {
    check_points("queries", queries, dim)?;
    let t = check_points("targets", targets, dim)?;
    if k == 0 || k > t {
        return Err(Error::Config(format!(
            "k = {k} must be in 1..={t} (number of targets)"
        )));
    }
    Ok(knn_scan(queries, targets, dim, k))
}

fn knn_scan(queries: &[f64], targets: &[f64], dim: usize, k: usize) -> Vec<usize> {
    let m = queries.len() / dim;
    let mut out = Vec::with_capacity(m * k);
    let mut cands = Candidates::new(k);
    for q in queries.chunks_exact(dim) {
        cands.clear();
        for (j, p) in targets.chunks_exact(dim).enumerate() {
            cands.offer(dist2(q, p), j);
        }
        out.extend(cands.indices());
    }
    out
}

/// Bilateral k-nearest-neighbor connectivity from a cloud to a grid.
///
/// Every grid point receives edges from its `k` nearest cloud points and
/// every cloud point sends edges to its `k` nearest grid points. The union
/// is deduplicated, so no node on either side is left disconnected.
pub fn bilateral_knn(
    cloud_coords: &[f64],
    grid_coords: &[f64],
    dim: usize,
    k: usize,
) -> Result<EdgeSet> {
    let n_cloud = check_points("cloud", cloud_coords, dim)?;
    let n_grid = check_points("grid", grid_coords, dim)?;
    if k == 0 || k > n_cloud.min(n_grid) {
        return Err(Error::Config(format!(
            "k = {k} must be in 1..={} (min of {n_cloud} cloud and {n_grid} grid points)",
            n_cloud.min(n_grid)
        )));
    }
    let grid_side = knn(grid_coords, cloud_coords, dim, k)?;
    let cloud_side = knn(cloud_coords, grid_coords, dim, k)?;
    let mut edges = Vec::with_capacity(k * (n_cloud + n_grid));
    for (i, row) in grid_side.chunks_exact(k).enumerate() {
        edges.extend(row.iter().map(|&j| (j, i)));
    }
    for (j, row) in cloud_side.chunks_exact(k).enumerate() {
        edges.extend(row.iter().map(|&i| (j, i)));
    }
    EdgeSet::new(edges, Direction::CloudToGrid, n_cloud, n_grid)
}

/// Each point receives edges from its `k` nearest points of the same cloud,
/// itself included.
pub fn self_knn(coords: &[f64], dim: usize, k: usize) -> Result<EdgeSet> {
    let n = check_points("cloud", coords, dim)?;
    let nn = knn(coords, coords, dim, k)?;
    let edges = nn
        .chunks_exact(k)
        .enumerate()
        .flat_map(|(i, row)| row.iter().map(move |&j| (j, i)))
        .collect();
    EdgeSet::new(edges, Direction::CloudToCloud, n, n)
}

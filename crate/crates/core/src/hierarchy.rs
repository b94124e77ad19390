//! Truncated k-d tree coarsening, mean pooling, copy unpooling and kNN edge
//! construction for coarse levels.
//!
//! A cell holding more than `c` nodes is split at the median of its
//! widest axis, the lower side taking `⌈count/2⌉` nodes; cells of at most `c`
//! nodes become clusters. Each cluster's centroid is a node of the next level
//! and coarse edges come from a symmetrized k-nearest-neighbour graph.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::meshgraph::{symmetrize, Edge, MeshGraph};

/// Default cluster size limit: 4 in 2-D, 8 in 3-D.
pub fn default_cluster_size(dim: usize) -> usize {
    if dim >= 3 {
        8
    } else {
        4
    }
}

pub const DEFAULT_KNN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub cluster_of: Vec<usize>,
    pub num_clusters: usize,
    pub cluster_size_limit: usize,
}

impl ClusterAssignment {
    pub fn num_nodes(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters];
        for &k in &self.cluster_of {
            sizes[k] += 1;
        }
        sizes
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_clusters];
        for (i, &k) in self.cluster_of.iter().enumerate() {
            members[k].push(i);
        }
        members
    }
}

fn check_coords(coords: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || !coords.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "{} coordinate values do not form rows of dim {dim}",
            coords.len()
        )));
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite coordinate".into()));
    }
    Ok(coords.len() / dim)
}

/// Partitions nodes into clusters of at most `c` by recursive balanced
/// median splits. Cluster indices follow depth-first, lower-side-first order.
pub fn build_clusters(coords: &[f64], dim: usize, c: usize) -> Result<ClusterAssignment> {
    let n = check_coords(coords, dim)?;
    if n == 0 {
        return Err(Error::InvalidInput("cannot cluster zero nodes".into()));
    }
    if c == 0 {
        return Err(Error::InvalidInput("cluster size limit must be ≥ 1".into()));
    }
    let mut index: Vec<usize> = (0..n).collect();
    let mut cluster_of = vec![usize::MAX; n];
    let mut next = 0;
    split_cell(&mut index, coords, dim, c, &mut cluster_of, &mut next);
    Ok(ClusterAssignment {
        cluster_of,
        num_clusters: next,
        cluster_size_limit: c,
    })
}

fn split_cell(
    cell: &mut [usize],
    coords: &[f64],
    dim: usize,
    c: usize,
    cluster_of: &mut [usize],
    next: &mut usize,
) {
    if cell.len() <= c {
        for &i in cell.iter() {
            cluster_of[i] = *next;
        }
        *next += 1;
        return;
    }
    let axis = widest_axis(cell, coords, dim);
    let lower = cell.len().div_ceil(2);
    cell.select_nth_unstable_by(lower - 1, |&a, &b| {
        coords[a * dim + axis]
            .total_cmp(&coords[b * dim + axis])
            .then(a.cmp(&b))
    });
    let (lo, hi) = cell.split_at_mut(lower);
    split_cell(lo, coords, dim, c, cluster_of, next);
    split_cell(hi, coords, dim, c, cluster_of, next);
}

/// Axis of greatest coordinate range over `cell`, lowest axis on ties.
fn widest_axis(cell: &[usize], coords: &[f64], dim: usize) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for axis in 0..dim {
        let (lo, hi) = cell.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = coords[i * dim + axis];
            (lo.min(v), hi.max(v))
        });
        if hi - lo > best.1 {
            best = (axis, hi - lo);
        }
    }
    best.0
}

/// Arithmetic mean of member coordinates for every cluster.
pub fn centroids(coords: &[f64], dim: usize, a: &ClusterAssignment) -> Vec<f64> {
    let pooled = pool_mean(
        &Matrix::from_vec(a.num_nodes(), dim, coords.to_vec()).expect("coords shape"),
        a,
    )
    .expect("assignment matches coords");
    pooled.into_vec()
}

/// Symmetric kNN graph: each node links to its `min(k, m−1)` nearest
/// neighbours (ties to the lower index), then reversals are added.
pub fn knn_edges(coords: &[f64], dim: usize, k: usize) -> Result<Vec<Edge>> {
    let m = check_coords(coords, dim)?;
    if k == 0 {
        return Err(Error::InvalidInput("knn k must be ≥ 1".into()));
    }
    let kk = k.min(m.saturating_sub(1));
    if kk == 0 {
        return Ok(Vec::new());
    }
    let mut directed = Vec::with_capacity(m * kk);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m);
    for i in 0..m {
        let p = &coords[i * dim..(i + 1) * dim];
        cand.clear();
        for j in 0..m {
            if j == i {
                continue;
            }
            let q = &coords[j * dim..(j + 1) * dim];
            let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((d2, j));
        }
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if kk < cand.len() {
            cand.select_nth_unstable_by(kk - 1, by_dist);
        }
        directed.extend(cand[..kk].iter().map(|&(_, j)| (i, j)));
    }
    Ok(symmetrize(directed))
}

/// Row `j` of the result is the mean of the rows of cluster `j`.
pub fn pool_mean<T: Real>(features: &Matrix<T>, a: &ClusterAssignment) -> Result<Matrix<T>> {
    if features.rows() != a.num_nodes() {
        return Err(Error::Shape(format!(
            "pool_mean: {} feature rows for {} assigned nodes",
            features.rows(),
            a.num_nodes()
        )));
    }
    let f = features.cols();
    let mut out = Matrix::zeros(a.num_clusters, f);
    let sizes = a.sizes();
    for (i, &k) in a.cluster_of.iter().enumerate() {
        for (o, &v) in out.data_mut()[k * f..(k + 1) * f].iter_mut().zip(features.row(i)) {
            *o += v;
        }
    }
    for (k, &s) in sizes.iter().enumerate() {
        let count = T::from_f64(s as f64);
        out.data_mut()[k * f..(k + 1) * f].iter_mut().for_each(|v| *v = *v / count);
    }
    Ok(out)
}

/// Row `i` of the result is coarse row `cluster_of[i]`.
pub fn unpool_copy<T: Real>(coarse: &Matrix<T>, a: &ClusterAssignment) -> Result<Matrix<T>> {
    if coarse.rows() != a.num_clusters {
        return Err(Error::Shape(format!(
            "unpool_copy: {} coarse rows for {} clusters",
            coarse.rows(),
            a.num_clusters
        )));
    }
    let f = coarse.cols();
    let mut out = Vec::with_capacity(a.num_nodes() * f);
    for &k in &a.cluster_of {
        out.extend_from_slice(coarse.row(k));
    }
    Matrix::from_vec(a.num_nodes(), f, out)
}

/// Differentiable mean pooling on a tape.
pub fn pool_mean_var<T: Real>(tape: &mut Tape<T>, x: Var, a: &ClusterAssignment) -> Result<Var> {
    tape.segment_mean(x, &a.cluster_of, a.num_clusters)
}

/// Differentiable copy unpooling on a tape.
pub fn unpool_copy_var<T: Real>(tape: &mut Tape<T>, x: Var, a: &ClusterAssignment) -> Result<Var> {
    if tape.shape(x).0 != a.num_clusters {
        return Err(Error::Shape(format!(
            "unpool_copy: {} coarse rows for {} clusters",
            tape.shape(x).0,
            a.num_clusters
        )));
    }
    tape.gather_rows(x, &a.cluster_of)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    /// Maps nodes of the finer level onto nodes of this level.
    pub assignment: ClusterAssignment,
    pub coarse_coords: Vec<f64>,
    pub coarse_edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    /// Number of coarse levels actually built.
    pub depth: usize,
    pub requested_depth: usize,
    pub dim: usize,
    pub c: usize,
    pub k: usize,
    pub levels: Vec<Level>,
}

impl Hierarchy {
    /// Node counts from the input level down to the coarsest.
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.levels.len() + 1);
        if let Some(first) = self.levels.first() {
            sizes.push(first.assignment.num_nodes());
        }
        sizes.extend(self.levels.iter().map(|l| l.assignment.num_clusters));
        sizes
    }

    /// Extends an early-stopped hierarchy with single-cluster identity
    /// levels so that exactly `depth` levels are available.
    pub fn padded(&self, depth: usize) -> Hierarchy {
        let mut out = self.clone();
        while out.levels.len() < depth {
            let last = out.levels.last().expect("hierarchy has at least one level");
            let m = last.assignment.num_clusters;
            out.levels.push(Level {
                assignment: ClusterAssignment {
                    cluster_of: (0..m).collect(),
                    num_clusters: m,
                    cluster_size_limit: self.c,
                },
                coarse_coords: last.coarse_coords.clone(),
                coarse_edges: last.coarse_edges.clone(),
            });
        }
        out.levels.truncate(depth.max(1));
        out.depth = out.levels.len();
        out
    }
}

/// Builds up to `depth` coarse levels, stopping early once a level has
/// fewer than two nodes.
pub fn build_hierarchy(graph: &MeshGraph, depth: usize, c: usize, k: usize) -> Result<Hierarchy> {
    build_hierarchy_from_coords(&graph.coords, graph.dim, depth, c, k).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", graph.name)),
        other => other,
    })
}

pub fn build_hierarchy_from_coords(
    coords: &[f64],
    dim: usize,
    depth: usize,
    c: usize,
    k: usize,
) -> Result<Hierarchy> {
    if depth == 0 {
        return Err(Error::InvalidInput("hierarchy depth must be ≥ 1".into()));
    }
    let n = check_coords(coords, dim)?;
    if n == 0 {
        return Err(Error::InvalidInput("cannot coarsen an empty graph".into()));
    }
    let mut levels = Vec::with_capacity(depth);
    let mut current = coords.to_vec();
    for _ in 0..depth {
        let m = current.len() / dim;
        if m < 2 && !levels.is_empty() {
            break;
        }
        let assignment = build_clusters(&current, dim, c)?;
        let coarse_coords = centroids(&current, dim, &assignment);
        let coarse_edges = knn_edges(&coarse_coords, dim, k)?;
        current = coarse_coords.clone();
        levels.push(Level {
            assignment,
            coarse_coords,
            coarse_edges,
        });
    }
    if levels.len() < depth {
        log::warn!(
            "hierarchy stopped early at depth {} of {depth} ({n} nodes, c = {c})",
            levels.len()
        );
    }
    Ok(Hierarchy {
        depth: levels.len(),
        requested_depth: depth,
        dim,
        c,
        k,
        levels,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLevel {
    cluster_of: Vec<usize>,
    coarse_coords: Vec<f64>,
    coarse_edges: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheFile {
    depth: usize,
    c: usize,
    k: usize,
    #[serde(default)]
    requested_depth: Option<usize>,
    #[serde(default)]
    dim: Option<usize>,
    levels: Vec<CacheLevel>,
}

pub fn hierarchy_to_bytes(h: &Hierarchy) -> Result<Vec<u8>> {
    let file = CacheFile {
        depth: h.depth,
        c: h.c,
        k: h.k,
        requested_depth: Some(h.requested_depth),
        dim: Some(h.dim),
        levels: h
            .levels
            .iter()
            .map(|l| CacheLevel {
                cluster_of: l.assignment.cluster_of.clone(),
                coarse_coords: l.coarse_coords.clone(),
                coarse_edges: l.coarse_edges.iter().map(|&(i, j)| [i, j]).collect(),
            })
            .collect(),
    };
    jsonfmt::to_vec_17(&file)
}

pub fn hierarchy_from_bytes(bytes: &[u8], dim: usize) -> Result<Hierarchy> {
    let file: CacheFile = serde_json::from_slice(bytes)?;
    if let Some(d) = file.dim {
        if d != dim {
            return Err(Error::Format(format!("cached hierarchy has dim {d}, expected {dim}")));
        }
    }
    if file.levels.len() != file.depth {
        return Err(Error::Format(format!(
            "cached hierarchy lists depth {} but has {} levels",
            file.depth,
            file.levels.len()
        )));
    }
    let mut levels = Vec::with_capacity(file.levels.len());
    let mut prev_m: Option<usize> = None;
    for (li, l) in file.levels.into_iter().enumerate() {
        let m = l.coarse_coords.len() / dim;
        if !l.coarse_coords.len().is_multiple_of(dim) || l.cluster_of.iter().any(|&k| k >= m) {
            return Err(Error::Format(format!("cached level {li} is inconsistent")));
        }
        if let Some(p) = prev_m {
            if p != l.cluster_of.len() {
                return Err(Error::Format(format!(
                    "cached level {li} assigns {} nodes, previous level has {p}",
                    l.cluster_of.len()
                )));
            }
        }
        prev_m = Some(m);
        levels.push(Level {
            assignment: ClusterAssignment {
                cluster_of: l.cluster_of,
                num_clusters: m,
                cluster_size_limit: file.c,
            },
            coarse_coords: l.coarse_coords,
            coarse_edges: l.coarse_edges.into_iter().map(|[i, j]| (i, j)).collect(),
        });
    }
    Ok(Hierarchy {
        depth: file.depth,
        requested_depth: file.requested_depth.unwrap_or(file.depth),
        dim,
        c: file.c,
        k: file.k,
        levels,
    })
}

/// On-disk hierarchy cache keyed by (shape name, c, depth, k).
#[derive(Debug, Clone)]
pub struct HierarchyCache {
    root: PathBuf,
}

impl HierarchyCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, name: &str, c: usize, depth: usize, k: usize) -> PathBuf {
        let safe: String = name
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' })
            .collect();
        self.root.join(format!("{safe}.c{c}.d{depth}.k{k}.json"))
    }

    /// Loads the cached hierarchy for `graph` if it matches, otherwise
    /// builds and stores it.
    pub fn get_or_build(&self, graph: &MeshGraph, depth: usize, c: usize, k: usize) -> Result<Hierarchy> {
        let path = self.path_for(&graph.name, c, depth, k);
        if let Ok(bytes) = std::fs::read(&path) {
            match hierarchy_from_bytes(&bytes, graph.dim) {
                Ok(h)
                    if h.c == c
                        && h.k == k
                        && h.levels.first().map(|l| l.assignment.num_nodes())
                            == Some(graph.num_nodes()) =>
                {
                    return Ok(h);
                }
                _ => log::warn!("ignoring stale hierarchy cache {}", path.display()),
            }
        }
        let h = build_hierarchy(graph, depth, c, k)?;
        jsonfmt::write_bytes(&path, &hierarchy_to_bytes(&h)?)?;
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Vec<f64> {
        (0..n).flat_map(|i| [i as f64, 0.0]).collect()
    }

    #[test]
    fn small_cell_is_single_cluster() {
        let a = build_clusters(&[0.3, 0.1, 5.0, 2.0, -1.0, 7.0, 0.0, 0.0], 2, 4).unwrap();
        assert_eq!(a.num_clusters, 1);
        assert_eq!(a.cluster_of, vec![0; 4]);
    }

    #[test]
    fn eight_collinear_points_split_in_half() {
        let a = build_clusters(&line(8), 2, 4).unwrap();
        assert_eq!(a.cluster_of, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn odd_count_gives_lower_side_the_ceiling() {
        let a = build_clusters(&line(5), 2, 4).unwrap();
        assert_eq!(a.cluster_of, vec![0, 0, 0, 1, 1]);
        assert_eq!(a.sizes(), vec![3, 2]);
    }

    #[test]
    fn equal_coordinates_split_by_index() {
        let coords = vec![0.0; 12];
        let a = build_clusters(&coords, 2, 2).unwrap();
        assert_eq!(a.cluster_of, vec![0, 0, 1, 2, 2, 3]);
    }

    #[test]
    fn cluster_errors() {
        assert!(build_clusters(&[], 2, 4).is_err());
        assert!(build_clusters(&[0.0, f64::NAN], 2, 4).is_err());
        assert!(build_clusters(&[0.0, 1.0], 2, 0).is_err());
    }

    #[test]
    fn knn_cases() {
        assert!(knn_edges(&[0.5, 0.5], 2, 12).unwrap().is_empty());

        let pts = vec![0.0, 0.0, 1.0, 0.3, 0.2, 2.0, 3.0, 1.0];
        let all = knn_edges(&pts, 2, 3).unwrap();
        assert_eq!(all.len(), 12);

        let collinear = vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0];
        let e = knn_edges(&collinear, 2, 1).unwrap();
        assert_eq!(e, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn pool_and_unpool() {
        let a = ClusterAssignment {
            cluster_of: vec![0, 0],
            num_clusters: 1,
            cluster_size_limit: 4,
        };
        let f = Matrix::from_vec(2, 2, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(pool_mean(&f, &a).unwrap().data(), &[2.0, 4.0]);

        let a3 = ClusterAssignment {
            cluster_of: vec![0, 0, 0],
            num_clusters: 1,
            cluster_size_limit: 4,
        };
        let coarse = Matrix::from_vec(1, 1, vec![5.0]).unwrap();
        assert_eq!(unpool_copy(&coarse, &a3).unwrap().data(), &[5.0, 5.0, 5.0]);
        assert!(unpool_copy(&f, &a3).is_err());
        assert!(pool_mean(&coarse, &a3).is_err());

        let a = build_clusters(&line(9), 2, 4).unwrap();
        let x = Matrix::from_fn(a.num_clusters, 3, |i, j| (i * 3 + j) as f64 * 0.7);
        let round = pool_mean(&unpool_copy(&x, &a).unwrap(), &a).unwrap();
        for (r, v) in round.data().iter().zip(x.data()) {
            assert!((r - v).abs() <= 1e-15 * v.abs());
        }
    }

    #[test]
    fn hierarchy_sizes_large_uniform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<f64> = (0..4096 * 2).map(|_| rng.gen::<f64>()).collect();
        let h = build_hierarchy_from_coords(&coords, 2, 3, 4, 12).unwrap();
        assert_eq!(h.level_sizes(), vec![4096, 1024, 256, 64]);
        assert_eq!(h.depth, 3);
    }

    #[test]
    fn hierarchy_stops_early() {
        let coords: Vec<f64> = (0..10).flat_map(|i| [i as f64 * 0.1, 0.0, (i % 3) as f64]).collect();
        let h = build_hierarchy_from_coords(&coords, 3, 2, 8, 12).unwrap();
        assert_eq!(h.level_sizes(), vec![10, 2, 1]);
        let h3 = build_hierarchy_from_coords(&coords, 3, 3, 8, 12).unwrap();
        assert_eq!(h3.depth, 2);
        assert_eq!(h3.requested_depth, 3);
        let p = h3.padded(3);
        assert_eq!(p.level_sizes(), vec![10, 2, 1, 1]);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = HierarchyCache::new(dir.path());
        let coords: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let g = MeshGraph {
            name: "shape/1".into(),
            dim: 2,
            coords,
            edges: vec![],
            features: Default::default(),
            target: None,
        };
        let h = cache.get_or_build(&g, 2, 4, 3).unwrap();
        assert!(cache.path_for("shape/1", 4, 2, 3).exists());
        let again = cache.get_or_build(&g, 2, 4, 3).unwrap();
        assert_eq!(h, again);
    }
}

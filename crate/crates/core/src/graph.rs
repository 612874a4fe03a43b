//! Hybrid spatial/feature KNN graph.
//!
//! Spatial distances between normalized patch centers and cosine distances
//! between patch features are z-scored separately (off-diagonal entries
//! only, population statistics), blended with weight `lambda_w`, and used to
//! pick `k` directed neighbors per node. Edge weights are Gaussian affinities
//! `exp(-d^2 / tau)`; every node also gets a unit self-loop before degree
//! normalization.

use ndarray::{Array2, ArrayView2};

use crate::error::{IqaError, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Normalization {
    /// `D^-1 A`: each row sums to one.
    Row,
    /// `D^-1/2 A D^-1/2` with `D` the row sums.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig {
    pub k: usize,
    pub lambda_w: f64,
    pub tau: f64,
    pub normalization: Normalization,
    pub zscore_epsilon: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 24,
            lambda_w: 0.7,
            tau: 0.35,
            normalization: Normalization::Row,
            zscore_epsilon: 1e-12,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(IqaError::InvalidConfig("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_w) {
            return Err(IqaError::InvalidConfig(format!(
                "lambda_w must be in [0, 1], got {}",
                self.lambda_w
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(IqaError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.zscore_epsilon > 0.0) {
            return Err(IqaError::InvalidConfig("zscore_epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

/// Compressed-sparse-row `N x N` operator. Columns within a row ascend.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseAdjacency {
    /// Builds from `(row, col, value)` triplets. Duplicate positions are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(sorted.len());
        let mut vals: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            cols.push(c);
            vals.push(v);
            last = Some((r, c));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(col, value)` entries of one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, v)| v).sum()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[[i, j]] = v;
            }
        }
        m
    }

    /// `self · x`
    pub fn matmul(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n, "sparse matmul row mismatch");
        let mut out = Array2::zeros((self.n, x.ncols()));
        for i in 0..self.n {
            let mut dst = out.row_mut(i);
            for (j, v) in self.row(i) {
                dst.scaled_add(v, &x.row(j));
            }
        }
        out
    }

    /// `selfᵀ · x`
    pub fn transpose_matmul(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n, "sparse matmul row mismatch");
        let mut out = Array2::zeros((self.n, x.ncols()));
        for i in 0..self.n {
            let src = x.row(i);
            for (j, v) in self.row(i) {
                out.row_mut(j).scaled_add(v, &src);
            }
        }
        out
    }

    /// Relabels node `i` as `perm[i]`, i.e. returns `P A Pᵀ`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                triplets.push((perm[i], perm[j], v));
            }
        }
        Self::from_triplets(self.n, &triplets)
    }
}

/// Graph over patch nodes ready for message passing.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityGraph {
    pub n_nodes: usize,
    /// KNN edges grouped by source in neighbor order, then one self-loop per
    /// node.
    pub edges: Vec<Edge>,
    /// Gaussian affinity of each edge, parallel to `edges`.
    pub affinity: Vec<f64>,
    pub a_hat: SparseAdjacency,
}

impl QualityGraph {
    /// Returns the graph with node `i` renamed `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                dst: perm[e.dst],
            })
            .collect();
        Self {
            n_nodes: self.n_nodes,
            edges,
            affinity: self.affinity.clone(),
            a_hat: self.a_hat.permuted(perm),
        }
    }

    /// Edges paired with affinities, sorted by `(src, dst)`.
    pub fn sorted_edges(&self) -> Vec<(Edge, f64)> {
        let mut out: Vec<(Edge, f64)> = self
            .edges
            .iter()
            .copied()
            .zip(self.affinity.iter().copied())
            .collect();
        out.sort_by_key(|e| e.0);
        out
    }
}

/// Pairwise Euclidean distances between normalized centers.
pub fn spatial_distances(centers: &[[f64; 2]]) -> Array2<f64> {
    let n = centers.len();
    let rows = exec::map_range(n, |i| {
        (0..n)
            .map(|j| {
                let dx = centers[i][0] - centers[j][0];
                let dy = centers[i][1] - centers[j][1];
                (dx * dx + dy * dy).sqrt()
            })
            .collect::<Vec<f64>>()
    });
    Array2::from_shape_vec((n, n), rows.concat()).expect("square by construction")
}

/// Pairwise cosine distances `1 - cos(h_i, h_j)`.
pub fn feature_distances(features: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = features.nrows();
    let norms: Vec<f64> = features
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    if let Some(node) = norms.iter().position(|&v| !(v > 0.0)) {
        return Err(IqaError::DegenerateEmbedding { node });
    }
    let rows = exec::map_range(n, |i| {
        let hi = features.row(i);
        (0..n)
            .map(|j| {
                if i == j {
                    0.0
                } else {
                    1.0 - hi.dot(&features.row(j)) / (norms[i] * norms[j])
                }
            })
            .collect::<Vec<f64>>()
    });
    Ok(Array2::from_shape_vec((n, n), rows.concat()).expect("square by construction"))
}

/// Standardizes off-diagonal entries to zero mean and unit population
/// standard deviation. Returns all zeros when the standard deviation is
/// below `epsilon`; the diagonal is always zero.
pub fn zscore_offdiag(matrix: &Array2<f64>, epsilon: f64) -> Array2<f64> {
    let n = matrix.nrows();
    let mut out = Array2::zeros((n, n));
    if n < 2 {
        return out;
    }
    let count = (n * (n - 1)) as f64;
    let mut sum = 0.0;
    for ((i, j), &v) in matrix.indexed_iter() {
        if i != j {
            sum += v;
        }
    }
    let mean = sum / count;
    let mut ss = 0.0;
    for ((i, j), &v) in matrix.indexed_iter() {
        if i != j {
            ss += (v - mean) * (v - mean);
        }
    }
    let std = (ss / count).sqrt();
    if std < epsilon {
        return out;
    }
    for ((i, j), o) in out.indexed_iter_mut() {
        if i != j {
            *o = (matrix[[i, j]] - mean) / std;
        }
    }
    out
}

/// `lambda_w * spatial + (1 - lambda_w) * feature`
pub fn hybrid_distance(spatial_z: &Array2<f64>, feature_z: &Array2<f64>, lambda_w: f64) -> Array2<f64> {
    spatial_z * lambda_w + feature_z * (1.0 - lambda_w)
}

/// Directed KNN edges: for each node its `k` nearest other nodes (ties to the
/// smaller index), followed by one self-loop per node.
pub fn knn_edges(distances: &Array2<f64>, k: usize) -> Result<Vec<Edge>> {
    let n = distances.nrows();
    if k >= n {
        return Err(IqaError::KTooLarge { k, n });
    }
    let per_node = exec::map_range(n, |i| {
        let row = distances.row(i);
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let by_distance = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_distance);
            cand.truncate(k);
        }
        cand.sort_by(by_distance);
        cand
    });
    let mut edges = Vec::with_capacity(n * (k + 1));
    for (src, neighbors) in per_node.into_iter().enumerate() {
        edges.extend(neighbors.into_iter().map(|dst| Edge { src, dst }));
    }
    edges.extend((0..n).map(|i| Edge { src: i, dst: i }));
    Ok(edges)
}

#[inline]
pub fn rbf_affinity(distance: f64, tau: f64) -> f64 {
    (-(distance * distance) / tau).exp()
}

/// Degree-normalizes the weighted adjacency given by `edges`.
pub fn normalize_adjacency(
    n: usize,
    edges: &[Edge],
    affinities: &[f64],
    mode: Normalization,
) -> SparseAdjacency {
    assert_eq!(edges.len(), affinities.len());
    let mut degree = vec![0.0; n];
    for (e, &w) in edges.iter().zip(affinities) {
        degree[e.src] += w;
    }
    assert!(
        degree.iter().all(|&d| d > 0.0),
        "every node needs positive degree (self-loops missing?)"
    );
    let triplets: Vec<(usize, usize, f64)> = edges
        .iter()
        .zip(affinities)
        .map(|(e, &w)| {
            let v = match mode {
                Normalization::Row => w / degree[e.src],
                Normalization::Symmetric => w / (degree[e.src].sqrt() * degree[e.dst].sqrt()),
            };
            (e.src, e.dst, v)
        })
        .collect();
    SparseAdjacency::from_triplets(n, &triplets)
}

/// Builds the hybrid KNN graph from normalized centers and per-node features.
pub fn build_graph(
    centers: &[[f64; 2]],
    features: ArrayView2<f64>,
    config: &GraphConfig,
) -> Result<QualityGraph> {
    config.validate()?;
    let n = centers.len();
    if features.nrows() != n {
        return Err(IqaError::shape("graph features rows", n, features.nrows()));
    }
    let sp = zscore_offdiag(&spatial_distances(centers), config.zscore_epsilon);
    let ft = zscore_offdiag(&feature_distances(features)?, config.zscore_epsilon);
    let hyb = hybrid_distance(&sp, &ft, config.lambda_w);
    let edges = knn_edges(&hyb, config.k)?;
    let affinity: Vec<f64> = edges
        .iter()
        .map(|e| rbf_affinity(hyb[[e.src, e.dst]], config.tau))
        .collect();
    let a_hat = normalize_adjacency(n, &edges, &affinity, config.normalization);
    Ok(QualityGraph {
        n_nodes: n,
        edges,
        affinity,
        a_hat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostEstimate {
    pub message_ops: u64,
    pub transform_ops: u64,
    pub feature_memory: u64,
    pub edge_memory: u64,
}

/// Operation and memory counts for `layers` graph-convolution layers:
/// `L·N·k·d` aggregation, `L·N·d²` feature transform, `N·d` node storage and
/// `N·k` edge storage.
pub fn estimate_cost(n_nodes: u64, k: u64, d: u64, layers: u64) -> CostEstimate {
    CostEstimate {
        message_ops: layers * n_nodes * k * d,
        transform_ops: layers * n_nodes * d * d,
        feature_memory: n_nodes * d,
        edge_memory: n_nodes * k,
    }
}

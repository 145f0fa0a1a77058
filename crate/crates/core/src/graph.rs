//! Mesh graphs, k-nearest-neighbour connectivity and loss smoothing.

use serde::{Deserialize, Serialize};

use crate::assign::check_partition;
use crate::error::{ensure_finite, invalid, AmqError, Result};
use crate::tensor::Matrix;

/// Default number of smoothing diffusion steps.
pub const DEFAULT_DIFFUSION_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshGraph {
    pub positions: Matrix,
    pub features: Matrix,
    /// Directed `(src, dst)` pairs; messages flow from `src` into `dst`.
    pub edges: Vec<(usize, usize)>,
    pub clusters: Option<Vec<Vec<usize>>>,
}

impl MeshGraph {
    pub fn new(
        positions: Matrix,
        features: Matrix,
        edges: Vec<(usize, usize)>,
        clusters: Option<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        let g = Self { positions, features, edges, clusters };
        g.validate()?;
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.positions.rows()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if self.features.rows() != n {
            return Err(AmqError::Shape(format!(
                "{n} positions but {} feature rows",
                self.features.rows()
            )));
        }
        let mut sorted = self.edges.clone();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return invalid(format!("duplicate edge {:?}", w[0]));
            }
        }
        for &(s, d) in &self.edges {
            let bad = s.max(d);
            if bad >= n {
                return Err(AmqError::IndexOutOfRange { index: bad, len: n });
            }
        }
        if let Some(c) = &self.clusters {
            check_partition(c, n, "cluster")?;
        }
        Ok(())
    }

    pub fn incoming(&self) -> Incoming {
        Incoming::new(self.n_nodes(), &self.edges)
    }
}

/// Incoming edge ids per node, in edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct Incoming {
    offsets: Vec<usize>,
    edge_ids: Vec<usize>,
}

impl Incoming {
    pub fn new(n_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut offsets = vec![0usize; n_nodes + 1];
        for &(_, d) in edges {
            offsets[d + 1] += 1;
        }
        for i in 0..n_nodes {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut edge_ids = vec![0; edges.len()];
        for (e, &(_, d)) in edges.iter().enumerate() {
            edge_ids[fill[d]] = e;
            fill[d] += 1;
        }
        Self { offsets, edge_ids }
    }

    #[inline]
    pub fn of(&self, node: usize) -> &[usize] {
        &self.edge_ids[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// For every node `i`, directed edges `j -> i` from its `k` nearest
/// neighbours (Euclidean), ties broken toward smaller index.
pub fn build_knn_graph(positions: &Matrix, k: usize, self_loops: bool) -> Result<Vec<(usize, usize)>> {
    let n = positions.rows();
    if k == 0 {
        return invalid("k must be at least 1");
    }
    let candidates = if self_loops { n } else { n.saturating_sub(1) };
    if candidates < k {
        return invalid(format!("{candidates} neighbour candidates for k = {k}"));
    }
    ensure_finite(positions.data(), "positions")?;
    let mut edges = Vec::with_capacity(n * k);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dist.clear();
        let pi = positions.row(i);
        for j in 0..n {
            if j == i && !self_loops {
                continue;
            }
            let d2: f64 = pi.iter().zip(positions.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.push((d2, j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
            dist.truncate(k);
        }
        dist.sort_by(cmp);
        edges.extend(dist.iter().map(|&(_, j)| (j, i)));
    }
    Ok(edges)
}

/// Scales a nonnegative loss into `[0, 1]` by its maximum; all zeros stay zero.
pub fn normalize_loss(raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return invalid(format!("loss value {v} is not finite and nonnegative"));
    }
    let max = raw.iter().fold(0.0f64, |m, &v| m.max(v));
    if max == 0.0 {
        return Ok(vec![0.0; raw.len()]);
    }
    Ok(raw.iter().map(|v| v / max).collect())
}

/// Repeated neighbour averaging: `v_i <- v_i / 2 + mean_{j in N(i)} v_j / 2`
/// over in-neighbours other than `i` itself. Isolated nodes keep their value.
pub fn diffuse_loss(values: &[f64], n_nodes: usize, edges: &[(usize, usize)], steps: usize) -> Result<Vec<f64>> {
    if values.len() != n_nodes {
        return Err(AmqError::Shape(format!("{} values for {n_nodes} nodes", values.len())));
    }
    ensure_finite(values, "diffusion input")?;
    // neighbour sums, self-loops excluded
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for &(s, d) in edges {
        if s >= n_nodes || d >= n_nodes {
            return Err(AmqError::IndexOutOfRange { index: s.max(d), len: n_nodes });
        }
        if s != d {
            nbrs[d].push(s);
        }
    }
    let mut cur = values.to_vec();
    let mut next = vec![0.0; n_nodes];
    for _ in 0..steps {
        for (i, nb) in nbrs.iter().enumerate() {
            next[i] = if nb.is_empty() {
                cur[i]
            } else {
                let mean = nb.iter().map(|&j| cur[j]).sum::<f64>() / nb.len() as f64;
                0.5 * cur[i] + 0.5 * mean
            };
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Per-node loss of the main model and its smoothed version.
#[derive(Debug, Clone, PartialEq)]
pub struct LossField {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

impl LossField {
    /// Normalization followed by `steps` diffusion steps.
    pub fn smooth(raw: Vec<f64>, graph: &MeshGraph, steps: usize) -> Result<Self> {
        let norm = normalize_loss(&raw)?;
        let smoothed = diffuse_loss(&norm, graph.n_nodes(), &graph.edges, steps)?;
        Ok(Self { raw, smoothed })
    }
}

//! Budgeted bit-width assignment.
//!
//! Indices are sorted by increasing complexity weight and cut into contiguous
//! slices of `floor(N * ratio_k)` entries, from the cheapest level upwards.
//! Flooring leaves at most `K - 1` indices over; they join the most precise
//! bucket. Ties in the weight are broken by original index.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, AmqError, Result};

const RATIO_SUM_TOL: f64 = 1e-9;

/// Per-node complexity weights: finite and nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityField(Vec<f64>);

impl ComplexityField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return invalid(format!("complexity weight {v} is not finite and nonnegative"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Checks that `levels` ascend strictly and `ratios` form a distribution.
pub fn validate_levels(levels: &[u32], ratios: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return invalid("no quantization levels");
    }
    if levels.len() != ratios.len() {
        return invalid(format!("{} levels but {} ratios", levels.len(), ratios.len()));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return invalid(format!("levels {levels:?} are not strictly ascending"));
    }
    if let Some(r) = ratios.iter().find(|r| !r.is_finite() || **r < 0.0) {
        return invalid(format!("negative or non-finite ratio {r}"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > RATIO_SUM_TOL {
        return invalid(format!("ratios sum to {sum}, not 1"));
    }
    Ok(())
}

/// Indices of `w` in increasing `(value, index)` order.
pub fn stable_argsort(w: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[a].total_cmp(&w[b]).then(a.cmp(&b)));
    idx
}

/// Bucket sizes for `n` items: `floor(n * ratio)` each, remainder on top.
pub fn bucket_sizes(n: usize, ratios: &[f64]) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(ratios.len());
    let mut used = 0usize;
    for &r in ratios {
        // the small offset keeps e.g. 100 * 0.29 from flooring to 28
        let s = ((n as f64 * r + 1e-9).floor() as usize).min(n - used);
        sizes.push(s);
        used += s;
    }
    if let Some(last) = sizes.last_mut() {
        *last += n - used;
    }
    sizes
}

/// Splits the indices of `w` into one bucket per level.
pub fn assign_quant(w: &[f64], levels: &[u32], ratios: &[f64]) -> Result<Vec<Vec<usize>>> {
    validate_levels(levels, ratios)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(AmqError::NonFinite("assignment weights"));
    }
    let order = stable_argsort(w);
    let mut buckets = Vec::with_capacity(levels.len());
    let mut start = 0;
    for size in bucket_sizes(w.len(), ratios) {
        buckets.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(buckets)
}

/// Edge `j -> i` inherits the weight of its target node `i`.
pub fn derive_edge_weights(w: &[f64], edges: &[(usize, usize)]) -> Result<Vec<f64>> {
    edges
        .iter()
        .map(|&(_, dst)| {
            w.get(dst).copied().ok_or(AmqError::IndexOutOfRange { index: dst, len: w.len() })
        })
        .collect()
}

/// Mean member weight for each cluster.
pub fn derive_cluster_weights(w: &[f64], clusters: &[Vec<usize>]) -> Result<Vec<f64>> {
    clusters
        .iter()
        .map(|c| {
            if c.is_empty() {
                return invalid("empty cluster");
            }
            let mut sum = 0.0;
            for &i in c {
                sum += *w.get(i).ok_or(AmqError::IndexOutOfRange { index: i, len: w.len() })?;
            }
            Ok(sum / c.len() as f64)
        })
        .collect()
}

/// Bit-width buckets for the nodes, edges and clusters of one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    pub levels: Vec<u32>,
    pub ratios: Vec<f64>,
    pub node_buckets: Vec<Vec<usize>>,
    pub edge_buckets: Vec<Vec<usize>>,
    pub cluster_buckets: Vec<Vec<usize>>,
}

impl BitAllocation {
    /// Runs the assignment for nodes, then for edges and clusters using the
    /// derived weights and the same ratios.
    pub fn from_weights(
        w: &ComplexityField,
        edges: &[(usize, usize)],
        clusters: Option<&[Vec<usize>]>,
        levels: &[u32],
        ratios: &[f64],
    ) -> Result<Self> {
        let w = w.values();
        let node_buckets = assign_quant(w, levels, ratios)?;
        let edge_buckets = assign_quant(&derive_edge_weights(w, edges)?, levels, ratios)?;
        let cluster_buckets = match clusters {
            Some(c) => assign_quant(&derive_cluster_weights(w, c)?, levels, ratios)?,
            None => vec![Vec::new(); levels.len()],
        };
        Ok(Self {
            levels: levels.to_vec(),
            ratios: ratios.to_vec(),
            node_buckets,
            edge_buckets,
            cluster_buckets,
        })
    }

    /// Every node and edge at a single bit-width.
    pub fn uniform(bits: u32, n_nodes: usize, n_edges: usize) -> Self {
        Self {
            levels: vec![bits],
            ratios: vec![1.0],
            node_buckets: vec![(0..n_nodes).collect()],
            edge_buckets: vec![(0..n_edges).collect()],
            cluster_buckets: vec![Vec::new()],
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Checks the bucket lists partition `0..n_nodes` and `0..n_edges`.
    pub fn validate(&self, n_nodes: usize, n_edges: usize) -> Result<()> {
        if self.node_buckets.len() != self.levels.len()
            || self.edge_buckets.len() != self.levels.len()
        {
            return invalid("bucket count differs from level count");
        }
        check_partition(&self.node_buckets, n_nodes, "node")?;
        check_partition(&self.edge_buckets, n_edges, "edge")
    }

    /// Number of nodes at each level.
    pub fn node_histogram(&self) -> Vec<usize> {
        self.node_buckets.iter().map(Vec::len).collect()
    }
}

/// Errors unless `buckets` is a disjoint cover of `0..n`.
pub fn check_partition(buckets: &[Vec<usize>], n: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; n];
    let mut count = 0;
    for &i in buckets.iter().flatten() {
        if i >= n {
            return Err(AmqError::IndexOutOfRange { index: i, len: n });
        }
        if seen[i] {
            return invalid(format!("{what} index {i} appears in two buckets"));
        }
        seen[i] = true;
        count += 1;
    }
    if count != n {
        return invalid(format!("{what} buckets cover {count} of {n} indices"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_traced_assignment() {
        let b = assign_quant(&[0.9, 0.1, 0.5, 0.3], &[4, 8], &[0.5, 0.5]).unwrap();
        assert_eq!(b, vec![vec![1, 3], vec![2, 0]]);

        let b = assign_quant(&[0.9, 0.1, 0.5, 0.3], &[4, 8], &[0.0, 1.0]).unwrap();
        assert!(b[0].is_empty());
        assert_eq!(b[1], vec![1, 3, 2, 0]);
    }

    #[test]
    fn remainder_joins_top_bucket() {
        let b = assign_quant(&[5.0, 4.0, 3.0, 2.0, 1.0], &[4, 8], &[0.5, 0.5]).unwrap();
        assert_eq!(b, vec![vec![4, 3], vec![2, 1, 0]]);
    }

    #[test]
    fn ratio_validation() {
        assert!(assign_quant(&[1.0], &[4, 8], &[0.5, 0.6]).is_err());
        assert!(assign_quant(&[1.0], &[4, 8], &[-0.5, 1.5]).is_err());
        assert!(assign_quant(&[1.0], &[8, 4], &[0.5, 0.5]).is_err());
        assert!(assign_quant(&[1.0], &[4, 8], &[1.0]).is_err());
        assert!(assign_quant(&[1.0, 2.0], &[4, 8], &[0.5, 0.5 + 1e-12]).is_ok());
    }

    #[test]
    fn floor_is_robust_to_representation() {
        assert_eq!(bucket_sizes(100, &[0.29, 0.71]), vec![29, 71]);
        assert_eq!(bucket_sizes(3, &[0.5, 0.5]), vec![1, 2]);
        assert_eq!(bucket_sizes(0, &[0.5, 0.5]), vec![0, 0]);
    }

    #[test]
    fn edge_and_cluster_weights() {
        let w = [0.2, 0.9, 0.4];
        assert_eq!(derive_edge_weights(&w, &[(0, 1), (1, 2)]).unwrap(), vec![0.9, 0.4]);
        assert_eq!(derive_edge_weights(&w, &[(2, 2)]).unwrap(), vec![0.4]);
        assert!(derive_edge_weights(&w, &[]).unwrap().is_empty());
        assert!(derive_edge_weights(&w, &[(0, 3)]).is_err());

        let c = derive_cluster_weights(&w, &[vec![0, 1], vec![2]]).unwrap();
        assert!((c[0] - 0.55).abs() < 1e-15);
        assert_eq!(c[1], 0.4);
        assert!(derive_cluster_weights(&w, &[vec![]]).is_err());
        let u = derive_cluster_weights(&[0.7; 4], &[vec![0, 3], vec![1, 2]]).unwrap();
        assert_eq!(u, vec![0.7, 0.7]);
    }

    #[test]
    fn allocation_covers_everything() {
        let w = ComplexityField::new(vec![0.2, 0.9, 0.4, 0.1]).unwrap();
        let edges = [(0, 1), (1, 0), (2, 3), (3, 2), (1, 2)];
        let clusters = vec![vec![0, 1], vec![2, 3]];
        let a = BitAllocation::from_weights(&w, &edges, Some(&clusters), &[4, 8], &[0.5, 0.5])
            .unwrap();
        a.validate(4, 5).unwrap();
        assert_eq!(a.node_buckets, vec![vec![3, 0], vec![2, 1]]);
        // edge weights [0.9, 0.2, 0.1, 0.4, 0.4]
        assert_eq!(a.edge_buckets, vec![vec![2, 1], vec![3, 4, 0]]);
        assert_eq!(a.cluster_buckets, vec![vec![1], vec![0]]);
        assert!(ComplexityField::new(vec![-1.0]).is_err());
        assert!(a.validate(5, 5).is_err());
    }
}

//! MAC accounting weighted by operand bit-widths.

use serde::{Deserialize, Serialize};

use crate::assign::BitAllocation;
use crate::error::Result;
use crate::model::{Domain, MpnnConfig};

/// Int8-equivalent MACs of one quantized GEMM: `rows * d_in * d_out`
/// scaled by `b_a * b_w / 64`.
pub fn layer_mac_cost(rows: usize, d_in: usize, d_out: usize, b_a: u32, b_w: u32) -> f64 {
    (rows * d_in * d_out) as f64 * (b_a * b_w) as f64 / 64.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub layer: String,
    pub rows: usize,
    pub raw_macs: u64,
    pub act_bits: u32,
    pub weight_bits: u32,
    pub int8_macs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// One entry per (layer, level) with at least one row.
    pub main: Vec<CostEntry>,
    pub aux: Vec<CostEntry>,
    pub main_total: f64,
    pub aux_total: f64,
}

impl CostReport {
    pub fn total(&self) -> f64 {
        self.main_total + self.aux_total
    }
}

/// Per-(layer, level) costs of one network under `alloc`.
pub fn network_cost(
    config: &MpnnConfig,
    alloc: &BitAllocation,
    n_nodes: usize,
    n_edges: usize,
) -> Result<Vec<CostEntry>> {
    alloc.validate(n_nodes, n_edges)?;
    let b_w = config.quant.weight_bits;
    let mut out = Vec::new();
    for spec in config.layer_specs() {
        let buckets = match spec.domain {
            Domain::Node => &alloc.node_buckets,
            Domain::Edge => &alloc.edge_buckets,
        };
        for (&b_a, bucket) in alloc.levels.iter().zip(buckets) {
            if bucket.is_empty() {
                continue;
            }
            out.push(CostEntry {
                layer: spec.name.clone(),
                rows: bucket.len(),
                raw_macs: (bucket.len() * spec.d_in * spec.d_out) as u64,
                act_bits: b_a,
                weight_bits: b_w,
                int8_macs: layer_mac_cost(bucket.len(), spec.d_in, spec.d_out, b_a, b_w),
            });
        }
    }
    Ok(out)
}

/// Cost of the main network under `alloc`, plus the auxiliary network at
/// its fixed uniform precision when given.
pub fn model_cost_report(
    main: &MpnnConfig,
    alloc: &BitAllocation,
    aux: Option<&MpnnConfig>,
    n_nodes: usize,
    n_edges: usize,
) -> Result<CostReport> {
    let main_entries = network_cost(main, alloc, n_nodes, n_edges)?;
    let aux_entries = match aux {
        Some(cfg) => {
            network_cost(cfg, &BitAllocation::uniform(cfg.quant.levels[0], n_nodes, n_edges), n_nodes, n_edges)?
        }
        None => Vec::new(),
    };
    let sum = |v: &[CostEntry]| v.iter().map(|e| e.int8_macs).sum::<f64>();
    Ok(CostReport {
        main_total: sum(&main_entries),
        aux_total: sum(&aux_entries),
        main: main_entries,
        aux: aux_entries,
    })
}

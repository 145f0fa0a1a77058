//! Encode-process-decode message-passing network with mixed-precision
//! activation quantization and hand-written reverse-mode gradients.

mod layers;
mod loss;
mod network;
mod optim;

pub use layers::{gelu, gelu_grad, gelu_with_grad, LinearCache, LinearGrad, QLinear, QuantMode};
pub use loss::{per_node_loss, relative_l2, NodeLoss};
pub use network::{ForwardTrace, Gradients, Mpnn};
pub use optim::{adam_step, clip_global_norm, lr_schedule, AdamConfig, AdamState};

use serde::{Deserialize, Serialize};

use crate::assign::validate_levels;
use crate::error::{invalid, Result};
use crate::gemm::Kernel;
use crate::quant::DEFAULT_EMA_DECAY;

/// Output nonlinearity of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Identity,
    Sigmoid,
}

/// Quantization levels available to a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    /// Strictly ascending activation bit-widths.
    pub levels: Vec<u32>,
    pub base_bits: u32,
    pub weight_bits: u32,
    pub ema_decay: f64,
    pub kernel: Kernel,
}

impl QuantSpec {
    pub fn new(levels: Vec<u32>, base_bits: u32, weight_bits: u32) -> Self {
        Self { levels, base_bits, weight_bits, ema_decay: DEFAULT_EMA_DECAY, kernel: Kernel::Basic }
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = vec![1.0 / self.levels.len().max(1) as f64; self.levels.len()];
        validate_levels(&self.levels, &ratios)?;
        if self.base_bits == 0 || self.levels.iter().any(|b| b % self.base_bits != 0) {
            return invalid(format!(
                "levels {:?} are not multiples of base bit-width {}",
                self.levels, self.base_bits
            ));
        }
        if !(2..=16).contains(&self.weight_bits) {
            return invalid(format!("weight bit-width {}", self.weight_bits));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpnnConfig {
    /// Node feature channels (the input field `u`).
    pub feature_dim: usize,
    /// Spatial dimension of node positions.
    pub pos_dim: usize,
    pub hidden: usize,
    /// Number of processor (message-passing) layers.
    pub layers: usize,
    pub out_dim: usize,
    pub head: Head,
    pub quant: QuantSpec,
}

impl MpnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.pos_dim == 0 || self.hidden == 0 || self.out_dim == 0 {
            return invalid("network dimensions must be positive");
        }
        self.quant.validate()
    }

    /// Width of the message MLP input `(x_i, u_i - u_j, x_j, p_i - p_j)`.
    pub fn message_dim(&self) -> usize {
        2 * self.hidden + self.feature_dim + self.pos_dim
    }

    /// Every linear layer in execution order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let d = self.hidden;
        let mut v = vec![
            LayerSpec::node("encoder.0", self.feature_dim + self.pos_dim, d),
            LayerSpec::node("encoder.1", d, d),
        ];
        for l in 0..self.layers {
            v.push(LayerSpec::edge(format!("processor.{l}.message.0"), self.message_dim(), d));
            v.push(LayerSpec::edge(format!("processor.{l}.message.1"), d, d));
            v.push(LayerSpec::node(format!("processor.{l}.update.0"), 2 * d, d));
            v.push(LayerSpec::node(format!("processor.{l}.update.1"), d, d));
        }
        v.push(LayerSpec::node("decoder.0", d, d));
        v.push(LayerSpec::node("decoder.1", d, self.out_dim));
        v
    }
}

/// Whether a layer's rows are nodes or edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Node,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub domain: Domain,
}

impl LayerSpec {
    fn node(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self { name: name.into(), d_in, d_out, domain: Domain::Node }
    }

    fn edge(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self { name: name.into(), d_in, d_out, domain: Domain::Edge }
    }
}

//! Complexity-predicting auxiliary network and its training target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{BitAllocation, ComplexityField};
use crate::error::{invalid, Result};
use crate::graph::{diffuse_loss, normalize_loss, Incoming, MeshGraph, DEFAULT_DIFFUSION_STEPS};
use crate::model::{per_node_loss, ForwardTrace, Gradients, Head, Mpnn, MpnnConfig, QuantMode, QuantSpec};
use crate::quant::DEFAULT_EMA_DECAY;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Uniform activation bit-width of the auxiliary network.
    pub bits: u32,
    pub diffusion_steps: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self { hidden: 32, layers: 3, bits: 8, diffusion_steps: DEFAULT_DIFFUSION_STEPS }
    }
}

impl AuxConfig {
    pub fn network_config(&self, feature_dim: usize, pos_dim: usize, ema_decay: f64) -> Result<MpnnConfig> {
        if self.hidden == 0 || self.layers == 0 {
            return invalid("auxiliary network dimensions must be positive");
        }
        let mut quant = QuantSpec::new(vec![self.bits], self.bits, 8);
        quant.ema_decay = ema_decay;
        let cfg = MpnnConfig {
            feature_dim,
            pos_dim,
            hidden: self.hidden,
            layers: self.layers,
            out_dim: 1,
            head: Head::Sigmoid,
            quant,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Auxiliary network: a uniformly quantized message-passing network with a
/// sigmoid head producing one complexity score per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxModel {
    pub net: Mpnn,
}

impl AuxModel {
    pub fn new<R: Rng>(cfg: &AuxConfig, feature_dim: usize, pos_dim: usize, rng: &mut R) -> Result<Self> {
        let net = Mpnn::new(cfg.network_config(feature_dim, pos_dim, DEFAULT_EMA_DECAY)?, rng)?;
        Ok(Self { net })
    }

    pub fn bits(&self) -> u32 {
        self.net.config.quant.levels[0]
    }

    pub fn allocation(&self, graph: &MeshGraph) -> BitAllocation {
        BitAllocation::uniform(self.bits(), graph.n_nodes(), graph.n_edges())
    }

    pub fn forward(&self, graph: &MeshGraph, incoming: &Incoming, mode: QuantMode) -> Result<ForwardTrace> {
        let alloc = self.allocation(graph);
        self.net.forward(graph, incoming, Some(&alloc), mode)
    }

    /// Predicted complexity, one value in (0, 1) per node.
    pub fn predict(&self, graph: &MeshGraph, incoming: &Incoming, mode: QuantMode) -> Result<ComplexityField> {
        let trace = self.forward(graph, incoming, mode)?;
        ComplexityField::new(trace.output.into_data())
    }

    /// MSE against `target` and the corresponding gradients.
    pub fn loss_and_grads(
        &self,
        graph: &MeshGraph,
        incoming: &Incoming,
        trace: &ForwardTrace,
        target: &[f64],
    ) -> Result<(f64, Gradients)> {
        let t = Matrix::column(target);
        let loss = per_node_loss(&trace.output, &t)?;
        let grads = self.net.backward(graph, incoming, trace, &loss.grad)?;
        Ok((loss.mean, grads))
    }
}

/// Training target for the auxiliary network: the main network's per-node
/// loss, max-normalized and diffused over the graph.
pub fn build_aux_target(raw_loss: &[f64], graph: &MeshGraph, steps: usize) -> Result<Vec<f64>> {
    if raw_loss.len() != graph.n_nodes() {
        return invalid(format!("{} loss values for {} nodes", raw_loss.len(), graph.n_nodes()));
    }
    diffuse_loss(&normalize_loss(raw_loss)?, graph.n_nodes(), &graph.edges, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path() -> MeshGraph {
        let pos = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let feat = Matrix::column(&[1.0, 2.0, 3.0]);
        let edges = vec![(0, 1), (1, 0), (1, 2), (2, 1)];
        MeshGraph::new(pos, feat, edges, None).unwrap()
    }

    #[test]
    fn target_examples() {
        let g = path();
        assert_eq!(build_aux_target(&[2.0, 4.0, 8.0], &g, 0).unwrap(), vec![0.25, 0.5, 1.0]);
        assert_eq!(build_aux_target(&[3.0, 3.0, 3.0], &g, 5).unwrap(), vec![1.0; 3]);
        assert_eq!(build_aux_target(&[1.0, 0.0, 0.0], &g, 1).unwrap(), vec![0.5, 0.25, 0.0]);
        assert!(build_aux_target(&[1.0], &g, 1).is_err());
    }

    #[test]
    fn zero_network_predicts_one_half() {
        let g = path();
        let cfg = AuxConfig::default().network_config(1, 2, DEFAULT_EMA_DECAY).unwrap();
        let aux = AuxModel { net: Mpnn::zeros(cfg).unwrap() };
        let w = aux.predict(&g, &g.incoming(), QuantMode::Calibrate).unwrap();
        assert_eq!(w.values(), &[0.5; 3]);
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let g = path();
        let aux = AuxModel::new(&AuxConfig::default(), 1, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let w = aux.predict(&g, &g.incoming(), QuantMode::Off).unwrap();
        assert!(w.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

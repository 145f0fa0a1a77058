use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{gelu_with_grad, LinearCache, LinearGrad, QLinear, QuantMode};
use super::{Domain, Head, MpnnConfig};
use crate::assign::BitAllocation;
use crate::error::{invalid, AmqError, Result};
use crate::graph::{Incoming, MeshGraph};
use crate::tensor::{axpy, Matrix};

/// Network parameters plus quantizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mpnn {
    pub config: MpnnConfig,
    /// All linear layers in [`MpnnConfig::layer_specs`] order.
    pub layers: Vec<QLinear>,
}

/// Gradients with the same layout as [`Mpnn::layers`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients(pub Vec<LinearGrad>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            axpy(1.0, b.weight.data(), a.weight.data_mut());
            axpy(1.0, &b.bias, &mut a.bias);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.weight.data_mut().iter_mut().for_each(|v| *v *= s);
            g.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Weights then bias of every layer, in layer order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flat_map(|g| g.weight.data().iter().chain(&g.bias).copied())
    }
}

#[derive(Debug, Clone)]
struct MlpCache {
    linear: Vec<LinearCache>,
    /// GELU derivative at the pre-activation, for layers followed by one.
    slope: Vec<Option<Matrix>>,
}

#[derive(Debug, Clone)]
struct ProcessorCache {
    message: MlpCache,
    update: MlpCache,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    encoder: MlpCache,
    processors: Vec<ProcessorCache>,
    decoder: MlpCache,
    /// Network output after the head.
    pub output: Matrix,
    /// Calibration observations, per layer and level.
    pub observed: Vec<Vec<Option<f64>>>,
}

impl Mpnn {
    pub fn new<R: Rng>(config: MpnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_specs()
            .iter()
            .map(|s| QLinear::init(s.d_in, s.d_out, &config.quant, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    /// All weights and biases zero.
    pub fn zeros(config: MpnnConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_specs()
            .iter()
            .map(|s| QLinear::from_parts(Matrix::zeros(s.d_in, s.d_out), vec![0.0; s.d_out], &config.quant))
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.layers.iter().map(LinearGrad::zeros_like).collect())
    }

    fn encoder_ids(&self) -> Range<usize> {
        0..2
    }

    fn message_ids(&self, l: usize) -> Range<usize> {
        2 + 4 * l..4 + 4 * l
    }

    fn update_ids(&self, l: usize) -> Range<usize> {
        4 + 4 * l..6 + 4 * l
    }

    fn decoder_ids(&self) -> Range<usize> {
        let s = 2 + 4 * self.config.layers;
        s..s + 2
    }

    /// Index of `bits` among the configured levels.
    pub fn level_index(&self, bits: u32) -> Option<usize> {
        self.config.quant.levels.iter().position(|&b| b == bits)
    }

    /// Maps an allocation's buckets onto this network's levels.
    fn level_buckets(&self, alloc: &BitAllocation, domain: Domain) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); self.config.quant.levels.len()];
        let src = match domain {
            Domain::Node => &alloc.node_buckets,
            Domain::Edge => &alloc.edge_buckets,
        };
        for (&bits, bucket) in alloc.levels.iter().zip(src) {
            let k = self.level_index(bits).ok_or_else(|| {
                AmqError::InvalidArgument(format!("allocation level {bits} is not configured"))
            })?;
            out[k].extend_from_slice(bucket);
        }
        Ok(out)
    }

    /// Weight scales follow the current weights until frozen.
    pub fn recalibrate_weights(&mut self) -> Result<()> {
        for l in &mut self.layers {
            if !l.weight_quant.is_frozen() {
                l.weight_quant.recalibrate(&l.weight)?;
            }
        }
        Ok(())
    }

    /// One EMA step per `(layer, level)` that was observed.
    pub fn apply_observations(&mut self, observed: &[Vec<Option<f64>>]) -> Result<()> {
        for (l, obs) in self.layers.iter_mut().zip(observed) {
            for (q, o) in l.act_quant.iter_mut().zip(obs) {
                if let Some(m) = o {
                    q.ema_update_stat(&[*m])?;
                }
            }
        }
        Ok(())
    }

    pub fn freeze_quantizers(&mut self) {
        for l in &mut self.layers {
            l.weight_quant.freeze();
            l.act_quant.iter_mut().for_each(|q| q.freeze());
        }
    }

    pub fn quantizers_frozen(&self) -> bool {
        self.layers.iter().all(|l| l.weight_quant.is_frozen())
    }

    fn mlp_forward(
        &self,
        ids: Range<usize>,
        mut h: Matrix,
        final_act: bool,
        mode: QuantMode,
        buckets: &[Vec<usize>],
        observed: &mut [Vec<Option<f64>>],
    ) -> Result<(Matrix, MlpCache)> {
        let last = ids.end - 1;
        let mut cache = MlpCache { linear: Vec::with_capacity(ids.len()), slope: Vec::with_capacity(ids.len()) };
        for id in ids {
            let (y, c) = self.layers[id].forward(&h, mode, buckets, &self.config.quant)?;
            observed[id] = c.observed.clone();
            cache.linear.push(c);
            if id < last || final_act {
                h = y;
                let mut slope = Matrix::zeros(h.rows(), h.cols());
                for (v, s) in h.data_mut().iter_mut().zip(slope.data_mut()) {
                    (*v, *s) = gelu_with_grad(*v);
                }
                cache.slope.push(Some(slope));
            } else {
                h = y;
                cache.slope.push(None);
            }
        }
        Ok((h, cache))
    }

    fn mlp_backward(
        &self,
        ids: Range<usize>,
        cache: &MlpCache,
        mut d: Matrix,
        grads: &mut Gradients,
    ) -> Result<Matrix> {
        for (n, id) in ids.enumerate().rev() {
            if let Some(slope) = &cache.slope[n] {
                for (g, &s) in d.data_mut().iter_mut().zip(slope.data()) {
                    *g *= s;
                }
            }
            d = self.layers[id].backward(&cache.linear[n], &d, &mut grads.0[id])?;
        }
        Ok(d)
    }

    pub fn forward(
        &self,
        graph: &MeshGraph,
        incoming: &Incoming,
        alloc: Option<&BitAllocation>,
        mode: QuantMode,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let n = graph.n_nodes();
        if graph.features.cols() != cfg.feature_dim || graph.positions.cols() != cfg.pos_dim {
            return Err(AmqError::Shape(format!(
                "graph has {} feature and {} position channels, network expects {} and {}",
                graph.features.cols(),
                graph.positions.cols(),
                cfg.feature_dim,
                cfg.pos_dim
            )));
        }
        if incoming.n_nodes() != n {
            return Err(AmqError::Shape("adjacency does not match the graph".into()));
        }
        let (node_b, edge_b) = match (mode, alloc) {
            (QuantMode::Off, _) => (Vec::new(), Vec::new()),
            (_, Some(a)) => {
                a.validate(n, graph.n_edges())?;
                (self.level_buckets(a, Domain::Node)?, self.level_buckets(a, Domain::Edge)?)
            }
            (_, None) => return invalid("quantized forward needs a bit allocation"),
        };
        let mut observed = vec![Vec::new(); self.layers.len()];
        let (f_dim, p_dim, d) = (cfg.feature_dim, cfg.pos_dim, cfg.hidden);

        let mut enc_in = Matrix::zeros(n, f_dim + p_dim);
        for i in 0..n {
            let row = enc_in.row_mut(i);
            row[..f_dim].copy_from_slice(graph.features.row(i));
            row[f_dim..].copy_from_slice(graph.positions.row(i));
        }
        let (mut x, encoder) =
            self.mlp_forward(self.encoder_ids(), enc_in, true, mode, &node_b, &mut observed)?;

        let mut processors = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut msg_in = Matrix::zeros(graph.n_edges(), cfg.message_dim());
            for (e, &(j, i)) in graph.edges.iter().enumerate() {
                let row = msg_in.row_mut(e);
                row[..d].copy_from_slice(x.row(i));
                for (c, (ui, uj)) in graph.features.row(i).iter().zip(graph.features.row(j)).enumerate() {
                    row[d + c] = ui - uj;
                }
                row[d + f_dim..2 * d + f_dim].copy_from_slice(x.row(j));
                for (c, (pi, pj)) in graph.positions.row(i).iter().zip(graph.positions.row(j)).enumerate() {
                    row[2 * d + f_dim + c] = pi - pj;
                }
            }
            let (msgs, message) =
                self.mlp_forward(self.message_ids(l), msg_in, true, mode, &edge_b, &mut observed)?;

            let mut upd_in = Matrix::zeros(n, 2 * d);
            for i in 0..n {
                let inc = incoming.of(i);
                let row = upd_in.row_mut(i);
                row[..d].copy_from_slice(x.row(i));
                if !inc.is_empty() {
                    let w = 1.0 / inc.len() as f64;
                    for &e in inc {
                        axpy(w, msgs.row(e), &mut row[d..]);
                    }
                }
            }
            let (delta, update) =
                self.mlp_forward(self.update_ids(l), upd_in, false, mode, &node_b, &mut observed)?;
            axpy(1.0, delta.data(), x.data_mut());
            processors.push(ProcessorCache { message, update });
        }

        let (mut output, decoder) =
            self.mlp_forward(self.decoder_ids(), x, false, mode, &node_b, &mut observed)?;
        if cfg.head == Head::Sigmoid {
            output.data_mut().iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        }
        Ok(ForwardTrace { encoder, processors, decoder, output, observed })
    }

    /// Reverse-mode gradients of a scalar loss given `d_output`, its
    /// gradient with respect to the network output.
    pub fn backward(
        &self,
        graph: &MeshGraph,
        incoming: &Incoming,
        trace: &ForwardTrace,
        d_output: &Matrix,
    ) -> Result<Gradients> {
        let cfg = &self.config;
        if d_output.rows() != trace.output.rows() || d_output.cols() != trace.output.cols() {
            return Err(AmqError::Shape("output gradient shape".into()));
        }
        let (n, d, f_dim) = (graph.n_nodes(), cfg.hidden, cfg.feature_dim);
        let mut grads = self.zero_grads();

        let mut dz = d_output.clone();
        if cfg.head == Head::Sigmoid {
            for (g, &y) in dz.data_mut().iter_mut().zip(trace.output.data()) {
                *g *= y * (1.0 - y);
            }
        }
        let mut dx = self.mlp_backward(self.decoder_ids(), &trace.decoder, dz, &mut grads)?;

        for l in (0..cfg.layers).rev() {
            let pc = &trace.processors[l];
            let d_upd = self.mlp_backward(self.update_ids(l), &pc.update, dx.clone(), &mut grads)?;
            let mut d_msgs = Matrix::zeros(graph.n_edges(), d);
            for i in 0..n {
                let row = d_upd.row(i);
                axpy(1.0, &row[..d], dx.row_mut(i));
                let inc = incoming.of(i);
                if !inc.is_empty() {
                    let w = 1.0 / inc.len() as f64;
                    for &e in inc {
                        axpy(w, &row[d..], d_msgs.row_mut(e));
                    }
                }
            }
            let d_msg_in = self.mlp_backward(self.message_ids(l), &pc.message, d_msgs, &mut grads)?;
            for (e, &(j, i)) in graph.edges.iter().enumerate() {
                let row = d_msg_in.row(e);
                axpy(1.0, &row[..d], dx.row_mut(i));
                axpy(1.0, &row[d + f_dim..2 * d + f_dim], dx.row_mut(j));
            }
        }
        self.mlp_backward(self.encoder_ids(), &trace.encoder, dx, &mut grads)?;
        if !grads.is_finite() {
            return Err(AmqError::NonFinite("gradients"));
        }
        Ok(grads)
    }
}

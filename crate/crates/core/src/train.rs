//! Coupled training of the main and auxiliary networks, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::{validate_levels, BitAllocation, ComplexityField};
use crate::aux::{build_aux_target, AuxConfig, AuxModel};
use crate::cost::model_cost_report;
use crate::dataset::{Dataset, Sample};
use crate::error::{invalid, AmqError, Result};
use crate::gemm::Kernel;
use crate::graph::{Incoming, MeshGraph};
use crate::model::{
    adam_step, clip_global_norm, lr_schedule, per_node_loss, relative_l2, AdamConfig, AdamState, Gradients,
    Head, Mpnn, MpnnConfig, QuantMode, QuantSpec,
};
use crate::quant::DEFAULT_EMA_DECAY;
use crate::tensor::Matrix;

const STREAM_MAIN_INIT: u64 = 0;
const STREAM_AUX_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_EVAL_SHUFFLE: u64 = 3;
const STREAM_DATA_ORDER: u64 = 1 << 32;

/// How the bit allocation is derived from the auxiliary prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Highest predicted complexity gets the most bits.
    Targeted,
    /// The prediction is shuffled across nodes before assignment.
    Random,
    /// The prediction is ignored; with a single nonzero ratio every node
    /// shares one bit-width.
    Uniform,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Targeted => "targeted",
            Mode::Random => "random",
            Mode::Uniform => "uniform",
        }
    }

    /// Whether the auxiliary network takes part in inference.
    pub fn uses_aux(self) -> bool {
        self != Mode::Uniform
    }
}

/// Main network architecture and quantizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub base_bits: u32,
    pub weight_bits: u32,
    pub ema_decay: f64,
    pub kernel: Kernel,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 32, layers: 4, base_bits: 4, weight_bits: 8, ema_decay: DEFAULT_EMA_DECAY, kernel: Kernel::Basic }
    }
}

impl ModelConfig {
    pub fn network_config(&self, levels: &[u32], feature_dim: usize, pos_dim: usize, out_dim: usize) -> Result<MpnnConfig> {
        let quant = QuantSpec {
            levels: levels.to_vec(),
            base_bits: self.base_bits,
            weight_bits: self.weight_bits,
            ema_decay: self.ema_decay,
            kernel: self.kernel,
        };
        let cfg = MpnnConfig {
            feature_dim,
            pos_dim,
            hidden: self.hidden,
            layers: self.layers,
            out_dim,
            head: Head::Identity,
            quant,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_aux: f64,
    pub warmup_epochs: usize,
    /// Activation bit-widths, ascending.
    pub levels: Vec<u32>,
    /// Fraction of nodes (and edges) per level.
    pub ratios: Vec<f64>,
    /// Steps during which quantizer statistics adapt; frozen afterwards.
    pub calibration_steps: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Evaluate every this many steps; 0 evaluates at the end of each epoch.
    pub eval_every: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr_main: 1e-3,
            lr_aux: 1e-3,
            warmup_epochs: 1,
            levels: vec![4, 8],
            ratios: vec![0.5, 0.5],
            calibration_steps: 100,
            seed: 0,
            mode: Mode::Targeted,
            eval_every: 0,
            clip_norm: 1.0,
            weight_decay: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_levels(&self.levels, &self.ratios)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return invalid("epochs and batch size must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return invalid(format!("warmup of {} epochs in a {}-epoch run", self.warmup_epochs, self.epochs));
        }
        for (name, v) in [("lr_main", self.lr_main), ("lr_aux", self.lr_aux), ("clip_norm", self.clip_norm)] {
            if !(v.is_finite() && v > 0.0) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return invalid("weight decay must be nonnegative");
        }
        if self.calibration_steps == 0 {
            return invalid("at least one calibration step is required");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Affine maps applied to raw samples before they reach the networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub pos_min: Vec<f64>,
    pub pos_max: Vec<f64>,
    /// Root-mean-square of the training targets, per channel.
    pub target_scale: Vec<f64>,
}

fn column_stats(mats: &[&Matrix]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = mats[0].cols();
    let (mut sum, mut sq) = (vec![0.0; c], vec![0.0; c]);
    let (mut lo, mut hi) = (vec![f64::INFINITY; c], vec![f64::NEG_INFINITY; c]);
    let mut count = 0usize;
    for m in mats {
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
            count += 1;
        }
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()).collect();
    let rms = sq.iter().map(|q| (q / n).sqrt()).collect();
    (mean, std, rms, lo, hi)
}

impl Normalizer {
    pub fn fit(train: &[Sample]) -> Result<Self> {
        if train.is_empty() {
            return invalid("cannot fit normalization on an empty training set");
        }
        let feats: Vec<&Matrix> = train.iter().map(|s| &s.graph.features).collect();
        let (feature_mean, feature_std, _, _, _) = column_stats(&feats);
        let pos: Vec<&Matrix> = train.iter().map(|s| &s.graph.positions).collect();
        let (_, _, _, pos_min, pos_max) = column_stats(&pos);
        let targ: Vec<&Matrix> = train.iter().map(|s| &s.targets).collect();
        let (_, _, target_scale, _, _) = column_stats(&targ);
        let fix = |v: Vec<f64>| v.into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(Self { feature_mean, feature_std: fix(feature_std), pos_min, pos_max, target_scale: fix(target_scale) })
    }

    pub fn apply(&self, s: &Sample) -> Result<Sample> {
        let g = &s.graph;
        if g.features.cols() != self.feature_mean.len()
            || g.positions.cols() != self.pos_min.len()
            || s.targets.cols() != self.target_scale.len()
        {
            return Err(AmqError::Shape("sample channels differ from the normalization".into()));
        }
        let mut features = g.features.clone();
        for i in 0..features.rows() {
            for ((v, m), sd) in features.row_mut(i).iter_mut().zip(&self.feature_mean).zip(&self.feature_std) {
                *v = (*v - m) / sd;
            }
        }
        let mut positions = g.positions.clone();
        for i in 0..positions.rows() {
            for ((v, lo), hi) in positions.row_mut(i).iter_mut().zip(&self.pos_min).zip(&self.pos_max) {
                let w = hi - lo;
                *v = if w > 0.0 { 2.0 * (*v - lo) / w - 1.0 } else { 0.0 };
            }
        }
        let mut targets = s.targets.clone();
        for i in 0..targets.rows() {
            for (v, sc) in targets.row_mut(i).iter_mut().zip(&self.target_scale) {
                *v /= sc;
            }
        }
        let graph = MeshGraph::new(positions, features, g.edges.clone(), g.clusters.clone())?;
        Ok(Sample { graph, targets, seed: s.seed })
    }
}

/// A normalized sample with its adjacency precomputed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sample: Sample,
    pub incoming: Incoming,
}

impl Prepared {
    pub fn new(sample: Sample) -> Self {
        let incoming = sample.incoming();
        Self { sample, incoming }
    }

    pub fn graph(&self) -> &MeshGraph {
        &self.sample.graph
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub main_loss: f64,
    pub aux_loss: f64,
    /// Mean per sample, main network plus auxiliary when it is used.
    pub macs_int8eq: f64,
    pub aux_macs: f64,
    pub lr_main: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared error in normalized target units.
    pub val_loss: f64,
    pub rel_l2: f64,
    pub aux_loss: f64,
    pub macs_int8eq: f64,
    pub aux_macs: f64,
    /// Fraction of nodes at each level.
    pub histogram: Vec<f64>,
}

/// Allocation of one sample given the auxiliary prediction.
pub fn allocate(
    mode: Mode,
    w: &ComplexityField,
    graph: &MeshGraph,
    levels: &[u32],
    ratios: &[f64],
    shuffle: &mut ChaCha8Rng,
) -> Result<BitAllocation> {
    let field = match mode {
        Mode::Targeted => w.clone(),
        Mode::Random => {
            let mut v = w.values().to_vec();
            v.shuffle(shuffle);
            ComplexityField::new(v)?
        }
        Mode::Uniform => ComplexityField::new(vec![0.0; graph.n_nodes()])?,
    };
    BitAllocation::from_weights(&field, &graph.edges, graph.clusters.as_deref(), levels, ratios)
}

fn merge_observations(acc: &mut Vec<Vec<Option<f64>>>, obs: &[Vec<Option<f64>>]) {
    if acc.is_empty() {
        *acc = obs.to_vec();
        return;
    }
    for (a, o) in acc.iter_mut().zip(obs) {
        for (x, y) in a.iter_mut().zip(o) {
            *x = match (*x, *y) {
                (Some(p), Some(q)) => Some(p.max(q)),
                (p, q) => p.or(q),
            };
        }
    }
}

/// Stable short digest of a list of sample indices.
pub fn batch_hash(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for i in indices {
        h.update((*i as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Complete mutable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub main: Mpnn,
    pub aux: AuxModel,
    pub adam_main: AdamState,
    pub adam_aux: AdamState,
    pub step: usize,
    pub shuffle_rng: ChaCha8Rng,
    pub normalizer: Normalizer,
}

pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub aux_cfg: AuxConfig,
    pub cfg: TrainConfig,
    pub state: TrainState,
    train: Vec<Prepared>,
    val: Vec<Prepared>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, aux_cfg: AuxConfig, cfg: TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let normalizer = Normalizer::fit(&data.train)?;
        let first = &data.train[0];
        let (f, p, o) = (first.graph.features.cols(), first.graph.positions.cols(), first.targets.cols());
        let main_net = model_cfg.network_config(&cfg.levels, f, p, o)?;
        let aux_net = aux_cfg.network_config(f, p, model_cfg.ema_decay)?;

        let rng = |stream| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(stream);
            r
        };
        let main = Mpnn::new(main_net, &mut rng(STREAM_MAIN_INIT))?;
        let aux = AuxModel { net: Mpnn::new(aux_net, &mut rng(STREAM_AUX_INIT))? };
        let state = TrainState {
            adam_main: AdamState::new(&main),
            adam_aux: AdamState::new(&aux.net),
            main,
            aux,
            step: 0,
            shuffle_rng: rng(STREAM_SHUFFLE),
            normalizer,
        };
        Self::from_state(model_cfg, aux_cfg, cfg, state, data)
    }

    /// Rebuilds a trainer around saved state, e.g. from a checkpoint.
    pub fn from_state(
        model_cfg: ModelConfig,
        aux_cfg: AuxConfig,
        cfg: TrainConfig,
        state: TrainState,
        data: &Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        let prep = |v: &[Sample]| -> Result<Vec<Prepared>> {
            v.iter().map(|s| Ok(Prepared::new(state.normalizer.apply(s)?))).collect()
        };
        let train = prep(&data.train)?;
        let val = prep(&data.val)?;
        if train.is_empty() {
            return invalid("empty training set");
        }
        Ok(Self { model_cfg, aux_cfg, cfg, state, train, val })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn train_samples(&self) -> &[Prepared] {
        &self.train
    }

    pub fn val_samples(&self) -> &[Prepared] {
        &self.val
    }

    /// Sample indices of the batch at `step`; each epoch is a fresh
    /// permutation that depends only on the seed and the epoch number.
    pub fn batch_for_step(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        r.set_stream(STREAM_DATA_ORDER + epoch as u64);
        order.shuffle(&mut r);
        let start = pos * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(order.len())].to_vec()
    }

    /// Whether an evaluation is due after `step` steps have completed.
    pub fn eval_due(&self, completed: usize) -> bool {
        let every = if self.cfg.eval_every == 0 { self.steps_per_epoch() } else { self.cfg.eval_every };
        completed % every == 0 || completed == self.total_steps()
    }

    fn quant_mode(&self) -> QuantMode {
        if self.state.step < self.cfg.calibration_steps {
            QuantMode::Calibrate
        } else {
            QuantMode::Static
        }
    }

    fn sample_cost(&self, alloc: &BitAllocation, graph: &MeshGraph) -> Result<(f64, f64)> {
        let aux_cfg = self.cfg.mode.uses_aux().then_some(&self.state.aux.net.config);
        let r = model_cost_report(&self.state.main.config, alloc, aux_cfg, graph.n_nodes(), graph.n_edges())?;
        Ok((r.total(), r.aux_total))
    }

    /// One synchronous update of both networks on the batch `indices`.
    pub fn train_step(&mut self, indices: &[usize]) -> Result<StepMetrics> {
        if indices.is_empty() {
            return invalid("empty batch");
        }
        let mode = self.quant_mode();
        let st = &self.state;
        let mut g_main = st.main.zero_grads();
        let mut g_aux = st.aux.net.zero_grads();
        let (mut obs_main, mut obs_aux) = (Vec::new(), Vec::new());
        let (mut main_loss, mut aux_loss, mut macs, mut aux_macs) = (0.0, 0.0, 0.0, 0.0);
        let mut shuffle = st.shuffle_rng.clone();

        for &i in indices {
            let p = self.train.get(i).ok_or(AmqError::IndexOutOfRange { index: i, len: self.train.len() })?;
            let graph = p.graph();
            let aux_trace = st.aux.forward(graph, &p.incoming, mode)?;
            let w = ComplexityField::new(aux_trace.output.data().to_vec())?;
            let alloc = allocate(self.cfg.mode, &w, graph, &self.cfg.levels, &self.cfg.ratios, &mut shuffle)?;

            let trace = st.main.forward(graph, &p.incoming, Some(&alloc), mode)?;
            let loss = per_node_loss(&trace.output, &p.sample.targets)?;
            g_main.add_assign(&st.main.backward(graph, &p.incoming, &trace, &loss.grad)?);
            merge_observations(&mut obs_main, &trace.observed);

            let target = build_aux_target(&loss.per_node, graph, self.aux_cfg.diffusion_steps)?;
            let (la, ga) = st.aux.loss_and_grads(graph, &p.incoming, &aux_trace, &target)?;
            g_aux.add_assign(&ga);
            merge_observations(&mut obs_aux, &aux_trace.observed);

            let (c, ca) = self.sample_cost(&alloc, graph)?;
            main_loss += loss.mean;
            aux_loss += la;
            macs += c;
            aux_macs += ca;
        }
        let b = indices.len() as f64;
        g_main.scale(1.0 / b);
        g_aux.scale(1.0 / b);
        self.apply_updates(&mut g_main, &mut g_aux, &obs_main, &obs_aux, mode)?;
        self.state.shuffle_rng = shuffle;
        let lr_main = self.lr(self.state.step, self.cfg.lr_main)?;
        self.state.step += 1;
        Ok(StepMetrics {
            step: self.state.step,
            main_loss: main_loss / b,
            aux_loss: aux_loss / b,
            macs_int8eq: macs / b,
            aux_macs: aux_macs / b,
            lr_main,
        })
    }

    fn lr(&self, step: usize, peak: f64) -> Result<f64> {
        let total = self.total_steps();
        let warmup = self.cfg.warmup_epochs * self.steps_per_epoch();
        lr_schedule((step + 1).min(total), total, warmup, peak)
    }

    fn apply_updates(
        &mut self,
        g_main: &mut Gradients,
        g_aux: &mut Gradients,
        obs_main: &[Vec<Option<f64>>],
        obs_aux: &[Vec<Option<f64>>],
        mode: QuantMode,
    ) -> Result<()> {
        let adam = self.cfg.adam();
        let lr_main = self.lr(self.state.step, self.cfg.lr_main)?;
        let lr_aux = self.lr(self.state.step, self.cfg.lr_aux)?;
        clip_global_norm(g_main, self.cfg.clip_norm);
        clip_global_norm(g_aux, self.cfg.clip_norm);
        let st = &mut self.state;
        adam_step(&mut st.main, g_main, &mut st.adam_main, &adam, lr_main)?;
        adam_step(&mut st.aux.net, g_aux, &mut st.adam_aux, &adam, lr_aux)?;
        if mode == QuantMode::Calibrate {
            for (net, obs) in [(&mut st.main, obs_main), (&mut st.aux.net, obs_aux)] {
                net.recalibrate_weights()?;
                net.apply_observations(obs)?;
                if st.step + 1 == self.cfg.calibration_steps {
                    net.freeze_quantizers();
                }
            }
        }
        Ok(())
    }

    /// Metrics over `samples` with stored quantizer scales. Random-mode
    /// shuffles come from a fixed stream, so repeated calls agree.
    pub fn evaluate(&self, samples: &[Prepared]) -> Result<EvalMetrics> {
        if samples.is_empty() {
            return invalid("cannot evaluate on an empty dataset");
        }
        let st = &self.state;
        let mut shuffle = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        shuffle.set_stream(STREAM_EVAL_SHUFFLE);
        let mut hist = vec![0.0; self.cfg.levels.len()];
        let (mut loss, mut rel, mut aux_loss, mut macs, mut aux_macs) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for p in samples {
            let graph = p.graph();
            let aux_trace = st.aux.forward(graph, &p.incoming, QuantMode::Static)?;
            let w = ComplexityField::new(aux_trace.output.data().to_vec())?;
            let alloc = allocate(self.cfg.mode, &w, graph, &self.cfg.levels, &self.cfg.ratios, &mut shuffle)?;
            let trace = st.main.forward(graph, &p.incoming, Some(&alloc), QuantMode::Static)?;
            let l = per_node_loss(&trace.output, &p.sample.targets)?;
            let target = build_aux_target(&l.per_node, graph, self.aux_cfg.diffusion_steps)?;
            aux_loss += per_node_loss(&aux_trace.output, &Matrix::column(&target))?.mean;
            loss += l.mean;
            rel += relative_l2(&trace.output, &p.sample.targets)?;
            let (c, ca) = self.sample_cost(&alloc, graph)?;
            macs += c;
            aux_macs += ca;
            for (h, count) in hist.iter_mut().zip(alloc.node_histogram()) {
                *h += count as f64 / graph.n_nodes() as f64;
            }
        }
        let n = samples.len() as f64;
        Ok(EvalMetrics {
            val_loss: loss / n,
            rel_l2: rel / n,
            aux_loss: aux_loss / n,
            macs_int8eq: macs / n,
            aux_macs: aux_macs / n,
            histogram: hist.into_iter().map(|h| h / n).collect(),
        })
    }

    pub fn evaluate_val(&self) -> Result<EvalMetrics> {
        self.evaluate(&self.val)
    }
}

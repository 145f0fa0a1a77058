#![allow(dead_code)]

use amq::graph::{build_knn_graph, MeshGraph};
use amq::model::{per_node_loss, Head, Mpnn, MpnnConfig, QuantMode, QuantSpec};
use amq::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_graph(n: usize, k: usize, seed: u64) -> (MeshGraph, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
    let positions = Matrix::from_vec(n, 2, pos).unwrap();
    let features = Matrix::from_vec(n, 1, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let targets = Matrix::from_vec(n, 1, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let edges = build_knn_graph(&positions, k, true).unwrap();
    (MeshGraph::new(positions, features, edges, None).unwrap(), targets)
}

pub fn tiny_config(layers: usize, hidden: usize) -> MpnnConfig {
    MpnnConfig {
        feature_dim: 1,
        pos_dim: 2,
        hidden,
        layers,
        out_dim: 1,
        head: Head::Identity,
        quant: QuantSpec::new(vec![4, 8], 4, 8),
    }
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter of a full-precision network.
pub fn max_gradient_error(net: &Mpnn, graph: &MeshGraph, targets: &Matrix, h: f64) -> f64 {
    let inc = graph.incoming();
    let loss_of = |m: &Mpnn| {
        let t = m.forward(graph, &inc, None, QuantMode::Off).unwrap();
        per_node_loss(&t.output, targets).unwrap().mean
    };
    let trace = net.forward(graph, &inc, None, QuantMode::Off).unwrap();
    let loss = per_node_loss(&trace.output, targets).unwrap();
    let grads = net.backward(graph, &inc, &trace, &loss.grad).unwrap();

    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for l in 0..net.layers.len() {
        let n_w = net.layers[l].weight.data().len();
        for p in 0..n_w + net.layers[l].bias.len() {
            let orig = *param(&mut probe, l, p);
            *param(&mut probe, l, p) = orig + h;
            let up = loss_of(&probe);
            *param(&mut probe, l, p) = orig - h;
            let down = loss_of(&probe);
            *param(&mut probe, l, p) = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = if p < n_w { grads.0[l].weight.data()[p] } else { grads.0[l].bias[p - n_w] };
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

fn param(m: &mut Mpnn, l: usize, p: usize) -> &mut f64 {
    let n_w = m.layers[l].weight.data().len();
    if p < n_w {
        &mut m.layers[l].weight.data_mut()[p]
    } else {
        &mut m.layers[l].bias[p - n_w]
    }
}

pub fn tiny_net(layers: usize, hidden: usize, seed: u64) -> Mpnn {
    Mpnn::new(tiny_config(layers, hidden), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Random layer, activations and bucket split drawn from `seed`.
pub fn kernel_instance(seed: u64) -> (Matrix, amq::gemm::QuantizedLinear, Vec<Vec<usize>>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=64);
    let d = rng.random_range(1..=32);
    let d_out = rng.random_range(1..=32);
    let all = [4u32, 8, 12];
    let mut levels: Vec<u32> = all.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
    if levels.is_empty() {
        levels.push(all[rng.random_range(0..3)]);
    }
    let spread = 10f64.powf(rng.random_range(-2.0..2.0));
    let a = Matrix::from_vec(n, d, (0..n * d).map(|_| spread * rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = Matrix::from_vec(d, d_out, (0..d * d_out).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let bias: Vec<f64> = (0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let quants = levels
        .iter()
        .map(|&b| {
            let m = spread * rng.random_range(0.2..1.5);
            amq::quant::Quantizer::from_maxabs(b, &[m]).unwrap()
        })
        .collect();
    let layer = amq::gemm::QuantizedLinear::from_float(&w, &bias, 8, quants).unwrap();
    let mut buckets = vec![Vec::new(); levels.len()];
    for i in 0..n {
        buckets[rng.random_range(0..levels.len())].push(i);
    }
    (a, layer, buckets)
}

/// Small end-to-end configuration: 12x12 grids at stride 2, a 1-layer
/// main network and a 1-layer auxiliary network.
pub fn tiny_experiment(dir: &std::path::Path) -> amq::config::ExperimentConfig {
    let mut c = amq::config::ExperimentConfig::default();
    c.data = amq::dataset::DataConfig { n: 12, stride: 2, k: 5, n_train: 6, n_val: 3, seed: 7 };
    c.model.hidden = 8;
    c.model.layers = 1;
    c.aux.hidden = 6;
    c.aux.layers = 1;
    c.aux.diffusion_steps = 2;
    c.train.epochs = 3;
    c.train.batch_size = 4;
    c.train.warmup_epochs = 1;
    c.train.calibration_steps = 3;
    c.train.lr_main = 5e-3;
    c.train.lr_aux = 5e-3;
    c.output.dir = dir.join("run");
    c.output.dataset = dir.join("data.jsonl");
    c
}

pub fn tiny_trainer(mode: amq::train::Mode, levels: Vec<u32>, ratios: Vec<f64>) -> amq::train::Trainer {
    let cfg = tiny_experiment(std::path::Path::new("/nonexistent"));
    let data = amq::dataset::generate_dataset(&cfg.data).unwrap();
    let train = amq::train::TrainConfig { mode, levels, ratios, ..cfg.train };
    amq::train::Trainer::new(cfg.model, cfg.aux, train, &data).unwrap()
}

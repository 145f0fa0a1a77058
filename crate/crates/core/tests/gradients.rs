mod common;

use amq::model::{per_node_loss, QuantMode};
use amq::tensor::Matrix;
use common::{max_gradient_error, random_graph, tiny_net};

#[test]
fn full_precision_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (graph, targets) = random_graph(6, 3, seed);
        let net = tiny_net(2, 8, seed + 10);
        let err = max_gradient_error(&net, &graph, &targets, 1e-5);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn zero_loss_gives_zero_gradients() {
    let (graph, _) = random_graph(6, 3, 1);
    let net = tiny_net(2, 8, 2);
    let inc = graph.incoming();
    let trace = net.forward(&graph, &inc, None, QuantMode::Off).unwrap();
    let loss = per_node_loss(&trace.output, &trace.output).unwrap();
    assert_eq!(loss.mean, 0.0);
    let g = net.backward(&graph, &inc, &trace, &loss.grad).unwrap();
    assert!(g.values().all(|v| v == 0.0));
}

#[test]
fn last_bias_gradient_is_mean_residual() {
    let (graph, targets) = random_graph(6, 3, 4);
    let net = tiny_net(1, 8, 5);
    let inc = graph.incoming();
    let trace = net.forward(&graph, &inc, None, QuantMode::Off).unwrap();
    let loss = per_node_loss(&trace.output, &targets).unwrap();
    let g = net.backward(&graph, &inc, &trace, &loss.grad).unwrap();
    let n = graph.n_nodes() as f64;
    let residual: f64 = trace.output.data().iter().zip(targets.data()).map(|(p, t)| p - t).sum();
    let last = g.0.last().unwrap();
    assert!((last.bias[0] - 2.0 * residual / n).abs() < 1e-14);
}

#[test]
fn quantized_forward_needs_allocation() {
    let (graph, _) = random_graph(6, 3, 1);
    let net = tiny_net(1, 4, 2);
    assert!(net.forward(&graph, &graph.incoming(), None, QuantMode::Static).is_err());
    let bad = Matrix::zeros(3, 1);
    let trace = net.forward(&graph, &graph.incoming(), None, QuantMode::Off).unwrap();
    assert!(net.backward(&graph, &graph.incoming(), &trace, &bad).is_err());
}

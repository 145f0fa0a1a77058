use crate::error::{AmqError, Result};
use crate::tensor::Matrix;

/// Squared-error loss of a prediction, per node and averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeLoss {
    /// Mean over output channels of the squared error at each node.
    pub per_node: Vec<f64>,
    /// Mean of `per_node`.
    pub mean: f64,
    /// Gradient of `mean` with respect to the prediction.
    pub grad: Matrix,
}

pub fn per_node_loss(pred: &Matrix, target: &Matrix) -> Result<NodeLoss> {
    check_shapes(pred, target)?;
    let (n, c) = (pred.rows(), pred.cols());
    if n == 0 || c == 0 {
        return Err(AmqError::Shape("empty prediction".into()));
    }
    let mut per_node = Vec::with_capacity(n);
    let mut grad = Matrix::zeros(n, c);
    let g = 2.0 / (n * c) as f64;
    for i in 0..n {
        let mut acc = 0.0;
        for ((d, &p), &t) in grad.row_mut(i).iter_mut().zip(pred.row(i)).zip(target.row(i)) {
            let e = p - t;
            acc += e * e;
            *d = g * e;
        }
        per_node.push(acc / c as f64);
    }
    let mean = per_node.iter().sum::<f64>() / n as f64;
    if !mean.is_finite() {
        return Err(AmqError::NonFinite("loss"));
    }
    Ok(NodeLoss { per_node, mean, grad })
}

/// `||pred - target|| / ||target||` over all entries.
pub fn relative_l2(pred: &Matrix, target: &Matrix) -> Result<f64> {
    check_shapes(pred, target)?;
    let num: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    let den: f64 = target.data().iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(AmqError::InvalidArgument("relative error against a zero target".into()));
    }
    Ok((num / den).sqrt())
}

fn check_shapes(pred: &Matrix, target: &Matrix) -> Result<()> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(AmqError::Shape(format!(
            "prediction {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    Ok(())
}

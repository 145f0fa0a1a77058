use rand::Rng;
use serde::{Deserialize, Serialize};

use super::QuantSpec;
use crate::error::{AmqError, Result};
use crate::gemm::QuantizedLinear;
use crate::quant::{in_clamp_range, quantize_scalar, Quantizer};
use crate::tensor::{IntMatrix, Matrix};

/// How activations and weights are treated in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Plain floating-point layers.
    Off,
    /// Activation scales taken from the current data; statistics recorded.
    Calibrate,
    /// Stored activation scales.
    Static,
}

/// A linear layer (`y = x * weight + bias`) with its quantizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QLinear {
    /// `d_in x d_out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// Per output channel.
    pub weight_quant: Quantizer,
    /// One per quantization level.
    pub act_quant: Vec<Quantizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros_like(layer: &QLinear) -> Self {
        Self {
            weight: Matrix::zeros(layer.weight.rows(), layer.weight.cols()),
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    /// Input as seen by the product (fake-quantized when quantizing).
    input: Matrix,
    input_pass: Option<Vec<bool>>,
    weight_hat: Option<Matrix>,
    weight_pass: Option<Vec<bool>>,
    /// Max-abs of the input per level, recorded in calibration mode.
    pub observed: Vec<Option<f64>>,
}

impl QLinear {
    /// Uniform fan-in initialization `U(-1/sqrt(d_in), 1/sqrt(d_in))`.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, spec: &QuantSpec, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = (0..d_in * d_out).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..d_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self::from_parts(Matrix::from_vec(d_in, d_out, w)?, b, spec)
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>, spec: &QuantSpec) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(AmqError::Shape("bias length differs from output width".into()));
        }
        let mut weight_quant = Quantizer::new(spec.weight_bits, weight.cols(), spec.ema_decay)?;
        weight_quant.recalibrate(&weight)?;
        let act_quant = spec
            .levels
            .iter()
            .map(|&b| Quantizer::new(b, 1, spec.ema_decay))
            .collect::<Result<_>>()?;
        Ok(Self { weight, bias, weight_quant, act_quant })
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(
        &self,
        x: &Matrix,
        mode: QuantMode,
        buckets: &[Vec<usize>],
        spec: &QuantSpec,
    ) -> Result<(Matrix, LinearCache)> {
        if x.cols() != self.d_in() {
            return Err(AmqError::Shape(format!(
                "layer expects {} inputs, got {}",
                self.d_in(),
                x.cols()
            )));
        }
        if mode == QuantMode::Off {
            let mut y = x.matmul(&self.weight)?;
            add_bias(&mut y, &self.bias);
            let cache = LinearCache {
                input: x.clone(),
                input_pass: None,
                weight_hat: None,
                weight_pass: None,
                observed: Vec::new(),
            };
            return Ok((y, cache));
        }
        if buckets.len() != self.act_quant.len() {
            return Err(AmqError::Shape("bucket count differs from level count".into()));
        }

        // weights, per output channel
        let (d_in, d_out) = (self.d_in(), self.d_out());
        let wb = self.weight_quant.bits();
        let mut wq = Vec::with_capacity(d_in * d_out);
        let mut w_hat = Vec::with_capacity(d_in * d_out);
        let mut w_pass = Vec::with_capacity(d_in * d_out);
        for (k, &w) in self.weight.data().iter().enumerate() {
            let s = self.weight_quant.scale_for(k % d_out);
            let q = quantize_scalar(w, s, wb);
            wq.push(q);
            w_hat.push(f64::from(q) / s);
            w_pass.push(in_clamp_range(w, s, wb));
        }

        // activations, per level
        let mut observed = vec![None; self.act_quant.len()];
        let mut quantizers = Vec::with_capacity(self.act_quant.len());
        for (k, (aq, bucket)) in self.act_quant.iter().zip(buckets).enumerate() {
            let q = match mode {
                QuantMode::Calibrate => {
                    let m = bucket
                        .iter()
                        .flat_map(|&i| x.row(i).iter())
                        .fold(0.0f64, |m, v| m.max(v.abs()));
                    if !bucket.is_empty() {
                        observed[k] = Some(m);
                    }
                    Quantizer::from_maxabs(aq.bits(), &[m])?
                }
                _ => aq.clone(),
            };
            quantizers.push(q);
        }
        let mut qa = IntMatrix::zeros(x.rows(), d_in);
        let mut a_hat = Matrix::zeros(x.rows(), d_in);
        let mut a_pass = vec![true; x.rows() * d_in];
        for (quant, bucket) in quantizers.iter().zip(buckets) {
            let (s, b) = (quant.scale_for(0), quant.bits());
            if s.is_nan() {
                return Err(AmqError::NonFinite("activation scale"));
            }
            for &i in bucket {
                if i >= x.rows() {
                    return Err(AmqError::IndexOutOfRange { index: i, len: x.rows() });
                }
                let src = x.row(i);
                let qrow = qa.row_mut(i);
                for (j, &v) in src.iter().enumerate() {
                    qrow[j] = quantize_scalar(v, s, b);
                }
                let hrow = a_hat.row_mut(i);
                for j in 0..d_in {
                    hrow[j] = if s.is_finite() { f64::from(qa.get(i, j)) / s } else { 0.0 };
                    a_pass[i * d_in + j] = in_clamp_range(src[j], s, b);
                }
            }
        }

        let layer = QuantizedLinear::new(
            IntMatrix::from_vec(d_in, d_out, wq)?,
            wb,
            self.weight_quant.scales().to_vec(),
            self.bias.clone(),
            quantizers,
        )?;
        let y = spec.kernel.apply(&qa, &layer, buckets, spec.base_bits)?;
        let cache = LinearCache {
            input: a_hat,
            input_pass: Some(a_pass),
            weight_hat: Some(Matrix::from_vec(d_in, d_out, w_hat)?),
            weight_pass: Some(w_pass),
            observed,
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient. Quantizers use the clipped straight-through estimator.
    pub fn backward(&self, cache: &LinearCache, dy: &Matrix, grad: &mut LinearGrad) -> Result<Matrix> {
        if dy.cols() != self.d_out() || dy.rows() != cache.input.rows() {
            return Err(AmqError::Shape("output gradient shape".into()));
        }
        for r in 0..dy.rows() {
            for (g, d) in grad.bias.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        match &cache.weight_pass {
            None => cache.input.add_tn_into(dy, &mut grad.weight)?,
            Some(pass) => {
                let mut tmp = Matrix::zeros(self.d_in(), self.d_out());
                cache.input.add_tn_into(dy, &mut tmp)?;
                for ((g, t), &p) in grad.weight.data_mut().iter_mut().zip(tmp.data()).zip(pass) {
                    if p {
                        *g += t;
                    }
                }
            }
        }
        let w = cache.weight_hat.as_ref().unwrap_or(&self.weight);
        let mut dx = dy.matmul_nt(w)?;
        if let Some(pass) = &cache.input_pass {
            for (g, &p) in dx.data_mut().iter_mut().zip(pass) {
                if !p {
                    *g = 0.0;
                }
            }
        }
        Ok(dx)
    }
}

fn add_bias(y: &mut Matrix, bias: &[f64]) {
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

/// `(gelu(x), gelu'(x))` sharing one `tanh`.
#[inline]
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let g = 0.5 * x * (1.0 + t);
    (g, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

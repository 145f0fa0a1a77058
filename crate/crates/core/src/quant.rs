//! Symmetric integer quantizers.
//!
//! A quantizer maps reals to `clamp(round(s * x), -(2^(b-1) - 1), 2^(b-1) - 1)`
//! and back via `q / s`. There is no zero point, so `0` is always exactly
//! representable. Rounding is ties-to-even.
//!
//! Scales are either a single value (per tensor) or one value per column
//! (per channel). A channel whose max-abs statistic is zero gets an infinite
//! scale: it quantizes everything to `0` and dequantizes to `0`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, AmqError, Result};
use crate::tensor::{IntMatrix, Matrix};

pub const DEFAULT_EMA_DECAY: f64 = 0.99;

/// Largest representable magnitude for a `bits`-wide symmetric quantizer.
#[inline]
pub fn qmax(bits: u32) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// `(2^(b-1) - 1) / maxabs`, or infinity for a zero statistic.
#[inline]
pub fn scale_from_maxabs(bits: u32, maxabs: f64) -> f64 {
    if maxabs > 0.0 {
        f64::from(qmax(bits)) / maxabs
    } else {
        f64::INFINITY
    }
}

#[inline]
pub fn quantize_scalar(x: f64, scale: f64, bits: u32) -> i32 {
    if !scale.is_finite() {
        return 0;
    }
    let m = f64::from(qmax(bits));
    (scale * x).round_ties_even().clamp(-m, m) as i32
}

/// True when `x` lies inside the clamp range, where the straight-through
/// estimator passes gradients.
#[inline]
pub fn in_clamp_range(x: f64, scale: f64, bits: u32) -> bool {
    if !scale.is_finite() {
        return true;
    }
    (scale * x).abs() <= f64::from(qmax(bits))
}

fn check_bits(bits: u32) -> Result<()> {
    if (2..=16).contains(&bits) {
        Ok(())
    } else {
        invalid(format!("bit-width {bits} outside 2..=16"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    bits: u32,
    scale: Vec<f64>,
    ema_stat: Vec<f64>,
    ema_decay: f64,
    frozen: bool,
}

impl Quantizer {
    /// An uncalibrated quantizer with a zero statistic over `channels`
    /// channels (`1` for per-tensor).
    pub fn new(bits: u32, channels: usize, ema_decay: f64) -> Result<Self> {
        check_bits(bits)?;
        if channels == 0 {
            return invalid("quantizer needs at least one channel");
        }
        if !(ema_decay > 0.0 && ema_decay < 1.0) {
            return invalid(format!("ema decay {ema_decay} outside (0, 1)"));
        }
        Ok(Self {
            bits,
            scale: vec![f64::INFINITY; channels],
            ema_stat: vec![0.0; channels],
            ema_decay,
            frozen: false,
        })
    }

    /// Builds a quantizer directly from max-abs statistics.
    pub fn from_maxabs(bits: u32, maxabs: &[f64]) -> Result<Self> {
        let mut q = Self::new(bits, maxabs.len(), DEFAULT_EMA_DECAY)?;
        q.set_stat(maxabs)?;
        Ok(q)
    }

    /// Max-abs calibration, per tensor or per column.
    pub fn calibrate_maxabs(x: &Matrix, bits: u32, per_channel: bool) -> Result<Self> {
        if x.data().is_empty() {
            return invalid("cannot calibrate on an empty tensor");
        }
        ensure_finite(x.data(), "calibration tensor")?;
        Self::from_maxabs(bits, &maxabs(x, per_channel))
    }

    pub fn with_decay(mut self, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return invalid(format!("ema decay {decay} outside (0, 1)"));
        }
        self.ema_decay = decay;
        Ok(self)
    }

    #[inline]
    pub fn bits(&self) -> u32 {
        self.bits
    }

    #[inline]
    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    pub fn scales(&self) -> &[f64] {
        &self.scale
    }

    pub fn ema_stat(&self) -> &[f64] {
        &self.ema_stat
    }

    pub fn ema_decay(&self) -> f64 {
        self.ema_decay
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_per_channel(&self) -> bool {
        self.scale.len() > 1
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Fixes the current scale for good.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Scale applied to column `col`.
    #[inline]
    pub fn scale_for(&self, col: usize) -> f64 {
        if self.scale.len() == 1 {
            self.scale[0]
        } else {
            self.scale[col]
        }
    }

    fn set_stat(&mut self, stat: &[f64]) -> Result<()> {
        if stat.len() != self.ema_stat.len() {
            return Err(AmqError::Shape(format!(
                "{} statistics for a {}-channel quantizer",
                stat.len(),
                self.ema_stat.len()
            )));
        }
        self.ema_stat.copy_from_slice(stat);
        self.refresh_scale();
        Ok(())
    }

    fn refresh_scale(&mut self) {
        for (s, &m) in self.scale.iter_mut().zip(&self.ema_stat) {
            *s = scale_from_maxabs(self.bits, m);
        }
    }

    /// Replaces the statistic with the max-abs of `x` (weight recalibration).
    pub fn recalibrate(&mut self, x: &Matrix) -> Result<()> {
        if self.frozen {
            return Err(AmqError::QuantizerFrozen);
        }
        ensure_finite(x.data(), "recalibration tensor")?;
        let m = maxabs(x, self.is_per_channel());
        self.set_stat(&m)
    }

    /// One exponential-moving-average step on the max-abs statistic of `x`.
    pub fn ema_update(&mut self, x: &Matrix) -> Result<()> {
        if self.frozen {
            return Err(AmqError::QuantizerFrozen);
        }
        if x.data().is_empty() {
            return invalid("ema update on an empty tensor");
        }
        ensure_finite(x.data(), "ema tensor")?;
        let m = maxabs(x, self.is_per_channel());
        self.ema_update_stat(&m)
    }

    /// EMA step given an already reduced max-abs observation.
    pub fn ema_update_stat(&mut self, observed: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(AmqError::QuantizerFrozen);
        }
        if observed.len() != self.ema_stat.len() {
            return Err(AmqError::Shape("ema observation channel count".into()));
        }
        ensure_finite(observed, "ema observation")?;
        let d = self.ema_decay;
        for (s, &o) in self.ema_stat.iter_mut().zip(observed) {
            *s = d * *s + (1.0 - d) * o;
        }
        self.refresh_scale();
        Ok(())
    }

    fn check_cols(&self, cols: usize) -> Result<()> {
        if self.scale.len() != 1 && self.scale.len() != cols {
            return Err(AmqError::Shape(format!(
                "{}-channel quantizer applied to {cols} columns",
                self.scale.len()
            )));
        }
        Ok(())
    }

    pub fn quantize(&self, x: &Matrix) -> Result<IntMatrix> {
        self.check_cols(x.cols())?;
        ensure_finite(x.data(), "quantizer input")?;
        let cols = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| quantize_scalar(v, self.scale_for(k % cols), self.bits))
            .collect();
        IntMatrix::from_vec(x.rows(), cols, data)
    }

    pub fn dequantize(&self, q: &IntMatrix) -> Result<Matrix> {
        self.check_cols(q.cols())?;
        let m = self.qmax();
        let cols = q.cols();
        let mut out = Vec::with_capacity(q.data().len());
        for (k, &v) in q.data().iter().enumerate() {
            if v < -m || v > m {
                return Err(AmqError::ValueOutOfRange { value: v.into(), bits: self.bits });
            }
            out.push(f64::from(v) / self.scale_for(k % cols));
        }
        Matrix::from_vec(q.rows(), cols, out)
    }

    /// Quantize-dequantize with the clipped straight-through mask.
    pub fn fake_quant(&self, x: &Matrix) -> Result<FakeQuant> {
        self.check_cols(x.cols())?;
        ensure_finite(x.data(), "fake-quant input")?;
        let cols = x.cols();
        let mut value = Vec::with_capacity(x.data().len());
        let mut pass = Vec::with_capacity(x.data().len());
        for (k, &v) in x.data().iter().enumerate() {
            let s = self.scale_for(k % cols);
            value.push(f64::from(quantize_scalar(v, s, self.bits)) / s);
            pass.push(in_clamp_range(v, s, self.bits));
        }
        Ok(FakeQuant { value: Matrix::from_vec(x.rows(), cols, value)?, pass })
    }
}

fn maxabs(x: &Matrix, per_channel: bool) -> Vec<f64> {
    if per_channel {
        let mut m = vec![0.0f64; x.cols()];
        for r in 0..x.rows() {
            for (mi, v) in m.iter_mut().zip(x.row(r)) {
                *mi = mi.max(v.abs());
            }
        }
        m
    } else {
        vec![x.max_abs()]
    }
}

/// Result of a fake-quantization: forward values plus the STE pass mask.
#[derive(Debug, Clone)]
pub struct FakeQuant {
    pub value: Matrix,
    pub pass: Vec<bool>,
}

impl FakeQuant {
    /// Clipped straight-through gradient: identity inside the clamp range,
    /// zero outside.
    pub fn backward(&self, grad: &Matrix) -> Result<Matrix> {
        if grad.data().len() != self.pass.len() {
            return Err(AmqError::Shape("fake-quant gradient".into()));
        }
        let data = grad
            .data()
            .iter()
            .zip(&self.pass)
            .map(|(&g, &p)| if p { g } else { 0.0 })
            .collect();
        Matrix::from_vec(grad.rows(), grad.cols(), data)
    }
}

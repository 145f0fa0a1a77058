//! Mixed-precision quantized linear layers.
//!
//! Rows of the activation matrix are split into buckets, each quantized at
//! its own bit-width `b_k` with a per-tensor scale `s_k`; weights use one
//! fixed bit-width with per-output-channel scales `s_W`. Two kernels compute
//! `y_i = (Q_k(a_i) * Q_W(W)) / (s_k * s_W) + bias`:
//!
//! * [`mp_linear_basic`] runs one integer GEMM per bucket.
//! * [`mp_linear_optimized`] splits every `b_k`-bit value into `b_k / b_0`
//!   two's-complement segments of `b_0` bits, runs a single integer GEMM over
//!   all segment rows and recombines them at their original row.
//!
//! Segment partial sums are recombined with exact power-of-two shifts before
//! the shared dequantization multiply, so both kernels produce bit-identical
//! results.

use serde::{Deserialize, Serialize};

use crate::assign::check_partition;
use crate::error::{invalid, AmqError, Result};
use crate::quant::{qmax, quantize_scalar, Quantizer};
use crate::tensor::{IntMatrix, Matrix};

/// A linear layer with integer weights and one activation quantizer per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLinear {
    pub weights_q: IntMatrix,
    pub weight_bits: u32,
    pub weight_scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub act_quantizers: Vec<Quantizer>,
}

impl QuantizedLinear {
    pub fn new(
        weights_q: IntMatrix,
        weight_bits: u32,
        weight_scale: Vec<f64>,
        bias: Vec<f64>,
        act_quantizers: Vec<Quantizer>,
    ) -> Result<Self> {
        let d_out = weights_q.cols();
        if weight_scale.len() != d_out || bias.len() != d_out {
            return Err(AmqError::Shape(format!(
                "{d_out} output channels but {} scales and {} biases",
                weight_scale.len(),
                bias.len()
            )));
        }
        let m = qmax(weight_bits);
        if let Some(&v) = weights_q.data().iter().find(|v| v.abs() > m) {
            return Err(AmqError::ValueOutOfRange { value: v.into(), bits: weight_bits });
        }
        if let Some(s) = weight_scale.iter().find(|s| !(**s > 0.0)) {
            return invalid(format!("weight scale {s} is not positive"));
        }
        if act_quantizers.iter().any(Quantizer::is_per_channel) {
            return invalid("activation quantizers must be per-tensor");
        }
        Ok(Self { weights_q, weight_bits, weight_scale, bias, act_quantizers })
    }

    /// Quantizes float weights (stored `d_in x d_out`) per output channel.
    pub fn from_float(
        weight: &Matrix,
        bias: &[f64],
        weight_bits: u32,
        act_quantizers: Vec<Quantizer>,
    ) -> Result<Self> {
        let wq = Quantizer::calibrate_maxabs(weight, weight_bits, true)?;
        Self::new(
            wq.quantize(weight)?,
            weight_bits,
            wq.scales().to_vec(),
            bias.to_vec(),
            act_quantizers,
        )
    }

    pub fn d_in(&self) -> usize {
        self.weights_q.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weights_q.cols()
    }

    pub fn level_bits(&self) -> Vec<u32> {
        self.act_quantizers.iter().map(Quantizer::bits).collect()
    }
}

/// Shared dequantization factor `1 / (s_k * s_W)`; zero for an annihilating
/// activation or weight scale.
#[inline]
pub fn dequant_factor(act_scale: f64, weight_scale: f64) -> f64 {
    1.0 / (act_scale * weight_scale)
}

/// Errors when `d` exceeds the 32-bit accumulator bound `2^(31 - b_a - b_W)`.
pub fn check_accumulator(d: usize, act_bits: u32, weight_bits: u32) -> Result<()> {
    let shift = 31i64 - i64::from(act_bits) - i64::from(weight_bits);
    let bound = if shift < 0 { 0 } else { 1usize << shift };
    if d > bound {
        return Err(AmqError::AccumulatorOverflow { dim: d, bound });
    }
    Ok(())
}

fn check_inputs(rows: usize, d: usize, layer: &QuantizedLinear, buckets: &[Vec<usize>]) -> Result<()> {
    if d != layer.d_in() {
        return Err(AmqError::Shape(format!(
            "activations have {d} columns, layer expects {}",
            layer.d_in()
        )));
    }
    if buckets.len() != layer.act_quantizers.len() {
        return invalid(format!(
            "{} buckets for {} activation quantizers",
            buckets.len(),
            layer.act_quantizers.len()
        ));
    }
    check_partition(buckets, rows, "row")?;
    let max_bits = layer.act_quantizers.iter().map(Quantizer::bits).max().unwrap_or(0);
    check_accumulator(d, max_bits, layer.weight_bits)
}

/// Quantizes each row with the quantizer of its bucket.
pub fn quantize_buckets(
    a: &Matrix,
    quantizers: &[Quantizer],
    buckets: &[Vec<usize>],
) -> Result<IntMatrix> {
    if quantizers.len() != buckets.len() {
        return invalid("bucket/quantizer count mismatch");
    }
    check_partition(buckets, a.rows(), "row")?;
    let mut q = IntMatrix::zeros(a.rows(), a.cols());
    for (quant, bucket) in quantizers.iter().zip(buckets) {
        let s = quant.scale_for(0);
        for &i in bucket {
            let src = a.row(i);
            if src.iter().any(|v| !v.is_finite()) {
                return Err(AmqError::NonFinite("activations"));
            }
            for (dst, &x) in q.row_mut(i).iter_mut().zip(src) {
                *dst = quantize_scalar(x, s, quant.bits());
            }
        }
    }
    Ok(q)
}

/// Per-bucket integer GEMMs over already quantized rows.
pub fn linear_basic_q(q: &IntMatrix, layer: &QuantizedLinear, buckets: &[Vec<usize>]) -> Result<Matrix> {
    check_inputs(q.rows(), q.cols(), layer, buckets)?;
    let d_out = layer.d_out();
    let mut y = Matrix::zeros(q.rows(), d_out);
    for (quant, bucket) in layer.act_quantizers.iter().zip(buckets) {
        if bucket.is_empty() {
            continue;
        }
        let mut a_k = IntMatrix::zeros(bucket.len(), q.cols());
        for (r, &i) in bucket.iter().enumerate() {
            a_k.row_mut(r).copy_from_slice(q.row(i));
        }
        let acc = a_k.matmul_i32(&layer.weights_q)?;
        let s_k = quant.scale_for(0);
        for (r, &i) in bucket.iter().enumerate() {
            let out = y.row_mut(i);
            for c in 0..d_out {
                out[c] = f64::from(acc.get(r, c)) * dequant_factor(s_k, layer.weight_scale[c])
                    + layer.bias[c];
            }
        }
    }
    Ok(y)
}

/// Reference kernel: one integer GEMM per bucket.
pub fn mp_linear_basic(a: &Matrix, layer: &QuantizedLinear, buckets: &[Vec<usize>]) -> Result<Matrix> {
    check_inputs(a.rows(), a.cols(), layer, buckets)?;
    let q = quantize_buckets(a, &layer.act_quantizers, buckets)?;
    linear_basic_q(&q, layer, buckets)
}

/// Two's-complement split of one value into `bits / base_bits` segments,
/// least significant first. Lower segments are unsigned in `[0, 2^b0 - 1]`,
/// the top segment is signed in `[-2^(b0-1), 2^(b0-1) - 1]`.
pub fn encode_value(value: i32, bits: u32, base_bits: u32) -> Result<Vec<i32>> {
    if base_bits == 0 || bits == 0 || bits % base_bits != 0 || bits > 30 {
        return invalid(format!("bit-width {bits} is not a multiple of base {base_bits}"));
    }
    let lo = -(1i64 << (bits - 1));
    let hi = (1i64 << (bits - 1)) - 1;
    if i64::from(value) < lo || i64::from(value) > hi {
        return Err(AmqError::ValueOutOfRange { value: value.into(), bits });
    }
    let n_seg = bits / base_bits;
    let mask = (1i32 << base_bits) - 1;
    let mut segs = Vec::with_capacity(n_seg as usize);
    for m in 0..n_seg - 1 {
        segs.push((value >> (m * base_bits)) & mask);
    }
    // arithmetic shift keeps the sign in the top segment
    segs.push(value >> ((n_seg - 1) * base_bits));
    Ok(segs)
}

/// Inverse of [`encode_value`].
pub fn decode_segments(segments: &[i32], base_bits: u32) -> i64 {
    segments
        .iter()
        .enumerate()
        .map(|(m, &s)| i64::from(s) << (m as u32 * base_bits))
        .sum()
}

/// Where a segment row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOrigin {
    pub bucket: usize,
    pub index: usize,
    pub position: u32,
}

/// All segment rows of a bucketed, quantized activation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEncoding {
    pub base_bits: u32,
    pub segments: IntMatrix,
    pub origin: Vec<SegmentOrigin>,
}

impl SegmentEncoding {
    /// Encodes rows bucket by bucket (level-ascending), each row into
    /// `bits[k] / base_bits` consecutive segment rows.
    pub fn encode(q: &IntMatrix, bits: &[u32], buckets: &[Vec<usize>], base_bits: u32) -> Result<Self> {
        if bits.len() != buckets.len() {
            return invalid("bucket/level count mismatch");
        }
        let d = q.cols();
        let total: usize = bits
            .iter()
            .zip(buckets)
            .map(|(&b, bucket)| bucket.len() * (b / base_bits.max(1)) as usize)
            .sum();
        let mut data = Vec::with_capacity(total * d);
        let mut origin = Vec::with_capacity(total);
        let mut seg_buf: Vec<Vec<i32>> = Vec::with_capacity(d);
        for (k, (&b, bucket)) in bits.iter().zip(buckets).enumerate() {
            let n_seg = b / base_bits;
            for &i in bucket {
                seg_buf.clear();
                for &v in q.row(i) {
                    seg_buf.push(encode_value(v, b, base_bits)?);
                }
                for m in 0..n_seg {
                    data.extend(seg_buf.iter().map(|s| s[m as usize]));
                    origin.push(SegmentOrigin { bucket: k, index: i, position: m });
                }
            }
        }
        Ok(Self { base_bits, segments: IntMatrix::from_vec(origin.len(), d, data)?, origin })
    }

    pub fn n_rows(&self) -> usize {
        self.origin.len()
    }
}

/// Segment-wise splitting of an integer tensor at `bits` into its
/// `bits / base_bits` segment rows (one per position, least significant
/// first) for every input row.
pub fn encode_segments(q: &IntMatrix, bits: u32, base_bits: u32) -> Result<SegmentEncoding> {
    SegmentEncoding::encode(q, &[bits], &[(0..q.rows()).collect()], base_bits)
}

/// Scale factor `2^(m * b0) / (s_k * s_W)` of every segment row, in
/// encoding order.
pub fn segment_scales(
    buckets: &[Vec<usize>],
    bits: &[u32],
    base_bits: u32,
    act_scales: &[f64],
    weight_scale: f64,
) -> Result<Vec<f64>> {
    if bits.len() != buckets.len() || act_scales.len() != buckets.len() {
        return invalid("bucket/level/scale count mismatch");
    }
    let mut out = Vec::new();
    for ((bucket, &b), &s_k) in buckets.iter().zip(bits).zip(act_scales) {
        if base_bits == 0 || b % base_bits != 0 {
            return invalid(format!("bit-width {b} is not a multiple of base {base_bits}"));
        }
        let base = dequant_factor(s_k, weight_scale);
        for _ in bucket {
            for m in 0..b / base_bits {
                out.push(base * (1u64 << (m * base_bits)) as f64);
            }
        }
    }
    Ok(out)
}

/// Single-GEMM kernel over already quantized rows.
pub fn linear_segmented_q(
    q: &IntMatrix,
    layer: &QuantizedLinear,
    buckets: &[Vec<usize>],
    base_bits: u32,
) -> Result<Matrix> {
    check_inputs(q.rows(), q.cols(), layer, buckets)?;
    let bits = layer.level_bits();
    let enc = SegmentEncoding::encode(q, &bits, buckets, base_bits)?;
    let partial = enc.segments.matmul_i32(&layer.weights_q)?;
    let d_out = layer.d_out();

    // power-of-two row scaling and scatter-add, both exact in i64
    let mut acc = vec![0i64; q.rows() * d_out];
    for (r, o) in enc.origin.iter().enumerate() {
        let shift = o.position * base_bits;
        let dst = &mut acc[o.index * d_out..(o.index + 1) * d_out];
        for (a, &p) in dst.iter_mut().zip(partial.row(r)) {
            *a += i64::from(p) << shift;
        }
    }

    let mut y = Matrix::zeros(q.rows(), d_out);
    for (quant, bucket) in layer.act_quantizers.iter().zip(buckets) {
        let s_k = quant.scale_for(0);
        for &i in bucket {
            let src = &acc[i * d_out..(i + 1) * d_out];
            let out = y.row_mut(i);
            for c in 0..d_out {
                out[c] = src[c] as f64 * dequant_factor(s_k, layer.weight_scale[c]) + layer.bias[c];
            }
        }
    }
    Ok(y)
}

/// Bit-segment kernel: one integer GEMM over all segment rows.
pub fn mp_linear_optimized(
    a: &Matrix,
    layer: &QuantizedLinear,
    buckets: &[Vec<usize>],
    base_bits: u32,
) -> Result<Matrix> {
    check_inputs(a.rows(), a.cols(), layer, buckets)?;
    let q = quantize_buckets(a, &layer.act_quantizers, buckets)?;
    linear_segmented_q(&q, layer, buckets, base_bits)
}

/// Which integer kernel a quantized layer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Basic,
    Segmented,
}

impl Kernel {
    pub fn apply(
        self,
        q: &IntMatrix,
        layer: &QuantizedLinear,
        buckets: &[Vec<usize>],
        base_bits: u32,
    ) -> Result<Matrix> {
        match self {
            Kernel::Basic => linear_basic_q(q, layer, buckets),
            Kernel::Segmented => linear_segmented_q(q, layer, buckets, base_bits),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_layer(w: i32, bits: &[u32]) -> QuantizedLinear {
        let acts = bits
            .iter()
            .map(|&b| Quantizer::from_maxabs(b, &[f64::from(qmax(b))]).unwrap())
            .collect();
        QuantizedLinear::new(IntMatrix::from_vec(1, 1, vec![w]).unwrap(), 8, vec![1.0], vec![0.0], acts)
            .unwrap()
    }

    #[test]
    fn basic_hand_example() {
        let layer = unit_layer(3, &[8]);
        assert_eq!(layer.act_quantizers[0].scales(), &[1.0]);
        let y = mp_linear_basic(&Matrix::column(&[-23.0]), &layer, &[vec![0]]).unwrap();
        assert_eq!(y.data(), &[-69.0]);
    }

    #[test]
    fn segmented_hand_example() {
        assert_eq!(encode_value(-23, 8, 4).unwrap(), vec![9, -2]);
        assert_eq!(encode_value(87, 8, 4).unwrap(), vec![7, 5]);
        assert_eq!(encode_value(0, 12, 4).unwrap(), vec![0, 0, 0]);
        let layer = unit_layer(3, &[8]);
        let y = mp_linear_optimized(&Matrix::column(&[-23.0]), &layer, &[vec![0]], 4).unwrap();
        assert_eq!(y.data(), &[-69.0]);
    }

    #[test]
    fn encode_errors() {
        assert!(encode_value(1, 8, 3).is_err());
        assert!(encode_value(128, 8, 4).is_err());
        assert!(encode_value(-129, 8, 4).is_err());
        assert_eq!(encode_value(-128, 8, 4).unwrap(), vec![0, -8]);
    }

    #[test]
    fn scale_examples() {
        let s = segment_scales(&[vec![0]], &[8], 4, &[1.0], 1.0).unwrap();
        assert_eq!(s, vec![1.0, 16.0]);
        let s = segment_scales(&[vec![0]], &[4], 4, &[2.0], 0.25).unwrap();
        assert_eq!(s, vec![2.0]);
        let s = segment_scales(&[vec![0]], &[12], 4, &[2.0], 0.5).unwrap();
        assert_eq!(s, vec![1.0, 16.0, 256.0]);
        assert!(segment_scales(&[vec![0]], &[10], 4, &[1.0], 1.0).is_err());
    }

    #[test]
    fn zero_activations_give_bias() {
        let w = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let acts = vec![Quantizer::from_maxabs(4, &[1.0]).unwrap(), Quantizer::from_maxabs(8, &[1.0]).unwrap()];
        let layer = QuantizedLinear::from_float(&w, &[0.3, -0.7], 8, acts).unwrap();
        let buckets = [vec![2, 0], vec![1]];
        let y = mp_linear_basic(&Matrix::zeros(3, 2), &layer, &buckets).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), &[0.3, -0.7]);
        }
        let y2 = mp_linear_optimized(&Matrix::zeros(3, 2), &layer, &buckets, 4).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn single_bucket_matches_uniform_layer() {
        let w = Matrix::from_rows(&[vec![0.5, -1.0, 0.1], vec![2.0, 0.25, -0.3]]).unwrap();
        let a = Matrix::from_rows(&[vec![0.4, -0.9], vec![1.2, 0.05], vec![-0.3, 0.7]]).unwrap();
        let act = Quantizer::calibrate_maxabs(&a, 8, false).unwrap();
        let wq = Quantizer::calibrate_maxabs(&w, 8, true).unwrap();
        let layer = QuantizedLinear::from_float(&w, &[0.0; 3], 8, vec![act.clone()]).unwrap();
        let y = mp_linear_basic(&a, &layer, &[vec![0, 1, 2]]).unwrap();
        // dense computation with dequantized operands
        let ah = act.dequantize(&act.quantize(&a).unwrap()).unwrap();
        let wh = wq.dequantize(&wq.quantize(&w).unwrap()).unwrap();
        let dense = ah.matmul(&wh).unwrap();
        for (x, y) in dense.data().iter().zip(y.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_buckets_rejected() {
        let layer = unit_layer(3, &[4, 8]);
        let a = Matrix::column(&[1.0, 2.0]);
        assert!(mp_linear_basic(&a, &layer, &[vec![0], vec![0]]).is_err());
        assert!(mp_linear_basic(&a, &layer, &[vec![0], vec![2]]).is_err());
        assert!(mp_linear_basic(&a, &layer, &[vec![0, 1]]).is_err());
        assert!(mp_linear_optimized(&a, &layer, &[vec![0], vec![1]], 3).is_err());
    }

    #[test]
    fn accumulator_bound() {
        assert!(check_accumulator(1 << 15, 8, 8).is_ok());
        assert!(check_accumulator((1 << 15) + 1, 8, 8).is_err());
        assert!(check_accumulator(1 << 11, 12, 8).is_ok());
    }
}

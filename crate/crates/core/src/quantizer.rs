//! Fine-grained ternary quantization with batch-norm fusion.
//!
//! Weights feeding one output channel are split along the input-channel axis
//! into disjoint blocks of `N` (one block per kernel pixel and input-channel
//! group). The batch-norm scale `β/σ` is folded into the weights before
//! ternarization, the offset `γ − β·μ/σ` becomes a 32-bit bias at the
//! accumulator's scale, and every block's scaling factor is quantized to
//! 16 bits under one layer-wide exponent.

use thiserror::Error;

use crate::dfp::DfpTensor;
use crate::tensor::{ConvParams, FpTensor, FpWeights, Trit};

/// Block size used throughout the accelerator datapath.
pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("invalid batch-norm parameters for channel {channel}: sigma = {sigma} must be > 0")]
    InvalidBnParams { channel: usize, sigma: f32 },
    #[error("batch-norm parameters cover {have} channels, layer has {need}")]
    BnChannelCount { have: usize, need: usize },
    #[error("block size must be positive")]
    ZeroBlockSize,
}

/// Per-output-channel batch-norm and scale parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub beta: Vec<f32>,
    pub gamma: Vec<f32>,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl BnParams {
    /// β = σ = 1, μ = γ = 0: fusion leaves weights untouched and adds no bias.
    pub fn identity(channels: usize) -> Self {
        Self {
            beta: vec![1.0; channels],
            gamma: vec![0.0; channels],
            mu: vec![0.0; channels],
            sigma: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, ofm: usize) -> Result<(), QuantError> {
        let sigma = *self
            .sigma
            .get(ofm)
            .ok_or(QuantError::BnChannelCount { have: self.sigma.len(), need: ofm + 1 })?;
        if sigma > 0.0 {
            Ok(())
        } else {
            Err(QuantError::InvalidBnParams { channel: ofm, sigma })
        }
    }
}

/// Scale a block of FP weights feeding output channel `ofm` by `β/σ`.
pub fn fuse_bn(w: &[f32], bn: &BnParams, ofm: usize) -> Result<Vec<f64>, QuantError> {
    bn.check(ofm)?;
    let scale = bn.beta[ofm] as f64 / bn.sigma[ofm] as f64;
    Ok(w.iter().map(|&v| v as f64 * scale).collect())
}

/// Fused bias `γ − β·μ/σ` of output channel `ofm`.
pub fn fused_bias(bn: &BnParams, ofm: usize) -> Result<f64, QuantError> {
    bn.check(ofm)?;
    let (beta, gamma, mu, sigma) =
        (bn.beta[ofm] as f64, bn.gamma[ofm] as f64, bn.mu[ofm] as f64, bn.sigma[ofm] as f64);
    Ok(gamma - beta * mu / sigma)
}

/// Strategy turning a block of FP weights into trits and one FP scale.
pub trait Ternarizer: Send + Sync {
    fn ternarize(&self, w: &[f64]) -> (Vec<Trit>, f64);
}

/// Threshold ternarization: `Δ = ratio · mean|w|`, keep the sign of every
/// weight with `|w| > Δ`, and scale by the mean magnitude of the kept ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdTernarizer {
    pub ratio: f64,
}

impl Default for ThresholdTernarizer {
    fn default() -> Self {
        Self { ratio: 0.7 }
    }
}

impl Ternarizer for ThresholdTernarizer {
    fn ternarize(&self, w: &[f64]) -> (Vec<Trit>, f64) {
        if w.is_empty() {
            return (Vec::new(), 0.0);
        }
        let mean_abs = w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
        let delta = self.ratio * mean_abs;
        let mut kept = 0usize;
        let mut kept_sum = 0.0;
        let trits = w
            .iter()
            .map(|&v| {
                if v.abs() > delta {
                    kept += 1;
                    kept_sum += v.abs();
                    if v > 0.0 { Trit::Pos } else { Trit::Neg }
                } else {
                    Trit::Zero
                }
            })
            .collect();
        let alpha = if kept == 0 { 0.0 } else { kept_sum / kept as f64 };
        (trits, alpha)
    }
}

/// [`ThresholdTernarizer`] with the default 0.7 ratio.
pub fn ternarize_block(w: &[f64]) -> (Vec<Trit>, f64) {
    ThresholdTernarizer::default().ternarize(w)
}

/// Exact `floor(log2(v))` for finite positive `v`, read from the IEEE bits.
pub(crate) fn floor_log2(v: f64) -> i32 {
    debug_assert!(v > 0.0 && v.is_finite());
    let bits = v.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        let mantissa = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mantissa.leading_zeros() as i32)
    } else {
        biased - 1023
    }
}

fn clamp_exp(e: i32) -> i8 {
    e.clamp(i8::MIN as i32, i8::MAX as i32) as i8
}

/// Quantize a layer's block scales to unsigned 16 bits under one exponent.
///
/// The exponent puts the largest scale into `[2^15, 2^16)`, or into
/// `[2^14, 2^15]` when rounding would otherwise reach 2^16. A nonzero scale
/// never quantizes to zero.
pub fn quantize_alpha(alphas: &[f64]) -> (Vec<u16>, i8) {
    let max = alphas.iter().copied().filter(|a| a.is_finite()).fold(0.0, f64::max);
    if max <= 0.0 {
        return (vec![0; alphas.len()], 0);
    }
    let mut e = floor_log2(max) - 15;
    if (max * 2f64.powi(-e)).round() >= 65536.0 {
        e += 1;
    }
    let e = clamp_exp(e);
    let scale = 2f64.powi(-(e as i32));
    let q = alphas
        .iter()
        .map(|&a| {
            if !(a > 0.0) {
                return 0;
            }
            let q = (a * scale).round().min(u16::MAX as f64) as u16;
            q.max(1)
        })
        .collect();
    (q, e)
}

/// Quantize FP values to signed 8 bits with a shared exponent placing the
/// largest magnitude in `[64, 127]`.
pub fn quantize_dfp8(values: &[f64]) -> (Vec<i8>, i8) {
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, |m: f64, v| m.max(v.abs()));
    if max <= 0.0 {
        return (vec![0; values.len()], 0);
    }
    let e = clamp_exp(floor_log2(max) - 6);
    let scale = 2f64.powi(-(e as i32));
    let data = values
        .iter()
        .map(|&v| (v * scale).round().clamp(i8::MIN as f64, i8::MAX as f64) as i8)
        .collect();
    (data, e)
}

/// Quantize an FP activation tensor to DFP.
pub fn quantize_activations(x: &FpTensor) -> DfpTensor {
    let values: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
    let (data, exp) = quantize_dfp8(&values);
    DfpTensor { shape: x.shape, data, exp }
}

/// `round(v · 2^(−exp))` saturated to signed 32 bits.
pub fn quantize_bias(v: f64, exp: i32) -> i32 {
    let q = (v * 2f64.powi(-exp)).round();
    if q.is_nan() {
        0
    } else {
        q.clamp(i32::MIN as f64, i32::MAX as f64) as i32
    }
}

/// One block of `N` trits and its quantized scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TernaryBlock {
    pub trits: Vec<Trit>,
    pub alpha_q: u16,
}

impl TernaryBlock {
    pub fn zero(n: usize) -> Self {
        Self { trits: vec![Trit::Zero; n], alpha_q: 0 }
    }
}

/// A convolution layer after fusion and ternarization.
///
/// Blocks are stored in `(ofm, ky, kx, ifm_group)` order; the trits of group
/// `g` cover input channels `g·N .. g·N + N`, zero past `ifm`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusedLayerWeights {
    pub ofm: usize,
    pub ifm: usize,
    pub kh: usize,
    pub kw: usize,
    pub block_size: usize,
    pub blocks: Vec<TernaryBlock>,
    /// One bias per output channel at exponent `bias_exp`.
    pub bias: Vec<i32>,
    /// Shared exponent of every `alpha_q` in the layer.
    pub wt_exp: i8,
    /// Exponent the biases were quantized at (`act_exp + wt_exp` of the
    /// calibration activations).
    pub bias_exp: i16,
}

impl FusedLayerWeights {
    /// All-zero layer.
    pub fn zeros(ofm: usize, ifm: usize, kh: usize, kw: usize, block_size: usize) -> Self {
        let groups = ifm.div_ceil(block_size);
        Self {
            ofm,
            ifm,
            kh,
            kw,
            block_size,
            blocks: vec![TernaryBlock::zero(block_size); ofm * kh * kw * groups],
            bias: vec![0; ofm],
            wt_exp: 0,
            bias_exp: 0,
        }
    }

    pub fn ifm_groups(&self) -> usize {
        self.ifm.div_ceil(self.block_size)
    }

    #[inline]
    pub fn block_index(&self, o: usize, ky: usize, kx: usize, g: usize) -> usize {
        ((o * self.kh + ky) * self.kw + kx) * self.ifm_groups() + g
    }

    #[inline]
    pub fn block(&self, o: usize, ky: usize, kx: usize, g: usize) -> &TernaryBlock {
        &self.blocks[self.block_index(o, ky, kx, g)]
    }

    #[inline]
    pub fn block_mut(&mut self, o: usize, ky: usize, kx: usize, g: usize) -> &mut TernaryBlock {
        let idx = self.block_index(o, ky, kx, g);
        &mut self.blocks[idx]
    }

    /// Trit for logical input channel `i` (zero for padded channels).
    #[inline]
    pub fn trit(&self, o: usize, i: usize, ky: usize, kx: usize) -> Trit {
        let n = self.block_size;
        self.block(o, ky, kx, i / n).trits[i % n]
    }

    /// Total number of trits including padded positions.
    pub fn padded_len(&self) -> usize {
        self.blocks.len() * self.block_size
    }

    /// FP weights `α̂ · 2^wt_exp · trit` in (OFM, IFM, KH, KW) order.
    pub fn dequantize(&self) -> Vec<f64> {
        let scale = 2f64.powi(self.wt_exp as i32);
        let mut out = Vec::with_capacity(self.ofm * self.ifm * self.kh * self.kw);
        for o in 0..self.ofm {
            for i in 0..self.ifm {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let b = self.block(o, ky, kx, i / self.block_size);
                        let t = b.trits[i % self.block_size].value() as f64;
                        out.push(t * b.alpha_q as f64 * scale);
                    }
                }
            }
        }
        out
    }

    /// FP decode of the integer biases.
    pub fn bias_fp(&self) -> Vec<f64> {
        let scale = 2f64.powi(self.bias_exp as i32);
        self.bias.iter().map(|&b| b as f64 * scale).collect()
    }
}

/// [`fgq_quantize_layer_with`] using [`ThresholdTernarizer`].
pub fn fgq_quantize_layer(
    w: &FpWeights,
    bn: &BnParams,
    block_size: usize,
    act_exp: i8,
) -> Result<FusedLayerWeights, QuantError> {
    fgq_quantize_layer_with(w, bn, block_size, act_exp, &ThresholdTernarizer::default())
}

/// Fuse batch norm into `w`, ternarize it in blocks of `block_size` along
/// the input channels and quantize scales and biases.
///
/// `act_exp` is the exponent of the activations the layer will consume; the
/// biases are quantized at `act_exp + wt_exp` so they add straight into the
/// accumulator.
pub fn fgq_quantize_layer_with(
    w: &FpWeights,
    bn: &BnParams,
    block_size: usize,
    act_exp: i8,
    ternarizer: &dyn Ternarizer,
) -> Result<FusedLayerWeights, QuantError> {
    if block_size == 0 {
        return Err(QuantError::ZeroBlockSize);
    }
    if bn.channels() < w.ofm {
        return Err(QuantError::BnChannelCount { have: bn.channels(), need: w.ofm });
    }
    let mut layer = FusedLayerWeights::zeros(w.ofm, w.ifm, w.kh, w.kw, block_size);
    let groups = layer.ifm_groups();
    let mut alphas = vec![0.0; layer.blocks.len()];
    let mut biases_fp = Vec::with_capacity(w.ofm);

    let mut block = vec![0.0f32; block_size];
    for o in 0..w.ofm {
        for ky in 0..w.kh {
            for kx in 0..w.kw {
                for g in 0..groups {
                    for (j, slot) in block.iter_mut().enumerate() {
                        let i = g * block_size + j;
                        *slot = if i < w.ifm { w.get(o, i, ky, kx) } else { 0.0 };
                    }
                    let fused = fuse_bn(&block, bn, o)?;
                    let (trits, alpha) = ternarizer.ternarize(&fused);
                    let idx = layer.block_index(o, ky, kx, g);
                    layer.blocks[idx].trits = trits;
                    alphas[idx] = alpha;
                }
            }
        }
        biases_fp.push(fused_bias(bn, o)?);
    }

    let (alpha_q, wt_exp) = quantize_alpha(&alphas);
    for (b, q) in layer.blocks.iter_mut().zip(alpha_q) {
        b.alpha_q = q;
    }
    layer.wt_exp = wt_exp;
    layer.bias_exp = act_exp as i16 + wt_exp as i16;
    layer.bias = biases_fp.iter().map(|&b| quantize_bias(b, layer.bias_exp as i32)).collect();
    Ok(layer)
}

/// FP evaluation of the integer ternary convolution:
/// `Σ_j (X̂ ⊙ Ŵ^(j)) · α̂^(j) · 2^(act_exp + wt_exp) + bias`.
///
/// Works for any block size, including ones the accelerator cannot run.
pub fn emulate_ternary_conv(x: &DfpTensor, w: &FusedLayerWeights, p: ConvParams) -> Vec<f64> {
    assert_eq!(x.shape.channels, w.ifm, "activation channels do not match layer");
    let (oh, ow) = p.output_hw(x.shape.height, x.shape.width);
    let scale = 2f64.powi(x.exp as i32 + w.wt_exp as i32);
    let bias = w.bias_fp();
    let mut out = vec![0.0; w.ofm * oh * ow];
    for o in 0..w.ofm {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc: i64 = 0;
                for ky in 0..w.kh {
                    let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                    if iy < 0 || iy as usize >= x.shape.height {
                        continue;
                    }
                    for kx in 0..w.kw {
                        let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                        if ix < 0 || ix as usize >= x.shape.width {
                            continue;
                        }
                        for g in 0..w.ifm_groups() {
                            let b = w.block(o, ky, kx, g);
                            let mut dot: i64 = 0;
                            for (j, t) in b.trits.iter().enumerate() {
                                let i = g * w.block_size + j;
                                if i < w.ifm {
                                    dot += x.get(i, iy as usize, ix as usize) as i64 * t.value() as i64;
                                }
                            }
                            acc += dot * b.alpha_q as i64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc as f64 * scale + bias[o];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape3;

    #[test]
    fn fuse_bn_examples() {
        let mut bn = BnParams::identity(2);
        bn.beta = vec![3.0, 2.0];
        bn.sigma = vec![3.0, 4.0];
        assert_eq!(fuse_bn(&[0.5, -0.25], &bn, 0).unwrap(), vec![0.5, -0.25]);
        assert_eq!(fuse_bn(&[0.5, -0.25], &bn, 1).unwrap(), vec![0.25, -0.125]);
        bn.sigma[1] = 0.0;
        assert_eq!(
            fuse_bn(&[1.0], &bn, 1),
            Err(QuantError::InvalidBnParams { channel: 1, sigma: 0.0 })
        );
        assert!(fused_bias(&bn, 1).is_err());
    }

    #[test]
    fn fused_bias_examples() {
        let bn = BnParams { beta: vec![2.0], gamma: vec![0.75], mu: vec![0.0], sigma: vec![5.0] };
        assert_eq!(fused_bias(&bn, 0).unwrap(), 0.75);
        let bn = BnParams { beta: vec![2.0], gamma: vec![1.0], mu: vec![3.0], sigma: vec![6.0] };
        assert_eq!(fused_bias(&bn, 0).unwrap(), 0.0);
        let bn = BnParams { beta: vec![0.0], gamma: vec![0.0], mu: vec![7.0], sigma: vec![1.0] };
        assert_eq!(fused_bias(&bn, 0).unwrap(), 0.0);
    }

    #[test]
    fn ternarize_examples() {
        let (t, a) = ternarize_block(&[0.0; 64]);
        assert!(t.iter().all(|&t| t == Trit::Zero));
        assert_eq!(a, 0.0);

        let (t, a) = ternarize_block(&[1.0; 64]);
        assert!(t.iter().all(|&t| t == Trit::Pos));
        assert_eq!(a, 1.0);

        let mut w = vec![0.0; 64];
        w[..4].copy_from_slice(&[1.0, -1.0, 0.1, 0.1]);
        let (t, a) = ternarize_block(&w);
        assert_eq!(&t[..4], &[Trit::Pos, Trit::Neg, Trit::Pos, Trit::Pos]);
        assert!(t[4..].iter().all(|&t| t == Trit::Zero));
        assert!((a - 0.55).abs() < 1e-12);
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(quantize_alpha(&[0.0, 0.0]), (vec![0, 0], 0));
        assert_eq!(quantize_alpha(&[1.0]), (vec![32768], -15));
        assert_eq!(quantize_alpha(&[1.0, 0.5]), (vec![32768, 16384], -15));
        // 65535.75 would round to 2^16: the exponent backs off by one.
        let (q, e) = quantize_alpha(&[65535.75]);
        assert_eq!((q, e), (vec![32768], 1));
        // Tiny but nonzero scales keep a nonzero code.
        let (q, _) = quantize_alpha(&[1.0, 1e-9]);
        assert_eq!(q[1], 1);
    }

    #[test]
    fn activation_examples() {
        let x = FpTensor::zeros(Shape3::new(3, 1, 1));
        let q = quantize_activations(&x);
        assert_eq!((q.data, q.exp), (vec![0, 0, 0], 0));

        let q = quantize_activations(&FpTensor::from_vec(Shape3::new(1, 1, 1), vec![1.0]));
        assert_eq!((q.data, q.exp), (vec![64], -6));

        let q = quantize_activations(&FpTensor::from_vec(Shape3::new(2, 1, 1), vec![-2.0, 1.0]));
        assert_eq!((q.data, q.exp), (vec![-64, 32], -5));

        // 1.999 · 64 = 127.9 rounds to 128 and clamps.
        let q = quantize_activations(&FpTensor::from_vec(Shape3::new(1, 1, 1), vec![1.999]));
        assert_eq!((q.data, q.exp), (vec![127], -6));
    }

    #[test]
    fn floor_log2_is_exact() {
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(0.75), -1);
        assert_eq!(floor_log2(1024.0), 10);
        assert_eq!(floor_log2(1023.999), 9);
        assert_eq!(floor_log2(f64::MIN_POSITIVE / 4.0), -1024);
    }

    #[test]
    fn zero_layer_quantizes_to_zero() {
        let w = FpWeights::zeros(2, 64, 3, 3);
        let mut bn = BnParams::identity(2);
        bn.beta = vec![0.5, 0.5];
        bn.sigma = vec![0.5, 0.5];
        let q = fgq_quantize_layer(&w, &bn, 64, -6).unwrap();
        assert!(q.blocks.iter().all(|b| b.alpha_q == 0 && b.trits.iter().all(|&t| t == Trit::Zero)));
        assert_eq!(q.bias, vec![0, 0]);
    }

    #[test]
    fn all_ones_pointwise_layer() {
        let w = FpWeights::from_vec(1, 64, 1, 1, vec![1.0; 64]);
        let q = fgq_quantize_layer(&w, &BnParams::identity(1), 64, 0).unwrap();
        assert_eq!(q.blocks.len(), 1);
        assert!(q.blocks[0].trits.iter().all(|&t| t == Trit::Pos));
        assert_eq!(q.blocks[0].alpha_q, 32768);
        assert_eq!(q.wt_exp, -15);
    }

    #[test]
    fn padding_of_partial_group() {
        let w = FpWeights::from_vec(1, 100, 1, 1, vec![1.0; 100]);
        let q = fgq_quantize_layer(&w, &BnParams::identity(1), 64, 0).unwrap();
        assert_eq!(q.ifm_groups(), 2);
        let second = q.block(0, 0, 0, 1);
        assert!(second.trits[..36].iter().all(|&t| t == Trit::Pos));
        assert_eq!(second.trits[36..].len(), 28);
        assert!(second.trits[36..].iter().all(|&t| t == Trit::Zero));
    }

    #[test]
    fn bias_is_quantized_at_accumulator_scale() {
        let w = FpWeights::from_vec(1, 64, 1, 1, vec![1.0; 64]);
        let bn = BnParams { beta: vec![1.0], gamma: vec![0.5], mu: vec![0.0], sigma: vec![1.0] };
        let q = fgq_quantize_layer(&w, &bn, 64, -6).unwrap();
        assert_eq!(q.bias_exp, -21);
        assert_eq!(q.bias, vec![1 << 20]);
        assert_eq!(q.bias_fp(), vec![0.5]);
    }

    #[test]
    fn bn_channel_count_checked() {
        let w = FpWeights::zeros(3, 64, 1, 1);
        assert!(matches!(
            fgq_quantize_layer(&w, &BnParams::identity(2), 64, 0),
            Err(QuantError::BnChannelCount { .. })
        ));
        assert_eq!(fgq_quantize_layer(&w, &BnParams::identity(3), 0, 0), Err(QuantError::ZeroBlockSize));
    }
}

//! Host-side boundary layers: 8-bit × 8-bit convolution and FC, pooling
//! and softmax.
//!
//! Integer layers accumulate in wrapping 32-bit arithmetic and reuse the
//! accelerator's down-conversion so the exponent chain is uniform.

use crate::dfp::{self, AccTensor, DfpError, DfpTensor, RoundingMode};
use crate::tensor::{ConvParams, Shape3};

/// 8-bit weights of a host convolution or FC layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostWeights {
    pub ofm: usize,
    pub ifm: usize,
    pub kh: usize,
    pub kw: usize,
    /// (ofm, ifm, kh, kw) order.
    pub weights: Vec<i8>,
    pub wt_exp: i8,
    pub bias: Vec<i32>,
    pub bias_exp: i16,
}

impl HostWeights {
    pub fn zeros(ofm: usize, ifm: usize, kh: usize, kw: usize) -> Self {
        Self { ofm, ifm, kh, kw, weights: vec![0; ofm * ifm * kh * kw], wt_exp: 0, bias: vec![0; ofm], bias_exp: 0 }
    }
}

/// Move a bias quantized at `from` to exponent `to`: saturating left shift
/// when `to` is finer, arithmetic right shift when coarser.
pub fn realign_bias(v: i32, from: i32, to: i32) -> i32 {
    if to == from {
        v
    } else if to < from {
        let d = (from - to).min(40) as u32;
        ((v as i64) << d).clamp(i32::MIN as i64, i32::MAX as i64) as i32
    } else {
        let d = (to - from).min(31) as u32;
        v >> d
    }
}

fn host_acc(x: &DfpTensor, w: &HostWeights, p: ConvParams) -> AccTensor {
    let (oh, ow) = p.output_hw(x.shape.height, x.shape.width);
    let mut acc = AccTensor::zeros(Shape3::new(w.ofm, oh, ow), x.exp, w.wt_exp);
    let target = x.exp as i32 + w.wt_exp as i32;
    for o in 0..w.ofm {
        let b = realign_bias(w.bias[o], w.bias_exp as i32, target);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut a = b;
                for i in 0..w.ifm {
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
                            let xv = x.get(i, iy as usize, ix as usize) as i32;
                            let wv = w.weights[((o * w.ifm + i) * w.kh + ky) * w.kw + kx] as i32;
                            a = a.wrapping_add(xv * wv);
                        }
                    }
                }
                acc.data[(o * oh + oy) * ow + ox] = a;
            }
        }
    }
    acc
}

/// 8×8 convolution with 32-bit accumulation and DFP down-conversion.
pub fn conv8x8(x: &DfpTensor, w: &HostWeights, p: ConvParams, relu: bool, mode: RoundingMode) -> Result<DfpTensor, DfpError> {
    let acc = host_acc(x, w, p);
    Ok(dfp::downconvert_tensor(&acc, relu, mode)?.0)
}

/// Max pool on 8-bit values; padded positions never win.
pub fn maxpool(x: &DfpTensor, k: usize, stride: usize, pad: usize) -> DfpTensor {
    let p = ConvParams::new(k, k, stride, pad);
    let (oh, ow) = p.output_hw(x.shape.height, x.shape.width);
    let shape = Shape3::new(x.shape.channels, oh, ow);
    let mut out = DfpTensor::zeros(shape, x.exp);
    for c in 0..shape.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = i8::MIN;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.shape.height && (ix as usize) < x.shape.width {
                            m = m.max(x.get(c, iy as usize, ix as usize));
                        }
                    }
                }
                out.data[shape.index(c, oy, ox)] = m;
            }
        }
    }
    out
}

/// Global average pool: per-channel integer mean, rounded half away from
/// zero, exponent unchanged.
pub fn avgpool(x: &DfpTensor) -> DfpTensor {
    let n = x.shape.pixels() as i64;
    let data = (0..x.shape.channels)
        .map(|c| {
            let s: i64 = x.data[c * n as usize..(c + 1) * n as usize].iter().map(|&v| v as i64).sum();
            let q = (2 * s.abs() + n) / (2 * n);
            (if s < 0 { -q } else { q }) as i8
        })
        .collect();
    DfpTensor::from_vec(Shape3::new(x.shape.channels, 1, 1), data, x.exp)
}

/// Fully connected layer; returns FP-decoded logits.
pub fn fc(x: &DfpTensor, w: &HostWeights) -> Vec<f64> {
    let flat = DfpTensor::from_vec(Shape3::new(x.shape.len(), 1, 1), x.data.clone(), x.exp);
    let acc = host_acc(&flat, w, ConvParams::square(1, 1));
    acc.decode()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn realign() {
        assert_eq!(realign_bias(5, -3, -3), 5);
        assert_eq!(realign_bias(5, -3, -5), 20);
        assert_eq!(realign_bias(-5, -3, -2), -3);
        assert_eq!(realign_bias(i32::MAX, 0, -4), i32::MAX);
        assert_eq!(realign_bias(-1, 0, 60), -1);
    }

    #[test]
    fn pools() {
        let x = DfpTensor::from_vec(Shape3::new(1, 2, 2), vec![-3, -1, -2, -4], 1);
        let m = maxpool(&x, 3, 2, 1);
        assert_eq!((m.data, m.exp), (vec![-1], 1));
        let a = avgpool(&x);
        assert_eq!(a.data, vec![-3]); // −10/4 = −2.5 → −3
        let y = DfpTensor::from_vec(Shape3::new(2, 1, 3), vec![1, 1, 0, 5, 6, 7], 0);
        assert_eq!(avgpool(&y).data, vec![1, 6]);
    }

    #[test]
    fn host_conv_and_fc() {
        let x = DfpTensor::from_vec(Shape3::new(2, 1, 1), vec![3, -2], -1);
        let mut w = HostWeights::zeros(1, 2, 1, 1);
        w.weights = vec![4, 5];
        w.wt_exp = -2;
        w.bias = vec![1];
        w.bias_exp = -3;
        // 12 − 10 + 1 = 3 at exponent −3
        assert_eq!(fc(&x, &w), vec![3.0 / 8.0]);
        let y = conv8x8(&x, &w, ConvParams::square(1, 1), false, RoundingMode::default()).unwrap();
        assert_eq!((y.data, y.exp), (vec![3], -3));
        let p = softmax(&[1.0, 1.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }
}

//! Brute-force reference implementations used to cross-check the engine.
//!
//! Nothing here calls into the engine, the DFP arithmetic or the packed
//! layouts. The tensor structs are used purely as containers; every
//! arithmetic rule is re-derived with wide integers and plain loops.

use crate::dfp::{AccTensor, DfpTensor, RoundingMode};
use crate::graph::{NetworkGraph, NodeOp, QuantLayer, QuantizedModel};
use crate::quantizer::{BnParams, FusedLayerWeights};
use crate::regs::LayerGeometry;
use crate::tensor::{ConvParams, FpTensor, FpWeights, Shape3, Trit};

fn trit_value(t: Trit) -> i128 {
    match t {
        Trit::Pos => 1,
        Trit::Neg => -1,
        Trit::Zero => 0,
    }
}

fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    let span = n + 2 * pad;
    if span < k { 0 } else { (span - k) / stride + 1 }
}

/// Direct evaluation of the fused ternary convolution.
///
/// Sums are exact; the result narrows to 32-bit two's complement only at the
/// end, so a wrap-around in the engine accumulator cannot be masked.
pub fn ref_ternary_conv(x: &DfpTensor, w: &FusedLayerWeights, geom: &LayerGeometry) -> AccTensor {
    let c = geom.conv;
    let (ih, iw) = (x.shape.height, x.shape.width);
    let oh = out_dim(ih, c.kh, c.stride, c.pad);
    let ow = out_dim(iw, c.kw, c.stride, c.pad);
    let n = w.block_size;
    let groups = w.ifm.div_ceil(n);
    let mut data = Vec::with_capacity(w.ofm * oh * ow);
    for o in 0..w.ofm {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum: i128 = w.bias[o] as i128;
                for ky in 0..c.kh {
                    for kx in 0..c.kw {
                        let iy = (oy * c.stride + ky) as i64 - c.pad as i64;
                        let ix = (ox * c.stride + kx) as i64 - c.pad as i64;
                        if iy < 0 || ix < 0 || iy >= ih as i64 || ix >= iw as i64 {
                            continue;
                        }
                        for g in 0..groups {
                            let block = &w.blocks[((o * c.kh + ky) * c.kw + kx) * groups + g];
                            let mut dot: i128 = 0;
                            for lane in 0..n {
                                let i = g * n + lane;
                                if i >= x.shape.channels {
                                    break;
                                }
                                let xv = x.data[(i * ih + iy as usize) * iw + ix as usize] as i128;
                                dot += xv * trit_value(block.trits[lane]);
                            }
                            sum += dot * block.alpha_q as i128;
                        }
                    }
                }
                data.push(sum as i32);
            }
        }
    }
    AccTensor { shape: Shape3::new(w.ofm, oh, ow), data, act_exp: x.exp, wt_exp: w.wt_exp }
}

/// Leading zeros by scanning from the top bit.
pub fn ref_lzc(x: u32) -> u32 {
    let mut n = 0;
    for bit in (0..32).rev() {
        if x & (1 << bit) != 0 {
            break;
        }
        n += 1;
    }
    n
}

/// Smallest right shift after which `max_abs` fits seven magnitude bits.
pub fn ref_shift(max_abs: u64) -> u32 {
    let mut s = 0;
    while (max_abs >> s) > 127 {
        s += 1;
    }
    s
}

/// Reference 8-bit conversion of one accumulator value at shift `s`.
pub fn ref_downconvert_value(v: i64, s: u32, mode: RoundingMode) -> i8 {
    let mag = v.unsigned_abs() as u128;
    let div = 1u128 << s.min(100);
    let q = mag / div;
    let rem = mag % div;
    // rem's top two bits below the cut
    let half = div / 2;
    let quarter = div / 4;
    let round = s >= 1 && rem >= half;
    let bias = s >= 2 && (rem % half.max(1)) >= quarter;
    let bump = match mode {
        RoundingMode::Truncate => false,
        RoundingMode::RoundHalfUp => round,
        RoundingMode::RoundAndBias => round && bias,
    };
    let q = if bump && q < 127 { q + 1 } else { q };
    let signed = if v < 0 { -(q as i128) } else { q as i128 };
    signed.clamp(-128, 127) as i8
}

/// Reference down-conversion of a whole accumulator tensor.
pub fn ref_downconvert(acc: &AccTensor, relu: bool, mode: RoundingMode) -> (DfpTensor, u32) {
    let vals: Vec<i64> = acc.data.iter().map(|&v| if relu && v < 0 { 0 } else { v as i64 }).collect();
    let max_abs = vals.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let s = ref_shift(max_abs);
    let exp = acc.act_exp as i64 + acc.wt_exp as i64 + s as i64;
    let data = vals.iter().map(|&v| ref_downconvert_value(v, s, mode)).collect();
    (DfpTensor { shape: acc.shape, data, exp: exp as i8 }, s)
}

/// Reference DFP addition: floor-divide the finer operand, saturate.
pub fn ref_add_value(a: i8, e_a: i8, b: i8, e_b: i8) -> (i8, i8) {
    let floor_div = |v: i8, d: i64| -> i64 { (v as i64).div_euclid(1i64 << d.min(62)) };
    let exp = e_a.max(e_b);
    let a = floor_div(a, exp as i64 - e_a as i64);
    let b = floor_div(b, exp as i64 - e_b as i64);
    ((a + b).clamp(-128, 127) as i8, exp)
}

pub fn ref_add(a: &DfpTensor, b: &DfpTensor, relu: bool) -> DfpTensor {
    assert_eq!(a.shape, b.shape, "reference add needs equal shapes");
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let s = ref_add_value(x, a.exp, y, b.exp).0;
            if relu && s < 0 { 0 } else { s }
        })
        .collect();
    DfpTensor { shape: a.shape, data, exp: a.exp.max(b.exp) }
}

/// FP convolution followed by batch norm, in the unfused form
/// `z = (X ⊗ W − μ) / σ · β + γ`.
pub fn ref_fp_conv_bn(x: &FpTensor, w: &FpWeights, bn: &BnParams, p: ConvParams) -> Vec<f64> {
    let (ih, iw) = (x.shape.height, x.shape.width);
    let oh = out_dim(ih, p.kh, p.stride, p.pad);
    let ow = out_dim(iw, p.kw, p.stride, p.pad);
    let mut out = Vec::with_capacity(w.ofm * oh * ow);
    for o in 0..w.ofm {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0f64;
                for i in 0..w.ifm {
                    for ky in 0..p.kh {
                        for kx in 0..p.kw {
                            let iy = (oy * p.stride + ky) as i64 - p.pad as i64;
                            let ix = (ox * p.stride + kx) as i64 - p.pad as i64;
                            if iy < 0 || ix < 0 || iy >= ih as i64 || ix >= iw as i64 {
                                continue;
                            }
                            let xv = x.data[(i * ih + iy as usize) * iw + ix as usize] as f64;
                            let wv = w.data[((o * w.ifm + i) * p.kh + ky) * p.kw + kx] as f64;
                            s += xv * wv;
                        }
                    }
                }
                let (beta, gamma) = (bn.beta[o] as f64, bn.gamma[o] as f64);
                let (mu, sigma) = (bn.mu[o] as f64, bn.sigma[o] as f64);
                out.push((s - mu) / sigma * beta + gamma);
            }
        }
    }
    out
}

/// Bias moved from exponent `from` to `to`: exact multiply with saturation
/// going finer, floor division going coarser.
pub fn ref_realign_bias(v: i32, from: i32, to: i32) -> i32 {
    let d = to as i64 - from as i64;
    let v = v as i128;
    let r = if d <= 0 { v * (1i128 << (-d).min(64)) } else { v.div_euclid(1i128 << d.min(64)) };
    r.clamp(i32::MIN as i128, i32::MAX as i128) as i32
}

/// Evaluate an accelerator-only graph (input, convolutions, merges) with
/// the reference rules. Returns the 8-bit output of every node, or `None`
/// if the graph contains host layers.
pub fn ref_network(model: &QuantizedModel, input: &DfpTensor, mode: RoundingMode) -> Option<Vec<DfpTensor>> {
    let g: &NetworkGraph = &model.graph;
    let mut outs: Vec<DfpTensor> = Vec::with_capacity(g.len());
    for (idx, node) in g.nodes.iter().enumerate() {
        let out = match node.op {
            NodeOp::Input => input.clone(),
            NodeOp::Conv { .. } => {
                let Some(QuantLayer::Accel(w)) = &model.layers[idx] else { return None };
                let x = &outs[node.inputs[0]];
                let mut w = w.clone();
                let target = x.exp as i32 + w.wt_exp as i32;
                for b in w.bias.iter_mut() {
                    *b = ref_realign_bias(*b, w.bias_exp as i32, target);
                }
                let geom = g.geometry(idx)?;
                let acc = ref_ternary_conv(x, &w, &geom);
                ref_downconvert(&acc, geom.relu, mode).0
            }
            NodeOp::Eltwise { relu } => ref_add(&outs[node.inputs[0]], &outs[node.inputs[1]], relu),
            NodeOp::Host { .. } => return None,
        };
        outs.push(out);
    }
    Some(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::TernaryBlock;

    #[test]
    fn lzc_and_shift() {
        assert_eq!(ref_lzc(0), 32);
        assert_eq!(ref_lzc(1), 31);
        assert_eq!(ref_lzc(u32::MAX), 0);
        assert_eq!(ref_shift(127), 0);
        assert_eq!(ref_shift(128), 1);
        assert_eq!(ref_shift(1 << 31), 25);
    }

    #[test]
    fn zero_weights_give_bias() {
        let g = LayerGeometry::conv(64, 64, 3, 3, ConvParams::square(3, 1), false);
        let x = DfpTensor::from_vec(Shape3::new(64, 3, 3), vec![7; 576], -2);
        let mut w = FusedLayerWeights::zeros(64, 64, 3, 3, 64);
        w.bias = (0..64).collect();
        let acc = ref_ternary_conv(&x, &w, &g);
        for o in 0..64 {
            assert!(acc.data[o * 9..(o + 1) * 9].iter().all(|&v| v == o as i32));
        }
    }

    #[test]
    fn delta_kernel_shifts_input() {
        // +1 at kernel offset (0, 1) on channel 0: output(y, x) = input(y − 1, x).
        let g = LayerGeometry::conv(64, 64, 4, 4, ConvParams::square(3, 1), false);
        let data: Vec<i8> = (0..64 * 16).map(|i| (i % 100) as i8).collect();
        let x = DfpTensor::from_vec(Shape3::new(64, 4, 4), data.clone(), 0);
        let mut w = FusedLayerWeights::zeros(64, 64, 3, 3, 64);
        let mut trits = vec![Trit::Zero; 64];
        trits[0] = Trit::Pos;
        *w.block_mut(0, 0, 1, 0) = TernaryBlock { trits, alpha_q: 1 };
        let acc = ref_ternary_conv(&x, &w, &g);
        for y in 0..4 {
            for xx in 0..4 {
                let want = if y == 0 { 0 } else { data[(y - 1) * 4 + xx] as i32 };
                assert_eq!(acc.data[y * 4 + xx], want);
            }
        }
    }

    #[test]
    fn fp_conv_bn_by_hand() {
        let x = FpTensor::from_vec(Shape3::new(1, 1, 1), vec![2.0]);
        let w = FpWeights::from_vec(1, 1, 1, 1, vec![3.0]);
        let bn = BnParams { beta: vec![4.0], gamma: vec![5.0], mu: vec![1.0], sigma: vec![2.0] };
        assert_eq!(ref_fp_conv_bn(&x, &w, &bn, ConvParams::square(1, 1)), vec![15.0]);
    }

    #[test]
    fn add_and_downconvert_examples() {
        assert_eq!(ref_add_value(10, 3, 12, 1), (13, 3));
        assert_eq!(ref_add_value(-1, 0, 0, 9), (-1, 9));
        assert_eq!(ref_add_value(127, 0, 127, 0), (127, 0));
        assert_eq!(ref_downconvert_value(0b1011, 2, RoundingMode::RoundAndBias), 3);
        assert_eq!(ref_downconvert_value(0b1010, 2, RoundingMode::RoundAndBias), 2);
        assert_eq!(ref_downconvert_value(-0b1011, 2, RoundingMode::RoundAndBias), -3);
        assert_eq!(ref_downconvert_value(300, 0, RoundingMode::Truncate), 127);
        assert_eq!(ref_realign_bias(-5, -3, -2), -3);
        assert_eq!(ref_realign_bias(i32::MIN, 0, -1), i32::MIN);
    }
}

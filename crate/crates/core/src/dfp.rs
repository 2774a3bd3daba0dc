//! Dynamic fixed point (DFP) arithmetic.
//!
//! A DFP tensor is a block of signed 8-bit integers sharing one power-of-two
//! exponent: element `i` decodes to `data[i] · 2^exp`. Convolution results
//! leave the datapath as 32-bit accumulators at exponent `act_exp + wt_exp`
//! and are brought back to 8 bits by a single tensor-wide right shift chosen
//! from the leading-zero count of the largest magnitude.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Shape3;

/// Magnitude bits available in a signed 8-bit output.
pub const MAGNITUDE_BITS: u32 = 7;

/// Integer bits of the down-conversion window for a 32-bit LZC:
/// `P − LZC(max) = bitlength(max) − 7`.
pub const DOWNCONVERT_P: u32 = 32 - MAGNITUDE_BITS;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DfpError {
    #[error("exponent overflow: {e_act} + {e_wt} + {shift} does not fit in a signed 8-bit exponent")]
    ExponentOverflow { e_act: i8, e_wt: i8, shift: u32 },
    #[error("shape mismatch: {a} vs {b}")]
    ShapeMismatch { a: Shape3, b: Shape3 },
}

/// Rounding applied to the bits shifted out during down-conversion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingMode {
    /// Increment the magnitude when both the round bit (first shifted-out
    /// bit) and the bias bit (second shifted-out bit) are set.
    #[default]
    RoundAndBias,
    /// Drop the shifted-out bits.
    Truncate,
    /// Increment the magnitude when the round bit is set.
    RoundHalfUp,
}

impl RoundingMode {
    pub const ALL: [RoundingMode; 3] =
        [RoundingMode::RoundAndBias, RoundingMode::Truncate, RoundingMode::RoundHalfUp];

    pub const fn code(self) -> u32 {
        match self {
            RoundingMode::RoundAndBias => 0,
            RoundingMode::Truncate => 1,
            RoundingMode::RoundHalfUp => 2,
        }
    }

    pub const fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(RoundingMode::RoundAndBias),
            1 => Some(RoundingMode::Truncate),
            2 => Some(RoundingMode::RoundHalfUp),
            _ => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            RoundingMode::RoundAndBias => "round-and-bias",
            RoundingMode::Truncate => "truncate",
            RoundingMode::RoundHalfUp => "round-half-up",
        }
    }
}

impl std::fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RoundingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoundingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown rounding mode `{s}` (expected round-and-bias, truncate or round-half-up)"))
    }
}

/// Signed 8-bit activations with one shared exponent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DfpTensor {
    pub shape: Shape3,
    pub data: Vec<i8>,
    pub exp: i8,
}

impl DfpTensor {
    pub fn zeros(shape: Shape3, exp: i8) -> Self {
        Self { shape, data: vec![0; shape.len()], exp }
    }

    pub fn from_vec(shape: Shape3, data: Vec<i8>, exp: i8) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data does not match shape {shape}");
        Self { shape, data, exp }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> i8 {
        self.data[self.shape.index(c, y, x)]
    }

    /// Real values `data · 2^exp`.
    pub fn decode(&self) -> Vec<f64> {
        let scale = 2f64.powi(self.exp as i32);
        self.data.iter().map(|&v| v as f64 * scale).collect()
    }
}

/// 32-bit accumulator tensor at exponent `act_exp + wt_exp`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccTensor {
    pub shape: Shape3,
    pub data: Vec<i32>,
    pub act_exp: i8,
    pub wt_exp: i8,
}

impl AccTensor {
    pub fn zeros(shape: Shape3, act_exp: i8, wt_exp: i8) -> Self {
        Self { shape, data: vec![0; shape.len()], act_exp, wt_exp }
    }

    pub fn decode(&self) -> Vec<f64> {
        let scale = 2f64.powi(self.act_exp as i32 + self.wt_exp as i32);
        self.data.iter().map(|&v| v as f64 * scale).collect()
    }
}

/// Leading zeros of `x` in a 32-bit field; `lzc32(0) = 32`.
#[inline]
pub fn lzc32(x: u32) -> u32 {
    x.leading_zeros()
}

/// Right shift that brings `max_abs` into 7 magnitude bits:
/// `max(0, P − lzc32(max_abs))` with `P = 25`.
#[inline]
pub fn compute_shift(max_abs: u32) -> u32 {
    DOWNCONVERT_P.saturating_sub(lzc32(max_abs))
}

/// Shift one accumulator value down to 8 bits.
///
/// The shift is applied to the magnitude and the sign reapplied afterwards.
/// A rounding increment never carries the magnitude past 127; values that
/// still do not fit (only possible when `r_s` is smaller than the tensor's
/// own shift) clamp to `[−128, 127]`.
pub fn downconvert_scalar(v: i32, r_s: u32, mode: RoundingMode) -> i8 {
    let mag = v.unsigned_abs() as u64;
    let r = r_s.min(40);
    let shifted = mag >> r;
    let bit = |pos: u32| (mag >> pos) & 1 == 1;
    let round = r >= 1 && bit(r - 1);
    let bias = r >= 2 && bit(r - 2);
    let increment = match mode {
        RoundingMode::Truncate => false,
        RoundingMode::RoundAndBias => round && bias,
        RoundingMode::RoundHalfUp => round,
    };
    let mag = if increment && shifted < 127 { shifted + 1 } else { shifted };
    let signed = if v < 0 { -(mag as i64) } else { mag as i64 };
    signed.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

/// Down-convert a whole accumulator tensor with one shared shift.
///
/// With `relu`, negative accumulators become zero before the max-abs scan.
/// Returns the 8-bit tensor (exponent already propagated) and the shift.
pub fn downconvert_tensor(
    acc: &AccTensor,
    relu: bool,
    mode: RoundingMode,
) -> Result<(DfpTensor, u32), DfpError> {
    let rectify = |v: i32| if relu { v.max(0) } else { v };
    let max_abs = acc.data.iter().map(|&v| rectify(v).unsigned_abs()).max().unwrap_or(0);
    let r_s = compute_shift(max_abs);
    let exp = propagate_exponent(acc.act_exp, acc.wt_exp, r_s)?;
    let data = acc.data.iter().map(|&v| downconvert_scalar(rectify(v), r_s, mode)).collect();
    Ok((DfpTensor { shape: acc.shape, data, exp }, r_s))
}

/// Next-layer activation exponent `e_act + e_wt + r_s`.
pub fn propagate_exponent(e_act: i8, e_wt: i8, r_s: u32) -> Result<i8, DfpError> {
    let sum = e_act as i64 + e_wt as i64 + r_s as i64;
    i8::try_from(sum).map_err(|_| DfpError::ExponentOverflow { e_act, e_wt, shift: r_s })
}

/// Add two DFP scalars. The operand with the smaller exponent is
/// arithmetic-shifted right by the exponent difference, the sum saturates to
/// 8 bits and the result carries the larger exponent.
pub fn dfp_add(a: i8, e_a: i8, b: i8, e_b: i8) -> (i8, i8) {
    let align = |v: i8, diff: i16| (v as i16) >> diff.min(15);
    let (a, b, exp) = if e_a >= e_b {
        (a as i16, align(b, e_a as i16 - e_b as i16), e_a)
    } else {
        (align(a, e_b as i16 - e_a as i16), b as i16, e_b)
    };
    ((a + b).clamp(i8::MIN as i16, i8::MAX as i16) as i8, exp)
}

/// Element-wise [`dfp_add`] of two tensors with optional ReLU on the sum.
pub fn add_tensors(a: &DfpTensor, b: &DfpTensor, relu: bool) -> Result<DfpTensor, DfpError> {
    if a.shape != b.shape {
        return Err(DfpError::ShapeMismatch { a: a.shape, b: b.shape });
    }
    let exp = a.exp.max(b.exp);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let (s, _) = dfp_add(x, a.exp, y, b.exp);
            if relu { s.max(0) } else { s }
        })
        .collect();
    Ok(DfpTensor { shape: a.shape, data, exp })
}

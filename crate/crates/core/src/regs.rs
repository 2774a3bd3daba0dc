//! Layer descriptors and the accelerator's two register files.
//!
//! The core register file carries layer topology (dimensions, kernel,
//! stride, channel counts, tile count) plus the exponents the control logic
//! loads before each layer. The LSU register file carries one
//! `(base, bytes)` pair per buffer stream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dfp::RoundingMode;
use crate::tensor::ConvParams;

/// Channel lanes per packed activation word and per packed weight word.
pub const LANES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegisterError {
    #[error("register image too short: {have} words, need {need}")]
    Truncated { have: usize, need: usize },
    #[error("invalid {field} field value {value:#x}")]
    InvalidField { field: &'static str, value: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Eltwise,
}

/// Geometry of one accelerator layer. Channel counts are the padded
/// (multiple of 64) counts the hardware sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub kind: LayerKind,
    pub ifm: usize,
    pub ofm: usize,
    pub h: usize,
    pub w: usize,
    pub conv: ConvParams,
    pub relu: bool,
}

impl LayerGeometry {
    pub fn conv(ifm: usize, ofm: usize, h: usize, w: usize, conv: ConvParams, relu: bool) -> Self {
        Self { kind: LayerKind::Conv, ifm, ofm, h, w, conv, relu }
    }

    pub fn eltwise(channels: usize, h: usize, w: usize, relu: bool) -> Self {
        Self {
            kind: LayerKind::Eltwise,
            ifm: channels,
            ofm: channels,
            h,
            w,
            conv: ConvParams::new(1, 1, 1, 0),
            relu,
        }
    }

    pub fn output_hw(&self) -> (usize, usize) {
        self.conv.output_hw(self.h, self.w)
    }

    pub fn ifm_groups(&self) -> usize {
        self.ifm.div_ceil(LANES)
    }

    pub fn ofm_groups(&self) -> usize {
        self.ofm.div_ceil(LANES)
    }

    /// Multiply-accumulates performed by this layer (zero for eltwise).
    pub fn macs(&self) -> u64 {
        match self.kind {
            LayerKind::Eltwise => 0,
            LayerKind::Conv => {
                let (oh, ow) = self.output_hw();
                (self.ofm * self.ifm * self.conv.kernel_pixels() * oh * ow) as u64
            }
        }
    }
}

/// Which input-channel groups one run of a layer covers and what happens to
/// the 32-bit results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PassSpec {
    pub first_group: usize,
    pub group_count: usize,
    /// Initialize accumulators from stored partials instead of the bias.
    pub accumulate_prior: bool,
    /// Store 32-bit partials instead of down-converting.
    pub store_partial: bool,
}

impl PassSpec {
    /// One pass over every input-channel group.
    pub fn full(geom: &LayerGeometry) -> Self {
        Self { first_group: 0, group_count: geom.ifm_groups(), accumulate_prior: false, store_partial: false }
    }

    /// Split a layer into passes of at most `groups_per_pass` input groups.
    pub fn split(geom: &LayerGeometry, groups_per_pass: usize) -> Vec<Self> {
        let total = geom.ifm_groups();
        let per = groups_per_pass.max(1);
        if geom.kind == LayerKind::Eltwise || total <= per {
            return vec![Self::full(geom)];
        }
        (0..total)
            .step_by(per)
            .map(|first| {
                let count = per.min(total - first);
                Self {
                    first_group: first,
                    group_count: count,
                    accumulate_prior: first > 0,
                    store_partial: first + count < total,
                }
            })
            .collect()
    }
}

/// Buffer streams moved by the LSU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Buffer {
    Ifm,
    Weights,
    Scales,
    Bias,
    Ofm,
    PartialIn,
    PartialOut,
    Eltwise,
}

impl Buffer {
    pub const ALL: [Buffer; 8] = [
        Buffer::Ifm,
        Buffer::Weights,
        Buffer::Scales,
        Buffer::Bias,
        Buffer::Ofm,
        Buffer::PartialIn,
        Buffer::PartialOut,
        Buffer::Eltwise,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }

    /// Read channels 0..3 carry ifm, weights, scales and bias; stored
    /// partials share the bias channel and the second eltwise operand shares
    /// the ifm channel. All writes use the single write channel.
    pub const fn channel(self) -> Channel {
        match self {
            Buffer::Ifm | Buffer::Eltwise => Channel::Read(0),
            Buffer::Weights => Channel::Read(1),
            Buffer::Scales => Channel::Read(2),
            Buffer::Bias | Buffer::PartialIn => Channel::Read(3),
            Buffer::Ofm | Buffer::PartialOut => Channel::Write(0),
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Buffer::Ifm => "ifm",
            Buffer::Weights => "weights",
            Buffer::Scales => "scales",
            Buffer::Bias => "bias",
            Buffer::Ofm => "ofm",
            Buffer::PartialIn => "partial-in",
            Buffer::PartialOut => "partial-out",
            Buffer::Eltwise => "eltwise",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Read(u8),
    Write(u8),
}

/// Core register file. Word map:
///
/// | word | field |
/// |------|-------|
/// | 0 | CTRL: bit0 kind (1 = eltwise), bit1 relu, bit2 accumulate-prior, bit3 store-partial, bits4..5 rounding |
/// | 1 | IFM channels |
/// | 2 | OFM channels |
/// | 3 | input H (bits 0..15), W (bits 16..31) |
/// | 4 | output H, W |
/// | 5 | kh (0..7), kw (8..15), stride (16..23), pad (24..31) |
/// | 6 | tiles |
/// | 7 | first ifm group (0..15), group count (16..31) |
/// | 8 | act exp (0..7), weight exp (8..15), eltwise operand exp (16..23), all two's complement |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoreRegs {
    pub kind: LayerKind,
    pub relu: bool,
    pub accumulate_prior: bool,
    pub store_partial: bool,
    pub rounding: RoundingMode,
    pub ifm: u32,
    pub ofm: u32,
    pub in_h: u16,
    pub in_w: u16,
    pub out_h: u16,
    pub out_w: u16,
    pub kh: u8,
    pub kw: u8,
    pub stride: u8,
    pub pad: u8,
    pub tiles: u32,
    pub first_group: u16,
    pub group_count: u16,
    pub act_exp: i8,
    pub wt_exp: i8,
    pub operand_exp: i8,
}

impl CoreRegs {
    pub const WORDS: usize = 9;

    pub fn from_layer(geom: &LayerGeometry, pass: &PassSpec, rounding: RoundingMode, tiles: usize) -> Self {
        let (oh, ow) = geom.output_hw();
        Self {
            kind: geom.kind,
            relu: geom.relu,
            accumulate_prior: pass.accumulate_prior,
            store_partial: pass.store_partial,
            rounding,
            ifm: geom.ifm as u32,
            ofm: geom.ofm as u32,
            in_h: geom.h as u16,
            in_w: geom.w as u16,
            out_h: oh as u16,
            out_w: ow as u16,
            kh: geom.conv.kh as u8,
            kw: geom.conv.kw as u8,
            stride: geom.conv.stride as u8,
            pad: geom.conv.pad as u8,
            tiles: tiles as u32,
            first_group: pass.first_group as u16,
            group_count: pass.group_count as u16,
            act_exp: 0,
            wt_exp: 0,
            operand_exp: 0,
        }
    }

    pub fn set_exponents(&mut self, act_exp: i8, wt_exp: i8, operand_exp: i8) {
        self.act_exp = act_exp;
        self.wt_exp = wt_exp;
        self.operand_exp = operand_exp;
    }

    pub fn to_words(&self) -> [u32; Self::WORDS] {
        let ctrl = (self.kind == LayerKind::Eltwise) as u32
            | (self.relu as u32) << 1
            | (self.accumulate_prior as u32) << 2
            | (self.store_partial as u32) << 3
            | self.rounding.code() << 4;
        [
            ctrl,
            self.ifm,
            self.ofm,
            self.in_h as u32 | (self.in_w as u32) << 16,
            self.out_h as u32 | (self.out_w as u32) << 16,
            self.kh as u32 | (self.kw as u32) << 8 | (self.stride as u32) << 16 | (self.pad as u32) << 24,
            self.tiles,
            self.first_group as u32 | (self.group_count as u32) << 16,
            self.act_exp as u8 as u32 | (self.wt_exp as u8 as u32) << 8 | (self.operand_exp as u8 as u32) << 16,
        ]
    }

    pub fn from_words(words: &[u32]) -> Result<Self, RegisterError> {
        if words.len() < Self::WORDS {
            return Err(RegisterError::Truncated { have: words.len(), need: Self::WORDS });
        }
        let ctrl = words[0];
        if ctrl >> 6 != 0 {
            return Err(RegisterError::InvalidField { field: "CTRL", value: ctrl });
        }
        let rounding = RoundingMode::from_code((ctrl >> 4) & 3)
            .ok_or(RegisterError::InvalidField { field: "CTRL.rounding", value: ctrl })?;
        let lo16 = |w: u32| (w & 0xffff) as u16;
        let hi16 = |w: u32| (w >> 16) as u16;
        let byte = |w: u32, i: u32| (w >> (8 * i)) as u8;
        Ok(Self {
            kind: if ctrl & 1 == 1 { LayerKind::Eltwise } else { LayerKind::Conv },
            relu: ctrl & 2 != 0,
            accumulate_prior: ctrl & 4 != 0,
            store_partial: ctrl & 8 != 0,
            rounding,
            ifm: words[1],
            ofm: words[2],
            in_h: lo16(words[3]),
            in_w: hi16(words[3]),
            out_h: lo16(words[4]),
            out_w: hi16(words[4]),
            kh: byte(words[5], 0),
            kw: byte(words[5], 1),
            stride: byte(words[5], 2),
            pad: byte(words[5], 3),
            tiles: words[6],
            first_group: lo16(words[7]),
            group_count: hi16(words[7]),
            act_exp: byte(words[8], 0) as i8,
            wt_exp: byte(words[8], 1) as i8,
            operand_exp: byte(words[8], 2) as i8,
        })
    }
}

/// Base address and transfer size of one LSU stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LsuEntry {
    pub base: u64,
    pub bytes: u64,
}

/// LSU register file: one entry per [`Buffer`], three words each
/// (base low, base high, byte count).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LsuRegs {
    pub entries: [LsuEntry; 8],
}

impl LsuRegs {
    pub const WORDS: usize = 3 * 8;

    pub fn get(&self, b: Buffer) -> LsuEntry {
        self.entries[b.index()]
    }

    pub fn set(&mut self, b: Buffer, base: u64, bytes: u64) {
        self.entries[b.index()] = LsuEntry { base, bytes };
    }

    pub fn to_words(&self) -> [u32; Self::WORDS] {
        let mut out = [0u32; Self::WORDS];
        for (i, e) in self.entries.iter().enumerate() {
            out[3 * i] = e.base as u32;
            out[3 * i + 1] = (e.base >> 32) as u32;
            out[3 * i + 2] = u32::try_from(e.bytes).unwrap_or(u32::MAX);
        }
        out
    }

    pub fn from_words(words: &[u32]) -> Result<Self, RegisterError> {
        if words.len() < Self::WORDS {
            return Err(RegisterError::Truncated { have: words.len(), need: Self::WORDS });
        }
        let mut regs = Self::default();
        for (i, e) in regs.entries.iter_mut().enumerate() {
            e.base = words[3 * i] as u64 | (words[3 * i + 1] as u64) << 32;
            e.bytes = words[3 * i + 2] as u64;
        }
        Ok(regs)
    }
}

/// A fully programmed accelerator layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub name: String,
    pub geom: LayerGeometry,
    pub pass: PassSpec,
    pub rounding: RoundingMode,
    pub core_regs: CoreRegs,
    pub lsu_regs: LsuRegs,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pass_split() {
        let g = LayerGeometry::conv(256, 64, 8, 8, ConvParams::square(1, 1), true);
        let passes = PassSpec::split(&g, 1);
        assert_eq!(passes.len(), 4);
        assert!(!passes[0].accumulate_prior && passes[0].store_partial);
        assert!(passes[1].accumulate_prior && passes[1].store_partial);
        assert!(passes[3].accumulate_prior && !passes[3].store_partial);
        let passes = PassSpec::split(&g, 3);
        assert_eq!(passes.iter().map(|p| p.group_count).collect::<Vec<_>>(), vec![3, 1]);
        assert_eq!(PassSpec::split(&g, 4), vec![PassSpec::full(&g)]);
    }

    #[test]
    fn core_regs_reject_garbage() {
        let g = LayerGeometry::conv(64, 64, 8, 8, ConvParams::square(3, 1), false);
        let mut words = CoreRegs::from_layer(&g, &PassSpec::full(&g), RoundingMode::Truncate, 64).to_words();
        words[0] |= 3 << 4;
        assert!(CoreRegs::from_words(&words).is_err());
        assert!(CoreRegs::from_words(&words[..4]).is_err());
        assert!(LsuRegs::from_words(&[0; 5]).is_err());
    }

    proptest! {
        #[test]
        fn register_images_roundtrip(
            ifm in 0u32..4096, ofm in 0u32..4096, h in 0u16..512, w in 0u16..512,
            k in 0u8..8, stride in 1u8..4, pad in 0u8..4, flags in 0u8..16, mode in 0u32..3,
            exps in any::<(i8, i8, i8)>(), first in 0u16..64, count in 0u16..64,
            bases in proptest::collection::vec(any::<(u64, u32)>(), 8),
        ) {
            let regs = CoreRegs {
                kind: if flags & 1 == 1 { LayerKind::Eltwise } else { LayerKind::Conv },
                relu: flags & 2 != 0,
                accumulate_prior: flags & 4 != 0,
                store_partial: flags & 8 != 0,
                rounding: RoundingMode::from_code(mode).unwrap(),
                ifm, ofm, in_h: h, in_w: w, out_h: w, out_w: h,
                kh: k, kw: k, stride, pad, tiles: 64,
                first_group: first, group_count: count,
                act_exp: exps.0, wt_exp: exps.1, operand_exp: exps.2,
            };
            prop_assert_eq!(CoreRegs::from_words(&regs.to_words()).unwrap(), regs);

            let mut lsu = LsuRegs::default();
            for (b, (base, bytes)) in Buffer::ALL.into_iter().zip(bases) {
                lsu.set(b, base, bytes as u64);
            }
            prop_assert_eq!(LsuRegs::from_words(&lsu.to_words()).unwrap(), lsu);
        }
    }
}

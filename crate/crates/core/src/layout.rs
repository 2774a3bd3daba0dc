//! System-memory layouts of the accelerator buffers.
//!
//! * ISRAM: one 512-bit word per (ifm group, y, x); byte lane `c mod 64`
//!   holds channel `c`. Words are ordered group-major, then row-major.
//! * BSRAM: one 128-bit word per (ofm group, ifm channel, ky, kx); 2-bit
//!   lane `o mod 64` holds the trit code of output channel `o`.
//! * SSRAM: one 16-bit scale per (ofm group, block group, ky, kx, ofm lane).
//! * BBSRAM: one 32-bit bias per (padded) output channel.
//! * ORAM: one 32-bit partial per (ofm group, y, x, ofm lane).
//!
//! Everything is little-endian. Lane 0 sits in the least significant bits
//! of a word. Padded lanes are written as zero.

use thiserror::Error;

use crate::dfp::{AccTensor, DfpTensor};
use crate::quantizer::{FusedLayerWeights, TernaryBlock};
use crate::regs::{Buffer, Channel, LayerGeometry, LayerKind, PassSpec, LANES};
use crate::tensor::{Shape3, Trit};

pub const IFM_WORD_BYTES: usize = LANES;
pub const WEIGHT_WORD_BYTES: usize = 2 * LANES / 8;
pub const PARTIAL_BYTES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("{what}: expected {expected} bytes, got {actual}")]
    Truncated { what: &'static str, expected: usize, actual: usize },
    #[error("{what}: expected {expected} words, got {actual}")]
    WordCount { what: &'static str, expected: usize, actual: usize },
    #[error("reserved trit code 0b10 in weight word {word}, lane {lane}")]
    InvalidTritCode { word: usize, lane: usize },
    #[error("geometry mismatch: {0}")]
    Geometry(String),
}

/// 2-bit trit code: bit 0 flags a nonzero weight, bit 1 its sign.
pub const fn encode_trit(t: Trit) -> u8 {
    match t {
        Trit::Zero => 0b00,
        Trit::Pos => 0b01,
        Trit::Neg => 0b11,
    }
}

pub const fn decode_trit(code: u8) -> Option<Trit> {
    match code & 0b11 {
        0b00 => Some(Trit::Zero),
        0b01 => Some(Trit::Pos),
        0b11 => Some(Trit::Neg),
        _ => None,
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), LayoutError> {
    if expected == actual {
        Ok(())
    } else {
        Err(LayoutError::Truncated { what, expected, actual })
    }
}

fn padded(n: usize) -> usize {
    n.div_ceil(LANES) * LANES
}

/// Packed ISRAM image of a DFP tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedIfm {
    pub shape: Shape3,
    pub exp: i8,
    pub words: Vec<[u8; IFM_WORD_BYTES]>,
}

impl PackedIfm {
    pub fn groups(&self) -> usize {
        self.shape.channels.div_ceil(LANES)
    }

    pub fn word_count(shape: Shape3) -> usize {
        shape.channels.div_ceil(LANES) * shape.pixels()
    }

    pub fn byte_len(shape: Shape3) -> usize {
        Self::word_count(shape) * IFM_WORD_BYTES
    }

    #[inline]
    pub fn word_index(&self, g: usize, y: usize, x: usize) -> usize {
        (g * self.shape.height + y) * self.shape.width + x
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.words.iter().flatten().copied().collect()
    }

    pub fn from_bytes(shape: Shape3, exp: i8, bytes: &[u8]) -> Result<Self, LayoutError> {
        check_len("ifm", Self::byte_len(shape), bytes.len())?;
        let words = bytes
            .chunks_exact(IFM_WORD_BYTES)
            .map(|c| c.try_into().expect("chunk is one word"))
            .collect();
        Ok(Self { shape, exp, words })
    }
}

pub fn pack_ifm(x: &DfpTensor) -> PackedIfm {
    let s = x.shape;
    let groups = s.channels.div_ceil(LANES);
    let mut words = vec![[0u8; IFM_WORD_BYTES]; groups * s.pixels()];
    for c in 0..s.channels {
        let (g, lane) = (c / LANES, c % LANES);
        for y in 0..s.height {
            for xx in 0..s.width {
                words[(g * s.height + y) * s.width + xx][lane] = x.get(c, y, xx) as u8;
            }
        }
    }
    PackedIfm { shape: s, exp: x.exp, words }
}

pub fn unpack_ifm(p: &PackedIfm) -> Result<DfpTensor, LayoutError> {
    let s = p.shape;
    let expected = PackedIfm::word_count(s);
    if p.words.len() != expected {
        return Err(LayoutError::WordCount { what: "ifm", expected, actual: p.words.len() });
    }
    let mut out = DfpTensor::zeros(s, p.exp);
    for c in 0..s.channels {
        let (g, lane) = (c / LANES, c % LANES);
        for y in 0..s.height {
            for x in 0..s.width {
                out.data[s.index(c, y, x)] = p.words[p.word_index(g, y, x)][lane] as i8;
            }
        }
    }
    Ok(out)
}

/// Packed BSRAM image of a layer's trits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedWeights {
    pub ofm: usize,
    pub ifm: usize,
    pub kh: usize,
    pub kw: usize,
    pub words: Vec<u128>,
}

impl PackedWeights {
    pub fn word_count(ofm: usize, ifm: usize, kh: usize, kw: usize) -> usize {
        ofm.div_ceil(LANES) * padded(ifm) * kh * kw
    }

    #[inline]
    pub fn word_index(&self, og: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((og * padded(self.ifm) + i) * self.kh + ky) * self.kw + kx
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_bytes(ofm: usize, ifm: usize, kh: usize, kw: usize, bytes: &[u8]) -> Result<Self, LayoutError> {
        check_len("weights", Self::word_count(ofm, ifm, kh, kw) * WEIGHT_WORD_BYTES, bytes.len())?;
        let words = bytes
            .chunks_exact(WEIGHT_WORD_BYTES)
            .map(|c| u128::from_le_bytes(c.try_into().expect("chunk is one word")))
            .collect();
        Ok(Self { ofm, ifm, kh, kw, words })
    }
}

pub fn pack_weights(w: &FusedLayerWeights) -> PackedWeights {
    let mut p = PackedWeights {
        ofm: w.ofm,
        ifm: w.ifm,
        kh: w.kh,
        kw: w.kw,
        words: vec![0; PackedWeights::word_count(w.ofm, w.ifm, w.kh, w.kw)],
    };
    for o in 0..w.ofm {
        let (og, lane) = (o / LANES, o % LANES);
        for i in 0..w.ifm {
            for ky in 0..w.kh {
                for kx in 0..w.kw {
                    let code = encode_trit(w.trit(o, i, ky, kx)) as u128;
                    let idx = p.word_index(og, i, ky, kx);
                    p.words[idx] |= code << (2 * lane);
                }
            }
        }
    }
    p
}

/// Trits in (OFM, IFM, KH, KW) order; rejects the reserved code.
pub fn unpack_weights(p: &PackedWeights) -> Result<Vec<Trit>, LayoutError> {
    let expected = PackedWeights::word_count(p.ofm, p.ifm, p.kh, p.kw);
    if p.words.len() != expected {
        return Err(LayoutError::WordCount { what: "weights", expected, actual: p.words.len() });
    }
    for (word, &bits) in p.words.iter().enumerate() {
        for lane in 0..LANES {
            if (bits >> (2 * lane)) & 0b11 == 0b10 {
                return Err(LayoutError::InvalidTritCode { word, lane });
            }
        }
    }
    let mut out = Vec::with_capacity(p.ofm * p.ifm * p.kh * p.kw);
    for o in 0..p.ofm {
        let (og, lane) = (o / LANES, o % LANES);
        for i in 0..p.ifm {
            for ky in 0..p.kh {
                for kx in 0..p.kw {
                    let code = (p.words[p.word_index(og, i, ky, kx)] >> (2 * lane)) as u8;
                    out.push(decode_trit(code).expect("reserved codes rejected above"));
                }
            }
        }
    }
    Ok(out)
}

/// Packed SSRAM image of a layer's block scales.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedScales {
    pub ofm: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub words: Vec<u16>,
}

impl PackedScales {
    pub fn word_count(ofm: usize, kh: usize, kw: usize, groups: usize) -> usize {
        padded(ofm) * kh * kw * groups
    }

    #[inline]
    pub fn word_index(&self, o: usize, ky: usize, kx: usize, g: usize) -> usize {
        let (og, lane) = (o / LANES, o % LANES);
        (((og * self.groups + g) * self.kh + ky) * self.kw + kx) * LANES + lane
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_bytes(ofm: usize, kh: usize, kw: usize, groups: usize, bytes: &[u8]) -> Result<Self, LayoutError> {
        check_len("scales", Self::word_count(ofm, kh, kw, groups) * 2, bytes.len())?;
        let words = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Ok(Self { ofm, kh, kw, groups, words })
    }
}

pub fn pack_scales(w: &FusedLayerWeights) -> PackedScales {
    let groups = w.ifm_groups();
    let mut p = PackedScales {
        ofm: w.ofm,
        kh: w.kh,
        kw: w.kw,
        groups,
        words: vec![0; PackedScales::word_count(w.ofm, w.kh, w.kw, groups)],
    };
    for o in 0..w.ofm {
        for ky in 0..w.kh {
            for kx in 0..w.kw {
                for g in 0..groups {
                    let idx = p.word_index(o, ky, kx, g);
                    p.words[idx] = w.block(o, ky, kx, g).alpha_q;
                }
            }
        }
    }
    p
}

/// Packed BBSRAM image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBias {
    pub ofm: usize,
    pub words: Vec<i32>,
}

impl PackedBias {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_bytes(ofm: usize, bytes: &[u8]) -> Result<Self, LayoutError> {
        check_len("bias", padded(ofm) * 4, bytes.len())?;
        let words = bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { ofm, words })
    }
}

pub fn pack_bias(w: &FusedLayerWeights) -> PackedBias {
    pack_bias_values(&w.bias)
}

pub fn pack_bias_values(bias: &[i32]) -> PackedBias {
    let mut words = bias.to_vec();
    words.resize(padded(bias.len()), 0);
    PackedBias { ofm: bias.len(), words }
}

/// Reassemble a layer from its three packed images.
pub fn unpack_layer(
    weights: &PackedWeights,
    scales: &PackedScales,
    bias: &PackedBias,
    block_size: usize,
    wt_exp: i8,
    bias_exp: i16,
) -> Result<FusedLayerWeights, LayoutError> {
    let trits = unpack_weights(weights)?;
    let (ofm, ifm, kh, kw) = (weights.ofm, weights.ifm, weights.kh, weights.kw);
    let groups = ifm.div_ceil(block_size.max(1));
    if scales.ofm != ofm || scales.kh != kh || scales.kw != kw || scales.groups != groups {
        return Err(LayoutError::Geometry(format!(
            "scales cover {}x{}x{}x{} blocks, weights need {ofm}x{kh}x{kw}x{groups}",
            scales.ofm, scales.kh, scales.kw, scales.groups
        )));
    }
    if scales.words.len() != PackedScales::word_count(ofm, kh, kw, groups) {
        return Err(LayoutError::WordCount {
            what: "scales",
            expected: PackedScales::word_count(ofm, kh, kw, groups),
            actual: scales.words.len(),
        });
    }
    if bias.ofm != ofm || bias.words.len() < ofm {
        return Err(LayoutError::Geometry(format!("bias covers {} channels, weights have {ofm}", bias.ofm)));
    }
    let mut layer = FusedLayerWeights::zeros(ofm, ifm, kh, kw, block_size);
    for o in 0..ofm {
        for ky in 0..kh {
            for kx in 0..kw {
                for g in 0..groups {
                    let alpha_q = scales.words[scales.word_index(o, ky, kx, g)];
                    let mut trits_g = vec![Trit::Zero; block_size];
                    for (j, t) in trits_g.iter_mut().enumerate() {
                        let i = g * block_size + j;
                        if i < ifm {
                            *t = trits[((o * ifm + i) * kh + ky) * kw + kx];
                        }
                    }
                    *layer.block_mut(o, ky, kx, g) = TernaryBlock { trits: trits_g, alpha_q };
                }
            }
        }
    }
    layer.bias = bias.words[..ofm].to_vec();
    layer.wt_exp = wt_exp;
    layer.bias_exp = bias_exp;
    Ok(layer)
}

/// Packed ORAM image of 32-bit partial outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedPartials {
    pub shape: Shape3,
    pub act_exp: i8,
    pub wt_exp: i8,
    pub words: Vec<i32>,
}

impl PackedPartials {
    pub fn word_count(shape: Shape3) -> usize {
        padded(shape.channels) * shape.pixels()
    }

    #[inline]
    pub fn word_index(shape: Shape3, o: usize, y: usize, x: usize) -> usize {
        let (og, lane) = (o / LANES, o % LANES);
        ((og * shape.height + y) * shape.width + x) * LANES + lane
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_bytes(shape: Shape3, act_exp: i8, wt_exp: i8, bytes: &[u8]) -> Result<Self, LayoutError> {
        check_len("partials", Self::word_count(shape) * PARTIAL_BYTES, bytes.len())?;
        let words = bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { shape, act_exp, wt_exp, words })
    }
}

pub fn pack_partials(acc: &AccTensor) -> PackedPartials {
    let s = acc.shape;
    let mut words = vec![0; PackedPartials::word_count(s)];
    for o in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width {
                words[PackedPartials::word_index(s, o, y, x)] = acc.data[s.index(o, y, x)];
            }
        }
    }
    PackedPartials { shape: s, act_exp: acc.act_exp, wt_exp: acc.wt_exp, words }
}

pub fn unpack_partials(p: &PackedPartials) -> Result<AccTensor, LayoutError> {
    let s = p.shape;
    let expected = PackedPartials::word_count(s);
    if p.words.len() != expected {
        return Err(LayoutError::WordCount { what: "partials", expected, actual: p.words.len() });
    }
    let mut acc = AccTensor::zeros(s, p.act_exp, p.wt_exp);
    for o in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width {
                acc.data[s.index(o, y, x)] = p.words[PackedPartials::word_index(s, o, y, x)];
            }
        }
    }
    Ok(acc)
}

/// One LSU stream of a layer run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transfer {
    pub buffer: Buffer,
    pub channel: Channel,
    pub bytes: u64,
}

/// Byte counts of every stream one layer pass moves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchPlan {
    pub transfers: Vec<Transfer>,
}

impl FetchPlan {
    pub fn bytes(&self, buffer: Buffer) -> u64 {
        self.transfers.iter().filter(|t| t.buffer == buffer).map(|t| t.bytes).sum()
    }

    pub fn read_bytes(&self) -> u64 {
        self.transfers.iter().filter(|t| matches!(t.channel, Channel::Read(_))).map(|t| t.bytes).sum()
    }

    pub fn write_bytes(&self) -> u64 {
        self.transfers.iter().filter(|t| matches!(t.channel, Channel::Write(_))).map(|t| t.bytes).sum()
    }
}

/// Byte counts for the streams of one pass of `geom`.
///
/// Weights and scales cover the whole layer each pass; the ifm stream
/// covers only the pass's input-channel groups.
pub fn lsu_plan(geom: &LayerGeometry, pass: &PassSpec) -> FetchPlan {
    let (oh, ow) = geom.output_hw();
    let in_pixels = (geom.h * geom.w) as u64;
    let out_pixels = (oh * ow) as u64;
    let ofm_groups = geom.ofm_groups() as u64;
    let act_out = ofm_groups * out_pixels * IFM_WORD_BYTES as u64;
    let partials = padded(geom.ofm) as u64 * out_pixels * PARTIAL_BYTES as u64;
    let mut t = Vec::new();
    let mut push = |buffer: Buffer, bytes: u64| t.push(Transfer { buffer, channel: buffer.channel(), bytes });
    match geom.kind {
        LayerKind::Eltwise => {
            let groups = geom.ifm_groups() as u64;
            push(Buffer::Ifm, groups * in_pixels * IFM_WORD_BYTES as u64);
            push(Buffer::Eltwise, groups * in_pixels * IFM_WORD_BYTES as u64);
            push(Buffer::Ofm, act_out);
        }
        LayerKind::Conv => {
            let kp = geom.conv.kernel_pixels() as u64;
            push(Buffer::Ifm, pass.group_count as u64 * in_pixels * IFM_WORD_BYTES as u64);
            push(
                Buffer::Weights,
                (PackedWeights::word_count(geom.ofm, geom.ifm, geom.conv.kh, geom.conv.kw) * WEIGHT_WORD_BYTES) as u64,
            );
            push(Buffer::Scales, padded(geom.ofm) as u64 * kp * geom.ifm_groups() as u64 * 2);
            if pass.accumulate_prior {
                push(Buffer::PartialIn, partials);
            } else {
                push(Buffer::Bias, padded(geom.ofm) as u64 * 4);
            }
            if pass.store_partial {
                push(Buffer::PartialOut, partials);
            } else {
                push(Buffer::Ofm, act_out);
            }
        }
    }
    FetchPlan { transfers: t }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvParams;

    #[test]
    fn trit_codes() {
        assert_eq!(encode_trit(Trit::Zero), 0b00);
        assert_eq!(encode_trit(Trit::Pos), 0b01);
        assert_eq!(encode_trit(Trit::Neg), 0b11);
        assert_eq!(decode_trit(0b10), None);
        for t in [Trit::Zero, Trit::Pos, Trit::Neg] {
            assert_eq!(decode_trit(encode_trit(t)), Some(t));
        }
    }

    #[test]
    fn ifm_lane_mapping_golden() {
        let data = (0..64).map(|c| c as i8).collect();
        let x = DfpTensor::from_vec(Shape3::new(64, 1, 1), data, 0);
        let p = pack_ifm(&x);
        assert_eq!(p.words.len(), 1);
        for c in 0..64 {
            assert_eq!(p.words[0][c], c as u8);
        }
        let zero = pack_ifm(&DfpTensor::zeros(Shape3::new(64, 2, 2), 0));
        assert!(zero.to_bytes().iter().all(|&b| b == 0));
    }

    #[test]
    fn ifm_group_ordering() {
        let mut x = DfpTensor::zeros(Shape3::new(128, 1, 2), 0);
        x.data[x.shape.index(0, 0, 1)] = 7;
        x.data[x.shape.index(64, 0, 0)] = -1;
        let p = pack_ifm(&x);
        assert_eq!(p.words.len(), 4);
        // group 0 pixels, then group 1 pixels
        assert_eq!(p.words[1][0], 7);
        assert_eq!(p.words[2][0], 0xff);
        let bytes = p.to_bytes();
        assert_eq!(bytes[64], 7);
        assert_eq!(bytes[128], 0xff);
    }

    #[test]
    fn ifm_truncated_stream() {
        assert!(matches!(
            PackedIfm::from_bytes(Shape3::new(64, 2, 2), 0, &[0; 255]),
            Err(LayoutError::Truncated { .. })
        ));
        let mut p = pack_ifm(&DfpTensor::zeros(Shape3::new(64, 2, 2), 0));
        p.words.pop();
        assert!(unpack_ifm(&p).is_err());
        let all_zero = PackedIfm::from_bytes(Shape3::new(64, 2, 2), -3, &[0; 256]).unwrap();
        assert_eq!(unpack_ifm(&all_zero).unwrap(), DfpTensor::zeros(Shape3::new(64, 2, 2), -3));
    }

    #[test]
    fn weight_lane_golden() {
        let mut w = FusedLayerWeights::zeros(64, 64, 3, 3, 64);
        let p = pack_weights(&w);
        assert!(p.words.iter().all(|&x| x == 0));
        w.block_mut(5, 1, 2, 0).trits[17] = Trit::Pos;
        let p = pack_weights(&w);
        let idx = p.word_index(0, 17, 1, 2);
        assert_eq!(p.words[idx], 0b01 << 10);
        let bytes = p.to_bytes();
        assert_eq!(bytes[idx * 16 + 1], 0b0000_0100);
        assert_eq!(bytes.iter().filter(|&&b| b != 0).count(), 1);
    }

    #[test]
    fn reserved_trit_rejected() {
        let mut p = pack_weights(&FusedLayerWeights::zeros(64, 64, 1, 1, 64));
        p.words[3] = 0b10 << 6;
        assert_eq!(unpack_weights(&p), Err(LayoutError::InvalidTritCode { word: 3, lane: 3 }));
    }

    #[test]
    fn scale_and_bias_golden() {
        let mut w = FusedLayerWeights::zeros(1, 64, 1, 1, 64);
        assert!(pack_scales(&w).to_bytes().iter().all(|&b| b == 0));
        w.blocks[0].alpha_q = 0x8000;
        w.bias[0] = -1;
        let s = pack_scales(&w).to_bytes();
        assert_eq!(&s[..2], &[0x00, 0x80]);
        assert_eq!(s.len(), 128);
        let b = pack_bias(&w).to_bytes();
        assert_eq!(&b[..4], &[0xff, 0xff, 0xff, 0xff]);
        assert_eq!(b.len(), 256);
    }

    #[test]
    fn lsu_examples() {
        let g = LayerGeometry::conv(64, 64, 56, 56, ConvParams::square(1, 1), false);
        let plan = lsu_plan(&g, &PassSpec::full(&g));
        assert_eq!(plan.bytes(Buffer::Ifm), 200_704);
        assert_eq!(plan.bytes(Buffer::Weights), 1024);
        assert_eq!(plan.bytes(Buffer::Scales), 128);
        assert_eq!(plan.bytes(Buffer::Bias), 256);
        assert_eq!(plan.bytes(Buffer::Ofm), 200_704);
        assert_eq!(plan.read_bytes(), 200_704 + 1024 + 128 + 256);

        let g3 = LayerGeometry::conv(64, 64, 56, 56, ConvParams::square(3, 1), false);
        assert_eq!(lsu_plan(&g3, &PassSpec::full(&g3)).bytes(Buffer::Weights), 9216);

        let z = LayerGeometry::conv(0, 0, 0, 0, ConvParams::square(1, 1), false);
        let plan = lsu_plan(&z, &PassSpec::full(&z));
        assert!(plan.transfers.iter().all(|t| t.bytes == 0));
    }

    #[test]
    fn channel_assignment() {
        let g = LayerGeometry::conv(128, 64, 8, 8, ConvParams::square(3, 1), false);
        let plan = lsu_plan(&g, &PassSpec::full(&g));
        let reads: Vec<_> = plan.transfers.iter().filter_map(|t| match t.channel {
            Channel::Read(c) => Some(c),
            Channel::Write(_) => None,
        }).collect();
        assert_eq!(reads, vec![0, 1, 2, 3]);
    }
}

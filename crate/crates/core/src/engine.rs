//! Bit-exact functional model of the compute datapath.
//!
//! Each PE output goes through the same stages as the hardware pipeline:
//! dot64 over one 64-channel input group, a 16-bit scale multiply, and the
//! 32-bit accumulator seeded with the bias (or stored partials). Once every
//! group of a layer has been accumulated the whole OFM tensor is
//! down-converted with one shared shift and written back as packed 8-bit
//! words.
//!
//! Tile `t` of an ofm group computes output channel `64·og + t`; PE `p` of
//! a tile computes output pixel `4·b + p` of pixel batch `b`. The mapping
//! decides evaluation order and trace records, never values.

use std::io::Write;

use thiserror::Error;

use crate::config::TileConfig;
use crate::dfp::{self, AccTensor, DfpError, DfpTensor};
use crate::layout::{
    self, LayoutError, PackedIfm, PackedPartials, PackedScales, PackedWeights, FetchPlan,
};
use crate::regs::{Buffer, CoreRegs, LayerDescriptor, LayerKind, RegisterError, LANES};
use crate::tensor::{Shape3, Trit};

pub use crate::regs::{LayerGeometry, PassSpec};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("layer `{layer}`: {msg}")]
    LayerConfig { layer: String, msg: String },
    #[error("memory access [{base:#x}, +{len}) outside image of {size} bytes")]
    OutOfBounds { base: u64, len: u64, size: usize },
    #[error("shape mismatch: {0} vs {1}")]
    Shape(Shape3, Shape3),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Dfp(#[from] DfpError),
    #[error(transparent)]
    Register(#[from] RegisterError),
    #[error("trace write failed: {0}")]
    Trace(#[from] std::io::Error),
}

/// Flat byte-addressed system memory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryImage {
    bytes: Vec<u8>,
}

impl MemoryImage {
    pub fn new(size: usize) -> Self {
        Self { bytes: vec![0; size] }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn range(&self, base: u64, len: u64) -> Result<std::ops::Range<usize>, EngineError> {
        let end = base.checked_add(len).filter(|&e| e <= self.bytes.len() as u64);
        match end {
            Some(end) => Ok(base as usize..end as usize),
            None => Err(EngineError::OutOfBounds { base, len, size: self.bytes.len() }),
        }
    }

    pub fn read(&self, base: u64, len: u64) -> Result<&[u8], EngineError> {
        let r = self.range(base, len)?;
        Ok(&self.bytes[r])
    }

    pub fn write(&mut self, base: u64, data: &[u8]) -> Result<(), EngineError> {
        let r = self.range(base, data.len() as u64)?;
        self.bytes[r].copy_from_slice(data);
        Ok(())
    }
}

/// Knobs that change how a layer is evaluated or observed, never its
/// output bytes.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Count accumulator wrap-arounds.
    pub validation: bool,
    /// Return the 32-bit accumulator tensor of the pass.
    pub capture_acc: bool,
    /// Evaluation order of the 64 tile lanes (a permutation of `0..64`).
    pub tile_order: Option<Vec<usize>>,
    /// Evaluation order of the PEs of a tile.
    pub pe_order: Option<Vec<usize>>,
}

/// What one `run_layer` call produced besides memory writes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerOutcome {
    /// Down-conversion shift (`None` when partials were stored).
    pub shift: Option<u32>,
    /// Exponent of the 8-bit output (`None` when partials were stored).
    pub out_exp: Option<i8>,
    /// Accumulator wrap-arounds seen (validation mode only).
    pub overflow_events: u64,
    /// Pre-down-conversion accumulators when requested.
    pub acc: Option<AccTensor>,
}

/// Multiply-free 64-lane dot product of 8-bit activations and trits.
pub fn dot64(x: &[i8; LANES], w: &[Trit; LANES]) -> i16 {
    let (mut pos, mut neg) = (0u64, 0u64);
    for (lane, t) in w.iter().enumerate() {
        match t {
            Trit::Pos => pos |= 1 << lane,
            Trit::Neg => neg |= 1 << lane,
            Trit::Zero => {}
        }
    }
    dot64_masks(x, pos, neg)
}

/// dot64 over lane masks: (sum of lanes in `pos`) − (sum of lanes in `neg`).
#[inline]
pub fn dot64_masks(x: &[i8; LANES], pos: u64, neg: u64) -> i16 {
    let mut sum: i32 = 0;
    let mut m = pos;
    while m != 0 {
        sum += x[m.trailing_zeros() as usize] as i32;
        m &= m - 1;
    }
    let mut m = neg;
    while m != 0 {
        sum -= x[m.trailing_zeros() as usize] as i32;
        m &= m - 1;
    }
    debug_assert!(sum.unsigned_abs() <= 1 << 13);
    sum as i16
}

/// Scaling engine: dot64 result times the 16-bit block scale.
#[inline]
pub fn scale(d: i16, alpha_q: u16) -> i32 {
    let p = d as i32 * alpha_q as i32;
    debug_assert!(p.unsigned_abs() < 1 << 30);
    p
}

/// Wrapping 32-bit accumulate; the flag reports a wrap-around.
#[inline]
pub fn accumulate(acc: i32, v: i32) -> (i32, bool) {
    acc.overflowing_add(v)
}

/// Element-wise DFP merge of two branch outputs.
pub fn eltwise_merge(a: &DfpTensor, b: &DfpTensor, relu: bool) -> Result<DfpTensor, EngineError> {
    if a.shape != b.shape {
        return Err(EngineError::Shape(a.shape, b.shape));
    }
    Ok(dfp::add_tensors(a, b, relu)?)
}

/// The datapath model for one tile array.
pub struct Engine {
    cfg: TileConfig,
    opts: RunOptions,
    trace: Option<Box<dyn Write + Send>>,
    layers_run: usize,
}

impl Engine {
    pub fn new(cfg: TileConfig) -> Self {
        Self { cfg, opts: RunOptions::default(), trace: None, layers_run: 0 }
    }

    pub fn with_options(mut self, opts: RunOptions) -> Self {
        self.opts = opts;
        self
    }

    /// Emit one text record per pipeline operation to `sink`.
    pub fn with_trace(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.trace = Some(sink);
        self
    }

    pub fn config(&self) -> &TileConfig {
        &self.cfg
    }

    pub fn options_mut(&mut self) -> &mut RunOptions {
        &mut self.opts
    }

    pub fn flush_trace(&mut self) -> Result<(), EngineError> {
        if let Some(t) = self.trace.as_mut() {
            t.flush()?;
        }
        Ok(())
    }

    /// Execute one programmed layer against `mem`.
    pub fn run_layer(&mut self, desc: &LayerDescriptor, mem: &mut MemoryImage) -> Result<LayerOutcome, EngineError> {
        let regs = CoreRegs::from_words(&desc.core_regs.to_words())?;
        self.check_descriptor(desc, &regs)?;
        let outcome = match desc.geom.kind {
            LayerKind::Conv => self.run_conv(desc, &regs, mem)?,
            LayerKind::Eltwise => self.run_eltwise(desc, &regs, mem)?,
        };
        self.layers_run += 1;
        Ok(outcome)
    }

    fn config_error(desc: &LayerDescriptor, msg: impl Into<String>) -> EngineError {
        EngineError::LayerConfig { layer: desc.name.clone(), msg: msg.into() }
    }

    fn check_descriptor(&self, desc: &LayerDescriptor, regs: &CoreRegs) -> Result<(), EngineError> {
        let g = &desc.geom;
        let fail = |m: String| Err(Self::config_error(desc, m));
        if regs.tiles as usize != self.cfg.tiles {
            return fail(format!("programmed for {} tiles, array has {}", regs.tiles, self.cfg.tiles));
        }
        if g.ifm == 0 || g.ofm == 0 || g.ifm % LANES != 0 || g.ofm % LANES != 0 {
            return fail(format!("channel counts {}→{} must be nonzero multiples of {LANES}", g.ifm, g.ofm));
        }
        if g.conv.kh == 0 || g.conv.kw == 0 || g.conv.stride == 0 {
            return fail("kernel and stride must be positive".into());
        }
        let (oh, ow) = g.output_hw();
        if oh == 0 || ow == 0 {
            return fail(format!("kernel {}x{} does not fit input {}x{}", g.conv.kh, g.conv.kw, g.h, g.w));
        }
        if g.kind == LayerKind::Eltwise && (g.ifm != g.ofm || (oh, ow) != (g.h, g.w)) {
            return fail("eltwise layers keep their shape".into());
        }
        let p = &desc.pass;
        if p.group_count == 0 || p.first_group + p.group_count > g.ifm_groups() {
            return fail(format!(
                "pass groups {}..{} outside {} ifm groups",
                p.first_group,
                p.first_group + p.group_count,
                g.ifm_groups()
            ));
        }
        let mut expected = CoreRegs::from_layer(g, p, desc.rounding, self.cfg.tiles);
        expected.set_exponents(regs.act_exp, regs.wt_exp, regs.operand_exp);
        if expected != *regs {
            return fail("core registers disagree with the layer descriptor".into());
        }
        let plan: FetchPlan = layout::lsu_plan(g, p);
        for t in &plan.transfers {
            let programmed = desc.lsu_regs.get(t.buffer).bytes;
            if programmed != t.bytes {
                return fail(format!(
                    "LSU {} stream programmed for {programmed} bytes, layer moves {}",
                    t.buffer.name(),
                    t.bytes
                ));
            }
        }
        Ok(())
    }

    fn read_stream<'m>(desc: &LayerDescriptor, mem: &'m MemoryImage, b: Buffer) -> Result<&'m [u8], EngineError> {
        let e = desc.lsu_regs.get(b);
        mem.read(e.base, e.bytes)
    }

    fn run_conv(&mut self, desc: &LayerDescriptor, regs: &CoreRegs, mem: &mut MemoryImage) -> Result<LayerOutcome, EngineError> {
        let g = &desc.geom;
        let pass = &desc.pass;
        let (oh, ow) = g.output_hw();
        let (kh, kw) = (g.conv.kh, g.conv.kw);
        let kp_count = kh * kw;
        let ofm_groups = g.ofm_groups();
        let groups = pass.group_count;
        let out_shape = Shape3::new(g.ofm, oh, ow);

        // ISRAM: only this pass's groups are fetched.
        let pass_shape = Shape3::new(groups * LANES, g.h, g.w);
        let ifm = PackedIfm::from_bytes(pass_shape, regs.act_exp, Self::read_stream(desc, mem, Buffer::Ifm)?)?;

        // BSRAM distribute: per (og, group, kernel pixel, tile) lane masks.
        let weights = PackedWeights::from_bytes(g.ofm, g.ifm, kh, kw, Self::read_stream(desc, mem, Buffer::Weights)?)?;
        let mask_index = |og: usize, gr: usize, kp: usize, tile: usize| ((og * groups + gr) * kp_count + kp) * LANES + tile;
        let mut masks = vec![(0u64, 0u64); ofm_groups * groups * kp_count * LANES];
        for og in 0..ofm_groups {
            for gr in 0..groups {
                for lane in 0..LANES {
                    let i = (pass.first_group + gr) * LANES + lane;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = weights.word_index(og, i, ky, kx);
                            let word = weights.words[widx];
                            for tile in 0..LANES {
                                let code = (word >> (2 * tile)) as u8 & 0b11;
                                if code == 0b10 {
                                    return Err(LayoutError::InvalidTritCode { word: widx, lane: tile }.into());
                                }
                                if code & 1 == 1 {
                                    let m = &mut masks[mask_index(og, gr, ky * kw + kx, tile)];
                                    if code & 2 == 0 {
                                        m.0 |= 1 << lane;
                                    } else {
                                        m.1 |= 1 << lane;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        // SSRAM.
        let scales = PackedScales::from_bytes(g.ofm, kh, kw, g.ifm_groups(), Self::read_stream(desc, mem, Buffer::Scales)?)?;

        // Accumulator seed: stored partials or BBSRAM bias.
        let mut acc = AccTensor::zeros(out_shape, regs.act_exp, regs.wt_exp);
        if pass.accumulate_prior {
            let prior = PackedPartials::from_bytes(
                out_shape,
                regs.act_exp,
                regs.wt_exp,
                Self::read_stream(desc, mem, Buffer::PartialIn)?,
            )?;
            acc = layout::unpack_partials(&prior)?;
            acc.act_exp = regs.act_exp;
            acc.wt_exp = regs.wt_exp;
        } else {
            let bias = layout::PackedBias::from_bytes(g.ofm, Self::read_stream(desc, mem, Buffer::Bias)?)?;
            for o in 0..g.ofm {
                acc.data[o * oh * ow..(o + 1) * oh * ow].fill(bias.words[o]);
            }
        }

        let tile_order: Vec<usize> = self.opts.tile_order.clone().unwrap_or_else(|| (0..LANES).collect());
        let pes = self.cfg.pes_per_tile;
        let pe_order: Vec<usize> = self.opts.pe_order.clone().unwrap_or_else(|| (0..pes).collect());
        check_permutation(desc, "tile", &tile_order, LANES)?;
        check_permutation(desc, "PE", &pe_order, pes)?;

        let pixels = oh * ow;
        let batches = pixels.div_ceil(pes);
        let mut overflows = 0u64;
        let layer_idx = self.layers_run;
        let zero = [0u8; LANES];
        for og in 0..ofm_groups {
            for batch in 0..batches {
                for &tile in &tile_order {
                    let o = og * LANES + tile;
                    for &pe in &pe_order {
                        let pixel = batch * pes + pe;
                        if pixel >= pixels {
                            continue;
                        }
                        let (oy, ox) = (pixel / ow, pixel % ow);
                        let slot = (o * oh + oy) * ow + ox;
                        let mut a = acc.data[slot];
                        for ky in 0..kh {
                            let iy = (oy * g.conv.stride + ky) as isize - g.conv.pad as isize;
                            for kx in 0..kw {
                                let ix = (ox * g.conv.stride + kx) as isize - g.conv.pad as isize;
                                let inside = iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w;
                                let kp = ky * kw + kx;
                                for gr in 0..groups {
                                    let x = if inside {
                                        &ifm.words[ifm.word_index(gr, iy as usize, ix as usize)]
                                    } else {
                                        &zero
                                    };
                                    let x: &[i8; LANES] = bytes_as_i8(x);
                                    let (pos, neg) = masks[mask_index(og, gr, kp, tile)];
                                    let d = dot64_masks(x, pos, neg);
                                    let alpha = scales.words[scales.word_index(o, ky, kx, pass.first_group + gr)];
                                    let (next, wrapped) = accumulate(a, scale(d, alpha));
                                    if wrapped && self.opts.validation {
                                        overflows += 1;
                                    }
                                    a = next;
                                    if let Some(t) = self.trace.as_mut() {
                                        let cycle = ((og * batches + batch) * kp_count + kp) * groups + gr;
                                        writeln!(
                                            t,
                                            "layer={layer_idx} name={} op=mac tile={} pe={pe} cycle={cycle} ofm={o} pixel={pixel} kp={kp} group={} dot={d} alpha={alpha} acc={a}",
                                            desc.name,
                                            o % self.cfg.tiles,
                                            pass.first_group + gr
                                        )?;
                                    }
                                }
                            }
                        }
                        acc.data[slot] = a;
                    }
                }
            }
        }

        let mut outcome = LayerOutcome { overflow_events: overflows, ..Default::default() };
        if pass.store_partial {
            let packed = layout::pack_partials(&acc);
            let e = desc.lsu_regs.get(Buffer::PartialOut);
            mem.write(e.base, &packed.to_bytes())?;
        } else {
            let (out, shift) = dfp::downconvert_tensor(&acc, g.relu, desc.rounding)?;
            let e = desc.lsu_regs.get(Buffer::Ofm);
            mem.write(e.base, &layout::pack_ifm(&out).to_bytes())?;
            if let Some(t) = self.trace.as_mut() {
                writeln!(t, "layer={layer_idx} name={} op=downconvert shift={shift} exp={}", desc.name, out.exp)?;
            }
            outcome.shift = Some(shift);
            outcome.out_exp = Some(out.exp);
        }
        if self.opts.capture_acc {
            outcome.acc = Some(acc);
        }
        Ok(outcome)
    }

    fn run_eltwise(&mut self, desc: &LayerDescriptor, regs: &CoreRegs, mem: &mut MemoryImage) -> Result<LayerOutcome, EngineError> {
        let g = &desc.geom;
        let shape = Shape3::new(g.ifm, g.h, g.w);
        let a = PackedIfm::from_bytes(shape, regs.act_exp, Self::read_stream(desc, mem, Buffer::Ifm)?)?;
        let b = PackedIfm::from_bytes(shape, regs.operand_exp, Self::read_stream(desc, mem, Buffer::Eltwise)?)?;
        let out = eltwise_merge(&layout::unpack_ifm(&a)?, &layout::unpack_ifm(&b)?, g.relu)?;
        let e = desc.lsu_regs.get(Buffer::Ofm);
        mem.write(e.base, &layout::pack_ifm(&out).to_bytes())?;
        if let Some(t) = self.trace.as_mut() {
            writeln!(
                t,
                "layer={} name={} op=eltwise exp_a={} exp_b={} exp={}",
                self.layers_run, desc.name, a.exp, b.exp, out.exp
            )?;
        }
        Ok(LayerOutcome { shift: None, out_exp: Some(out.exp), overflow_events: 0, acc: None })
    }
}

fn check_permutation(desc: &LayerDescriptor, what: &str, order: &[usize], n: usize) -> Result<(), EngineError> {
    let mut seen = vec![false; n];
    let ok = order.len() == n
        && order.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true));
    if ok {
        Ok(())
    } else {
        Err(Engine::config_error(desc, format!("{what} order is not a permutation of 0..{n}")))
    }
}

#[inline]
fn bytes_as_i8(x: &[u8; LANES]) -> &[i8; LANES] {
    // SAFETY: u8 and i8 have identical size and alignment.
    unsafe { &*(x as *const [u8; LANES] as *const [i8; LANES]) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot64_examples() {
        assert_eq!(dot64(&[17; 64], &[Trit::Zero; 64]), 0);
        assert_eq!(dot64(&[-128; 64], &[Trit::Neg; 64]), 8192);
        assert_eq!(dot64(&[-128; 64], &[Trit::Pos; 64]), -8192);
        assert_eq!(dot64(&[127; 64], &[Trit::Pos; 64]), 8128);
        let mut x = [0i8; 64];
        x[0] = 5;
        let mut w = [Trit::Zero; 64];
        w[0] = Trit::Neg;
        assert_eq!(dot64(&x, &w), -5);
    }

    #[test]
    fn scale_examples() {
        assert_eq!(scale(1234, 0), 0);
        assert_eq!(scale(1, 1), 1);
        assert_eq!(scale(8192, 65535), 536_862_720);
        assert!(scale(8192, 65535) < 1 << 30);
        assert_eq!(scale(-8192, 65535), -536_862_720);
    }

    #[test]
    fn accumulate_examples() {
        assert_eq!(accumulate(0, 77), (77, false));
        assert_eq!(accumulate(i32::MAX, 1), (i32::MIN, true));
        assert_eq!(accumulate(100, -250), (-150, false));
    }

    #[test]
    fn eltwise_examples() {
        let s = Shape3::new(1, 1, 1);
        let a = DfpTensor::from_vec(s, vec![10], 3);
        assert_eq!(eltwise_merge(&a, &DfpTensor::zeros(s, 3), false).unwrap(), a);
        let b = DfpTensor::from_vec(s, vec![12], 1);
        let m = eltwise_merge(&a, &b, false).unwrap();
        assert_eq!((m.data, m.exp), (vec![13], 3));
        let n = DfpTensor::from_vec(s, vec![-5], 0);
        assert_eq!(eltwise_merge(&n, &DfpTensor::zeros(s, 0), true).unwrap().data, vec![0]);
        assert!(matches!(
            eltwise_merge(&a, &DfpTensor::zeros(Shape3::new(2, 1, 1), 0), false),
            Err(EngineError::Shape(..))
        ));
    }

    #[test]
    fn memory_bounds() {
        let mut m = MemoryImage::new(16);
        assert!(m.write(8, &[1; 8]).is_ok());
        assert!(m.write(9, &[1; 8]).is_err());
        assert!(m.read(u64::MAX, 2).is_err());
        assert_eq!(m.read(8, 2).unwrap(), &[1, 1]);
    }
}

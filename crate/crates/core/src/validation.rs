//! Seeded randomized engine-vs-oracle equivalence runs.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TileConfig;
use crate::dfp::{AccTensor, DfpTensor, RoundingMode};
use crate::engine::{Engine, EngineError, LayerOutcome, MemoryImage, RunOptions};
use crate::graph::alloc::{program_registers, BufferMap};
use crate::layout::{self, PackedIfm, PackedPartials};
use crate::oracle;
use crate::quantizer::FusedLayerWeights;
use crate::regs::{Buffer, LayerDescriptor, LayerGeometry, PassSpec, LANES};
use crate::tensor::{ConvParams, Shape3, Trit};

/// One randomized layer.
#[derive(Clone, Debug)]
pub struct LayerCase {
    pub index: usize,
    pub geom: LayerGeometry,
    pub x: DfpTensor,
    pub w: FusedLayerWeights,
    pub rounding: RoundingMode,
    pub groups_per_pass: usize,
    pub tile_order: Option<Vec<usize>>,
    pub pe_order: Option<Vec<usize>>,
}

impl fmt::Display for LayerCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = &self.geom;
        write!(
            f,
            "case {}: {}x{}/s{} p{} {}->{} on {}x{}{} [{}; {} group(s)/pass]",
            self.index,
            g.conv.kh,
            g.conv.kw,
            g.conv.stride,
            g.conv.pad,
            g.ifm,
            g.ofm,
            g.h,
            g.w,
            if g.relu { " relu" } else { "" },
            self.rounding,
            self.groups_per_pass
        )
    }
}

fn pick<T: Copy>(rng: &mut impl Rng, xs: &[T]) -> T {
    xs[rng.random_range(0..xs.len())]
}

/// Draw one case: ifm/ofm in {64, 128}, maps up to 8×8, kernels in {1, 3}
/// per axis, stride in {1, 2}.
pub fn random_case(rng: &mut impl Rng, index: usize) -> LayerCase {
    let ifm = pick(rng, &[64, 128]);
    let ofm = pick(rng, &[64, 128]);
    let kh: usize = pick(rng, &[1, 3]);
    let kw: usize = pick(rng, &[1, 3]);
    let stride = pick(rng, &[1, 2]);
    let pad: usize = if kh.max(kw) == 3 { pick(rng, &[0, 1]) } else { 0 };
    let min = kh.max(kw).saturating_sub(2 * pad).max(1);
    let h = rng.random_range(min..=8);
    let w = rng.random_range(min..=8);
    let relu = rng.random_bool(0.5);
    let geom = LayerGeometry::conv(ifm, ofm, h, w, ConvParams::new(kh, kw, stride, pad), relu);

    let sparsity = rng.random_range(0.0..0.9);
    let data = (0..ifm * h * w)
        .map(|_| if rng.random_bool(sparsity) { 0 } else { rng.random::<i8>() })
        .collect();
    let x = DfpTensor::from_vec(Shape3::new(ifm, h, w), data, rng.random_range(-12..=2));

    let mut layer = FusedLayerWeights::zeros(ofm, ifm, kh, kw, LANES);
    let zero_p = rng.random_range(0.0..0.95);
    let alpha_bits = rng.random_range(1..=16u32);
    for b in &mut layer.blocks {
        for t in &mut b.trits {
            *t = if rng.random_bool(zero_p) {
                Trit::Zero
            } else if rng.random_bool(0.5) {
                Trit::Pos
            } else {
                Trit::Neg
            };
        }
        b.alpha_q = rng.random_range(0..(1u32 << alpha_bits)) as u16;
    }
    let bias_span = 1i64 << (alpha_bits + 10).min(31);
    layer.bias = (0..ofm).map(|_| rng.random_range(-bias_span..bias_span) as i32).collect();
    layer.wt_exp = rng.random_range(-20..=-4);
    layer.bias_exp = x.exp as i16 + layer.wt_exp as i16;

    let order = |n: usize, rng: &mut dyn rand::RngCore| -> Option<Vec<usize>> {
        let mut v: Vec<usize> = (0..n).collect();
        if rng.random_bool(0.5) {
            v.shuffle(rng);
            Some(v)
        } else {
            None
        }
    };
    let tile_order = order(LANES, rng);
    let pe_order = order(4, rng);
    LayerCase {
        index,
        geom,
        x,
        w: layer,
        rounding: pick(rng, &RoundingMode::ALL),
        groups_per_pass: pick(rng, &[1, 2]),
        tile_order,
        pe_order,
    }
}

/// The deterministic case list for `seed`.
pub fn generate_cases(seed: u64, count: usize) -> Vec<LayerCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| random_case(&mut rng, i)).collect()
}

/// Result of one layer pushed through the engine.
#[derive(Clone, Debug)]
pub struct EngineRun {
    pub acc: AccTensor,
    pub out: DfpTensor,
    pub shift: u32,
    pub overflow_events: u64,
}

/// Pack `x` and `w` into a fresh memory image, program every pass of the
/// layer and run it.
pub fn run_on_engine(
    cfg: &TileConfig,
    geom: &LayerGeometry,
    x: &DfpTensor,
    w: &FusedLayerWeights,
    rounding: RoundingMode,
    groups_per_pass: usize,
    opts: RunOptions,
) -> Result<EngineRun, EngineError> {
    let (oh, ow) = geom.output_hw();
    let out_shape = Shape3::new(geom.ofm, oh, ow);
    let images = [
        layout::pack_ifm(x).to_bytes(),
        layout::pack_weights(w).to_bytes(),
        layout::pack_scales(w).to_bytes(),
        layout::pack_bias(w).to_bytes(),
    ];
    let partial_bytes = PackedPartials::word_count(out_shape) * 4;
    let out_bytes = PackedIfm::byte_len(out_shape);
    let mut bases = Vec::new();
    let mut cursor = 0usize;
    for len in images.iter().map(Vec::len).chain([partial_bytes, partial_bytes, out_bytes]) {
        bases.push(cursor as u64);
        cursor += len.div_ceil(64) * 64;
    }
    let mut mem = MemoryImage::new(cursor);
    for (img, &base) in images.iter().zip(&bases) {
        mem.write(base, img)?;
    }
    let mut engine = Engine::new(cfg.clone()).with_options(RunOptions { capture_acc: true, ..opts });
    let passes = PassSpec::split(geom, groups_per_pass);
    let group_bytes = (geom.h * geom.w * LANES) as u64;
    let mut last = LayerOutcome::default();
    let mut overflow = 0;
    for (k, pass) in passes.iter().enumerate() {
        let mut map = BufferMap::default();
        map.set(Buffer::Ifm, bases[0] + pass.first_group as u64 * group_bytes)
            .set(Buffer::Weights, bases[1])
            .set(Buffer::Scales, bases[2])
            .set(Buffer::Bias, bases[3])
            .set(Buffer::PartialIn, bases[4 + (k + 1) % 2])
            .set(Buffer::PartialOut, bases[4 + k % 2])
            .set(Buffer::Ofm, bases[6]);
        let (mut core, lsu) = program_registers(geom, pass, rounding, cfg.tiles, &map).map_err(|e| {
            EngineError::LayerConfig { layer: "validation".into(), msg: e.to_string() }
        })?;
        core.set_exponents(x.exp, w.wt_exp, 0);
        let desc = LayerDescriptor { name: format!("pass{k}"), geom: *geom, pass: *pass, rounding, core_regs: core, lsu_regs: lsu };
        last = engine.run_layer(&desc, &mut mem)?;
        overflow += last.overflow_events;
    }
    let out_exp = last.out_exp.expect("last pass down-converts");
    let packed = PackedIfm::from_bytes(out_shape, out_exp, mem.read(bases[6], out_bytes as u64)?)?;
    Ok(EngineRun {
        acc: last.acc.expect("accumulators were captured"),
        out: layout::unpack_ifm(&packed)?,
        shift: last.shift.expect("last pass down-converts"),
        overflow_events: overflow,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Accumulator,
    Shift,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Accumulator => "accumulator",
            Stage::Shift => "shift/exponent",
            Stage::Output => "8-bit output",
        })
    }
}

/// First point where engine and oracle disagree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub case: String,
    pub stage: Stage,
    pub ofm: usize,
    pub pixel: (usize, usize),
    pub engine: i64,
    pub oracle: i64,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} mismatch at ofm {} pixel ({}, {}): engine {} vs oracle {}",
            self.case, self.stage, self.ofm, self.pixel.0, self.pixel.1, self.engine, self.oracle
        )
    }
}

/// Deliberate engine-side faults for exercising the checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Run the engine with a different rounding mode than the oracle.
    Rounding,
}

fn first_difference<T: Copy + Into<i64> + PartialEq>(shape: Shape3, a: &[T], b: &[T]) -> Option<(usize, (usize, usize), i64, i64)> {
    let i = a.iter().zip(b).position(|(x, y)| x != y)?;
    let (o, rest) = (i / shape.pixels(), i % shape.pixels());
    Some((o, (rest / shape.width, rest % shape.width), a[i].into(), b[i].into()))
}

/// Compare engine and oracle on one case.
pub fn check_case(cfg: &TileConfig, case: &LayerCase, fault: Option<Fault>) -> Result<Option<Divergence>, EngineError> {
    let engine_rounding = match fault {
        None => case.rounding,
        Some(Fault::Rounding) => match case.rounding {
            RoundingMode::Truncate => RoundingMode::RoundHalfUp,
            _ => RoundingMode::Truncate,
        },
    };
    let opts = RunOptions {
        validation: true,
        capture_acc: true,
        tile_order: case.tile_order.clone(),
        pe_order: case.pe_order.clone().filter(|o| o.len() == cfg.pes_per_tile),
    };
    let run = run_on_engine(cfg, &case.geom, &case.x, &case.w, engine_rounding, case.groups_per_pass, opts)?;
    let ref_acc = oracle::ref_ternary_conv(&case.x, &case.w, &case.geom);
    let (ref_out, ref_shift) = oracle::ref_downconvert(&ref_acc, case.geom.relu, case.rounding);
    let name = case.to_string();
    let diverge = |stage, (ofm, pixel, engine, oracle)| Divergence { case: name.clone(), stage, ofm, pixel, engine, oracle };
    if let Some(d) = first_difference(ref_acc.shape, &run.acc.data, &ref_acc.data) {
        return Ok(Some(diverge(Stage::Accumulator, d)));
    }
    if run.shift != ref_shift || run.out.exp != ref_out.exp {
        return Ok(Some(diverge(Stage::Shift, (0, (0, 0), run.out.exp as i64, ref_out.exp as i64))));
    }
    Ok(first_difference(ref_out.shape, &run.out.data, &ref_out.data).map(|d| diverge(Stage::Output, d)))
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub cases: usize,
    pub divergences: Vec<Divergence>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.divergences.is_empty()
    }
}

/// Run `count` seeded cases and collect every divergence.
pub fn validate(cfg: &TileConfig, seed: u64, count: usize, fault: Option<Fault>) -> Result<ValidationReport, EngineError> {
    let mut report = ValidationReport { cases: count, divergences: Vec::new() };
    for case in generate_cases(seed, count) {
        if let Some(d) = check_case(cfg, &case, fault)? {
            report.divergences.push(d);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_cases_repeat() {
        let a = generate_cases(11, 20);
        let b = generate_cases(11, 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_string(), y.to_string());
            assert_eq!(x.x, y.x);
            assert_eq!(x.w, y.w);
        }
    }

    #[test]
    fn small_run_passes() {
        let r = validate(&TileConfig::arria10(), 5, 25, None).unwrap();
        assert!(r.passed(), "{:?}", r.divergences.first());
    }

    #[test]
    fn rounding_fault_detected() {
        let r = validate(&TileConfig::arria10(), 5, 25, Some(Fault::Rounding)).unwrap();
        assert!(!r.passed());
        assert_eq!(r.divergences[0].stage, Stage::Output);
    }

    #[test]
    fn multiply_form_matches_mask_form() {
        let case = generate_cases(3, 1).remove(0);
        let x: [i8; 64] = std::array::from_fn(|i| case.x.data[i * case.x.shape.pixels()]);
        let w: [Trit; 64] = std::array::from_fn(|i| case.w.blocks[0].trits[i]);
        let mul: i32 = x.iter().zip(&w).map(|(&a, t)| a as i32 * t.value() as i32).sum();
        assert_eq!(crate::engine::dot64(&x, &w) as i32, mul);
    }
}

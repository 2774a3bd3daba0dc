//! System-memory allocation and register programming.
//!
//! Activations live in fixed-size slots handed out by liveness: a chain of
//! layers ping-pongs between two slots and a skip-branch output keeps its
//! slot until the merge consumes it. Two 32-bit partial scratch regions
//! alternate between passes of multi-pass layers. Weights, scales and
//! biases of every accelerator layer sit in a persistent area after that.

use super::{GraphError, NetworkGraph, NodeOp};
use crate::dfp::RoundingMode;
use crate::layout::{self, PackedIfm, PackedPartials, PackedScales, PackedWeights, WEIGHT_WORD_BYTES};
use crate::regs::{Buffer, CoreRegs, LayerGeometry, LsuRegs, PassSpec, LANES};
use crate::tensor::Shape3;

const ALIGN: u64 = 64;

fn align(v: u64) -> u64 {
    v.div_ceil(ALIGN) * ALIGN
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Region {
    pub base: u64,
    pub bytes: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base + self.bytes
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.bytes > 0 && other.bytes > 0 && self.base < other.end() && other.base < self.end()
    }
}

/// Base address per LSU stream for one layer pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BufferMap {
    bases: [Option<u64>; 8],
}

impl BufferMap {
    pub fn set(&mut self, b: Buffer, base: u64) -> &mut Self {
        self.bases[b.index()] = Some(base);
        self
    }

    pub fn get(&self, b: Buffer) -> Option<u64> {
        self.bases[b.index()]
    }
}

/// Persistent regions of one accelerator convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WeightRegions {
    pub weights: Region,
    pub scales: Region,
    pub bias: Region,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryPlan {
    pub slot_bytes: u64,
    pub slots: Vec<Region>,
    /// Activation slot holding each node's output, if it lives in memory.
    pub node_slot: Vec<Option<usize>>,
    pub partials: [Region; 2],
    pub weights: Vec<Option<WeightRegions>>,
    pub total_bytes: u64,
}

/// Whether a node's output has to be in system memory: it is produced or
/// consumed by the accelerator.
fn in_memory(g: &NetworkGraph, idx: usize) -> bool {
    g.nodes[idx].op.is_accelerator() || g.consumers(idx).iter().any(|&c| g.nodes[c].op.is_accelerator())
}

impl MemoryPlan {
    pub fn new(g: &NetworkGraph, groups_per_pass: usize) -> Result<Self, GraphError> {
        let n = g.len();
        let resident: Vec<bool> = (0..n).map(|i| in_memory(g, i)).collect();
        let slot_bytes = (0..n)
            .filter(|&i| resident[i])
            .map(|i| PackedIfm::byte_len(g.nodes[i].shape) as u64)
            .max()
            .unwrap_or(0);
        let slot_bytes = align(slot_bytes);

        let order = g.schedule();
        let mut position = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            position[i] = pos;
        }
        let last_use: Vec<usize> = (0..n)
            .map(|i| g.consumers(i).iter().map(|&c| position[c]).max().unwrap_or(position[i]))
            .collect();

        let mut node_slot = vec![None; n];
        let mut busy: Vec<Option<usize>> = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            if resident[i] {
                let free = busy.iter().position(Option::is_none);
                let slot = match free {
                    Some(s) => s,
                    None => {
                        busy.push(None);
                        busy.len() - 1
                    }
                };
                busy[slot] = Some(i);
                node_slot[i] = Some(slot);
            }
            // Release after the output is placed so a layer never writes
            // over its own operands.
            for b in busy.iter_mut() {
                if let Some(holder) = *b {
                    if last_use[holder] <= pos && holder != i {
                        *b = None;
                    }
                }
            }
        }
        let slots: Vec<Region> =
            (0..busy.len()).map(|s| Region { base: s as u64 * slot_bytes, bytes: slot_bytes }).collect();
        let mut cursor = slots.len() as u64 * slot_bytes;

        let mut partial_bytes = 0;
        for i in g.accelerator_convs() {
            let geom = g.geometry(i).expect("conv nodes have geometry");
            if PassSpec::split(&geom, groups_per_pass).len() > 1 {
                partial_bytes = partial_bytes.max(PackedPartials::word_count(g.nodes[i].shape) as u64 * 4);
            }
        }
        let partial_bytes = align(partial_bytes);
        let partials = [
            Region { base: cursor, bytes: partial_bytes },
            Region { base: cursor + partial_bytes, bytes: partial_bytes },
        ];
        cursor += 2 * partial_bytes;

        let mut weights = vec![None; n];
        for i in g.accelerator_convs() {
            let geom = g.geometry(i).expect("conv nodes have geometry");
            let (kh, kw) = (geom.conv.kh, geom.conv.kw);
            let mut next = |bytes: u64| {
                let r = Region { base: cursor, bytes };
                cursor = align(cursor + bytes);
                r
            };
            let w = next((PackedWeights::word_count(geom.ofm, geom.ifm, kh, kw) * WEIGHT_WORD_BYTES) as u64);
            let s = next(PackedScales::word_count(geom.ofm, kh, kw, geom.ifm_groups()) as u64 * 2);
            let b = next(geom.ofm.div_ceil(LANES) as u64 * LANES as u64 * 4);
            weights[i] = Some(WeightRegions { weights: w, scales: s, bias: b });
        }
        Ok(Self { slot_bytes, slots, node_slot, partials, weights, total_bytes: cursor })
    }

    pub fn slot_region(&self, node: usize) -> Option<Region> {
        self.node_slot[node].map(|s| self.slots[s])
    }

    /// Stream bases for pass `k` of accelerator node `idx`.
    pub fn buffers(&self, g: &NetworkGraph, idx: usize, pass_index: usize, pass: &PassSpec) -> Result<BufferMap, GraphError> {
        let node = &g.nodes[idx];
        let missing = |what: &str| GraphError::Allocation(format!("`{}` has no {what} region", node.name));
        let slot_of = |p: usize| self.slot_region(p).ok_or_else(|| missing("operand"));
        let mut map = BufferMap::default();
        let out = self.slot_region(idx).ok_or_else(|| missing("output"))?;
        let src = slot_of(node.inputs[0])?;
        match node.op {
            NodeOp::Eltwise { .. } => {
                map.set(Buffer::Ifm, src.base);
                map.set(Buffer::Eltwise, slot_of(node.inputs[1])?.base);
                map.set(Buffer::Ofm, out.base);
            }
            NodeOp::Conv { .. } => {
                let s = g.input_shape(idx);
                let group_bytes = (s.height * s.width * LANES) as u64;
                map.set(Buffer::Ifm, src.base + pass.first_group as u64 * group_bytes);
                let w = self.weights[idx].ok_or_else(|| missing("weight"))?;
                map.set(Buffer::Weights, w.weights.base);
                map.set(Buffer::Scales, w.scales.base);
                map.set(Buffer::Bias, w.bias.base);
                map.set(Buffer::PartialIn, self.partials[(pass_index + 1) % 2].base);
                map.set(Buffer::PartialOut, self.partials[pass_index % 2].base);
                map.set(Buffer::Ofm, out.base);
            }
            _ => return Err(GraphError::Allocation(format!("`{}` is not an accelerator layer", node.name))),
        }
        Ok(map)
    }
}

/// Program the core and LSU registers of one layer pass.
///
/// Every stream the pass moves needs a base in `map`; the byte counts come
/// from the layer's fetch plan. Exponent fields are left at zero for the
/// driver to fill in at run time.
pub fn program_registers(
    geom: &LayerGeometry,
    pass: &PassSpec,
    rounding: RoundingMode,
    tiles: usize,
    map: &BufferMap,
) -> Result<(CoreRegs, LsuRegs), GraphError> {
    let plan = layout::lsu_plan(geom, pass);
    let mut lsu = LsuRegs::default();
    let mut regions: Vec<(Buffer, Region)> = Vec::new();
    for t in &plan.transfers {
        let base = map
            .get(t.buffer)
            .ok_or_else(|| GraphError::Allocation(format!("no region allocated for the {} stream", t.buffer.name())))?;
        let r = Region { base, bytes: t.bytes };
        if let Some((other, _)) = regions.iter().find(|(_, o)| o.overlaps(&r)) {
            return Err(GraphError::Allocation(format!(
                "{} region [{:#x}, {:#x}) overlaps the {} region",
                t.buffer.name(),
                r.base,
                r.end(),
                other.name()
            )));
        }
        regions.push((t.buffer, r));
        lsu.set(t.buffer, base, t.bytes);
    }
    Ok((CoreRegs::from_layer(geom, pass, rounding, tiles), lsu))
}

/// Byte size of the packed activation image of `shape`.
pub fn activation_bytes(shape: Shape3) -> u64 {
    PackedIfm::byte_len(shape) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::resnet::{build_resnet50, build_toy};
    use crate::tensor::ConvParams;

    #[test]
    fn consecutive_layers_share_buffers() {
        let g = build_toy();
        let plan = MemoryPlan::new(&g, 1).unwrap();
        for i in g.accelerator_convs() {
            let producer = g.nodes[i].inputs[0];
            let pass = PassSpec::full(&g.geometry(i).unwrap());
            let map = plan.buffers(&g, i, 0, &pass).unwrap();
            assert_eq!(map.get(Buffer::Ifm), plan.slot_region(producer).map(|r| r.base));
            if g.nodes[producer].op.is_accelerator() {
                let prev_pass = PassSpec::full(&g.geometry(producer).unwrap());
                let prev = plan.buffers(&g, producer, 0, &prev_pass).unwrap();
                assert_eq!(prev.get(Buffer::Ofm), map.get(Buffer::Ifm));
            }
        }
    }

    #[test]
    fn resnet_needs_three_slots() {
        let g = build_resnet50(1).unwrap();
        let plan = MemoryPlan::new(&g, 1).unwrap();
        assert_eq!(plan.slots.len(), 3);
        for e in g.eltwise_nodes() {
            let s = plan.node_slot[e];
            assert!(g.nodes[e].inputs.iter().all(|&p| plan.node_slot[p] != s));
        }
    }

    #[test]
    fn registers_match_plan_and_overlap_rejected() {
        let geom = LayerGeometry::conv(64, 64, 8, 8, ConvParams::square(3, 1), true);
        let pass = PassSpec::full(&geom);
        let mut map = BufferMap::default();
        map.set(Buffer::Ifm, 0).set(Buffer::Weights, 0x10000).set(Buffer::Scales, 0x20000);
        map.set(Buffer::Bias, 0x30000).set(Buffer::Ofm, 0x40000);
        let (core, lsu) = program_registers(&geom, &pass, RoundingMode::default(), 64, &map).unwrap();
        assert_eq!(core.ifm, 64);
        let plan = layout::lsu_plan(&geom, &pass);
        for t in &plan.transfers {
            assert_eq!(lsu.get(t.buffer).bytes, t.bytes);
        }
        map.set(Buffer::Weights, 0x100);
        assert!(matches!(
            program_registers(&geom, &pass, RoundingMode::default(), 64, &map),
            Err(GraphError::Allocation(_))
        ));
        let mut partial = BufferMap::default();
        partial.set(Buffer::Ifm, 0);
        assert!(program_registers(&geom, &pass, RoundingMode::default(), 64, &partial).is_err());
    }
}

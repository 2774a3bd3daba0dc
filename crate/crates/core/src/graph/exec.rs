//! Graph execution on the simulated accelerator, FP reference forward pass
//! and calibration-time quantization.

use std::io::Write;

use super::alloc::{program_registers, MemoryPlan};
use super::host::{self, HostWeights};
use super::{GraphError, HostOp, NetworkGraph, NodeOp};
use crate::config::TileConfig;
use crate::dfp::{DfpTensor, RoundingMode};
use crate::engine::{Engine, MemoryImage, RunOptions};
use crate::layout::{self, PackedIfm};
use crate::quantizer::{self, BnParams, FusedLayerWeights, DEFAULT_BLOCK_SIZE};
use crate::regs::{LayerDescriptor, PassSpec};
use crate::tensor::{self, ConvParams, FpTensor, FpWeights, Shape3};

/// Trained parameters of one weighted layer. FC layers use the same form
/// with an identity batch norm whose `gamma` carries the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FpLayer {
    pub weights: FpWeights,
    pub bn: BnParams,
}

/// An FP network: the graph plus parameters for every weighted node.
#[derive(Clone, Debug, PartialEq)]
pub struct FpModel {
    pub graph: NetworkGraph,
    pub layers: Vec<Option<FpLayer>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QuantLayer {
    Accel(FusedLayerWeights),
    Host(HostWeights),
}

/// A network quantized for the simulator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedModel {
    pub graph: NetworkGraph,
    pub block_size: usize,
    /// Indexed by node.
    pub layers: Vec<Option<QuantLayer>>,
}

/// Expected (ofm, ifm, kh, kw) of a weighted node.
pub fn weight_dims(g: &NetworkGraph, idx: usize) -> Option<(usize, usize, usize, usize)> {
    let s = g.input_shape(idx);
    match g.nodes[idx].op {
        NodeOp::Conv { ofm, conv, .. } | NodeOp::Host { op: HostOp::Conv { ofm, conv, .. } } => {
            Some((ofm, s.channels, conv.kh, conv.kw))
        }
        NodeOp::Host { op: HostOp::Fc { out } } => Some((out, s.len(), 1, 1)),
        _ => None,
    }
}

impl QuantizedModel {
    /// Model with every weight and bias zero.
    pub fn zeros(graph: &NetworkGraph) -> Self {
        let layers = (0..graph.len())
            .map(|i| {
                let (o, c, kh, kw) = weight_dims(graph, i)?;
                Some(match graph.nodes[i].op {
                    NodeOp::Conv { .. } => QuantLayer::Accel(FusedLayerWeights::zeros(o, c, kh, kw, DEFAULT_BLOCK_SIZE)),
                    _ => QuantLayer::Host(HostWeights::zeros(o, c, kh, kw)),
                })
            })
            .collect();
        Self { graph: graph.clone(), block_size: DEFAULT_BLOCK_SIZE, layers }
    }

    /// Check every weighted node has parameters of the right shape.
    pub fn check(&self) -> Result<(), GraphError> {
        if self.layers.len() != self.graph.len() {
            return Err(GraphError::Model(format!("{} layer slots for {} nodes", self.layers.len(), self.graph.len())));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let name = &self.graph.nodes[i].name;
            let dims = weight_dims(&self.graph, i);
            let have = match layer {
                None => None,
                Some(QuantLayer::Accel(w)) => Some((w.ofm, w.ifm, w.kh, w.kw)),
                Some(QuantLayer::Host(w)) => Some((w.ofm, w.ifm, w.kh, w.kw)),
            };
            if dims != have {
                return Err(GraphError::Model(format!("`{name}` expects weights {dims:?}, model has {have:?}")));
            }
            let kind_ok = match (layer, &self.graph.nodes[i].op) {
                (Some(QuantLayer::Accel(_)), NodeOp::Conv { .. }) | (Some(QuantLayer::Host(_)), NodeOp::Host { .. }) | (None, _) => true,
                _ => false,
            };
            if !kind_ok {
                return Err(GraphError::Model(format!("`{name}` has weights of the wrong kind")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExecOptions {
    pub rounding: RoundingMode,
    pub engine: RunOptions,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self { rounding: RoundingMode::RoundAndBias, engine: RunOptions { validation: true, ..Default::default() } }
    }
}

/// Everything one inference produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExecOutput {
    /// 8-bit output of every node that produces one.
    pub activations: Vec<Option<DfpTensor>>,
    /// FP-decoded FC outputs, when the graph has a head.
    pub logits: Option<Vec<f64>>,
    pub probs: Option<Vec<f64>>,
    /// Exponent of every 8-bit node output in schedule order.
    pub exponents: Vec<(String, i8)>,
    /// Down-conversion shift of every accelerator convolution.
    pub shifts: Vec<(String, u32)>,
    pub overflow_events: u64,
}

impl ExecOutput {
    /// Logits when present, otherwise the FP decode of the last 8-bit
    /// activation.
    pub fn scores(&self) -> Vec<f64> {
        if let Some(l) = &self.logits {
            return l.clone();
        }
        self.activations.iter().rev().flatten().next().map(|t| t.decode()).unwrap_or_default()
    }
}

/// A graph bound to a memory image and an engine.
pub struct Simulator {
    graph: NetworkGraph,
    cfg: TileConfig,
    plan: MemoryPlan,
    mem: MemoryImage,
    engine: Engine,
    rounding: RoundingMode,
}

impl Simulator {
    pub fn new(graph: &NetworkGraph, cfg: TileConfig, opts: ExecOptions) -> Result<Self, GraphError> {
        cfg.validate().map_err(|e| GraphError::Config(e.to_string()))?;
        let plan = MemoryPlan::new(graph, cfg.ifm_groups_per_pass)?;
        let mem = MemoryImage::new(plan.total_bytes as usize);
        let engine = Engine::new(cfg.clone()).with_options(opts.engine);
        Ok(Self { graph: graph.clone(), cfg, plan, mem, engine, rounding: opts.rounding })
    }

    pub fn with_trace(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.engine = Engine::new(self.cfg.clone())
            .with_options(self.engine.options_mut().clone())
            .with_trace(sink);
        self
    }

    pub fn plan(&self) -> &MemoryPlan {
        &self.plan
    }

    pub fn memory(&self) -> &MemoryImage {
        &self.mem
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    /// Quantize `input` to DFP and run the network.
    pub fn run(&mut self, model: &QuantizedModel, input: &FpTensor) -> Result<ExecOutput, GraphError> {
        self.run_dfp(model, quantizer::quantize_activations(input))
    }

    /// Run the network on an already quantized input.
    pub fn run_dfp(&mut self, model: &QuantizedModel, input: DfpTensor) -> Result<ExecOutput, GraphError> {
        if model.graph != self.graph {
            return Err(GraphError::Model("model was quantized for a different graph".into()));
        }
        model.check()?;
        let order = self.graph.schedule();
        self.graph.validate_schedule(&order)?;
        let mut state = RunState::new(self.graph.len());
        for &idx in &order {
            if let NodeOp::Input = self.graph.nodes[idx].op {
                if input.shape != self.graph.nodes[idx].shape {
                    return Err(GraphError::Model(format!(
                        "input is {} but the network expects {}",
                        input.shape, self.graph.nodes[idx].shape
                    )));
                }
            }
            self.step(idx, model.layers[idx].as_ref(), &input, &mut state)?;
        }
        self.engine.flush_trace().map_err(|e| GraphError::Engine { node: "trace".into(), source: e })?;
        Ok(state.out)
    }

    fn engine_err(&self, idx: usize) -> impl Fn(crate::engine::EngineError) -> GraphError {
        let node = self.graph.nodes[idx].name.clone();
        move |source| GraphError::Engine { node: node.clone(), source }
    }

    fn store_activation(&mut self, idx: usize, t: &DfpTensor) -> Result<(), GraphError> {
        if let Some(r) = self.plan.slot_region(idx) {
            let bytes = layout::pack_ifm(t).to_bytes();
            self.mem.write(r.base, &bytes).map_err(self.engine_err(idx))?;
        }
        Ok(())
    }

    fn load_activation(&self, idx: usize, exp: i8) -> Result<DfpTensor, GraphError> {
        let shape = self.graph.nodes[idx].shape;
        let r = self.plan.slot_region(idx).ok_or_else(|| GraphError::Allocation(format!("`{}` has no slot", self.graph.nodes[idx].name)))?;
        let bytes = self.mem.read(r.base, PackedIfm::byte_len(shape) as u64).map_err(self.engine_err(idx))?;
        Ok(layout::unpack_ifm(&PackedIfm::from_bytes(shape, exp, bytes)?)?)
    }

    fn operand(&self, state: &RunState, idx: usize, k: usize) -> Result<DfpTensor, GraphError> {
        let p = self.graph.nodes[idx].inputs[k];
        state.out.activations[p]
            .clone()
            .ok_or_else(|| GraphError::Model(format!("`{}` has no 8-bit output", self.graph.nodes[p].name)))
    }

    fn step(&mut self, idx: usize, layer: Option<&QuantLayer>, input: &DfpTensor, state: &mut RunState) -> Result<(), GraphError> {
        let node = self.graph.nodes[idx].clone();
        let result: Option<DfpTensor> = match node.op {
            NodeOp::Input => Some(input.clone()),
            NodeOp::Conv { .. } => {
                let Some(QuantLayer::Accel(w)) = layer else {
                    return Err(GraphError::Model(format!("`{}` has no ternary weights", node.name)));
                };
                Some(self.run_conv(idx, w, state)?)
            }
            NodeOp::Eltwise { .. } => Some(self.run_eltwise(idx, state)?),
            NodeOp::Host { op } => {
                let hw = || match layer {
                    Some(QuantLayer::Host(w)) => Ok(w),
                    _ => Err(GraphError::Model(format!("`{}` has no 8-bit weights", node.name))),
                };
                match op {
                    HostOp::Conv { conv, relu, .. } => {
                        Some(host::conv8x8(&self.operand(state, idx, 0)?, hw()?, conv, relu, self.rounding)?)
                    }
                    HostOp::MaxPool { k, stride, pad } => Some(host::maxpool(&self.operand(state, idx, 0)?, k, stride, pad)),
                    HostOp::AvgPool => Some(host::avgpool(&self.operand(state, idx, 0)?)),
                    HostOp::Fc { .. } => {
                        state.out.logits = Some(host::fc(&self.operand(state, idx, 0)?, hw()?));
                        None
                    }
                    HostOp::Softmax => {
                        let logits = state.out.logits.as_ref().ok_or_else(|| {
                            GraphError::Model(format!("`{}` needs an FC producer", node.name))
                        })?;
                        state.out.probs = Some(host::softmax(logits));
                        None
                    }
                }
            }
        };
        if let Some(t) = result {
            if !node.op.is_accelerator() {
                self.store_activation(idx, &t)?;
            }
            state.out.exponents.push((node.name.clone(), t.exp));
            state.out.activations[idx] = Some(t);
        }
        Ok(())
    }

    fn run_conv(&mut self, idx: usize, w: &FusedLayerWeights, state: &mut RunState) -> Result<DfpTensor, GraphError> {
        let name = self.graph.nodes[idx].name.clone();
        if w.block_size != DEFAULT_BLOCK_SIZE {
            return Err(GraphError::Model(format!(
                "`{name}` uses block size {}; the datapath sums {DEFAULT_BLOCK_SIZE}-lane groups",
                w.block_size
            )));
        }
        let geom = self.graph.geometry(idx).expect("conv nodes have geometry");
        let act_exp = self.operand(state, idx, 0)?.exp;
        let target = act_exp as i32 + w.wt_exp as i32;
        let regions = self.plan.weights[idx].ok_or_else(|| GraphError::Allocation(format!("`{name}` has no weight area")))?;
        let bias: Vec<i32> = w.bias.iter().map(|&b| host::realign_bias(b, w.bias_exp as i32, target)).collect();
        let err = self.engine_err(idx);
        self.mem.write(regions.weights.base, &layout::pack_weights(w).to_bytes()).map_err(&err)?;
        self.mem.write(regions.scales.base, &layout::pack_scales(w).to_bytes()).map_err(&err)?;
        self.mem.write(regions.bias.base, &layout::pack_bias_values(&bias).to_bytes()).map_err(&err)?;

        let passes = PassSpec::split(&geom, self.cfg.ifm_groups_per_pass);
        let mut out_exp = None;
        for (k, pass) in passes.iter().enumerate() {
            let map = self.plan.buffers(&self.graph, idx, k, pass)?;
            let (mut core, lsu) = program_registers(&geom, pass, self.rounding, self.cfg.tiles, &map)?;
            core.set_exponents(act_exp, w.wt_exp, 0);
            let desc = LayerDescriptor { name: name.clone(), geom, pass: *pass, rounding: self.rounding, core_regs: core, lsu_regs: lsu };
            let outcome = self.engine.run_layer(&desc, &mut self.mem).map_err(|source| GraphError::Engine { node: name.clone(), source })?;
            state.out.overflow_events += outcome.overflow_events;
            if let (Some(s), Some(e)) = (outcome.shift, outcome.out_exp) {
                state.out.shifts.push((name.clone(), s));
                out_exp = Some(e);
            }
        }
        let exp = out_exp.expect("the last pass always down-converts");
        self.load_activation(idx, exp)
    }

    fn run_eltwise(&mut self, idx: usize, state: &mut RunState) -> Result<DfpTensor, GraphError> {
        let name = self.graph.nodes[idx].name.clone();
        let geom = self.graph.geometry(idx).expect("eltwise nodes have geometry");
        let (a, b) = (self.operand(state, idx, 0)?, self.operand(state, idx, 1)?);
        let pass = PassSpec::full(&geom);
        let map = self.plan.buffers(&self.graph, idx, 0, &pass)?;
        let (mut core, lsu) = program_registers(&geom, &pass, self.rounding, self.cfg.tiles, &map)?;
        core.set_exponents(a.exp, 0, b.exp);
        let desc = LayerDescriptor { name: name.clone(), geom, pass, rounding: self.rounding, core_regs: core, lsu_regs: lsu };
        let outcome = self.engine.run_layer(&desc, &mut self.mem).map_err(|source| GraphError::Engine { node: name, source })?;
        self.load_activation(idx, outcome.out_exp.expect("eltwise reports its exponent"))
    }
}

struct RunState {
    out: ExecOutput,
}

impl RunState {
    fn new(n: usize) -> Self {
        Self { out: ExecOutput { activations: vec![None; n], ..Default::default() } }
    }
}

/// FP forward pass with batch norm fused. Returns the FP output of every
/// node (logits for FC, probabilities for softmax).
pub fn fp_forward(model: &FpModel, input: &FpTensor) -> Result<Vec<FpTensor>, GraphError> {
    let g = &model.graph;
    let mut outs: Vec<FpTensor> = Vec::with_capacity(g.len());
    for (idx, node) in g.nodes.iter().enumerate() {
        let src = || outs[node.inputs[0]].clone();
        let layer = || {
            model.layers[idx].as_ref().ok_or_else(|| GraphError::Model(format!("`{}` has no FP parameters", node.name)))
        };
        let conv = |x: &FpTensor, l: &FpLayer, p: ConvParams, relu: bool| -> Result<FpTensor, GraphError> {
            let (w, bias) = fused_fp(l)?;
            let y = tensor::conv2d(x, &w, l.weights.ofm, Some(&bias), p);
            let (oh, ow) = p.output_hw(x.shape.height, x.shape.width);
            let data = y.into_iter().map(|v| if relu { v.max(0.0) } else { v } as f32).collect();
            Ok(FpTensor::from_vec(Shape3::new(l.weights.ofm, oh, ow), data))
        };
        let out = match node.op {
            NodeOp::Input => input.clone(),
            NodeOp::Conv { conv: p, relu, .. } | NodeOp::Host { op: HostOp::Conv { conv: p, relu, .. } } => {
                conv(&src(), layer()?, p, relu)?
            }
            NodeOp::Eltwise { relu } => {
                let (a, b) = (&outs[node.inputs[0]], &outs[node.inputs[1]]);
                let data = a.data.iter().zip(&b.data).map(|(x, y)| if relu { (x + y).max(0.0) } else { x + y }).collect();
                FpTensor::from_vec(a.shape, data)
            }
            NodeOp::Host { op: HostOp::MaxPool { k, stride, pad } } => {
                let x = src();
                let (oh, ow) = ConvParams::new(k, k, stride, pad).output_hw(x.shape.height, x.shape.width);
                let shape = Shape3::new(x.shape.channels, oh, ow);
                let mut data = vec![f32::NEG_INFINITY; shape.len()];
                for c in 0..shape.channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.shape.height && (ix as usize) < x.shape.width {
                                        let v = x.get(c, iy as usize, ix as usize);
                                        let o = &mut data[shape.index(c, oy, ox)];
                                        *o = o.max(v);
                                    }
                                }
                            }
                        }
                    }
                }
                FpTensor::from_vec(shape, data)
            }
            NodeOp::Host { op: HostOp::AvgPool } => {
                let x = src();
                let n = x.shape.pixels();
                let data = x.data.chunks(n).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / n as f64).map(|v| v as f32).collect();
                FpTensor::from_vec(Shape3::new(x.shape.channels, 1, 1), data)
            }
            NodeOp::Host { op: HostOp::Fc { out } } => {
                let x = src();
                let flat = FpTensor::from_vec(Shape3::new(x.shape.len(), 1, 1), x.data.clone());
                let l = layer()?;
                let mut y = conv(&flat, l, ConvParams::square(1, 1), false)?;
                y.shape = Shape3::new(out, 1, 1);
                y
            }
            NodeOp::Host { op: HostOp::Softmax } => {
                let x = src();
                let p = host::softmax(&x.data.iter().map(|&v| v as f64).collect::<Vec<_>>());
                FpTensor::from_vec(x.shape, p.into_iter().map(|v| v as f32).collect())
            }
        };
        outs.push(out);
    }
    Ok(outs)
}

/// Fused FP weights and biases of a layer.
fn fused_fp(l: &FpLayer) -> Result<(Vec<f64>, Vec<f64>), GraphError> {
    let mut w = Vec::with_capacity(l.weights.len());
    let mut b = Vec::with_capacity(l.weights.ofm);
    for o in 0..l.weights.ofm {
        w.extend(quantizer::fuse_bn(l.weights.ofm_slice(o), &l.bn, o)?);
        b.push(quantizer::fused_bias(&l.bn, o)?);
    }
    Ok((w, b))
}

/// Quantize an FP model.
///
/// Each layer's bias is quantized for the activation exponent its input has
/// on the calibration tensor in the FP forward pass; at run time the driver
/// re-aligns biases to the exponents the data actually produces.
pub fn quantize_model(fp: &FpModel, calibration: &FpTensor, block_size: usize) -> Result<QuantizedModel, GraphError> {
    let g = &fp.graph;
    if fp.layers.len() != g.len() {
        return Err(GraphError::Model(format!("{} parameter slots for {} nodes", fp.layers.len(), g.len())));
    }
    let input = g.nodes.iter().position(|n| matches!(n.op, NodeOp::Input)).expect("validated graphs have an input");
    if calibration.shape != g.nodes[input].shape {
        return Err(GraphError::Model(format!(
            "calibration tensor is {} but the network expects {}",
            calibration.shape, g.nodes[input].shape
        )));
    }
    let acts = fp_forward(fp, calibration)?;
    let mut layers = Vec::with_capacity(g.len());
    for (idx, node) in g.nodes.iter().enumerate() {
        let Some(dims) = weight_dims(g, idx) else {
            layers.push(None);
            continue;
        };
        let l = fp.layers[idx].as_ref().ok_or_else(|| GraphError::Model(format!("`{}` has no FP parameters", node.name)))?;
        let w = &l.weights;
        if (w.ofm, w.ifm, w.kh, w.kw) != dims {
            return Err(GraphError::Model(format!("`{}` weights are {:?}, graph needs {dims:?}", node.name, (w.ofm, w.ifm, w.kh, w.kw))));
        }
        let x = &acts[node.inputs[0]];
        let (_, act_exp) = quantizer::quantize_dfp8(&x.data.iter().map(|&v| v as f64).collect::<Vec<_>>());
        layers.push(Some(match node.op {
            NodeOp::Conv { .. } => QuantLayer::Accel(quantizer::fgq_quantize_layer(w, &l.bn, block_size, act_exp)?),
            _ => QuantLayer::Host(quantize_host(l, act_exp)?),
        }));
    }
    Ok(QuantizedModel { graph: g.clone(), block_size, layers })
}

/// 8-bit quantization of a host layer with batch norm fused.
pub fn quantize_host(l: &FpLayer, act_exp: i8) -> Result<HostWeights, GraphError> {
    let (w, b) = fused_fp(l)?;
    let (weights, wt_exp) = quantizer::quantize_dfp8(&w);
    let bias_exp = act_exp as i16 + wt_exp as i16;
    let bias = b.iter().map(|&v| quantizer::quantize_bias(v, bias_exp as i32)).collect();
    let fw = &l.weights;
    Ok(HostWeights { ofm: fw.ofm, ifm: fw.ifm, kh: fw.kh, kw: fw.kw, weights, wt_exp, bias, bias_exp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::resnet::{build_toy, ResNetSpec};

    #[test]
    fn zero_model_runs_and_is_deterministic() {
        let g = build_toy();
        let model = QuantizedModel::zeros(&g);
        let x = FpTensor::from_vec(Shape3::new(64, 8, 8), (0..4096).map(|i| ((i % 37) as f32 - 18.0) / 7.0).collect());
        let mut sim = Simulator::new(&g, TileConfig::arria10(), ExecOptions::default()).unwrap();
        let a = sim.run(&model, &x).unwrap();
        let b = sim.run(&model, &x).unwrap();
        assert_eq!(a, b);
        // Zero weights: a's branch outputs vanish, the last merge is relu(skip + 0).
        let first = g.find("res2a").unwrap();
        assert!(a.activations[first].as_ref().unwrap().data.iter().all(|&v| v == 0));
    }

    #[test]
    fn zero_model_with_head_gives_uniform_logits() {
        let mut spec = ResNetSpec::toy();
        spec.head = true;
        spec.classes = 5;
        let g = spec.build().unwrap();
        let model = QuantizedModel::zeros(&g);
        let mut sim = Simulator::new(&g, TileConfig::arria10(), ExecOptions::default()).unwrap();
        let x = FpTensor::from_vec(Shape3::new(64, 8, 8), vec![0.5; 4096]);
        let out = sim.run(&model, &x).unwrap();
        let logits = out.logits.unwrap();
        assert!(logits.iter().all(|&l| l == logits[0]));
        assert!(out.probs.unwrap().iter().all(|&p| (p - 0.2).abs() < 1e-12));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let g = build_toy();
        let model = QuantizedModel::zeros(&g);
        let mut sim = Simulator::new(&g, TileConfig::arria10(), ExecOptions::default()).unwrap();
        let x = FpTensor::zeros(Shape3::new(64, 4, 4));
        assert!(matches!(sim.run(&model, &x), Err(GraphError::Model(_))));
    }
}

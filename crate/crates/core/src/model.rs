//! On-disk formats: FP model blobs, quantized model blobs and FP tensor
//! files, plus seeded synthetic models for desk-scale runs.
//!
//! All integers are little-endian. See `docs/formats.md` for byte maps.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{FpLayer, FpModel, GraphError, HostOp, HostWeights, NetworkGraph, NodeOp, QuantLayer, QuantizedModel};
use crate::graph::exec::weight_dims;
use crate::layout::{self, LayoutError, PackedBias, PackedScales, PackedWeights};
use crate::quantizer::BnParams;
use crate::tensor::{FpTensor, FpWeights, Shape3};

pub const FP_MAGIC: [u8; 4] = *b"TSFP";
pub const QUANT_MAGIC: [u8; 4] = *b"TSQM";
pub const TENSOR_MAGIC: [u8; 4] = *b"TSTN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a {expected} file (magic {found:?})")]
    BadMagic { expected: &'static str, found: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(ModelError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: [u8; 4], what: &'static str) -> Result<(), ModelError> {
        let m: [u8; 4] = self.take(4)?.try_into().unwrap();
        if m != magic {
            return Err(ModelError::BadMagic { expected: what, found: m });
        }
        match self.u32()? {
            FORMAT_VERSION => Ok(()),
            v => Err(ModelError::Version(v)),
        }
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

// ---- FP model blob ----

pub fn encode_fp_model(m: &FpModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&FP_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    let json = m.graph.to_json();
    put_u32(&mut out, json.len());
    out.extend_from_slice(json.as_bytes());
    let layers: Vec<(usize, &FpLayer)> = m.layers.iter().enumerate().filter_map(|(i, l)| l.as_ref().map(|l| (i, l))).collect();
    put_u32(&mut out, layers.len());
    let mut payload = Vec::new();
    for (i, l) in &layers {
        let name = &m.graph.nodes[*i].name;
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        let w = &l.weights;
        for d in [w.ofm, w.ifm, w.kh, w.kw] {
            put_u32(&mut out, d);
        }
        let count = w.data.len() + 4 * w.ofm;
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for v in w.data.iter().chain(&l.bn.beta).chain(&l.bn.gamma).chain(&l.bn.mu).chain(&l.bn.sigma) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&payload);
    out
}

pub fn decode_fp_model(bytes: &[u8]) -> Result<FpModel, ModelError> {
    let mut r = Reader::new(bytes);
    r.header(FP_MAGIC, "FP model")?;
    let json_len = r.u32()? as usize;
    let json = std::str::from_utf8(r.take(json_len)?).map_err(|e| ModelError::Malformed(e.to_string()))?;
    let graph = NetworkGraph::from_json(json)?;
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| ModelError::Malformed(e.to_string()))?;
        let dims = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let (offset, n) = (r.u64()? as usize, r.u64()? as usize);
        table.push((name, dims, offset, n));
    }
    let payload = r.rest();
    let mut layers = vec![None; graph.len()];
    for (name, (ofm, ifm, kh, kw), offset, n) in table {
        let idx = graph.find(&name).ok_or_else(|| ModelError::Malformed(format!("layer `{name}` is not in the network")))?;
        if weight_dims(&graph, idx) != Some((ofm, ifm, kh, kw)) {
            return Err(ModelError::Malformed(format!("layer `{name}` has dims {:?}", (ofm, ifm, kh, kw))));
        }
        let wlen = ofm * ifm * kh * kw;
        if n != wlen + 4 * ofm {
            return Err(ModelError::Malformed(format!("layer `{name}` holds {n} values, expected {}", wlen + 4 * ofm)));
        }
        let end = offset.checked_add(n * 4).filter(|&e| e <= payload.len()).ok_or(ModelError::Truncated(bytes.len()))?;
        let v = f32s(&payload[offset..end]);
        let bn = BnParams {
            beta: v[wlen..wlen + ofm].to_vec(),
            gamma: v[wlen + ofm..wlen + 2 * ofm].to_vec(),
            mu: v[wlen + 2 * ofm..wlen + 3 * ofm].to_vec(),
            sigma: v[wlen + 3 * ofm..].to_vec(),
        };
        layers[idx] = Some(FpLayer { weights: FpWeights::from_vec(ofm, ifm, kh, kw, v[..wlen].to_vec()), bn });
    }
    for i in 0..graph.len() {
        if graph.nodes[i].op.has_weights() && layers[i].is_none() {
            return Err(ModelError::Malformed(format!("no parameters for `{}`", graph.nodes[i].name)));
        }
    }
    Ok(FpModel { graph, layers })
}

// ---- quantized model blob ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerFormat {
    Ternary,
    Int8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub node: String,
    pub format: LayerFormat,
    pub ofm: usize,
    pub ifm: usize,
    pub kh: usize,
    pub kw: usize,
    pub wt_exp: i8,
    pub bias_exp: i16,
    pub weights: Section,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<Section>,
    pub bias: Section,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub network: serde_json::Value,
    pub block_size: usize,
    pub layers: Vec<LayerManifest>,
}

pub fn quant_manifest(bytes: &[u8]) -> Result<Manifest, ModelError> {
    let mut r = Reader::new(bytes);
    r.header(QUANT_MAGIC, "quantized model")?;
    let len = r.u32()? as usize;
    Ok(serde_json::from_slice(r.take(len)?)?)
}

pub fn encode_quantized(m: &QuantizedModel) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut push = |data: Vec<u8>| {
        let s = Section { offset: payload.len() as u64, bytes: data.len() as u64 };
        payload.extend_from_slice(&data);
        s
    };
    let mut layers = Vec::new();
    for (i, l) in m.layers.iter().enumerate() {
        let node = m.graph.nodes[i].name.clone();
        match l {
            None => {}
            Some(QuantLayer::Accel(w)) => layers.push(LayerManifest {
                node,
                format: LayerFormat::Ternary,
                ofm: w.ofm,
                ifm: w.ifm,
                kh: w.kh,
                kw: w.kw,
                wt_exp: w.wt_exp,
                bias_exp: w.bias_exp,
                weights: push(layout::pack_weights(w).to_bytes()),
                scales: Some(push(layout::pack_scales(w).to_bytes())),
                bias: push(layout::pack_bias(w).to_bytes()),
            }),
            Some(QuantLayer::Host(w)) => layers.push(LayerManifest {
                node,
                format: LayerFormat::Int8,
                ofm: w.ofm,
                ifm: w.ifm,
                kh: w.kh,
                kw: w.kw,
                wt_exp: w.wt_exp,
                bias_exp: w.bias_exp,
                weights: push(w.weights.iter().map(|&v| v as u8).collect()),
                scales: None,
                bias: push(w.bias.iter().flat_map(|b| b.to_le_bytes()).collect()),
            }),
        }
    }
    let network: serde_json::Value = serde_json::from_str(&m.graph.to_json()).expect("graph JSON parses");
    let manifest = Manifest { network, block_size: m.block_size, layers };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(&QUANT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedModel, ModelError> {
    let mut r = Reader::new(bytes);
    r.header(QUANT_MAGIC, "quantized model")?;
    let len = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)?;
    let payload = r.rest();
    let graph = NetworkGraph::from_json(&manifest.network.to_string())?;
    let section = |s: &Section| -> Result<&[u8], ModelError> {
        let start = s.offset as usize;
        let end = start.checked_add(s.bytes as usize).filter(|&e| e <= payload.len()).ok_or(ModelError::Truncated(bytes.len()))?;
        Ok(&payload[start..end])
    };
    let mut layers = vec![None; graph.len()];
    for l in &manifest.layers {
        let idx = graph.find(&l.node).ok_or_else(|| ModelError::Malformed(format!("layer `{}` is not in the network", l.node)))?;
        let layer = match l.format {
            LayerFormat::Ternary => {
                let n = manifest.block_size;
                if n == 0 {
                    return Err(ModelError::Malformed("block size 0".into()));
                }
                let scales = l.scales.as_ref().ok_or_else(|| ModelError::Malformed(format!("`{}` has no scales", l.node)))?;
                let w = PackedWeights::from_bytes(l.ofm, l.ifm, l.kh, l.kw, section(&l.weights)?)?;
                let s = PackedScales::from_bytes(l.ofm, l.kh, l.kw, l.ifm.div_ceil(n), section(scales)?)?;
                let b = PackedBias::from_bytes(l.ofm, section(&l.bias)?)?;
                QuantLayer::Accel(layout::unpack_layer(&w, &s, &b, n, l.wt_exp, l.bias_exp)?)
            }
            LayerFormat::Int8 => {
                let wb = section(&l.weights)?;
                let bb = section(&l.bias)?;
                if wb.len() != l.ofm * l.ifm * l.kh * l.kw || bb.len() != 4 * l.ofm {
                    return Err(ModelError::Malformed(format!("`{}` sections do not match its dims", l.node)));
                }
                QuantLayer::Host(HostWeights {
                    ofm: l.ofm,
                    ifm: l.ifm,
                    kh: l.kh,
                    kw: l.kw,
                    weights: wb.iter().map(|&v| v as i8).collect(),
                    wt_exp: l.wt_exp,
                    bias: bb.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                    bias_exp: l.bias_exp,
                })
            }
        };
        layers[idx] = Some(layer);
    }
    let m = QuantizedModel { graph, block_size: manifest.block_size, layers };
    m.check()?;
    Ok(m)
}

// ---- tensors ----

pub fn encode_tensor(t: &FpTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * t.data.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    for d in [t.shape.channels, t.shape.height, t.shape.width] {
        put_u32(&mut out, d);
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<FpTensor, ModelError> {
    let mut r = Reader::new(bytes);
    r.header(TENSOR_MAGIC, "tensor")?;
    let shape = Shape3::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let data = r.take(shape.len() * 4)?;
    if !r.rest().is_empty() {
        return Err(ModelError::Malformed(format!("{} trailing bytes after tensor data", r.rest().len())));
    }
    Ok(FpTensor::from_vec(shape, f32s(data)))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, ModelError> {
    Ok(std::fs::read(path)?)
}

// ---- synthetic models ----

/// Random FP parameters: He-scaled Gaussian weights and mildly perturbed
/// batch-norm statistics, reproducible from `seed`.
pub fn synth_fp_model(graph: &NetworkGraph, seed: u64) -> FpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..graph.len())
        .map(|i| {
            let (ofm, ifm, kh, kw) = weight_dims(graph, i)?;
            let fan_in = (ifm * kh * kw) as f32;
            let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
            let data = (0..ofm * ifm * kh * kw).map(|_| normal.sample(&mut rng)).collect();
            let bn = if matches!(graph.nodes[i].op, NodeOp::Host { op: HostOp::Fc { .. } }) {
                let mut bn = BnParams::identity(ofm);
                bn.gamma = (0..ofm).map(|_| rng.random_range(-0.1..0.1)).collect();
                bn
            } else {
                let u = Uniform::new(0.5f32, 1.5).expect("valid range");
                let small = Normal::new(0.0f32, 0.1).expect("positive std");
                BnParams {
                    beta: (0..ofm).map(|_| u.sample(&mut rng)).collect(),
                    gamma: (0..ofm).map(|_| small.sample(&mut rng)).collect(),
                    mu: (0..ofm).map(|_| small.sample(&mut rng)).collect(),
                    sigma: (0..ofm).map(|_| u.sample(&mut rng)).collect(),
                }
            };
            Some(FpLayer { weights: FpWeights::from_vec(ofm, ifm, kh, kw, data), bn })
        })
        .collect();
    FpModel { graph: graph.clone(), layers }
}

/// Standard-normal input tensor.
pub fn synth_tensor(shape: Shape3, seed: u64) -> FpTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0f32, 1.0).expect("positive std");
    FpTensor::from_vec(shape, (0..shape.len()).map(|_| n.sample(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_toy, quantize_model};

    #[test]
    fn tensor_roundtrip_and_errors() {
        let t = synth_tensor(Shape3::new(3, 4, 5), 1);
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"TSTN");
        assert_eq!(decode_tensor(&b).unwrap(), t);
        assert!(matches!(decode_tensor(&b[..b.len() - 1]), Err(ModelError::Truncated(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(ModelError::BadMagic { .. })));
        let mut v2 = b;
        v2[4] = 2;
        assert!(matches!(decode_tensor(&v2), Err(ModelError::Version(2))));
    }

    #[test]
    fn model_roundtrips() {
        let g = build_toy();
        let fp = synth_fp_model(&g, 7);
        let back = decode_fp_model(&encode_fp_model(&fp)).unwrap();
        assert_eq!(back, fp);
        let calib = synth_tensor(Shape3::new(64, 8, 8), 8);
        let q = quantize_model(&fp, &calib, 64).unwrap();
        let blob = encode_quantized(&q);
        assert_eq!(decode_quantized(&blob).unwrap(), q);
        let m = quant_manifest(&blob).unwrap();
        assert_eq!(m.layers.len(), g.accelerator_convs().len());
        assert!(decode_fp_model(&encode_fp_model(&fp)[..40]).is_err());
    }

    #[test]
    fn synth_is_seeded() {
        let g = build_toy();
        assert_eq!(synth_fp_model(&g, 3), synth_fp_model(&g, 3));
        assert_ne!(synth_fp_model(&g, 3), synth_fp_model(&g, 4));
    }
}

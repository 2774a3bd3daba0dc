//! ResNet bottleneck topologies.

use super::{GraphError, HostOp, NetworkGraph, Node, NodeOp};
use crate::regs::LANES;
use crate::tensor::{ConvParams, Shape3};

/// Parameters of a bottleneck ResNet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResNetSpec {
    pub name: String,
    /// Divisor applied to every channel count (rounded up to 64, min 64).
    pub channel_scale: usize,
    /// Input resolution (square).
    pub input_hw: usize,
    /// Bottleneck widths per stage.
    pub widths: Vec<usize>,
    /// Modules per stage.
    pub blocks: Vec<usize>,
    /// Channels entering the first module when there is no stem.
    pub input_channels: usize,
    /// Output expansion of a module relative to its width.
    pub expansion: usize,
    /// Host conv1 + pool1 in front of the first module.
    pub stem: bool,
    /// Host pool5 + FC + softmax after the last module.
    pub head: bool,
    pub classes: usize,
}

impl ResNetSpec {
    pub fn resnet50(channel_scale: usize) -> Self {
        Self {
            name: if channel_scale == 1 { "resnet50".into() } else { format!("resnet50-s{channel_scale}") },
            channel_scale,
            input_hw: 224,
            widths: vec![64, 128, 256, 512],
            blocks: vec![3, 4, 6, 3],
            input_channels: 3,
            expansion: 4,
            stem: true,
            head: true,
            classes: 1000,
        }
    }

    /// Two modules on an 8×8 map: 64 → 128 with a projection, then an
    /// identity module at 128 channels.
    pub fn toy() -> Self {
        Self {
            name: "toy2".into(),
            channel_scale: 1,
            input_hw: 8,
            widths: vec![64],
            blocks: vec![2],
            input_channels: 64,
            expansion: 2,
            stem: false,
            head: false,
            classes: 10,
        }
    }

    fn channels(&self, c: usize) -> usize {
        (c / self.channel_scale).max(LANES).div_ceil(LANES) * LANES
    }

    pub fn build(&self) -> Result<NetworkGraph, GraphError> {
        if ![1, 2, 4].contains(&self.channel_scale) {
            return Err(GraphError::Config(format!("channel scale must be 1, 2 or 4, got {}", self.channel_scale)));
        }
        if self.widths.len() != self.blocks.len() || self.widths.is_empty() {
            return Err(GraphError::Config("widths and blocks must be non-empty and of equal length".into()));
        }
        let mut b = Builder { nodes: Vec::new() };
        let mut cur;
        if self.stem {
            let input = Shape3::new(self.input_channels, self.input_hw, self.input_hw);
            cur = b.push("data", NodeOp::Input, vec![], input)?;
            let c1 = self.channels(64);
            cur = b.push(
                "conv1",
                NodeOp::Host { op: HostOp::Conv { ofm: c1, conv: ConvParams::new(7, 7, 2, 3), relu: true } },
                vec![cur],
                Shape3::new(c1, 0, 0),
            )?;
            cur = b.push("pool1", NodeOp::Host { op: HostOp::MaxPool { k: 3, stride: 2, pad: 1 } }, vec![cur], Shape3::new(c1, 0, 0))?;
        } else {
            let c = self.channels(self.input_channels);
            cur = b.push("data", NodeOp::Input, vec![], Shape3::new(c, self.input_hw, self.input_hw))?;
        }

        for (stage, (&width, &count)) in self.widths.iter().zip(&self.blocks).enumerate() {
            let mid = self.channels(width);
            let out = self.channels(width * self.expansion);
            for block in 0..count {
                let stride = if block == 0 && stage > 0 { 2 } else { 1 };
                let tag = format!("res{}{}", stage + 2, block_letter(block));
                let in_ch = b.nodes[cur].shape.channels;
                let skip = if block == 0 && (in_ch != out || stride != 1) {
                    b.conv(&format!("{tag}_branch1"), cur, out, ConvParams::new(1, 1, stride, 0), false)?
                } else {
                    cur
                };
                let r = b.conv(&format!("{tag}_branch2a"), cur, mid, ConvParams::new(1, 1, stride, 0), true)?;
                let r = b.conv(&format!("{tag}_branch2b"), r, mid, ConvParams::square(3, 1), true)?;
                let r = b.conv(&format!("{tag}_branch2c"), r, out, ConvParams::new(1, 1, 1, 0), false)?;
                let s = b.nodes[r].shape;
                cur = b.push(&tag, NodeOp::Eltwise { relu: true }, vec![skip, r], s)?;
            }
        }

        if self.head {
            let c = b.nodes[cur].shape.channels;
            cur = b.push("pool5", NodeOp::Host { op: HostOp::AvgPool }, vec![cur], Shape3::new(c, 1, 1))?;
            cur = b.push("fc", NodeOp::Host { op: HostOp::Fc { out: self.classes } }, vec![cur], Shape3::new(self.classes, 1, 1))?;
            b.push("prob", NodeOp::Host { op: HostOp::Softmax }, vec![cur], Shape3::new(self.classes, 1, 1))?;
        }
        NetworkGraph::new(self.name.clone(), b.nodes)
    }
}

fn block_letter(i: usize) -> char {
    (b'a' + i as u8) as char
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    /// Appends a node. Zero spatial dims in `shape` are filled in from the
    /// producer and the op.
    fn push(&mut self, name: &str, op: NodeOp, inputs: Vec<usize>, shape: Shape3) -> Result<usize, GraphError> {
        let shape = if shape.height == 0 {
            let s = self.nodes[inputs[0]].shape;
            let c = match op {
                NodeOp::Host { op: HostOp::Conv { conv, .. } } => conv,
                NodeOp::Host { op: HostOp::MaxPool { k, stride, pad } } => ConvParams::new(k, k, stride, pad),
                _ => ConvParams::square(1, 1),
            };
            let (h, w) = c.output_hw(s.height, s.width);
            Shape3::new(shape.channels, h, w)
        } else {
            shape
        };
        self.nodes.push(Node { name: name.into(), op, inputs, shape });
        Ok(self.nodes.len() - 1)
    }

    fn conv(&mut self, name: &str, input: usize, ofm: usize, conv: ConvParams, relu: bool) -> Result<usize, GraphError> {
        let s = self.nodes[input].shape;
        let (h, w) = conv.output_hw(s.height, s.width);
        self.push(name, NodeOp::Conv { ofm, conv, relu }, vec![input], Shape3::new(ofm, h, w))
    }
}

/// Full or channel-scaled ResNet-50 at 224×224.
pub fn build_resnet50(channel_scale: usize) -> Result<NetworkGraph, GraphError> {
    ResNetSpec::resnet50(channel_scale).build()
}

/// The two-module 8×8 network used for end-to-end checks.
pub fn build_toy() -> NetworkGraph {
    ResNetSpec::toy().build().expect("toy spec is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet50_structure() {
        let g = build_resnet50(1).unwrap();
        assert_eq!(g.eltwise_nodes().len(), 16);
        let convs = g.accelerator_convs();
        let proj = convs.iter().filter(|&&i| g.nodes[i].name.ends_with("branch1")).count();
        assert_eq!(proj, 4);
        assert_eq!(convs.len(), 52);
        assert_eq!(g.nodes[g.find("pool1").unwrap()].shape, Shape3::new(64, 56, 56));
        assert_eq!(g.nodes[g.find("res5c").unwrap()].shape, Shape3::new(2048, 7, 7));
        for e in g.eltwise_nodes() {
            assert_eq!(g.nodes[e].inputs.len(), 2);
        }
    }

    #[test]
    fn resnet50_macs_near_reference() {
        let g = build_resnet50(1).unwrap();
        let accel = g.accelerator_macs() as f64;
        assert!((accel / (0.957 * 3.8e9) - 1.0).abs() < 0.05, "accelerator MACs {accel}");
        let total = accel + g.host_macs() as f64;
        assert!((total / 3.8e9 - 1.0).abs() < 0.1, "total MACs {total}");
    }

    #[test]
    fn scaled_variants_and_bad_scale() {
        for s in [2, 4] {
            let g = build_resnet50(s).unwrap();
            assert_eq!(g.eltwise_nodes().len(), 16);
            for i in g.accelerator_convs() {
                assert_eq!(g.nodes[i].shape.channels % 64, 0);
            }
        }
        assert!(matches!(build_resnet50(3), Err(GraphError::Config(_))));
    }

    #[test]
    fn toy_shape() {
        let g = build_toy();
        assert_eq!(g.eltwise_nodes().len(), 2);
        assert_eq!(g.accelerator_convs().len(), 7);
        assert_eq!(g.nodes[g.output()].shape, Shape3::new(128, 8, 8));
    }
}

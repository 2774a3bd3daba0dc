//! Network graphs: topology, scheduling, memory allocation and execution.

pub mod alloc;
pub mod exec;
pub mod host;
pub mod resnet;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineError;
use crate::layout::LayoutError;
use crate::quantizer::QuantError;
use crate::regs::{LayerGeometry, LANES};
use crate::tensor::{ConvParams, Shape3};

pub use alloc::{program_registers, BufferMap, MemoryPlan, Region};
pub use exec::{fp_forward, quantize_model, ExecOptions, ExecOutput, FpLayer, FpModel, QuantLayer, QuantizedModel, Simulator};
pub use host::HostWeights;
pub use resnet::{build_resnet50, build_toy, ResNetSpec};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("allocation error: {0}")]
    Allocation(String),
    #[error("schedule error: node `{node}` runs before its producer `{producer}`")]
    Schedule { node: String, producer: String },
    #[error("model error: {0}")]
    Model(String),
    #[error("node `{node}`: {source}")]
    Engine {
        node: String,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Dfp(#[from] crate::dfp::DfpError),
    #[error("malformed network descriptor: {0}")]
    Json(#[from] serde_json::Error),
}

/// Layers that run on the host in 8-bit × 8-bit arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HostOp {
    Conv { ofm: usize, conv: ConvParams, relu: bool },
    MaxPool { k: usize, stride: usize, pad: usize },
    /// Global average pool down to 1×1.
    AvgPool,
    Fc { out: usize },
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NodeOp {
    /// Network input; its shape is the node's shape.
    Input,
    Host { op: HostOp },
    Conv { ofm: usize, conv: ConvParams, relu: bool },
    Eltwise { relu: bool },
}

impl NodeOp {
    pub fn is_accelerator(&self) -> bool {
        matches!(self, NodeOp::Conv { .. } | NodeOp::Eltwise { .. })
    }

    /// Whether the node carries trained weights.
    pub fn has_weights(&self) -> bool {
        matches!(self, NodeOp::Conv { .. } | NodeOp::Host { op: HostOp::Conv { .. } | HostOp::Fc { .. } })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    /// Producers in operand order. For an eltwise node the first operand
    /// is the skip (left) branch.
    pub inputs: Vec<usize>,
    pub shape: Shape3,
}

/// A validated network. Node indices are stable and nodes are stored in
/// schedule order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkGraph {
    pub name: String,
    pub nodes: Vec<Node>,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    name: String,
    #[serde(flatten)]
    op: NodeOp,
    shape: Shape3,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    name: String,
    nodes: Vec<NodeDoc>,
    edges: Vec<(String, String)>,
}

fn infer_shape(op: &NodeOp, inputs: &[Shape3], declared: Shape3) -> Result<Shape3, String> {
    let one = || -> Result<Shape3, String> {
        match inputs {
            [s] => Ok(*s),
            _ => Err(format!("expects one producer, has {}", inputs.len())),
        }
    };
    let conv_out = |s: Shape3, ofm: usize, c: ConvParams| -> Result<Shape3, String> {
        let (h, w) = c.output_hw(s.height, s.width);
        if h == 0 || w == 0 || c.stride == 0 {
            return Err(format!("kernel {}x{}/{} does not fit {s}", c.kh, c.kw, c.stride));
        }
        Ok(Shape3::new(ofm, h, w))
    };
    match *op {
        NodeOp::Input => {
            if inputs.is_empty() {
                Ok(declared)
            } else {
                Err("input nodes take no producers".into())
            }
        }
        NodeOp::Conv { ofm, conv, .. } => conv_out(one()?, ofm, conv),
        NodeOp::Eltwise { .. } => match inputs {
            [a, b] if a == b => Ok(*a),
            [a, b] => Err(format!("operand shapes differ: {a} vs {b}")),
            _ => Err(format!("eltwise needs exactly two producers, has {}", inputs.len())),
        },
        NodeOp::Host { op } => {
            let s = one()?;
            match op {
                HostOp::Conv { ofm, conv, .. } => conv_out(s, ofm, conv),
                HostOp::MaxPool { k, stride, pad } => conv_out(s, s.channels, ConvParams::new(k, k, stride, pad)),
                HostOp::AvgPool => Ok(Shape3::new(s.channels, 1, 1)),
                HostOp::Fc { out } => Ok(Shape3::new(out, 1, 1)),
                HostOp::Softmax => Ok(s),
            }
        }
    }
}

impl NetworkGraph {
    /// Build and validate a graph from nodes given in any topological order.
    pub fn new(name: impl Into<String>, nodes: Vec<Node>) -> Result<Self, GraphError> {
        let g = Self { name: name.into(), nodes };
        g.validate()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Producer → consumer pairs, operand order preserved per consumer.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.inputs.iter().map(move |&p| (p, i)))
            .collect()
    }

    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        self.edges().into_iter().filter(|&(p, _)| p == idx).map(|(_, c)| c).collect()
    }

    pub fn input_shape(&self, idx: usize) -> Shape3 {
        let n = &self.nodes[idx];
        n.inputs.first().map(|&p| self.nodes[p].shape).unwrap_or(n.shape)
    }

    /// Hardware geometry of an accelerator node.
    pub fn geometry(&self, idx: usize) -> Option<LayerGeometry> {
        let s = self.input_shape(idx);
        match self.nodes[idx].op {
            NodeOp::Conv { ofm, conv, relu } => Some(LayerGeometry::conv(s.channels, ofm, s.height, s.width, conv, relu)),
            NodeOp::Eltwise { relu } => Some(LayerGeometry::eltwise(s.channels, s.height, s.width, relu)),
            _ => None,
        }
    }

    /// Accelerator convolution nodes in schedule order.
    pub fn accelerator_convs(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| matches!(self.nodes[i].op, NodeOp::Conv { .. })).collect()
    }

    pub fn eltwise_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| matches!(self.nodes[i].op, NodeOp::Eltwise { .. })).collect()
    }

    /// Total multiply-accumulates of the accelerator convolutions.
    pub fn accelerator_macs(&self) -> u64 {
        self.accelerator_convs().iter().filter_map(|&i| self.geometry(i)).map(|g| g.macs()).sum()
    }

    /// Multiply-accumulates of the host convolution and FC layers.
    pub fn host_macs(&self) -> u64 {
        let mut total = 0;
        for (i, n) in self.nodes.iter().enumerate() {
            let s = self.input_shape(i);
            match n.op {
                NodeOp::Host { op: HostOp::Conv { conv, .. } } => {
                    total += (s.channels * conv.kernel_pixels() * n.shape.len()) as u64;
                }
                NodeOp::Host { op: HostOp::Fc { out } } => total += (s.len() * out) as u64,
                _ => {}
            }
        }
        total
    }

    /// The graph's single sink.
    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::Invalid(m));
        if self.nodes.is_empty() {
            return bad("graph has no nodes".into());
        }
        let mut names = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if names.insert(n.name.as_str(), i).is_some() {
                return bad(format!("duplicate node name `{}`", n.name));
            }
            for &p in &n.inputs {
                if p >= i {
                    return bad(format!("`{}` consumes a node that is not scheduled before it", n.name));
                }
            }
            let ins: Vec<Shape3> = n.inputs.iter().map(|&p| self.nodes[p].shape).collect();
            let shape = infer_shape(&n.op, &ins, n.shape).map_err(|m| GraphError::Invalid(format!("`{}`: {m}", n.name)))?;
            if shape != n.shape {
                return bad(format!("`{}` declares shape {} but produces {shape}", n.name, n.shape));
            }
            if n.op.is_accelerator() {
                let s = self.input_shape(i);
                if s.channels % LANES != 0 || n.shape.channels % LANES != 0 {
                    return bad(format!(
                        "`{}`: accelerator channels {}→{} must be multiples of {LANES}",
                        n.name, s.channels, n.shape.channels
                    ));
                }
            }
        }
        let sinks: Vec<_> = (0..self.len()).filter(|&i| self.consumers(i).is_empty()).collect();
        if sinks != [self.output()] {
            return bad(format!("graph must have exactly one sink, the last node (found {sinks:?})"));
        }
        // Host layers sit at the boundary: never between two accelerator layers.
        let mut accel_upstream = vec![false; self.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            accel_upstream[i] = n.inputs.iter().any(|&p| accel_upstream[p] || self.nodes[p].op.is_accelerator());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let NodeOp::Host { .. } = n.op {
                if accel_upstream[i] && self.reaches_accelerator(i) {
                    return bad(format!("host layer `{}` sits between accelerator layers", n.name));
                }
            }
        }
        Ok(())
    }

    fn reaches_accelerator(&self, from: usize) -> bool {
        let mut stack = self.consumers(from);
        while let Some(c) = stack.pop() {
            if self.nodes[c].op.is_accelerator() {
                return true;
            }
            stack.extend(self.consumers(c));
        }
        false
    }

    /// Execution order: the stored order, which already runs each module's
    /// left branch, then its right branch, then the merge.
    pub fn schedule(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Check that `order` runs every node exactly once, after its producers.
    pub fn validate_schedule(&self, order: &[usize]) -> Result<(), GraphError> {
        let mut done = vec![false; self.len()];
        for &i in order {
            if i >= self.len() || done[i] {
                return Err(GraphError::Invalid(format!("schedule repeats or overruns node {i}")));
            }
            if let Some(&p) = self.nodes[i].inputs.iter().find(|&&p| !done[p]) {
                return Err(GraphError::Schedule { node: self.nodes[i].name.clone(), producer: self.nodes[p].name.clone() });
            }
            done[i] = true;
        }
        if done.iter().all(|&d| d) {
            Ok(())
        } else {
            Err(GraphError::Invalid("schedule skips nodes".into()))
        }
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            name: self.name.clone(),
            nodes: self.nodes.iter().map(|n| NodeDoc { name: n.name.clone(), op: n.op, shape: n.shape }).collect(),
            edges: self
                .edges()
                .into_iter()
                .map(|(p, c)| (self.nodes[p].name.clone(), self.nodes[c].name.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph documents always serialize")
    }

    /// Parse a descriptor. Nodes may appear in any order; they are
    /// re-sorted topologically (ties keep file order).
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        let mut index = HashMap::new();
        for (i, n) in doc.nodes.iter().enumerate() {
            if index.insert(n.name.clone(), i).is_some() {
                return Err(GraphError::Invalid(format!("duplicate node name `{}`", n.name)));
            }
        }
        let mut inputs = vec![Vec::new(); doc.nodes.len()];
        for (from, to) in &doc.edges {
            let lookup = |name: &String| {
                index.get(name).copied().ok_or_else(|| GraphError::Invalid(format!("edge names unknown node `{name}`")))
            };
            inputs[lookup(to)?].push(lookup(from)?);
        }
        // Kahn's algorithm, lowest file index first.
        let n = doc.nodes.len();
        let mut indeg: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let mut order = Vec::with_capacity(n);
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for c in 0..n {
                for _ in inputs[c].iter().filter(|&&p| p == i) {
                    indeg[c] -= 1;
                    if indeg[c] == 0 {
                        ready.insert(c);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(GraphError::Invalid("descriptor contains a cycle".into()));
        }
        let mut new_pos = vec![0; n];
        for (pos, &old) in order.iter().enumerate() {
            new_pos[old] = pos;
        }
        let nodes = order
            .iter()
            .map(|&old| {
                let d = &doc.nodes[old];
                Node { name: d.name.clone(), op: d.op, inputs: inputs[old].iter().map(|&p| new_pos[p]).collect(), shape: d.shape }
            })
            .collect();
        Self::new(doc.name, nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(name: &str, op: NodeOp, inputs: Vec<usize>, shape: Shape3) -> Node {
        Node { name: name.into(), op, inputs, shape }
    }

    fn tiny() -> Vec<Node> {
        let s = Shape3::new(64, 4, 4);
        vec![
            node("in", NodeOp::Input, vec![], s),
            node("a", NodeOp::Conv { ofm: 64, conv: ConvParams::square(3, 1), relu: true }, vec![0], s),
            node("sum", NodeOp::Eltwise { relu: true }, vec![0, 1], s),
        ]
    }

    #[test]
    fn valid_graph_and_json_roundtrip() {
        let g = NetworkGraph::new("tiny", tiny()).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (0, 2), (1, 2)]);
        let back = NetworkGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        g.validate_schedule(&g.schedule()).unwrap();
        assert!(matches!(g.validate_schedule(&[1, 0, 2]), Err(GraphError::Schedule { .. })));
    }

    #[test]
    fn rejects_bad_graphs() {
        let mut n = tiny();
        n[2].inputs = vec![1];
        assert!(NetworkGraph::new("x", n).is_err());
        let mut n = tiny();
        n[1].shape = Shape3::new(64, 2, 2);
        assert!(NetworkGraph::new("x", n).is_err());
        let mut n = tiny();
        let s = Shape3::new(32, 4, 4);
        n[0] = node("in", NodeOp::Input, vec![], s);
        n[1].op = NodeOp::Conv { ofm: 32, conv: ConvParams::square(3, 1), relu: true };
        n[1].shape = s;
        n[2].shape = s;
        assert!(NetworkGraph::new("x", n).is_err());
    }

    #[test]
    fn json_cycle_rejected() {
        let text = r#"{"name":"c","nodes":[
            {"name":"a","kind":"eltwise","relu":false,"shape":{"channels":64,"height":1,"width":1}},
            {"name":"b","kind":"eltwise","relu":false,"shape":{"channels":64,"height":1,"width":1}}],
            "edges":[["a","b"],["b","a"]]}"#;
        assert!(matches!(NetworkGraph::from_json(text), Err(GraphError::Invalid(_))));
    }

    #[test]
    fn host_between_accelerator_layers_rejected() {
        let s = Shape3::new(64, 4, 4);
        let nodes = vec![
            node("in", NodeOp::Input, vec![], s),
            node("a", NodeOp::Conv { ofm: 64, conv: ConvParams::square(1, 1), relu: true }, vec![0], s),
            node("p", NodeOp::Host { op: HostOp::MaxPool { k: 1, stride: 1, pad: 0 } }, vec![1], s),
            node("b", NodeOp::Conv { ofm: 64, conv: ConvParams::square(1, 1), relu: true }, vec![2], s),
        ];
        assert!(NetworkGraph::new("x", nodes).is_err());
    }
}

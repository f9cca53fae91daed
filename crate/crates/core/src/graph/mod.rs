//! Computation-graph data model for pose-estimation networks.
//!
//! A [`Graph`] is a list of typed operator nodes wired by name. Every node
//! carries a [`BlockTag`] naming the functional block it belongs to, which is
//! what the pruning policies key on. Shapes are per-sample and channels-first:
//! `(C, H, W)`.
//!
//! Documents are read with [`parse_graph`], which checks every structural
//! invariant before handing back a value. Use [`validate`] when you want the
//! full list of problems rather than the first one.

mod backbone;
mod shape;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use backbone::{build_backbone, conv_layer_count, BlockKind, StageSpec, StageSpecEntry};
pub use shape::{infer_shapes, topological_order, ShapeMap};

/// Per-sample tensor extents, channels first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<TensorShape, GraphError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(GraphError::Schema(format!(
                "shape {dims:?} must have at least one dim and all extents >= 1"
            )));
        }
        Ok(TensorShape(dims))
    }

    pub fn chw(c: usize, h: usize, w: usize) -> TensorShape {
        assert!(c > 0 && h > 0 && w > 0, "zero extent in ({c},{h},{w})");
        TensorShape(vec![c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(C, H, W)` if this is a spatial shape.
    pub fn as_chw(&self) -> Option<(usize, usize, usize)> {
        match self.0.as_slice() {
            &[c, h, w] => Some((c, h, w)),
            _ => None,
        }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

impl std::str::FromStr for TensorShape {
    type Err = GraphError;

    /// Parses `CxHxW` (or any `x`-separated list of extents).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let dims = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| GraphError::Schema(format!("bad shape '{s}': {e}")))?;
        TensorShape::new(dims)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationFn {
    Relu,
    Prelu,
    Swish,
    Hardtanh,
    Sigmoid,
}

impl ActivationFn {
    pub fn name(self) -> &'static str {
        match self {
            ActivationFn::Relu => "relu",
            ActivationFn::Prelu => "prelu",
            ActivationFn::Swish => "swish",
            ActivationFn::Hardtanh => "hardtanh",
            ActivationFn::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for ActivationFn {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| GraphError::Schema(format!("unknown activation '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Functional block a node belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockTag {
    Backbone,
    InitialStage,
    HeatmapBranch,
    PafBranch,
    Other,
}

impl BlockTag {
    pub const ALL: [BlockTag; 5] = [
        BlockTag::Backbone,
        BlockTag::InitialStage,
        BlockTag::HeatmapBranch,
        BlockTag::PafBranch,
        BlockTag::Other,
    ];
}

impl std::str::FromStr for BlockTag {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| GraphError::Schema(format!("unknown block tag '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2dAttrs {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl Conv2dAttrs {
    /// Square `k x k`, stride 1, "same" padding, no grouping.
    pub fn same(k: usize, in_channels: usize, out_channels: usize) -> Conv2dAttrs {
        Conv2dAttrs {
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: (k - 1) / 2,
            dilation: 1,
            in_channels,
            out_channels,
            groups: 1,
            has_bias: true,
        }
    }

    /// Effective (dilated) kernel extents.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel_h - 1) + 1,
            self.dilation * (self.kernel_w - 1) + 1,
        )
    }

    /// Number of weight elements, `out * in/groups * kh * kw`.
    pub fn weight_len(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel_h * self.kernel_w
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivationAttrs {
    #[serde(rename = "fn")]
    func: ActivationFn,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpsampleAttrs {
    scale: usize,
    mode: UpsampleMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaxPoolAttrs {
    kernel: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoAttrs {}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Conv2d(Conv2dAttrs),
    Activation(ActivationFn),
    Add,
    Concat,
    Upsample { scale: usize, mode: UpsampleMode },
    MaxPool { kernel: usize, stride: usize, padding: usize },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "Conv2d",
            Op::Activation(_) => "Activation",
            Op::Add => "Add",
            Op::Concat => "Concat",
            Op::Upsample { .. } => "Upsample",
            Op::MaxPool { .. } => "MaxPool",
        }
    }

    pub fn as_conv(&self) -> Option<&Conv2dAttrs> {
        match self {
            Op::Conv2d(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "NodeDoc", into = "NodeDoc")]
pub struct OpNode {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub block_tag: BlockTag,
}

impl OpNode {
    pub fn new(id: impl Into<String>, op: Op, inputs: Vec<String>, block_tag: BlockTag) -> OpNode {
        OpNode {
            id: id.into(),
            op,
            inputs,
            block_tag,
        }
    }
}

/// On-disk node layout: `op` names the kind, `attrs` holds its fields.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    op: String,
    attrs: serde_json::Value,
    inputs: Vec<String>,
    block_tag: BlockTag,
}

impl TryFrom<NodeDoc> for OpNode {
    type Error = String;

    fn try_from(doc: NodeDoc) -> Result<Self, Self::Error> {
        fn attrs<T: serde::de::DeserializeOwned>(id: &str, v: serde_json::Value) -> Result<T, String> {
            serde_json::from_value(v).map_err(|e| format!("node '{id}': bad attrs: {e}"))
        }
        let op = match doc.op.as_str() {
            "Conv2d" => Op::Conv2d(attrs(&doc.id, doc.attrs)?),
            "Activation" => Op::Activation(attrs::<ActivationAttrs>(&doc.id, doc.attrs)?.func),
            "Add" => {
                attrs::<NoAttrs>(&doc.id, doc.attrs)?;
                Op::Add
            }
            "Concat" => {
                attrs::<NoAttrs>(&doc.id, doc.attrs)?;
                Op::Concat
            }
            "Upsample" => {
                let a: UpsampleAttrs = attrs(&doc.id, doc.attrs)?;
                Op::Upsample {
                    scale: a.scale,
                    mode: a.mode,
                }
            }
            "MaxPool" => {
                let a: MaxPoolAttrs = attrs(&doc.id, doc.attrs)?;
                Op::MaxPool {
                    kernel: a.kernel,
                    stride: a.stride,
                    padding: a.padding,
                }
            }
            other => return Err(format!("node '{}': unknown op '{other}'", doc.id)),
        };
        Ok(OpNode {
            id: doc.id,
            op,
            inputs: doc.inputs,
            block_tag: doc.block_tag,
        })
    }
}

impl From<OpNode> for NodeDoc {
    fn from(n: OpNode) -> Self {
        let attrs = match &n.op {
            Op::Conv2d(a) => serde_json::to_value(a),
            Op::Activation(f) => serde_json::to_value(ActivationAttrs { func: *f }),
            Op::Add | Op::Concat => serde_json::to_value(NoAttrs {}),
            Op::Upsample { scale, mode } => serde_json::to_value(UpsampleAttrs {
                scale: *scale,
                mode: *mode,
            }),
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => serde_json::to_value(MaxPoolAttrs {
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            }),
        }
        .expect("attrs serialize");
        NodeDoc {
            id: n.id,
            op: n.op.kind().to_string(),
            attrs,
            inputs: n.inputs,
            block_tag: n.block_tag,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphInput {
    pub name: String,
    pub shape: TensorShape,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Graph {
    pub name: String,
    pub inputs: Vec<GraphInput>,
    pub nodes: Vec<OpNode>,
    pub outputs: Vec<String>,
}

impl Graph {
    pub fn node(&self, id: &str) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect()
    }

    pub fn conv_nodes(&self) -> impl Iterator<Item = (&OpNode, &Conv2dAttrs)> {
        self.nodes
            .iter()
            .filter_map(|n| n.op.as_conv().map(|a| (n, a)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    /// Returns a copy whose single declared input has shape `shape`.
    ///
    /// Every conv node consuming the input directly must agree on the channel
    /// count; the new graph is re-validated.
    pub fn with_input_shape(&self, shape: TensorShape) -> Result<Graph, GraphError> {
        if self.inputs.len() != 1 {
            return Err(GraphError::Schema(format!(
                "graph '{}' has {} inputs; input override needs exactly one",
                self.name,
                self.inputs.len()
            )));
        }
        let mut g = self.clone();
        g.inputs[0].shape = shape;
        check(&g)?;
        Ok(g)
    }
}

/// One structural or shape problem found by [`validate`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum Violation {
    DuplicateId { id: String },
    DanglingEdge { node: String, input: String },
    CycleDetected { nodes: Vec<String> },
    UnknownOutput { id: String },
    InvalidAttr { node: String, detail: String },
    ShapeMismatch { node: String, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { id } => write!(f, "duplicate id '{id}'"),
            Violation::DanglingEdge { node, input } => {
                write!(f, "node '{node}' references unknown input '{input}'")
            }
            Violation::CycleDetected { nodes } => write!(f, "cycle through {nodes:?}"),
            Violation::UnknownOutput { id } => write!(f, "output '{id}' is not a node or input"),
            Violation::InvalidAttr { node, detail } => write!(f, "node '{node}': {detail}"),
            Violation::ShapeMismatch { node, detail } => {
                write!(f, "shape mismatch at '{node}': {detail}")
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate id '{0}'")]
    DuplicateId(String),
    #[error("node '{node}' references unknown input '{input}'")]
    DanglingEdge { node: String, input: String },
    #[error("shape mismatch at '{node}': {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("invalid graph: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("invalid stage spec: {0}")]
    InvalidSpec(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Parses a graph document and checks every invariant.
pub fn parse_graph(text: &str) -> Result<Graph, GraphError> {
    let g: Graph = serde_json::from_str(text).map_err(|e| GraphError::Schema(e.to_string()))?;
    check(&g)?;
    Ok(g)
}

/// Like [`validate`], but maps the first violation onto a typed error.
pub fn check(g: &Graph) -> Result<(), GraphError> {
    let violations = validate(g);
    match violations.first() {
        None => Ok(()),
        Some(Violation::DuplicateId { id }) => Err(GraphError::DuplicateId(id.clone())),
        Some(Violation::DanglingEdge { node, input }) => Err(GraphError::DanglingEdge {
            node: node.clone(),
            input: input.clone(),
        }),
        Some(Violation::ShapeMismatch { node, detail }) if violations.len() == 1 => {
            Err(GraphError::ShapeMismatch {
                node: node.clone(),
                detail: detail.clone(),
            })
        }
        Some(_) => Err(GraphError::Invalid(violations)),
    }
}

/// Collects every invariant violation; an empty list means the graph is
/// acyclic, fully wired and shape-consistent.
pub fn validate(g: &Graph) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut seen: HashSet<&str> = HashSet::new();
    for name in g
        .inputs
        .iter()
        .map(|i| i.name.as_str())
        .chain(g.nodes.iter().map(|n| n.id.as_str()))
    {
        if !seen.insert(name) {
            out.push(Violation::DuplicateId { id: name.to_string() });
        }
    }

    for n in &g.nodes {
        for inp in &n.inputs {
            if !seen.contains(inp.as_str()) {
                out.push(Violation::DanglingEdge {
                    node: n.id.clone(),
                    input: inp.clone(),
                });
            }
        }
        if let Some(detail) = attr_problem(n) {
            out.push(Violation::InvalidAttr {
                node: n.id.clone(),
                detail,
            });
        }
    }
    for o in &g.outputs {
        if !seen.contains(o.as_str()) {
            out.push(Violation::UnknownOutput { id: o.clone() });
        }
    }
    if !out.is_empty() {
        return out;
    }

    if let Err(cycle) = topological_order(g) {
        out.push(Violation::CycleDetected { nodes: cycle });
        return out;
    }
    if let Err(GraphError::ShapeMismatch { node, detail }) = infer_shapes(g) {
        out.push(Violation::ShapeMismatch { node, detail });
    }
    out
}

fn attr_problem(n: &OpNode) -> Option<String> {
    let arity_one = || (n.inputs.len() != 1).then(|| format!("{} takes exactly one input", n.op.kind()));
    match &n.op {
        Op::Conv2d(a) => {
            if a.kernel_h == 0 || a.kernel_w == 0 || a.stride == 0 || a.dilation == 0 {
                return Some("kernel, stride and dilation must be >= 1".into());
            }
            if a.kernel_h % 2 == 0 || a.kernel_w % 2 == 0 {
                return Some(format!("kernel {}x{} is not odd", a.kernel_h, a.kernel_w));
            }
            if a.groups == 0 || a.in_channels == 0 || a.out_channels == 0 {
                return Some("channels and groups must be >= 1".into());
            }
            if a.in_channels % a.groups != 0 || a.out_channels % a.groups != 0 {
                return Some(format!(
                    "channels {}->{} not divisible by groups {}",
                    a.in_channels, a.out_channels, a.groups
                ));
            }
            arity_one()
        }
        Op::Activation(_) => arity_one(),
        Op::Upsample { scale, .. } => {
            if *scale == 0 {
                return Some("upsample scale must be >= 1".into());
            }
            arity_one()
        }
        Op::MaxPool { kernel, stride, .. } => {
            if *kernel == 0 || *stride == 0 {
                return Some("pool kernel and stride must be >= 1".into());
            }
            arity_one()
        }
        Op::Add => (n.inputs.len() < 2).then(|| "Add needs at least two inputs".into()),
        Op::Concat => n.inputs.is_empty().then(|| "Concat needs at least one input".into()),
    }
}

//! Parameter, MAC/FLOP and receptive-field accounting.
//!
//! Counting convention: one multiply-accumulate is one MAC and two FLOPs,
//! and a bias adds one FLOP per output element. Both MACs and FLOPs are
//! reported because published model tables rarely say which they mean.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::graph::{infer_shapes, topological_order, ActivationFn, Conv2dAttrs, Graph, GraphError, Op, OpNode, ShapeMap, TensorShape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

impl std::ops::AddAssign for OpCost {
    fn add_assign(&mut self, rhs: Self) {
        self.params += rhs.params;
        self.macs += rhs.macs;
        self.flops += rhs.flops;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_shapes: IndexMap<String, TensorShape>,
    pub per_node: IndexMap<String, OpCost>,
    pub totals: OpCost,
}

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no node named '{0}'")]
    UnknownNode(String),
    #[error("node '{0}' is not reachable from any graph input")]
    UnreachableNode(String),
    #[error("plan references node '{0}' which is not in the graph")]
    UnknownNodeInPlan(String),
    #[error("prune ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("invalid latency parameters: {0}")]
    InvalidParams(String),
}

/// Exact counts for one convolution producing `out_shape`.
pub fn conv_cost(a: &Conv2dAttrs, out_shape: &TensorShape) -> OpCost {
    let (_, h, w) = out_shape.as_chw().expect("conv output is (C,H,W)");
    let pixels = (h * w) as u64;
    let weights = a.weight_len() as u64;
    let bias = if a.has_bias { a.out_channels as u64 } else { 0 };
    let macs = weights * pixels;
    OpCost {
        params: weights + bias,
        macs,
        flops: 2 * macs + bias * pixels,
    }
}

fn node_cost(n: &OpNode, shapes: &ShapeMap) -> OpCost {
    match &n.op {
        Op::Conv2d(a) => conv_cost(a, &shapes[&n.id]),
        Op::Activation(ActivationFn::Prelu) => OpCost {
            params: shapes[&n.id].dims()[0] as u64,
            ..OpCost::default()
        },
        _ => OpCost::default(),
    }
}

/// Per-node and total counts for a valid graph.
pub fn graph_cost(g: &Graph) -> Result<CostReport, GraphError> {
    let shapes = infer_shapes(g)?;
    let mut per_node = IndexMap::with_capacity(g.nodes.len());
    let mut totals = OpCost::default();
    for n in &g.nodes {
        let c = node_cost(n, &shapes);
        totals += c;
        per_node.insert(n.id.clone(), c);
    }
    Ok(CostReport {
        input_shapes: g.inputs.iter().map(|i| (i.name.clone(), i.shape.clone())).collect(),
        per_node,
        totals,
    })
}

/// Receptive field at a value, in input pixels.
///
/// `jump` is the input-pixel distance between adjacent output positions.
/// Upsampling divides it, so both fields are kept as `f64`; for conv/pool
/// only graphs they are exact integers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub size: f64,
    pub jump: f64,
}

impl ReceptiveField {
    pub const PIXEL: ReceptiveField = ReceptiveField { size: 1.0, jump: 1.0 };

    fn through(self, kernel_eff: usize, stride: usize) -> ReceptiveField {
        ReceptiveField {
            size: self.size + (kernel_eff as f64 - 1.0) * self.jump,
            jump: self.jump * stride as f64,
        }
    }

    fn max(self, other: ReceptiveField) -> ReceptiveField {
        ReceptiveField {
            size: self.size.max(other.size),
            jump: self.jump.max(other.jump),
        }
    }
}

/// Receptive field of every value in the graph (inputs are single pixels).
/// Where paths merge the component-wise maximum is taken.
pub fn receptive_fields(g: &Graph) -> Result<HashMap<String, ReceptiveField>, CostError> {
    let order = topological_order(g).map_err(|nodes| {
        GraphError::Invalid(vec![crate::graph::Violation::CycleDetected { nodes }])
    })?;
    let mut rf: HashMap<String, ReceptiveField> = g
        .inputs
        .iter()
        .map(|i| (i.name.clone(), ReceptiveField::PIXEL))
        .collect();
    for i in order {
        let n = &g.nodes[i];
        let Some(merged) = n
            .inputs
            .iter()
            .filter_map(|s| rf.get(s).copied())
            .reduce(ReceptiveField::max)
        else {
            continue;
        };
        let out = match &n.op {
            Op::Conv2d(a) => {
                let (kh, kw) = a.effective_kernel();
                merged.through(kh.max(kw), a.stride)
            }
            Op::MaxPool { kernel, stride, .. } => merged.through(*kernel, *stride),
            Op::Upsample { scale, .. } => ReceptiveField {
                size: merged.size,
                jump: merged.jump / *scale as f64,
            },
            Op::Activation(_) | Op::Add | Op::Concat => merged,
        };
        rf.insert(n.id.clone(), out);
    }
    Ok(rf)
}

pub fn receptive_field(g: &Graph, node_id: &str) -> Result<ReceptiveField, CostError> {
    if g.node(node_id).is_none() && !g.inputs.iter().any(|i| i.name == node_id) {
        return Err(CostError::UnknownNode(node_id.to_string()));
    }
    receptive_fields(g)?
        .get(node_id)
        .copied()
        .ok_or_else(|| CostError::UnreachableNode(node_id.to_string()))
}

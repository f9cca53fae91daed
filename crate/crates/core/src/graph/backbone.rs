use serde::{Deserialize, Serialize};

use super::{
    check, ActivationFn, BlockTag, Conv2dAttrs, Graph, GraphError, GraphInput, Op, OpNode,
    TensorShape,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// 3x3 conv + relu.
    Plain3x3,
    /// 1x1 reduce to width/4, 3x3, 1x1 expand back to width, residual add.
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpecEntry {
    pub num_blocks: usize,
    pub width: usize,
    pub block_kind: BlockKind,
    /// Stride of the first block in the stage; later blocks use stride 1.
    pub stride_first: usize,
}

/// A backbone described as a list of stages of repeated blocks.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stages: Vec<StageSpecEntry>,
}

impl StageSpec {
    pub fn check(&self) -> Result<(), GraphError> {
        if self.stages.is_empty() {
            return Err(GraphError::InvalidSpec("no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.num_blocks == 0 {
                return Err(GraphError::InvalidSpec(format!("stage {i}: num_blocks must be >= 1")));
            }
            if s.width == 0 {
                return Err(GraphError::InvalidSpec(format!("stage {i}: width must be >= 1")));
            }
            if s.stride_first == 0 {
                return Err(GraphError::InvalidSpec(format!("stage {i}: stride_first must be >= 1")));
            }
        }
        Ok(())
    }
}

struct Emitter {
    nodes: Vec<OpNode>,
}

impl Emitter {
    fn conv(&mut self, id: String, input: &str, k: usize, stride: usize, cin: usize, cout: usize) -> String {
        let attrs = Conv2dAttrs {
            stride,
            ..Conv2dAttrs::same(k, cin, cout)
        };
        self.push(id, Op::Conv2d(attrs), vec![input.to_string()])
    }

    fn relu(&mut self, id: String, input: &str) -> String {
        self.push(id, Op::Activation(ActivationFn::Relu), vec![input.to_string()])
    }

    fn push(&mut self, id: String, op: Op, inputs: Vec<String>) -> String {
        self.nodes.push(OpNode::new(id.clone(), op, inputs, BlockTag::Backbone));
        id
    }
}

/// Emits a backbone graph for `spec`, reading an image of
/// `in_channels x input_hw`. Every node is tagged `Backbone`.
pub fn build_backbone(spec: &StageSpec, in_channels: usize, input_hw: (usize, usize)) -> Result<Graph, GraphError> {
    spec.check()?;
    if in_channels == 0 || input_hw.0 == 0 || input_hw.1 == 0 {
        return Err(GraphError::InvalidSpec("input extents must be >= 1".into()));
    }

    let mut e = Emitter { nodes: Vec::new() };
    let mut cur = "image".to_string();
    let mut channels = in_channels;
    for (si, stage) in spec.stages.iter().enumerate() {
        for bi in 0..stage.num_blocks {
            let stride = if bi == 0 { stage.stride_first } else { 1 };
            let p = format!("s{si}_b{bi}");
            cur = match stage.block_kind {
                BlockKind::Plain3x3 => {
                    let c = e.conv(format!("{p}_conv"), &cur, 3, stride, channels, stage.width);
                    e.relu(format!("{p}_relu"), &c)
                }
                BlockKind::Bottleneck => {
                    let mid = (stage.width / 4).max(1);
                    let r = e.conv(format!("{p}_reduce"), &cur, 1, 1, channels, mid);
                    let r = e.relu(format!("{p}_reduce_relu"), &r);
                    let m = e.conv(format!("{p}_conv"), &r, 3, stride, mid, mid);
                    let m = e.relu(format!("{p}_conv_relu"), &m);
                    let x = e.conv(format!("{p}_expand"), &m, 1, 1, mid, stage.width);
                    let shortcut = if stride == 1 && channels == stage.width {
                        cur.clone()
                    } else {
                        e.conv(format!("{p}_proj"), &cur, 1, stride, channels, stage.width)
                    };
                    let s = e.push(format!("{p}_add"), Op::Add, vec![x, shortcut]);
                    e.relu(format!("{p}_relu"), &s)
                }
            };
            channels = stage.width;
        }
    }

    let g = Graph {
        name: "backbone".into(),
        inputs: vec![GraphInput {
            name: "image".into(),
            shape: TensorShape::chw(in_channels, input_hw.0, input_hw.1),
        }],
        nodes: e.nodes,
        outputs: vec![cur],
    };
    check(&g).map_err(|err| GraphError::InvalidSpec(format!("backbone does not fit the input: {err}")))?;
    Ok(g)
}

/// Number of Conv2d nodes, the "layer count" the backbone builder reports.
pub fn conv_layer_count(g: &Graph) -> usize {
    g.conv_nodes().count()
}

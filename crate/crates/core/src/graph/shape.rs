use std::collections::{BTreeMap, HashMap};

use super::{Graph, GraphError, Op, TensorShape, Violation};

/// Inferred shape of every value in a graph: declared inputs and node outputs.
pub type ShapeMap = BTreeMap<String, TensorShape>;

/// Kahn's algorithm over node indices. Ready nodes are released in
/// declaration order, so the result is deterministic.
///
/// On failure returns the ids of nodes that sit on or behind a cycle.
pub fn topological_order(g: &Graph) -> Result<Vec<usize>, Vec<String>> {
    let index = g.node_index();
    let mut indegree = vec![0usize; g.nodes.len()];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); g.nodes.len()];
    for (i, n) in g.nodes.iter().enumerate() {
        for inp in &n.inputs {
            if let Some(&j) = index.get(inp.as_str()) {
                indegree[i] += 1;
                users[j].push(i);
            }
        }
    }

    let mut ready: std::collections::BTreeSet<usize> =
        (0..g.nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &u in &users[i] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.insert(u);
            }
        }
    }
    if order.len() == g.nodes.len() {
        Ok(order)
    } else {
        Err(g
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| indegree[*i] > 0)
            .map(|(_, n)| n.id.clone())
            .collect())
    }
}

/// Standard convolution/pooling output extent; `None` when the window does
/// not fit.
pub(crate) fn window_out(input: usize, kernel_eff: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel_eff {
        return None;
    }
    Some((padded - kernel_eff) / stride + 1)
}

pub fn infer_shapes(g: &Graph) -> Result<ShapeMap, GraphError> {
    let order = topological_order(g)
        .map_err(|nodes| GraphError::Invalid(vec![Violation::CycleDetected { nodes }]))?;

    let mut shapes: HashMap<&str, TensorShape> = HashMap::new();
    for inp in &g.inputs {
        if inp.shape.dims().is_empty() || inp.shape.dims().contains(&0) {
            return Err(GraphError::ShapeMismatch {
                node: inp.name.clone(),
                detail: format!("input shape {:?} has a zero extent", inp.shape.dims()),
            });
        }
        shapes.insert(&inp.name, inp.shape.clone());
    }

    for i in order {
        let n = &g.nodes[i];
        let mismatch = |detail: String| GraphError::ShapeMismatch {
            node: n.id.clone(),
            detail,
        };
        let mut ins = Vec::with_capacity(n.inputs.len());
        for name in &n.inputs {
            let s = shapes.get(name.as_str()).ok_or_else(|| GraphError::DanglingEdge {
                node: n.id.clone(),
                input: name.clone(),
            })?;
            ins.push(s);
        }
        let spatial = |s: &TensorShape| {
            s.as_chw()
                .ok_or_else(|| mismatch(format!("{} expects a (C,H,W) input, got {s}", n.op.kind())))
        };

        let out = match &n.op {
            Op::Conv2d(a) => {
                let (c, h, w) = spatial(ins[0])?;
                if c != a.in_channels {
                    return Err(mismatch(format!("input has {c} channels, conv expects {}", a.in_channels)));
                }
                let (kh, kw) = a.effective_kernel();
                let ho = window_out(h, kh, a.stride, a.padding);
                let wo = window_out(w, kw, a.stride, a.padding);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => TensorShape::chw(a.out_channels, ho, wo),
                    _ => return Err(mismatch(format!("kernel {kh}x{kw} does not fit input {h}x{w}"))),
                }
            }
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = spatial(ins[0])?;
                if 2 * padding > *kernel {
                    return Err(mismatch(format!("pool padding {padding} exceeds half the kernel {kernel}")));
                }
                match (window_out(h, *kernel, *stride, *padding), window_out(w, *kernel, *stride, *padding)) {
                    (Some(ho), Some(wo)) => TensorShape::chw(c, ho, wo),
                    _ => return Err(mismatch(format!("pool kernel {kernel} does not fit input {h}x{w}"))),
                }
            }
            Op::Upsample { scale, .. } => {
                let (c, h, w) = spatial(ins[0])?;
                TensorShape::chw(c, h * scale, w * scale)
            }
            Op::Activation(_) => ins[0].clone(),
            Op::Add => {
                let first = ins[0];
                if let Some(other) = ins.iter().find(|s| **s != first) {
                    return Err(mismatch(format!("Add of {first} and {other}")));
                }
                first.clone()
            }
            Op::Concat => {
                let (_, h, w) = spatial(ins[0])?;
                let mut channels = 0;
                for s in &ins {
                    let (c, sh, sw) = spatial(s)?;
                    if (sh, sw) != (h, w) {
                        return Err(mismatch(format!("Concat of {h}x{w} and {sh}x{sw}")));
                    }
                    channels += c;
                }
                TensorShape::chw(channels, h, w)
            }
        };
        shapes.insert(&n.id, out);
    }

    Ok(shapes
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect())
}

//! Naive reference interpreter.
//!
//! Direct convolution with zero padding, accumulated in f64 and rounded to
//! f32 on store. For each output element the reduction order is fixed
//! (bias, then input channel, kernel row, kernel column), so results are
//! bit-identical across runs. This is an oracle, not an inference engine.

use std::collections::{BTreeMap, HashMap};

use crate::graph::{check, topological_order, ActivationFn, Conv2dAttrs, Graph, GraphError, Op, TensorShape, UpsampleMode};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// PReLU slope used when the store has no slope tensor for the node.
pub const DEFAULT_PRELU_SLOPE: f32 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no weights for conv node '{0}'")]
    MissingWeights(String),
    #[error("missing graph input '{0}'")]
    MissingInput(String),
    #[error("shape mismatch at '{node}': {detail}")]
    ShapeMismatch { node: String, detail: String },
}

pub fn run(g: &Graph, w: &WeightStore, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>, ExecError> {
    check(g)?;
    let shapes = crate::graph::infer_shapes(g)?;
    let order = topological_order(g).expect("checked graph is acyclic");

    let mut values: HashMap<&str, Tensor> = HashMap::new();
    for inp in &g.inputs {
        let t = inputs
            .get(&inp.name)
            .ok_or_else(|| ExecError::MissingInput(inp.name.clone()))?;
        if t.shape() != &inp.shape {
            return Err(ExecError::ShapeMismatch {
                node: inp.name.clone(),
                detail: format!("input tensor {} but graph declares {}", t.shape(), inp.shape),
            });
        }
        values.insert(&inp.name, t.clone());
    }

    for i in order {
        let n = &g.nodes[i];
        let args: Vec<&Tensor> = n.inputs.iter().map(|s| &values[s.as_str()]).collect();
        let out_shape = &shapes[&n.id];
        let out = match &n.op {
            Op::Conv2d(a) => {
                let nw = w.get(&n.id).ok_or_else(|| ExecError::MissingWeights(n.id.clone()))?;
                if nw.weight.dims() != a.weight_dims().as_slice() {
                    return Err(ExecError::ShapeMismatch {
                        node: n.id.clone(),
                        detail: format!("weight {} but attrs need {:?}", nw.weight.shape(), a.weight_dims()),
                    });
                }
                let bias = if a.has_bias {
                    let b = nw.bias.as_ref().ok_or_else(|| ExecError::MissingWeights(n.id.clone()))?;
                    if b.dims() != [a.out_channels] {
                        return Err(ExecError::ShapeMismatch {
                            node: n.id.clone(),
                            detail: format!("bias {} for {} outputs", b.shape(), a.out_channels),
                        });
                    }
                    Some(b.data())
                } else {
                    None
                };
                conv2d(args[0], a, nw.weight.data(), bias, out_shape)
            }
            Op::Activation(f) => {
                let slopes = match f {
                    ActivationFn::Prelu => w.get(&n.id).map(|nw| nw.weight.data().to_vec()),
                    _ => None,
                };
                activation(args[0], *f, slopes.as_deref())
            }
            Op::Add => {
                let mut acc = vec![0f64; out_shape.numel()];
                for a in &args {
                    for (s, v) in acc.iter_mut().zip(a.data()) {
                        *s += *v as f64;
                    }
                }
                Tensor::new(out_shape.clone(), acc.into_iter().map(|v| v as f32).collect()).expect("sized")
            }
            Op::Concat => {
                let data: Vec<f32> = args.iter().flat_map(|a| a.data().iter().copied()).collect();
                Tensor::new(out_shape.clone(), data).expect("sized")
            }
            Op::Upsample { scale, mode } => upsample(args[0], *scale, *mode),
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => maxpool(args[0], *kernel, *stride, *padding, out_shape),
        };
        values.insert(&n.id, out);
    }

    Ok(g
        .outputs
        .iter()
        .map(|o| (o.clone(), values[o.as_str()].clone()))
        .collect())
}

fn conv2d(x: &Tensor, a: &Conv2dAttrs, weight: &[f32], bias: Option<&[f32]>, out_shape: &TensorShape) -> Tensor {
    let (_, h, w) = x.chw();
    let (cout, ho, wo) = out_shape.as_chw().expect("conv output is spatial");
    let cin_g = a.in_channels / a.groups;
    let cout_g = a.out_channels / a.groups;
    let (kh, kw) = (a.kernel_h, a.kernel_w);
    let xd = x.data();

    let mut out = Vec::with_capacity(cout * ho * wo);
    let mut acc = vec![0f64; ho * wo];
    for oc in 0..cout {
        let group = oc / cout_g;
        acc.fill(bias.map_or(0.0, |b| b[oc] as f64));
        for icg in 0..cin_g {
            let ic = group * cin_g + icg;
            let plane = &xd[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[((oc * cin_g + icg) * kh + ky) * kw + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * a.stride + ky * a.dilation) as isize - a.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let arow = &mut acc[oy * wo..(oy + 1) * wo];
                        for (ox, s) in arow.iter_mut().enumerate() {
                            let ix = (ox * a.stride + kx * a.dilation) as isize - a.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *s += wv * row[ix as usize] as f64;
                            }
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(out_shape.clone(), out).expect("sized")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn activation(x: &Tensor, f: ActivationFn, slopes: Option<&[f32]>) -> Tensor {
    let plane = match x.shape().as_chw() {
        Some((_, h, w)) => h * w,
        None => x.shape().numel() / x.dims()[0],
    };
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v as f64;
            let y = match f {
                ActivationFn::Relu => v.max(0.0),
                ActivationFn::Sigmoid => sigmoid(v),
                ActivationFn::Swish => v * sigmoid(v),
                ActivationFn::Hardtanh => v.clamp(-1.0, 1.0),
                ActivationFn::Prelu => {
                    let slope = match slopes {
                        Some([s]) => *s,
                        Some(s) => s[i / plane],
                        None => DEFAULT_PRELU_SLOPE,
                    } as f64;
                    if v >= 0.0 {
                        v
                    } else {
                        slope * v
                    }
                }
            };
            y as f32
        })
        .collect();
    Tensor::new(x.shape().clone(), data).expect("same shape")
}

fn upsample(x: &Tensor, scale: usize, mode: UpsampleMode) -> Tensor {
    let (c, h, w) = x.chw();
    let (ho, wo) = (h * scale, w * scale);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out.push(xd[(ch * h + oy / scale) * w + ox / scale]);
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            // Half-pixel centres (align_corners = false).
            let src = |dst: usize, len: usize| -> (usize, usize, f64) {
                let s = ((dst as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, s - i0 as f64)
            };
            for ch in 0..c {
                let p = &xd[ch * h * w..(ch + 1) * h * w];
                for oy in 0..ho {
                    let (y0, y1, ly) = src(oy, h);
                    for ox in 0..wo {
                        let (x0, x1, lx) = src(ox, w);
                        let top = p[y0 * w + x0] as f64 * (1.0 - lx) + p[y0 * w + x1] as f64 * lx;
                        let bot = p[y1 * w + x0] as f64 * (1.0 - lx) + p[y1 * w + x1] as f64 * lx;
                        out.push((top * (1.0 - ly) + bot * ly) as f32);
                    }
                }
            }
        }
    }
    Tensor::new(TensorShape::chw(c, ho, wo), out).expect("sized")
}

fn maxpool(x: &Tensor, kernel: usize, stride: usize, padding: usize, out_shape: &TensorShape) -> Tensor {
    let (c, h, w) = x.chw();
    let (_, ho, wo) = out_shape.as_chw().expect("spatial");
    let xd = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            m = m.max(xd[(ch * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(out_shape.clone(), out).expect("sized")
}

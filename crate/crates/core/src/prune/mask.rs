use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PruneError;
use crate::tensor::Tensor;

/// Granularity at which weights are removed.
///
/// Block and channel schemes view a weight tensor as the matrix
/// `[dims[0], numel / dims[0]]`, i.e. `[out_ch, in_ch/groups * k_h * k_w]` for
/// a conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    Unstructured,
    Block { rows: usize, cols: usize },
    Channel,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Unstructured => f.write_str("unstructured"),
            Scheme::Block { rows, cols } => write!(f, "block:{rows}x{cols}"),
            Scheme::Channel => f.write_str("channel"),
        }
    }
}

impl FromStr for Scheme {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PruneError::InvalidScheme(s.to_string());
        match s {
            "unstructured" => Ok(Scheme::Unstructured),
            "channel" => Ok(Scheme::Channel),
            _ => {
                let dims = s.strip_prefix("block:").ok_or_else(bad)?;
                let (r, c) = dims.split_once('x').ok_or_else(bad)?;
                let rows: usize = r.parse().map_err(|_| bad())?;
                let cols: usize = c.parse().map_err(|_| bad())?;
                if rows == 0 || cols == 0 {
                    return Err(bad());
                }
                Ok(Scheme::Block { rows, cols })
            }
        }
    }
}

impl Serialize for Scheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Keep-map for one weight tensor; `keep[i]` is false for pruned elements.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    pub node_id: String,
    pub scheme: Scheme,
    pub dims: Vec<usize>,
    pub keep: Vec<bool>,
}

impl PruneMask {
    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned_count() as f64 / self.keep.len() as f64
    }

    /// Zeroes pruned positions in place.
    pub fn apply(&self, data: &mut [f32]) {
        for (v, k) in data.iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }

    /// The mask as a 0/1 tensor of the weight's shape.
    pub fn to_tensor(&self) -> Tensor {
        let shape = crate::graph::TensorShape::new(self.dims.clone()).expect("mask dims are positive");
        Tensor::new(shape, self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()).expect("sized")
    }
}

/// Number of units removed at `ratio`: `n - ceil((1 - ratio) * n)`, computed
/// so that ratios like 0.7 on n = 10 give exactly 7.
pub fn units_to_prune(n: usize, ratio: f64) -> usize {
    let x = ratio * n as f64;
    let nearest = x.round();
    let pruned = if (x - nearest).abs() <= 1e-9 * (n.max(1) as f64) {
        nearest
    } else {
        x.floor()
    };
    (pruned.max(0.0) as usize).min(n)
}

/// Which units (elements, blocks or channels) a scheme ranks, and the
/// element indices each unit covers.
struct Units {
    scores: Vec<f64>,
    members: Box<dyn Fn(usize) -> Vec<usize>>,
}

fn units(w: &Tensor, scheme: Scheme) -> Result<Units, PruneError> {
    let data = w.data();
    let rows = w.dims()[0];
    let cols = data.len() / rows;
    match scheme {
        Scheme::Unstructured => Ok(Units {
            scores: data.iter().map(|v| v.abs() as f64).collect(),
            members: Box::new(|i| vec![i]),
        }),
        Scheme::Channel => Ok(Units {
            scores: data.chunks(cols).map(|c| c.iter().map(|v| v.abs() as f64).sum()).collect(),
            members: Box::new(move |r| (r * cols..(r + 1) * cols).collect()),
        }),
        Scheme::Block { rows: br, cols: bc } => {
            if rows % br != 0 || cols % bc != 0 {
                return Err(PruneError::ShapeIncompatibleWithBlock {
                    rows,
                    cols,
                    block_rows: br,
                    block_cols: bc,
                });
            }
            let per_row = cols / bc;
            let n_blocks = (rows / br) * per_row;
            let members = move |b: usize| -> Vec<usize> {
                let (r0, c0) = ((b / per_row) * br, (b % per_row) * bc);
                (r0..r0 + br)
                    .flat_map(|r| (c0..c0 + bc).map(move |c| r * cols + c))
                    .collect()
            };
            let scores = (0..n_blocks)
                .map(|b| members(b).into_iter().map(|i| data[i].abs() as f64).sum())
                .collect();
            Ok(Units {
                scores,
                members: Box::new(members),
            })
        }
    }
}

/// Magnitude mask removing the lowest-scoring `ratio` of units.
///
/// Elements rank by `|w|`, blocks and channels by L1 norm. Ties keep the
/// lower flat index. The ranking does not depend on `ratio`, so masks at
/// increasing ratios are nested.
pub fn magnitude_mask(node_id: &str, w: &Tensor, ratio: f64, scheme: Scheme) -> Result<PruneMask, PruneError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(PruneError::InvalidRatio(ratio));
    }
    let u = units(w, scheme)?;
    let n = u.scores.len();
    let keep_units = n - units_to_prune(n, ratio);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| u.scores[b].total_cmp(&u.scores[a]).then(a.cmp(&b)));

    let mut keep = vec![false; w.data().len()];
    for &unit in &order[..keep_units] {
        for i in (u.members)(unit) {
            keep[i] = true;
        }
    }
    Ok(PruneMask {
        node_id: node_id.to_string(),
        scheme,
        dims: w.dims().to_vec(),
        keep,
    })
}

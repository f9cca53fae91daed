//! Analytical per-layer latency model and the sparse break-even analysis.
//!
//! Dense layer time is affine in work:
//!
//! ```text
//! T(0) = macs * time_per_mac + per_node_overhead + penalty(node)
//! ```
//!
//! A layer pruned at ratio `p > 0` executes with a sparse kernel that retires
//! the surviving MACs `sparse_inefficiency` times slower and pays a fixed
//! `sparse_overhead`:
//!
//! ```text
//! T(p) = macs * (1 - p) * time_per_mac * sparse_inefficiency
//!        + per_node_overhead + penalty(node) + sparse_overhead
//! ```
//!
//! Pruning only pays once `p` clears the break-even ratio where the two
//! lines cross.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::cost::{graph_cost, CostError};
use crate::graph::{Graph, Op, OpNode, UpsampleMode};
use crate::prune::PrunePlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyParams {
    /// Seconds per dense MAC.
    pub time_per_mac: f64,
    /// Fixed seconds charged to every node, including zero-MAC ones.
    pub per_node_overhead: f64,
    /// Slowdown factor (>= 1) of sparse kernels per surviving MAC.
    pub sparse_inefficiency: f64,
    /// Seconds added to any pruned layer.
    pub sparse_overhead: f64,
    /// Extra seconds keyed by operator kind; see [`penalty_keys`].
    #[serde(default)]
    pub unfriendly_op_penalty: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Penalty keys that apply to `node`. A node may match several.
///
/// Activations use their function name (`swish`, `sigmoid`, ...). Convs
/// match `dilated_conv`, `large_kernel_conv` (kernel > 3) and
/// `depthwise_conv`; the remaining ops match `add`, `concat`, `maxpool`,
/// `upsample_nearest` or `upsample_bilinear`.
pub fn penalty_keys(node: &OpNode) -> Vec<&'static str> {
    match &node.op {
        Op::Conv2d(a) => {
            let mut keys = Vec::new();
            if a.dilation > 1 {
                keys.push("dilated_conv");
            }
            if a.kernel_h.max(a.kernel_w) > 3 {
                keys.push("large_kernel_conv");
            }
            if a.groups > 1 && a.groups == a.in_channels {
                keys.push("depthwise_conv");
            }
            keys
        }
        Op::Activation(f) => vec![f.name()],
        Op::Add => vec!["add"],
        Op::Concat => vec!["concat"],
        Op::MaxPool { .. } => vec!["maxpool"],
        Op::Upsample { mode: UpsampleMode::Nearest, .. } => vec!["upsample_nearest"],
        Op::Upsample { mode: UpsampleMode::Bilinear, .. } => vec!["upsample_bilinear"],
    }
}

impl LatencyParams {
    /// Shipped defaults. Illustrative, not measured on any device.
    pub fn illustrative() -> LatencyParams {
        let penalties = [
            ("swish", 4.0e-4),
            ("sigmoid", 3.0e-4),
            ("dilated_conv", 4.0e-3),
            ("large_kernel_conv", 1.0e-3),
            ("upsample_bilinear", 2.0e-4),
        ];
        LatencyParams {
            time_per_mac: 1.0e-11,
            per_node_overhead: 2.0e-5,
            sparse_inefficiency: 1.6,
            sparse_overhead: 5.0e-5,
            unfriendly_op_penalty: penalties.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            note: Some("illustrative non-physical constants; calibrate from your own measurements".into()),
        }
    }

    pub fn check(&self) -> Result<(), CostError> {
        let scalars = [
            ("time_per_mac", self.time_per_mac),
            ("per_node_overhead", self.per_node_overhead),
            ("sparse_inefficiency", self.sparse_inefficiency),
            ("sparse_overhead", self.sparse_overhead),
        ];
        for (name, v) in scalars.into_iter().chain(self.unfriendly_op_penalty.iter().map(|(k, v)| (k.as_str(), *v))) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CostError::InvalidParams(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.sparse_inefficiency < 1.0 {
            return Err(CostError::InvalidParams(format!(
                "sparse_inefficiency = {} must be >= 1",
                self.sparse_inefficiency
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<LatencyParams, CostError> {
        let lp: LatencyParams = serde_json::from_str(text).map_err(|e| CostError::InvalidParams(e.to_string()))?;
        lp.check()?;
        Ok(lp)
    }

    pub fn penalty(&self, node: &OpNode) -> f64 {
        penalty_keys(node)
            .into_iter()
            .filter_map(|k| self.unfriendly_op_penalty.get(k))
            .sum()
    }

    /// Refits the work and sparse constants from measurements, keeping
    /// `self`'s penalties.
    ///
    /// Dense samples give `time_per_mac` and `per_node_overhead` by ordinary
    /// least squares on `seconds = macs * t + o`. Sparse samples, with the
    /// dense part subtracted, give `sparse_inefficiency` and
    /// `sparse_overhead` from `seconds - o = e * (macs * (1 - p) * t) + s`.
    /// Fitted values are clamped into the legal range.
    pub fn fit(&self, m: &Measurements) -> Result<LatencyParams, CostError> {
        let dense: Vec<(f64, f64)> = m.dense.iter().map(|d| (d.macs as f64, d.seconds)).collect();
        let (t, o) = least_squares(&dense)
            .ok_or_else(|| CostError::InvalidParams("need two dense samples with distinct macs".into()))?;
        let t = t.max(0.0);
        let o = o.max(0.0);

        let mut out = LatencyParams {
            time_per_mac: t,
            per_node_overhead: o,
            note: Some("fitted from measurements".into()),
            ..self.clone()
        };
        if !m.sparse.is_empty() {
            for s in &m.sparse {
                if !(0.0..=1.0).contains(&s.ratio) {
                    return Err(CostError::InvalidRatio(s.ratio));
                }
            }
            let pts: Vec<(f64, f64)> = m
                .sparse
                .iter()
                .map(|s| (s.macs as f64 * (1.0 - s.ratio) * t, s.seconds - o))
                .collect();
            let (e, so) = least_squares(&pts)
                .ok_or_else(|| CostError::InvalidParams("need two sparse samples with distinct surviving work".into()))?;
            out.sparse_inefficiency = e.max(1.0);
            out.sparse_overhead = so.max(0.0);
        }
        out.check()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Measurements {
    #[serde(default)]
    pub dense: Vec<DenseSample>,
    #[serde(default)]
    pub sparse: Vec<SparseSample>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSample {
    pub macs: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseSample {
    pub macs: u64,
    pub ratio: f64,
    pub seconds: f64,
}

/// Slope and intercept of the OLS line through `pts`.
fn least_squares(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Latency of `node` pruned at ratio `p` (0 = dense).
pub fn layer_latency(node: &OpNode, p: f64, lp: &LatencyParams, macs: u64) -> Result<f64, CostError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CostError::InvalidRatio(p));
    }
    let work = macs as f64 * lp.time_per_mac;
    let fixed = lp.per_node_overhead + lp.penalty(node);
    Ok(if p == 0.0 {
        work + fixed
    } else {
        work * (1.0 - p) * lp.sparse_inefficiency + fixed + lp.sparse_overhead
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ratio")]
pub enum Breakeven {
    /// Pruning beats dense iff `p > ratio`.
    Ratio(f64),
    /// Even `p = 1` is no faster than dense.
    NotPrunableProfitably,
}

impl Breakeven {
    pub fn admits(self, p: f64) -> bool {
        match self {
            Breakeven::Ratio(r) => p > r,
            Breakeven::NotPrunableProfitably => false,
        }
    }
}

/// Ratio above which a sparse layer of `macs` work beats its dense form.
///
/// Per-node overhead and operator penalties are paid either way, so they
/// cancel; only the work term and the sparse costs matter.
pub fn breakeven_ratio(lp: &LatencyParams, macs: u64) -> Breakeven {
    let work = macs as f64 * lp.time_per_mac;
    if work <= lp.sparse_overhead {
        // Covers work == 0 too: with nothing to skip, no ratio gains.
        return Breakeven::NotPrunableProfitably;
    }
    let p = 1.0 - (work - lp.sparse_overhead) / (work * lp.sparse_inefficiency);
    if p >= 1.0 {
        Breakeven::NotPrunableProfitably
    } else {
        Breakeven::Ratio(p.max(0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLatency {
    pub macs: u64,
    pub ratio: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub total: f64,
    pub per_node: IndexMap<String, NodeLatency>,
}

/// Sum of per-node latencies in declaration order, each node at its planned
/// ratio (0 when the plan does not mention it).
pub fn graph_latency(g: &Graph, plan: Option<&PrunePlan>, lp: &LatencyParams) -> Result<LatencyReport, CostError> {
    let cost = graph_cost(g)?;
    let mut ratios: BTreeMap<&str, f64> = BTreeMap::new();
    if let Some(plan) = plan {
        for d in &plan.decisions {
            if g.node(&d.node).is_none() {
                return Err(CostError::UnknownNodeInPlan(d.node.clone()));
            }
            ratios.insert(&d.node, d.ratio);
        }
    }
    let mut per_node = IndexMap::with_capacity(g.nodes.len());
    let mut total = 0.0;
    for n in &g.nodes {
        let macs = cost.per_node[&n.id].macs;
        let ratio = ratios.get(n.id.as_str()).copied().unwrap_or(0.0);
        let seconds = layer_latency(n, ratio, lp, macs)?;
        total += seconds;
        per_node.insert(n.id.clone(), NodeLatency { macs, ratio, seconds });
    }
    Ok(LatencyReport { total, per_node })
}

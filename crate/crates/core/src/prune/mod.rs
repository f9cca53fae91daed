//! Layer-wise magnitude pruning.
//!
//! Each conv layer is either left dense or pruned at a ratio high enough to
//! beat its dense form under the latency model (see
//! [`breakeven_ratio`](crate::latency::breakeven_ratio)). How high a ratio a
//! layer may take is capped per functional block by a
//! [`SensitivityPolicy`]: backbone layers tolerate aggressive pruning, the
//! PAF branch much less.

mod mask;
mod sensitivity;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use mask::{magnitude_mask, units_to_prune, PruneMask, Scheme};
pub use sensitivity::{masked_distortion, probe_inputs, sensitivity_scan, SensitivityPoint};

use crate::cost::{graph_cost, CostError};
use crate::exec::ExecError;
use crate::graph::{BlockTag, Graph, GraphError};
use crate::latency::{breakeven_ratio, graph_latency, layer_latency, LatencyParams};
use crate::weights::WeightStore;

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error("prune ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("weight matrix {rows}x{cols} is not divisible into {block_rows}x{block_cols} blocks")]
    ShapeIncompatibleWithBlock {
        rows: usize,
        cols: usize,
        block_rows: usize,
        block_cols: usize,
    },
    #[error("bad pruning scheme '{0}' (expected unstructured, channel or block:RxC)")]
    InvalidScheme(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("target unreachable; best achievable speedup is {best_achievable_speedup:.4}x")]
    TargetUnreachable { best_achievable_speedup: f64 },
    #[error("plan references node '{0}' which is not a conv in the graph")]
    UnknownNodeInPlan(String),
    #[error("weights for '{node}': {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("a distortion budget needs a weight store")]
    WeightsRequired,
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Per-block ratio caps and the discrete ratios the planner may pick from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityPolicy {
    pub max_ratio: BTreeMap<BlockTag, f64>,
    /// Ascending; the planner prefers the smallest ratio that does the job.
    pub candidate_ratios: Vec<f64>,
}

impl Default for SensitivityPolicy {
    fn default() -> Self {
        SensitivityPolicy {
            max_ratio: BTreeMap::from([
                (BlockTag::Backbone, 0.9),
                (BlockTag::InitialStage, 0.7),
                (BlockTag::HeatmapBranch, 0.7),
                (BlockTag::PafBranch, 0.4),
                (BlockTag::Other, 0.5),
            ]),
            candidate_ratios: vec![0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

impl<'de> Deserialize<'de> for SensitivityPolicy {
    /// Fields left out of a policy file fall back to the defaults, per tag.
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            #[serde(default)]
            max_ratio: BTreeMap<BlockTag, f64>,
            candidate_ratios: Option<Vec<f64>>,
        }
        let doc = Doc::deserialize(d)?;
        let mut p = SensitivityPolicy::default();
        p.max_ratio.extend(doc.max_ratio);
        if let Some(c) = doc.candidate_ratios {
            p.candidate_ratios = c;
        }
        Ok(p)
    }
}

impl SensitivityPolicy {
    pub fn cap(&self, tag: BlockTag) -> f64 {
        self.max_ratio.get(&tag).copied().unwrap_or(0.0)
    }

    pub fn check(&self) -> Result<(), PruneError> {
        for (tag, cap) in &self.max_ratio {
            if !(0.0..=1.0).contains(cap) {
                return Err(PruneError::InvalidPolicy(format!("cap {cap} for {tag:?} is outside [0, 1]")));
            }
        }
        if self.candidate_ratios.is_empty() {
            return Err(PruneError::InvalidPolicy("candidate_ratios is empty".into()));
        }
        if self.candidate_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(PruneError::InvalidPolicy("candidate ratios must lie in (0, 1]".into()));
        }
        if self.candidate_ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PruneError::InvalidPolicy("candidate_ratios must be strictly ascending".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<SensitivityPolicy, PruneError> {
        let p: SensitivityPolicy = serde_json::from_str(text).map_err(|e| PruneError::InvalidPolicy(e.to_string()))?;
        p.check()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanTarget {
    /// Reach at least this dense/planned latency ratio.
    Speedup(f64),
    /// Prune as hard as possible while the mean relative output distortion
    /// over `probes` seeded random inputs stays within `budget`.
    MaxDistortion { budget: f64, probes: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDecision {
    pub node: String,
    pub scheme: Scheme,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub decisions: Vec<PlanDecision>,
    pub predicted_dense_latency: f64,
    pub predicted_planned_latency: f64,
    pub predicted_speedup: f64,
    pub policy: SensitivityPolicy,
    pub target: PlanTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_distortion: Option<f64>,
}

impl PrunePlan {
    pub fn ratio_of(&self, node: &str) -> f64 {
        self.decisions
            .iter()
            .find(|d| d.node == node)
            .map_or(0.0, |d| d.ratio)
    }
}

/// A conv layer the planner may touch, with its dense latency.
struct Layer<'g> {
    id: &'g str,
    dense: f64,
    admissible: Vec<f64>,
}

fn candidate_layers<'g>(
    g: &'g Graph,
    lp: &LatencyParams,
    policy: &SensitivityPolicy,
    scheme: Scheme,
) -> Result<Vec<Layer<'g>>, PruneError> {
    let cost = graph_cost(g)?;
    let mut layers = Vec::new();
    for (n, a) in g.conv_nodes() {
        let macs = cost.per_node[&n.id].macs;
        if macs == 0 {
            continue;
        }
        if let Scheme::Block { rows, cols } = scheme {
            let (r, c) = (a.out_channels, a.weight_len() / a.out_channels);
            if r % rows != 0 || c % cols != 0 {
                continue;
            }
        }
        let be = breakeven_ratio(lp, macs);
        let cap = policy.cap(n.block_tag);
        let admissible: Vec<f64> = policy
            .candidate_ratios
            .iter()
            .copied()
            .filter(|&r| be.admits(r) && r <= cap)
            .collect();
        layers.push(Layer {
            id: &n.id,
            dense: layer_latency(n, 0.0, lp, macs)?,
            admissible,
        });
    }
    // Largest dense latency first; declaration order breaks ties.
    layers.sort_by(|a, b| b.dense.total_cmp(&a.dense));
    Ok(layers)
}

fn with_decision(decisions: &[PlanDecision], node: &str, scheme: Scheme, ratio: f64) -> Vec<PlanDecision> {
    let mut d = decisions.to_vec();
    d.push(PlanDecision {
        node: node.to_string(),
        scheme,
        ratio,
    });
    d
}

/// Greedy prune-or-not planner.
///
/// Layers are visited by descending dense latency. A layer's admissible
/// ratios are the policy candidates strictly above its break-even ratio and
/// at most its block's cap. For a speedup target the smallest admissible
/// ratio that reaches the target is taken and the search stops; otherwise
/// the layer gets its largest admissible ratio and the search moves on. For
/// a distortion budget each layer gets the largest admissible ratio that
/// keeps the whole plan within budget.
pub fn plan(
    g: &Graph,
    weights: Option<&WeightStore>,
    lp: &LatencyParams,
    policy: &SensitivityPolicy,
    target: &PlanTarget,
    scheme: Scheme,
) -> Result<PrunePlan, PruneError> {
    policy.check()?;
    lp.check()?;
    let layers = candidate_layers(g, lp, policy, scheme)?;
    let dense_total = graph_latency(g, None, lp)?.total;
    let latency_of = |decisions: &[PlanDecision]| -> Result<f64, PruneError> {
        let probe = PrunePlan {
            decisions: decisions.to_vec(),
            predicted_dense_latency: dense_total,
            predicted_planned_latency: 0.0,
            predicted_speedup: 0.0,
            policy: policy.clone(),
            target: target.clone(),
            predicted_distortion: None,
        };
        Ok(graph_latency(g, Some(&probe), lp)?.total)
    };

    let mut decisions: Vec<PlanDecision> = Vec::new();
    let mut distortion = None;
    match target {
        PlanTarget::Speedup(want) => {
            if !(want.is_finite() && *want > 0.0) {
                return Err(PruneError::InvalidTarget(format!("speedup {want} must be a positive number")));
            }
            let mut met = *want <= 1.0;
            for layer in &layers {
                if met {
                    break;
                }
                let Some(&largest) = layer.admissible.last() else {
                    continue;
                };
                let mut chosen = largest;
                for &r in &layer.admissible {
                    let trial = with_decision(&decisions, layer.id, scheme, r);
                    if dense_total / latency_of(&trial)? >= *want {
                        chosen = r;
                        met = true;
                        break;
                    }
                }
                decisions = with_decision(&decisions, layer.id, scheme, chosen);
            }
            if !met {
                return Err(PruneError::TargetUnreachable {
                    best_achievable_speedup: dense_total / latency_of(&decisions)?,
                });
            }
        }
        PlanTarget::MaxDistortion { budget, probes, seed } => {
            let w = weights.ok_or(PruneError::WeightsRequired)?;
            if !(budget.is_finite() && *budget >= 0.0) || *probes == 0 {
                return Err(PruneError::InvalidTarget(format!(
                    "distortion budget {budget} must be >= 0 and probes >= 1"
                )));
            }
            let inputs = probe_inputs(g, *probes, *seed);
            let dense_out = sensitivity::dense_outputs(g, w, &inputs)?;
            let mut current = 0.0;
            for layer in &layers {
                for &r in layer.admissible.iter().rev() {
                    let trial = with_decision(&decisions, layer.id, scheme, r);
                    let masked = masked_store(g, w, &trial)?;
                    let d = sensitivity::mean_distortion(g, &masked, &inputs, &dense_out)?;
                    if d <= *budget {
                        decisions = trial;
                        current = d;
                        break;
                    }
                }
            }
            distortion = Some(current);
        }
    }

    let planned = latency_of(&decisions)?;
    Ok(PrunePlan {
        decisions,
        predicted_dense_latency: dense_total,
        predicted_planned_latency: planned,
        predicted_speedup: dense_total / planned,
        policy: policy.clone(),
        target: target.clone(),
        predicted_distortion: distortion,
    })
}

fn masked_store(g: &Graph, w: &WeightStore, decisions: &[PlanDecision]) -> Result<WeightStore, PruneError> {
    let mut out = w.clone();
    for d in decisions {
        let conv = g
            .node(&d.node)
            .and_then(|n| n.op.as_conv())
            .ok_or_else(|| PruneError::UnknownNodeInPlan(d.node.clone()))?;
        let nw = out.get_mut(&d.node).ok_or_else(|| PruneError::ShapeMismatch {
            node: d.node.clone(),
            detail: "no weights in the store".into(),
        })?;
        if nw.weight.dims() != conv.weight_dims().as_slice() {
            return Err(PruneError::ShapeMismatch {
                node: d.node.clone(),
                detail: format!("weight {} but attrs need {:?}", nw.weight.shape(), conv.weight_dims()),
            });
        }
        let mask = magnitude_mask(&d.node, &nw.weight, d.ratio, d.scheme)?;
        mask.apply(nw.weight.data_mut());
    }
    Ok(out)
}

/// Zeroes the masked weights of every planned layer. Unmasked values and
/// biases are untouched; applying a plan twice equals applying it once.
pub fn apply_plan(w: &WeightStore, g: &Graph, plan: &PrunePlan) -> Result<WeightStore, PruneError> {
    masked_store(g, w, &plan.decisions)
}

/// Every mask a plan implies, for export.
pub fn plan_masks(w: &WeightStore, g: &Graph, plan: &PrunePlan) -> Result<Vec<PruneMask>, PruneError> {
    plan.decisions
        .iter()
        .map(|d| {
            if g.node(&d.node).and_then(|n| n.op.as_conv()).is_none() {
                return Err(PruneError::UnknownNodeInPlan(d.node.clone()));
            }
            let nw = w.get(&d.node).ok_or_else(|| PruneError::ShapeMismatch {
                node: d.node.clone(),
                detail: "no weights in the store".into(),
            })?;
            magnitude_mask(&d.node, &nw.weight, d.ratio, d.scheme)
        })
        .collect()
}

//! Mobile-friendly graph rewrites.
//!
//! Each pass is a pure `Graph -> Graph` function returning a log of what it
//! touched. The passes are architectural: a 7x7 conv and a chain of three
//! 3x3 convs do not compute the same function, so weights of replaced nodes
//! are dropped and the result needs retraining.
//!
//! Replacement chains are named `{id}#1 .. {id}#n`. The first conv maps
//! `in -> out` channels, the rest `out -> out`, only the last carries a bias,
//! and no activations are inserted between chain members. Consumers of the
//! original node (and graph outputs naming it) are rewired to `{id}#n`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{graph_cost, receptive_fields, CostError};
use crate::graph::{
    build_backbone, check, ActivationFn, Conv2dAttrs, Graph, GraphError, Op, OpNode, StageSpec, StageSpecEntry,
};

#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("invalid depth multiplier: {0}")]
    InvalidMultiplier(String),
    #[error("rounding multiple must be >= 1")]
    InvalidRounding,
    #[error("FLOPs ratio {achieved_ratio:.4} is outside the tolerance")]
    ToleranceExceeded { achieved_ratio: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewriteEntry {
    pub pass_name: String,
    pub original_node_id: String,
    pub replacement_node_ids: Vec<String>,
    pub rf_before: f64,
    pub rf_after: f64,
    pub macs_before: u64,
    pub macs_after: u64,
    /// Set when the node matched the pass but was left alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewriteLog {
    pub entries: Vec<RewriteEntry>,
}

impl RewriteLog {
    pub fn applied(&self) -> impl Iterator<Item = &RewriteEntry> {
        self.entries.iter().filter(|e| e.skipped.is_none())
    }

    pub fn requires_retraining(&self) -> bool {
        self.applied().next().is_some()
    }

    pub fn extend(&mut self, other: RewriteLog) {
        self.entries.extend(other.entries);
    }
}

/// Replaces every eligible conv whose kernel exceeds `max_kernel` with a chain
/// of 3x3 convs covering the same receptive field.
///
/// Eligible: stride 1, groups 1, square odd kernel, "same" padding. Convs
/// that are too large but not eligible are logged as skipped. A
/// `max_kernel` below 3 behaves like 3, since the chain itself is 3x3.
pub fn replace_large_kernels(g: &Graph, max_kernel: usize) -> Result<(Graph, RewriteLog), RewriteError> {
    let max_kernel = max_kernel.max(3);
    decompose(g, "replace_large_kernels", |a| {
        if a.kernel_h.max(a.kernel_w) <= max_kernel {
            return None;
        }
        Some(eligibility(a, true))
    })
}

/// Replaces every dilated stride-1 conv with a chain of undilated 3x3 convs
/// of the same effective kernel. Grouped convs keep their group count.
pub fn dedilate(g: &Graph) -> Result<(Graph, RewriteLog), RewriteError> {
    decompose(g, "dedilate", |a| {
        if a.dilation <= 1 {
            return None;
        }
        Some(eligibility(a, false))
    })
}

fn eligibility(a: &Conv2dAttrs, require_dense: bool) -> Result<(), String> {
    let (kh, kw) = a.effective_kernel();
    if a.stride != 1 {
        return Err(format!("stride {} (needs 1)", a.stride));
    }
    if require_dense && a.groups != 1 {
        return Err(format!("groups {} (needs 1)", a.groups));
    }
    if kh != kw {
        return Err(format!("non-square kernel {}x{}", a.kernel_h, a.kernel_w));
    }
    if kh % 2 == 0 {
        return Err(format!("even effective kernel {kh}"));
    }
    if 2 * a.padding != kh - 1 {
        return Err(format!("padding {} is not 'same' for effective kernel {kh}", a.padding));
    }
    if a.groups > 1 && a.out_channels % a.groups != 0 {
        return Err(format!("out_channels {} not divisible by groups {}", a.out_channels, a.groups));
    }
    Ok(())
}

fn chain(a: &Conv2dAttrs) -> Vec<Conv2dAttrs> {
    let (k_eff, _) = a.effective_kernel();
    let n = (k_eff - 1) / 2;
    (0..n)
        .map(|i| Conv2dAttrs {
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
            dilation: 1,
            in_channels: if i == 0 { a.in_channels } else { a.out_channels },
            out_channels: a.out_channels,
            groups: a.groups,
            has_bias: a.has_bias && i + 1 == n,
        })
        .collect()
}

/// Shared driver for the two chain-replacement passes. `select` returns
/// `None` for convs the pass ignores, `Some(Err(reason))` for convs it must
/// skip.
fn decompose(
    g: &Graph,
    pass: &str,
    select: impl Fn(&Conv2dAttrs) -> Option<Result<(), String>>,
) -> Result<(Graph, RewriteLog), RewriteError> {
    check(g)?;
    let taken: HashSet<&str> = g.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut nodes = Vec::with_capacity(g.nodes.len());
    let mut renamed: HashMap<String, String> = HashMap::new();
    // (original id, replacement ids, skip reason)
    let mut touched: Vec<(String, Vec<String>, Option<String>)> = Vec::new();

    for n in &g.nodes {
        let Some(a) = n.op.as_conv() else {
            nodes.push(n.clone());
            continue;
        };
        let verdict = match select(a) {
            None => {
                nodes.push(n.clone());
                continue;
            }
            Some(v) => v,
        };
        let links = chain(a);
        let ids: Vec<String> = (1..=links.len()).map(|i| format!("{}#{i}", n.id)).collect();
        let verdict = verdict.and_then(|()| match ids.iter().find(|id| taken.contains(id.as_str())) {
            Some(clash) => Err(format!("generated id '{clash}' already exists")),
            None => Ok(()),
        });
        if let Err(reason) = verdict {
            nodes.push(n.clone());
            touched.push((n.id.clone(), Vec::new(), Some(reason)));
            continue;
        }
        let mut prev = n.inputs[0].clone();
        for (id, attrs) in ids.iter().zip(links) {
            nodes.push(OpNode::new(id.clone(), Op::Conv2d(attrs), vec![prev], n.block_tag));
            prev = id.clone();
        }
        renamed.insert(n.id.clone(), prev);
        touched.push((n.id.clone(), ids, None));
    }

    let rewire = |s: &String| renamed.get(s).cloned().unwrap_or_else(|| s.clone());
    for n in &mut nodes {
        n.inputs = n.inputs.iter().map(rewire).collect();
    }
    let out = Graph {
        name: g.name.clone(),
        inputs: g.inputs.clone(),
        nodes,
        outputs: g.outputs.iter().map(rewire).collect(),
    };
    check(&out)?;

    let (rf0, rf1) = (receptive_fields(g)?, receptive_fields(&out)?);
    let (c0, c1) = (graph_cost(g)?, graph_cost(&out)?);
    let entries = touched
        .into_iter()
        .map(|(id, ids, skipped)| {
            let last = ids.last().unwrap_or(&id);
            RewriteEntry {
                pass_name: pass.to_string(),
                rf_before: rf0[&id].size,
                rf_after: rf1[last].size,
                macs_before: c0.per_node[&id].macs,
                macs_after: if ids.is_empty() {
                    c0.per_node[&id].macs
                } else {
                    ids.iter().map(|i| c1.per_node[i].macs).sum()
                },
                original_node_id: id,
                replacement_node_ids: ids,
                skipped,
            }
        })
        .collect();
    Ok((out, RewriteLog { entries }))
}

/// Swaps the function of every `from` activation for `to`. Nothing else in
/// the graph changes.
pub fn replace_activations(g: &Graph, from: ActivationFn, to: ActivationFn) -> Result<(Graph, RewriteLog), RewriteError> {
    check(g)?;
    let mut out = g.clone();
    let mut log = RewriteLog::default();
    if from == to {
        return Ok((out, log));
    }
    let rf = receptive_fields(g)?;
    for n in &mut out.nodes {
        if n.op == Op::Activation(from) {
            n.op = Op::Activation(to);
            log.entries.push(RewriteEntry {
                pass_name: "replace_activations".into(),
                original_node_id: n.id.clone(),
                replacement_node_ids: vec![n.id.clone()],
                rf_before: rf[&n.id].size,
                rf_after: rf[&n.id].size,
                macs_before: 0,
                macs_after: 0,
                skipped: None,
            });
        }
    }
    Ok((out, log))
}

/// A positive rational depth multiplier. Parses `"2"`, `"3/2"` or `"1.5"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepthMultiplier {
    num: u64,
    den: u64,
}

impl DepthMultiplier {
    pub fn new(num: u64, den: u64) -> Result<DepthMultiplier, RewriteError> {
        if num == 0 || den == 0 {
            return Err(RewriteError::InvalidMultiplier(format!("{num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(DepthMultiplier {
            num: num / g,
            den: den / g,
        })
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(n * m)` with halves rounded up, computed exactly.
    pub fn scale(self, n: usize) -> usize {
        let n = n as u128;
        ((2 * n * self.num as u128 + self.den as u128) / (2 * self.den as u128)) as usize
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for DepthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for DepthMultiplier {
    type Err = RewriteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RewriteError::InvalidMultiplier(format!("'{s}' is not a positive rational"));
        let digits = |t: &str| -> Result<u64, RewriteError> {
            if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            t.parse().map_err(|_| bad())
        };
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            return DepthMultiplier::new(digits(n)?, digits(d)?);
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.len() > 9 {
                return Err(bad());
            }
            let den = 10u64.pow(frac.len() as u32);
            let int = if int.is_empty() { 0 } else { digits(int)? };
            let frac = if frac.is_empty() { 0 } else { digits(frac)? };
            return DepthMultiplier::new(int.checked_mul(den).ok_or_else(bad)? + frac, den);
        }
        DepthMultiplier::new(digits(s)?, 1)
    }
}

/// Side of the square input used to compare backbone FLOPs.
pub const RESCALE_REFERENCE_HW: usize = 224;

fn round_to_multiple(x: f64, multiple: usize) -> usize {
    let m = multiple as f64;
    (((x / m) + 0.5).floor() as usize).max(1) * multiple
}

/// FLOPs of each stage built on its own, reading `width` channels at the
/// reference resolution, summed. Using the stage's own width as its input
/// keeps the measure independent of how neighbouring stages were rescaled.
pub fn stage_flops(spec: &StageSpec) -> Result<u64, RewriteError> {
    let mut total = 0;
    for s in &spec.stages {
        let single = StageSpec { stages: vec![s.clone()] };
        let g = build_backbone(&single, s.width, (RESCALE_REFERENCE_HW, RESCALE_REFERENCE_HW))?;
        total += graph_cost(&g)?.totals.flops;
    }
    Ok(total)
}

/// Trades width for depth at roughly constant FLOPs.
///
/// Each stage gets `round(num_blocks * m)` blocks and width
/// `width * sqrt(num_blocks / num_blocks')` rounded to the nearest multiple
/// of `rounding_multiple`. Stages whose block count does not change keep
/// their width. Fails with `ToleranceExceeded` when the FLOPs ratio (see
/// [`stage_flops`]) leaves `[1 - tol, 1 + tol]`.
pub fn depth_rescale(
    spec: &StageSpec,
    m: DepthMultiplier,
    rounding_multiple: usize,
    flops_tolerance: f64,
) -> Result<StageSpec, RewriteError> {
    spec.check()?;
    if rounding_multiple == 0 {
        return Err(RewriteError::InvalidRounding);
    }
    let mut stages = Vec::with_capacity(spec.stages.len());
    for (i, s) in spec.stages.iter().enumerate() {
        let nb = m.scale(s.num_blocks);
        if nb == 0 {
            return Err(RewriteError::InvalidMultiplier(format!(
                "{m} leaves stage {i} with no blocks ({} x {m} rounds to 0)",
                s.num_blocks
            )));
        }
        let width = if nb == s.num_blocks {
            s.width
        } else {
            round_to_multiple(s.width as f64 * (s.num_blocks as f64 / nb as f64).sqrt(), rounding_multiple)
        };
        stages.push(StageSpecEntry {
            num_blocks: nb,
            width,
            ..s.clone()
        });
    }
    let out = StageSpec { stages };
    let ratio = stage_flops(&out)? as f64 / stage_flops(spec)? as f64;
    if !(ratio >= 1.0 - flops_tolerance && ratio <= 1.0 + flops_tolerance) {
        return Err(RewriteError::ToleranceExceeded { achieved_ratio: ratio });
    }
    Ok(out)
}

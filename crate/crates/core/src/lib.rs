//! Cost analysis, graph rewriting, latency-aware pruning and part affinity
//! field decoding for bottom-up pose-estimation networks.
//!
//! Networks are described as JSON operator graphs ([`graph`]). From there:
//!
//! - [`cost`] counts parameters, MACs and FLOPs and tracks receptive fields.
//! - [`latency`] predicts per-layer time, dense or pruned, from a few
//!   calibrated constants.
//! - [`rewrite`] replaces large or dilated kernels with 3x3 chains, swaps
//!   activations and rescales backbone depth.
//! - [`prune`] builds magnitude masks and plans per-layer ratios for a
//!   speedup or distortion target.
//! - [`exec`] is a deterministic reference interpreter used to measure
//!   output distortion.
//! - [`paf`] groups heatmap peaks into people, and [`synth`] renders scenes
//!   with known answers to test it.
//!
//! ```
//! use poseopt::graph::parse_graph;
//! use poseopt::latency::{graph_latency, LatencyParams};
//!
//! let g = parse_graph(include_str!("../../../fixtures/toy_pose.graph.json")).unwrap();
//! let lp = LatencyParams::illustrative();
//! assert!(graph_latency(&g, None, &lp).unwrap().total > 0.0);
//! ```
//!
//! The guide in `book/` walks through each module with runnable examples.

pub mod cost;
pub mod exec;
pub mod graph;
pub mod latency;
pub mod prune;
pub mod rng;
pub mod tensor;
pub mod weights;
pub mod rewrite;
pub mod paf;
pub mod synth;

// Run the guide's code blocks as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/latency.md")]
    mod latency {}
    #[doc = include_str!("../../../book/src/rewrites.md")]
    mod rewrites {}
    #[doc = include_str!("../../../book/src/pruning.md")]
    mod pruning {}
    #[doc = include_str!("../../../book/src/executor.md")]
    mod executor {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}

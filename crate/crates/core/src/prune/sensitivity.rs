use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{magnitude_mask, PruneError, Scheme};
use crate::exec::run;
use crate::graph::{BlockTag, Graph};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub ratio: f64,
    pub distortion: f64,
}

type Outputs = BTreeMap<String, Tensor>;

/// `probes` input sets with values uniform in `[-1, 1)`, one SplitMix64
/// stream per probe.
pub fn probe_inputs(g: &Graph, probes: usize, seed: u64) -> Vec<Outputs> {
    (0..probes)
        .map(|p| {
            let mut rng = SplitMix64::new(derive_seed(seed, p as u64));
            g.inputs
                .iter()
                .map(|i| {
                    let t = Tensor::from_fn(i.shape.clone(), |_| rng.uniform(-1.0, 1.0) as f32);
                    (i.name.clone(), t)
                })
                .collect()
        })
        .collect()
}

pub(super) fn dense_outputs(g: &Graph, w: &WeightStore, inputs: &[Outputs]) -> Result<Vec<Outputs>, PruneError> {
    inputs
        .par_iter()
        .map(|x| run(g, w, x).map_err(PruneError::from))
        .collect()
}

/// ‖y_masked − y_dense‖₂ / ‖y_dense‖₂ over all outputs together.
fn relative_distortion(masked: &Outputs, dense: &Outputs) -> f64 {
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (name, d) in dense {
        for (a, b) in masked[name].data().iter().zip(d.data()) {
            let e = *a as f64 - *b as f64;
            diff += e * e;
            norm += (*b as f64) * (*b as f64);
        }
    }
    if norm == 0.0 {
        return if diff == 0.0 { 0.0 } else { 1.0 };
    }
    (diff / norm).sqrt()
}

/// Mean distortion over probes. Probes run in parallel; the mean is summed
/// in probe order so the result is reproducible.
pub(super) fn mean_distortion(g: &Graph, masked: &WeightStore, inputs: &[Outputs], dense: &[Outputs]) -> Result<f64, PruneError> {
    let per_probe: Vec<f64> = inputs
        .par_iter()
        .zip(dense.par_iter())
        .map(|(x, d)| run(g, masked, x).map(|y| relative_distortion(&y, d)).map_err(PruneError::from))
        .collect::<Result<_, _>>()?;
    Ok(per_probe.iter().sum::<f64>() / per_probe.len() as f64)
}

/// Distortion of `masked` relative to `dense` weights on seeded probes.
pub fn masked_distortion(g: &Graph, dense: &WeightStore, masked: &WeightStore, probes: usize, seed: u64) -> Result<f64, PruneError> {
    let inputs = probe_inputs(g, probes.max(1), seed);
    let d = dense_outputs(g, dense, &inputs)?;
    mean_distortion(g, masked, &inputs, &d)
}

/// For each ratio, masks every conv tagged `tag` (unstructured) and reports
/// the mean relative output distortion over `probes` random inputs.
pub fn sensitivity_scan(
    g: &Graph,
    w: &WeightStore,
    tag: BlockTag,
    ratios: &[f64],
    probes: usize,
    seed: u64,
) -> Result<Vec<SensitivityPoint>, PruneError> {
    if probes == 0 {
        return Err(PruneError::InvalidTarget("probes must be >= 1".into()));
    }
    w.check_against(g).map_err(|e| PruneError::ShapeMismatch {
        node: g.name.clone(),
        detail: e.to_string(),
    })?;
    let inputs = probe_inputs(g, probes, seed);
    let dense = dense_outputs(g, w, &inputs)?;

    let mut curve = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut masked = w.clone();
        for (n, _) in g.conv_nodes().filter(|(n, _)| n.block_tag == tag) {
            let nw = masked.get_mut(&n.id).expect("checked against graph");
            let mask = magnitude_mask(&n.id, &nw.weight, ratio, Scheme::Unstructured)?;
            mask.apply(nw.weight.data_mut());
        }
        let distortion = if ratio == 0.0 {
            0.0
        } else {
            mean_distortion(g, &masked, &inputs, &dense)?
        };
        curve.push(SensitivityPoint { ratio, distortion });
    }
    Ok(curve)
}

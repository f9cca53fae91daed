//! Per-node parameter tensors and their on-disk directory layout.
//!
//! A weight directory holds `{node_id}.w.tnsr`, optionally
//! `{node_id}.b.tnsr`, and a `manifest.json` listing them. Conv weights are
//! `[out_ch, in_ch/groups, k_h, k_w]`, biases `[out_ch]`. A PReLU node may
//! carry a `[C]` slope tensor as its weight.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{ActivationFn, Graph, Op, TensorShape};
use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct NodeWeights {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, NodeWeights>,
}

#[derive(Debug, thiserror::Error)]
pub enum WeightError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("no weights for node '{0}'")]
    Missing(String),
    #[error("weights for '{node}': {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("node id '{0}' cannot be used as a file name")]
    UnsafeId(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    nodes: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    weight: String,
    bias: Option<String>,
}

const FORMAT: &str = "poseopt-weights/1";

impl WeightStore {
    pub fn new() -> WeightStore {
        WeightStore::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, w: NodeWeights) {
        self.entries.insert(id.into(), w);
    }

    pub fn get(&self, id: &str) -> Option<&NodeWeights> {
        self.entries.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut NodeWeights> {
        self.entries.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeWeights)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Seeded He-uniform conv weights and small uniform biases for every
    /// Conv2d node of `g`.
    pub fn random(g: &Graph, seed: u64) -> WeightStore {
        let mut rng = SplitMix64::new(seed);
        let mut store = WeightStore::new();
        for (n, a) in g.conv_nodes() {
            let fan_in = (a.in_channels / a.groups) * a.kernel_h * a.kernel_w;
            let bound = (6.0 / fan_in as f64).sqrt();
            let shape = TensorShape::new(a.weight_dims()).expect("conv dims are positive");
            let weight = Tensor::from_fn(shape, |_| rng.uniform(-bound, bound) as f32);
            let bias = a.has_bias.then(|| {
                Tensor::from_fn(TensorShape::new(vec![a.out_channels]).expect("positive"), |_| {
                    rng.uniform(-0.1, 0.1) as f32
                })
            });
            store.insert(n.id.clone(), NodeWeights { weight, bias });
        }
        store
    }

    /// Checks that every Conv2d node has correctly shaped weights and that
    /// no entry names a node outside `g`.
    pub fn check_against(&self, g: &Graph) -> Result<(), WeightError> {
        let shapes = crate::graph::infer_shapes(g).ok();
        for n in &g.nodes {
            match &n.op {
                Op::Conv2d(a) => {
                    let w = self.get(&n.id).ok_or_else(|| WeightError::Missing(n.id.clone()))?;
                    if w.weight.dims() != a.weight_dims().as_slice() {
                        return Err(WeightError::ShapeMismatch {
                            node: n.id.clone(),
                            detail: format!("weight {} but attrs need {:?}", w.weight.shape(), a.weight_dims()),
                        });
                    }
                    match (&w.bias, a.has_bias) {
                        (Some(b), true) if b.dims() == [a.out_channels] => {}
                        (None, false) => {}
                        (b, _) => {
                            return Err(WeightError::ShapeMismatch {
                                node: n.id.clone(),
                                detail: format!(
                                    "bias {:?} but has_bias = {} with {} outputs",
                                    b.as_ref().map(|t| t.shape().to_string()),
                                    a.has_bias,
                                    a.out_channels
                                ),
                            })
                        }
                    }
                }
                Op::Activation(ActivationFn::Prelu) => {
                    if let (Some(w), Some(shapes)) = (self.get(&n.id), &shapes) {
                        let c = shapes[&n.id].dims()[0];
                        if w.weight.dims() != [c] && w.weight.dims() != [1] {
                            return Err(WeightError::ShapeMismatch {
                                node: n.id.clone(),
                                detail: format!("prelu slope {} for {c} channels", w.weight.shape()),
                            });
                        }
                    }
                }
                _ => {}
            }
        }
        for id in self.entries.keys() {
            if g.node(id).is_none() {
                return Err(WeightError::ShapeMismatch {
                    node: id.clone(),
                    detail: "no such node in the graph".into(),
                });
            }
        }
        Ok(())
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>, WeightError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut nodes = Vec::new();
        for (id, w) in &self.entries {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(WeightError::UnsafeId(id.clone()));
            }
            let wf = format!("{id}.w.tnsr");
            w.weight.save(dir.join(&wf))?;
            written.push(dir.join(&wf));
            let bf = match &w.bias {
                Some(b) => {
                    let bf = format!("{id}.b.tnsr");
                    b.save(dir.join(&bf))?;
                    written.push(dir.join(&bf));
                    Some(bf)
                }
                None => None,
            };
            nodes.push(ManifestEntry {
                id: id.clone(),
                weight: wf,
                bias: bf,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            nodes,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        written.push(path);
        Ok(written)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<WeightStore, WeightError> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| WeightError::Manifest(e.to_string()))?;
        if m.format != FORMAT {
            return Err(WeightError::Manifest(format!("unsupported format '{}'", m.format)));
        }
        let mut store = WeightStore::new();
        for e in m.nodes {
            for f in std::iter::once(&e.weight).chain(e.bias.as_ref()) {
                if f.contains(['/', '\\']) || f.starts_with('.') {
                    return Err(WeightError::Manifest(format!("file '{f}' escapes the directory")));
                }
            }
            let weight = Tensor::load(dir.join(&e.weight))?;
            let bias = e.bias.map(|b| Tensor::load(dir.join(b))).transpose()?;
            store.insert(e.id, NodeWeights { weight, bias });
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Graph {
        crate::graph::parse_graph(include_str!("../../../fixtures/toy_pose.graph.json")).unwrap()
    }

    #[test]
    fn random_store_matches_graph() {
        let g = toy();
        let w = WeightStore::random(&g, 3);
        w.check_against(&g).unwrap();
        assert_eq!(w, WeightStore::random(&g, 3));
        assert_ne!(w, WeightStore::random(&g, 4));
    }

    #[test]
    fn directory_round_trip() {
        let g = toy();
        let w = WeightStore::random(&g, 9);
        let dir = tempfile::tempdir().unwrap();
        w.save_dir(dir.path()).unwrap();
        assert_eq!(WeightStore::load_dir(dir.path()).unwrap(), w);
    }

    #[test]
    fn missing_and_misshapen() {
        let g = toy();
        let mut w = WeightStore::random(&g, 1);
        let stem = w.get("stem").unwrap().clone();
        w.insert("b1", stem);
        assert!(matches!(w.check_against(&g), Err(WeightError::ShapeMismatch { node, .. }) if node == "b1"));
        let empty = WeightStore::new();
        assert!(matches!(empty.check_against(&g), Err(WeightError::Missing(_))));
    }
}

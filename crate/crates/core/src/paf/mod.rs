//! Part-affinity-field decoding: heatmaps and PAFs to per-person poses.
//!
//! 1. [`extract_peaks`] finds keypoint candidates per joint.
//! 2. [`connection_score`] integrates the limb's field along every candidate
//!    pair.
//! 3. [`match_limb`] greedily picks a one-to-one subset per limb.
//! 4. [`decode`] walks the limbs in skeleton order and grows person
//!    instances from the accepted connections.

mod limbs;
mod peaks;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use limbs::{connection_score, match_limb, Connection, ConnectionScore, Plane};
pub use peaks::plane_peaks;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("{what} has {got} channels, the skeleton needs {want}")]
    ChannelMismatch { what: &'static str, want: usize, got: usize },
    #[error("heatmaps are {heat:?} but PAFs are {paf:?}; spatial sizes must agree")]
    SizeMismatch { heat: (usize, usize), paf: (usize, usize) },
    #[error("{0} must be a (C, H, W) tensor")]
    NotChw(&'static str),
    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),
    #[error("zero-length limb segment at ({x}, {y})")]
    DegenerateSegment { x: f64, y: f64 },
}

/// Joint names plus the limbs joining them. Limb `i` reads PAF channels
/// `2i` (x component) and `2i + 1` (y component). Limb order matters: it is
/// the order instances are assembled in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    pub limbs: Vec<(usize, usize)>,
}

const COCO18_JOINTS: [&str; 18] = [
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist", "r_hip", "r_knee",
    "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
];

const COCO18_LIMBS: [(usize, usize); 19] = [
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10), (1, 11),
    (11, 12), (12, 13), (1, 0), (0, 14), (14, 16), (0, 15), (15, 17), (2, 16), (5, 17),
];

impl SkeletonSpec {
    /// The 18-joint, 19-limb COCO layout used by OpenPose-style networks.
    pub fn coco18() -> SkeletonSpec {
        SkeletonSpec {
            joint_names: COCO18_JOINTS.iter().map(|s| s.to_string()).collect(),
            limbs: COCO18_LIMBS.to_vec(),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn num_limbs(&self) -> usize {
        self.limbs.len()
    }

    pub fn check(&self) -> Result<(), DecodeError> {
        let j = self.num_joints();
        if j == 0 || self.limbs.is_empty() {
            return Err(DecodeError::InvalidSkeleton("needs at least one joint and one limb".into()));
        }
        for (i, &(a, b)) in self.limbs.iter().enumerate() {
            if a >= j || b >= j {
                return Err(DecodeError::InvalidSkeleton(format!("limb {i} ({a}, {b}) names a joint >= {j}")));
            }
            if a == b {
                return Err(DecodeError::InvalidSkeleton(format!("limb {i} joins joint {a} to itself")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<SkeletonSpec, DecodeError> {
        let s: SkeletonSpec = serde_json::from_str(text).map_err(|e| DecodeError::InvalidSkeleton(e.to_string()))?;
        s.check()?;
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    #[serde(rename = "id")]
    pub joint_id: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub peak_threshold: f64,
    pub num_integral_samples: usize,
    pub sample_alignment_threshold: f64,
    pub min_aligned_fraction: f64,
    pub use_distance_prior: bool,
    pub min_parts: usize,
    pub min_avg_score: f64,
    /// Quadratic sub-pixel peak refinement; off gives grid-aligned peaks.
    pub subpixel: bool,
    /// Same-joint peaks closer than this (pixels) to a stronger peak are
    /// dropped. Zero keeps every 4-neighbour maximum.
    pub peak_suppression_radius: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            peak_threshold: 0.1,
            num_integral_samples: 10,
            sample_alignment_threshold: 0.05,
            min_aligned_fraction: 0.8,
            use_distance_prior: true,
            min_parts: 4,
            min_avg_score: 0.4,
            subpixel: true,
            peak_suppression_radius: 3.0,
        }
    }
}

impl DecodeConfig {
    pub fn check(&self) -> Result<(), DecodeError> {
        for (name, v) in [
            ("peak_threshold", self.peak_threshold),
            ("sample_alignment_threshold", self.sample_alignment_threshold),
            ("min_aligned_fraction", self.min_aligned_fraction),
            ("min_avg_score", self.min_avg_score),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DecodeError::InvalidConfig(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.peak_suppression_radius >= 0.0 && self.peak_suppression_radius.is_finite()) {
            return Err(DecodeError::InvalidConfig("peak_suppression_radius must be a finite number >= 0".into()));
        }
        if self.num_integral_samples < 2 {
            return Err(DecodeError::InvalidConfig("num_integral_samples must be >= 2".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<DecodeConfig, DecodeError> {
        let c: DecodeConfig = serde_json::from_str(text).map_err(|e| DecodeError::InvalidConfig(e.to_string()))?;
        c.check()?;
        Ok(c)
    }
}

/// One decoded person.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseInstance {
    pub joints: Vec<Option<Keypoint>>,
    pub num_parts: usize,
    /// Sum of keypoint scores and accepted connection scores.
    pub total_score: f64,
}

impl Serialize for PoseInstance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Doc<'a> {
            joints: &'a [Option<Keypoint>],
            score: f64,
        }
        Doc {
            joints: &self.joints,
            score: self.total_score,
        }
        .serialize(s)
    }
}

/// The decoder's JSON document, `{"poses": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeOutput {
    pub poses: Vec<PoseInstance>,
}

fn check_finite(t: &Tensor, what: &'static str) -> Result<(), DecodeError> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DecodeError::NonFinite(what))
    }
}

/// Peaks of every heatmap channel.
pub fn extract_peaks(heatmaps: &Tensor, cfg: &DecodeConfig) -> Result<Vec<Vec<Keypoint>>, DecodeError> {
    let (c, h, w) = heatmaps.shape().as_chw().ok_or(DecodeError::NotChw("heatmaps"))?;
    check_finite(heatmaps, "heatmaps")?;
    Ok((0..c)
        .into_par_iter()
        .map(|j| plane_peaks(heatmaps.channel(j), h, w, j, cfg))
        .collect())
}

/// All valid connections of limb `l`, scored.
fn limb_connections(
    limb_id: usize,
    pafs: &Tensor,
    cand_a: &[Keypoint],
    cand_b: &[Keypoint],
    cfg: &DecodeConfig,
) -> Vec<Connection> {
    let (_, h, w) = pafs.chw();
    let px = Plane::new(pafs.channel(2 * limb_id), h, w);
    let py = Plane::new(pafs.channel(2 * limb_id + 1), h, w);
    let mut out = Vec::new();
    for (i, a) in cand_a.iter().enumerate() {
        for (j, b) in cand_b.iter().enumerate() {
            // Coincident candidates have no direction to score.
            let Ok(s) = connection_score(px, py, a, b, cfg) else {
                continue;
            };
            if s.valid {
                out.push(Connection {
                    limb_id,
                    keypoint_a: i,
                    keypoint_b: j,
                    score: s.score + s.prior,
                });
            }
        }
    }
    out
}

struct Partial {
    /// Candidate index per joint.
    slots: Vec<Option<usize>>,
    score: f64,
}

/// Full decode. Heatmaps must have exactly one channel per joint and PAFs
/// two per limb, at the same spatial size.
pub fn decode(
    heatmaps: &Tensor,
    pafs: &Tensor,
    skel: &SkeletonSpec,
    cfg: &DecodeConfig,
) -> Result<Vec<PoseInstance>, DecodeError> {
    skel.check()?;
    cfg.check()?;
    let (hc, hh, hw) = heatmaps.shape().as_chw().ok_or(DecodeError::NotChw("heatmaps"))?;
    let (pc, ph, pw) = pafs.shape().as_chw().ok_or(DecodeError::NotChw("pafs"))?;
    if hc != skel.num_joints() {
        return Err(DecodeError::ChannelMismatch {
            what: "heatmaps",
            want: skel.num_joints(),
            got: hc,
        });
    }
    if pc != 2 * skel.num_limbs() {
        return Err(DecodeError::ChannelMismatch {
            what: "pafs",
            want: 2 * skel.num_limbs(),
            got: pc,
        });
    }
    if (hh, hw) != (ph, pw) {
        return Err(DecodeError::SizeMismatch {
            heat: (hh, hw),
            paf: (ph, pw),
        });
    }
    check_finite(pafs, "pafs")?;
    let candidates = extract_peaks(heatmaps, cfg)?;

    let matched: Vec<Vec<Connection>> = skel
        .limbs
        .par_iter()
        .enumerate()
        .map(|(l, &(a, b))| match_limb(limb_connections(l, pafs, &candidates[a], &candidates[b], cfg)))
        .collect();

    let poses = assemble(skel, &candidates, &matched)
        .into_iter()
        .filter_map(|p| {
            let joints: Vec<Option<Keypoint>> = p.slots.iter().enumerate().map(|(j, s)| s.map(|i| candidates[j][i])).collect();
            let num_parts = joints.iter().flatten().count();
            (num_parts >= cfg.min_parts && p.score / num_parts as f64 >= cfg.min_avg_score).then_some(PoseInstance {
                joints,
                num_parts,
                total_score: p.score,
            })
        })
        .collect();
    Ok(poses)
}

/// Grows instances from matched connections, limb by limb.
///
/// A connection with no endpoint in any instance starts a new one. With one
/// endpoint owned, the other joins that instance if its joint slot is free.
/// With endpoints in two instances whose joints do not overlap, the two are
/// merged. Anything else (same instance, overlapping joints, occupied slot)
/// is ignored.
fn assemble(skel: &SkeletonSpec, candidates: &[Vec<Keypoint>], matched: &[Vec<Connection>]) -> Vec<Partial> {
    let j = skel.num_joints();
    let mut parts: Vec<Option<Partial>> = Vec::new();
    let mut owner: HashMap<(usize, usize), usize> = HashMap::new();

    for (l, conns) in matched.iter().enumerate() {
        let (ja, jb) = skel.limbs[l];
        for c in conns {
            let (ka, kb) = ((ja, c.keypoint_a), (jb, c.keypoint_b));
            match (owner.get(&ka).copied(), owner.get(&kb).copied()) {
                (None, None) => {
                    let mut slots = vec![None; j];
                    slots[ja] = Some(ka.1);
                    slots[jb] = Some(kb.1);
                    let id = parts.len();
                    parts.push(Some(Partial {
                        slots,
                        score: candidates[ja][ka.1].score + candidates[jb][kb.1].score + c.score,
                    }));
                    owner.insert(ka, id);
                    owner.insert(kb, id);
                }
                (Some(p), None) | (None, Some(p)) => {
                    let (free_joint, free) = if owner.contains_key(&ka) { (jb, kb) } else { (ja, ka) };
                    let part = parts[p].as_mut().expect("owners point at live instances");
                    if part.slots[free_joint].is_none() {
                        part.slots[free_joint] = Some(free.1);
                        part.score += candidates[free_joint][free.1].score + c.score;
                        owner.insert(free, p);
                    }
                }
                (Some(p), Some(q)) if p != q => {
                    let (keep, gone) = (p.min(q), p.max(q));
                    let disjoint = {
                        let (x, y) = (parts[keep].as_ref().unwrap(), parts[gone].as_ref().unwrap());
                        x.slots.iter().zip(&y.slots).all(|(s, t)| s.is_none() || t.is_none())
                    };
                    if disjoint {
                        let g = parts[gone].take().unwrap();
                        let k = parts[keep].as_mut().unwrap();
                        for (jj, s) in g.slots.iter().enumerate() {
                            if let Some(i) = *s {
                                k.slots[jj] = Some(i);
                                owner.insert((jj, i), keep);
                            }
                        }
                        k.score += g.score + c.score;
                    }
                }
                _ => {}
            }
        }
    }
    parts.into_iter().flatten().collect()
}

//! Synthetic scenes with known ground truth, rendered into the heatmap and
//! PAF targets a pose network is trained to produce.
//!
//! Everything is driven by [`SplitMix64`], so a `(k, config, seed)` triple
//! gives the same scene and byte-identical tensors on every platform.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::TensorShape;
use crate::paf::{PoseInstance, SkeletonSpec};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("could not place {persons} persons in {height}x{width} after {rejections} rejections")]
    PlacementFailed {
        persons: usize,
        height: usize,
        width: usize,
        rejections: usize,
    },
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Skeleton(#[from] crate::paf::DecodeError),
    #[error("pose {person_id} has {got} joints, the skeleton has {want}")]
    PoseMismatch { person_id: usize, want: usize, got: usize },
    #[error("the built-in pose template only covers the 18-joint COCO skeleton; got {0} joints")]
    UnsupportedSkeleton(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPose {
    pub person_id: usize,
    /// `(x, y)` in pixels, one entry per joint.
    pub joints: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub gaussian_sigma: f64,
    pub limb_width: f64,
    pub noise_amplitude: f64,
    pub noise_seed: u64,
    pub min_person_separation: f64,
    pub margin: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            height: 368,
            width: 368,
            gaussian_sigma: 2.0,
            limb_width: 4.0,
            noise_amplitude: 0.0,
            noise_seed: 0,
            min_person_separation: 24.0,
            margin: 8.0,
        }
    }
}

impl RenderConfig {
    /// Written with negated comparisons so NaN fails every check.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn check(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.height == 0 || self.width == 0 {
            return bad(format!("image size {}x{} must be positive", self.height, self.width));
        }
        if !(self.gaussian_sigma > 0.0) {
            return bad(format!("gaussian_sigma {} must be > 0", self.gaussian_sigma));
        }
        if !(self.limb_width > 0.0) {
            return bad(format!("limb_width {} must be > 0", self.limb_width));
        }
        if !(self.noise_amplitude >= 0.0) {
            return bad(format!("noise_amplitude {} must be >= 0", self.noise_amplitude));
        }
        if !(self.min_person_separation >= 0.0 && self.margin >= 0.0) {
            return bad("min_person_separation and margin must be >= 0".into());
        }
        Ok(())
    }
}

/// Upright person facing the camera, unit height, origin at the head top
/// centre. COCO-18 joint order.
const TEMPLATE: [[f64; 2]; 18] = [
    [0.0, 0.09],
    [0.0, 0.18],
    [-0.12, 0.19],
    [-0.17, 0.34],
    [-0.20, 0.48],
    [0.12, 0.19],
    [0.17, 0.34],
    [0.20, 0.48],
    [-0.07, 0.52],
    [-0.08, 0.75],
    [-0.09, 0.98],
    [0.07, 0.52],
    [0.08, 0.75],
    [0.09, 0.98],
    [-0.03, 0.06],
    [0.03, 0.06],
    [-0.06, 0.08],
    [0.06, 0.08],
];

/// Person heights are drawn uniformly from this range, in pixels.
pub const HEIGHT_RANGE: (f64, f64) = (90.0, 130.0);

/// Total rejected draws allowed across all persons of a scene.
pub const MAX_REJECTIONS: usize = 1000;

fn template_extent() -> (f64, f64, f64, f64) {
    TEMPLATE.iter().fold((f64::MAX, f64::MIN, f64::MAX, f64::MIN), |(x0, x1, y0, y1), p| {
        (x0.min(p[0]), x1.max(p[0]), y0.min(p[1]), y1.max(p[1]))
    })
}

/// Places `k` template persons with random scale and position.
///
/// Each draw takes, in order: height, x offset, y offset. A draw is rejected
/// when a joint would come closer than `min_person_separation` to any joint
/// of an already placed person.
pub fn gen_poses(k: usize, skel: &SkeletonSpec, cfg: &RenderConfig, seed: u64) -> Result<Vec<GroundTruthPose>, SynthError> {
    cfg.check()?;
    skel.check()?;
    if skel.num_joints() != TEMPLATE.len() {
        return Err(SynthError::UnsupportedSkeleton(skel.num_joints()));
    }
    let failed = |rejections| SynthError::PlacementFailed {
        persons: k,
        height: cfg.height,
        width: cfg.width,
        rejections,
    };
    let (tx0, tx1, ty0, ty1) = template_extent();
    let mut rng = SplitMix64::new(seed);
    let mut poses: Vec<GroundTruthPose> = Vec::with_capacity(k);
    let mut rejections = 0;
    let min_sq = cfg.min_person_separation * cfg.min_person_separation;

    while poses.len() < k {
        let height = rng.uniform(HEIGHT_RANGE.0, HEIGHT_RANGE.1);
        // Offsets keep every joint at least `margin` inside the image.
        let x_lo = cfg.margin - tx0 * height;
        let x_hi = cfg.width as f64 - 1.0 - cfg.margin - tx1 * height;
        let y_lo = cfg.margin - ty0 * height;
        let y_hi = cfg.height as f64 - 1.0 - cfg.margin - ty1 * height;
        let (u, v) = (rng.next_f64(), rng.next_f64());
        if x_hi < x_lo || y_hi < y_lo {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(failed(rejections));
            }
            continue;
        }
        let (ox, oy) = (x_lo + u * (x_hi - x_lo), y_lo + v * (y_hi - y_lo));
        let joints: Vec<[f64; 2]> = TEMPLATE.iter().map(|p| [ox + p[0] * height, oy + p[1] * height]).collect();
        let clash = poses.iter().any(|other| {
            other.joints.iter().any(|q| {
                joints.iter().any(|p| {
                    let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
                    dx * dx + dy * dy < min_sq
                })
            })
        });
        if clash {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(failed(rejections));
            }
            continue;
        }
        poses.push(GroundTruthPose {
            person_id: poses.len(),
            joints,
        });
    }
    Ok(poses)
}

/// Renders `(heatmaps [J, H, W], pafs [2L, H, W])`.
///
/// Heatmap `j` is the per-pixel maximum over persons of a Gaussian of width
/// `gaussian_sigma` at joint `j`. A limb's PAF holds its unit direction at
/// pixels within `limb_width` of the segment, averaged where several persons'
/// limbs overlap, and zero elsewhere. Uniform noise in
/// `[-noise_amplitude, noise_amplitude]` is added last; heatmaps are then
/// clamped to `[0, 1]`.
pub fn render(poses: &[GroundTruthPose], skel: &SkeletonSpec, cfg: &RenderConfig) -> Result<(Tensor, Tensor), SynthError> {
    cfg.check()?;
    skel.check()?;
    if let Some(p) = poses.iter().find(|p| p.joints.len() != skel.num_joints()) {
        return Err(SynthError::PoseMismatch {
            person_id: p.person_id,
            want: skel.num_joints(),
            got: p.joints.len(),
        });
    }
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let j = skel.num_joints();
    let l = skel.num_limbs();

    let mut heat = vec![0.0f32; j * plane];
    heat.par_chunks_mut(plane).enumerate().for_each(|(jj, out)| {
        let inv = 1.0 / (2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma);
        // Past this distance exp() < e^-110, which rounds to 0 in f32, so
        // skipping those pixels leaves the result bit-identical.
        let reach = cfg.gaussian_sigma * 220f64.sqrt();
        let span = |c: f64, n: usize| {
            let lo = (c - reach).ceil().max(0.0) as usize;
            let hi = ((c + reach).floor().max(-1.0) + 1.0).min(n as f64) as usize;
            lo.min(hi)..hi
        };
        for p in poses {
            let [cx, cy] = p.joints[jj];
            let xs = span(cx, w);
            let gx: Vec<f64> = xs.clone().map(|x| (-(x as f64 - cx).powi(2) * inv).exp()).collect();
            for y in span(cy, h) {
                let gy = (-(y as f64 - cy).powi(2) * inv).exp();
                for (v, g) in out[y * w + xs.start..y * w + xs.end].iter_mut().zip(&gx) {
                    *v = v.max((g * gy) as f32);
                }
            }
        }
    });

    let mut paf = vec![0.0f32; 2 * l * plane];
    paf.par_chunks_mut(2 * plane).enumerate().for_each(|(li, out)| {
        let (ja, jb) = skel.limbs[li];
        let mut sum = vec![[0.0f64; 2]; plane];
        let mut count = vec![0u32; plane];
        for p in poses {
            let (a, b) = (p.joints[ja], p.joints[jb]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = dx.hypot(dy);
            if len < 1e-9 {
                continue;
            }
            let (ex, ey) = (dx / len, dy / len);
            let r = cfg.limb_width;
            let x0 = (a[0].min(b[0]) - r).floor().max(0.0) as usize;
            let x1 = ((a[0].max(b[0]) + r).ceil().max(0.0) as usize).min(w - 1);
            let y0 = (a[1].min(b[1]) - r).floor().max(0.0) as usize;
            let y1 = ((a[1].max(b[1]) + r).ceil().max(0.0) as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (px, py) = (x as f64 - a[0], y as f64 - a[1]);
                    let t = (px * ex + py * ey).clamp(0.0, len);
                    let (qx, qy) = (px - t * ex, py - t * ey);
                    if qx * qx + qy * qy <= r * r {
                        let i = y * w + x;
                        sum[i][0] += ex;
                        sum[i][1] += ey;
                        count[i] += 1;
                    }
                }
            }
        }
        let (ox, oy) = out.split_at_mut(plane);
        for i in 0..plane {
            if count[i] > 0 {
                ox[i] = (sum[i][0] / count[i] as f64) as f32;
                oy[i] = (sum[i][1] / count[i] as f64) as f32;
            }
        }
    });

    if cfg.noise_amplitude > 0.0 {
        let amp = cfg.noise_amplitude;
        let mut rng = SplitMix64::new(derive_seed(cfg.noise_seed, 0));
        for v in &mut heat {
            *v = (*v as f64 + rng.uniform(-amp, amp)).clamp(0.0, 1.0) as f32;
        }
        let mut rng = SplitMix64::new(derive_seed(cfg.noise_seed, 1));
        for v in &mut paf {
            *v = (*v as f64 + rng.uniform(-amp, amp)) as f32;
        }
    }

    let heat = Tensor::new(TensorShape::chw(j, h, w), heat).expect("sized");
    let paf = Tensor::new(TensorShape::chw(2 * l, h, w), paf).expect("sized");
    Ok((heat, paf))
}

/// How a decode result lines up with the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneMatch {
    pub persons_expected: usize,
    pub persons_decoded: usize,
    /// Ground-truth person for each decoded instance, under the assignment
    /// that minimises total joint error. Empty when the counts differ.
    pub assignment: Vec<usize>,
    /// Largest joint error under that assignment, in pixels.
    pub max_joint_error: f64,
    /// Joints the decoder left empty across all matched instances.
    pub missing_joints: usize,
}

impl SceneMatch {
    pub fn count_ok(&self) -> bool {
        self.persons_expected == self.persons_decoded
    }

    /// Same person count, every joint present and within `tol` pixels.
    pub fn exact(&self, tol: f64) -> bool {
        self.count_ok() && self.missing_joints == 0 && self.max_joint_error <= tol
    }
}

fn pose_error(p: &PoseInstance, t: &GroundTruthPose) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (k, g) in p.joints.iter().zip(&t.joints) {
        if let Some(k) = k {
            let d = (k.x - g[0]).hypot(k.y - g[1]);
            sum += d;
            max = max.max(d);
        }
    }
    (sum, max)
}

/// Matches decoded instances to ground-truth persons one-to-one by trying
/// every assignment (scenes hold a handful of persons).
pub fn match_scene(decoded: &[PoseInstance], truth: &[GroundTruthPose]) -> SceneMatch {
    let mut m = SceneMatch {
        persons_expected: truth.len(),
        persons_decoded: decoded.len(),
        assignment: Vec::new(),
        max_joint_error: f64::INFINITY,
        missing_joints: decoded.iter().map(|p| p.joints.len() - p.num_parts).sum(),
    };
    if decoded.len() != truth.len() {
        return m;
    }
    let cost: Vec<Vec<(f64, f64)>> = decoded.iter().map(|p| truth.iter().map(|t| pose_error(p, t)).collect()).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut perm: Vec<usize> = (0..truth.len()).collect();
    permute(&mut perm, 0, &mut |perm| {
        let total: f64 = perm.iter().enumerate().map(|(i, &t)| cost[i][t].0).sum();
        if best.as_ref().map_or(true, |(b, _)| total < *b) {
            best = Some((total, perm.to_vec()));
        }
    });
    let (_, assignment) = best.expect("at least the identity permutation");
    m.max_joint_error = assignment.iter().enumerate().map(|(i, &t)| cost[i][t].1).fold(0.0, f64::max);
    m.assignment = assignment;
    m
}

fn permute(v: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paf::{decode, extract_peaks, DecodeConfig};

    fn coco() -> SkeletonSpec {
        SkeletonSpec::coco18()
    }

    #[test]
    fn zero_persons() {
        assert!(gen_poses(0, &coco(), &RenderConfig::default(), 1).unwrap().is_empty());
    }

    #[test]
    fn deterministic_and_separated() {
        let cfg = RenderConfig::default();
        let a = gen_poses(3, &coco(), &cfg, 42).unwrap();
        assert_eq!(a, gen_poses(3, &coco(), &cfg, 42).unwrap());
        assert_ne!(a, gen_poses(3, &coco(), &cfg, 43).unwrap());
        for (i, p) in a.iter().enumerate() {
            for q in &a[i + 1..] {
                for u in &p.joints {
                    for v in &q.joints {
                        assert!((u[0] - v[0]).hypot(u[1] - v[1]) >= 24.0);
                    }
                }
            }
            for u in &p.joints {
                assert!(u[0] >= 8.0 && u[1] >= 8.0 && u[0] <= 359.0 && u[1] <= 359.0);
            }
        }
    }

    #[test]
    fn placement_fails_in_a_tiny_image() {
        let cfg = RenderConfig {
            height: 140,
            width: 140,
            ..RenderConfig::default()
        };
        assert!(matches!(gen_poses(8, &coco(), &cfg, 0), Err(SynthError::PlacementFailed { .. })));
    }

    #[test]
    fn heatmap_peak_and_paf_corridor() {
        let skel = SkeletonSpec {
            joint_names: vec!["a".into(), "b".into()],
            limbs: vec![(0, 1)],
        };
        let cfg = RenderConfig {
            height: 32,
            width: 48,
            ..RenderConfig::default()
        };
        let pose = GroundTruthPose {
            person_id: 0,
            joints: vec![[10.0, 12.0], [30.0, 12.0]],
        };
        let (heat, paf) = render(&[pose], &skel, &cfg).unwrap();
        let c0 = heat.channel(0);
        let argmax = (0..c0.len()).max_by(|&a, &b| c0[a].total_cmp(&c0[b])).unwrap();
        assert_eq!((argmax % 48, argmax / 48), (10, 12));
        assert_eq!(c0[argmax], 1.0);
        assert!(heat.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (px, py) = (paf.channel(0), paf.channel(1));
        assert_eq!((px[12 * 48 + 20], py[12 * 48 + 20]), (1.0, 0.0));
        assert_eq!(px[(12 + 4) * 48 + 20], 1.0);
        assert_eq!(px[(12 + 5) * 48 + 20], 0.0);
    }

    #[test]
    fn antiparallel_overlap_averages() {
        let skel = SkeletonSpec {
            joint_names: vec!["a".into(), "b".into()],
            limbs: vec![(0, 1)],
        };
        let cfg = RenderConfig {
            height: 24,
            width: 40,
            ..RenderConfig::default()
        };
        let p = |a: [f64; 2], b: [f64; 2]| GroundTruthPose { person_id: 0, joints: vec![a, b] };
        let poses = [p([5.0, 10.0], [30.0, 10.0]), p([28.0, 12.0], [8.0, 12.0])];
        let (_, paf) = render(&poses, &skel, &cfg).unwrap();
        for (x, y) in paf.channel(0).iter().zip(paf.channel(1)) {
            assert!((*x as f64).hypot(*y as f64) <= 1.0 + 1e-6);
        }
        assert_eq!(paf.channel(0)[11 * 40 + 15], 0.0);
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let cfg = RenderConfig {
            height: 64,
            width: 64,
            noise_amplitude: 0.05,
            noise_seed: 7,
            ..RenderConfig::default()
        };
        let (h1, p1) = render(&[], &coco(), &cfg).unwrap();
        let (h2, p2) = render(&[], &coco(), &cfg).unwrap();
        assert_eq!((h1.to_bytes(), p1.to_bytes()), (h2.to_bytes(), p2.to_bytes()));
        assert!(h1.data().iter().all(|v| (0.0..=0.05).contains(v)));
        assert!(p1.data().iter().any(|v| *v < 0.0));
    }

    #[test]
    fn two_bumps_twenty_pixels_apart() {
        let skel = SkeletonSpec {
            joint_names: vec!["a".into(), "b".into()],
            limbs: vec![(0, 1)],
        };
        let cfg = RenderConfig {
            height: 40,
            width: 60,
            ..RenderConfig::default()
        };
        let centres = [[15.3, 20.0], [35.3, 20.0]];
        let poses: Vec<_> = centres
            .iter()
            .enumerate()
            .map(|(i, c)| GroundTruthPose { person_id: i, joints: vec![*c, [c[0], c[1] + 10.0]] })
            .collect();
        let (heat, _) = render(&poses, &skel, &cfg).unwrap();
        let peaks = extract_peaks(&heat, &DecodeConfig::default()).unwrap();
        assert_eq!(peaks[0].len(), 2);
        for (k, c) in peaks[0].iter().zip(&centres) {
            assert!((k.x - c[0]).hypot(k.y - c[1]) < 0.5);
        }
    }

    #[test]
    fn one_and_three_person_round_trips() {
        let cfg = RenderConfig::default();
        for (k, seed) in [(1, 5), (3, 11)] {
            let truth = gen_poses(k, &coco(), &cfg, seed).unwrap();
            let (heat, paf) = render(&truth, &coco(), &cfg).unwrap();
            let poses = decode(&heat, &paf, &coco(), &DecodeConfig::default()).unwrap();
            let m = match_scene(&poses, &truth);
            assert!(m.exact(1.5), "{m:?}");
        }
    }

    #[test]
    fn scene_match_counts() {
        let m = match_scene(&[], &[GroundTruthPose { person_id: 0, joints: vec![] }]);
        assert!(!m.count_ok());
        assert!(match_scene(&[], &[]).exact(0.0));
    }
}

use serde::{Deserialize, Serialize};

use super::{DecodeConfig, DecodeError, Keypoint};

/// Borrowed `height x width` view of one tensor channel.
#[derive(Clone, Copy, Debug)]
pub struct Plane<'a> {
    pub data: &'a [f32],
    pub height: usize,
    pub width: usize,
}

impl<'a> Plane<'a> {
    pub fn new(data: &'a [f32], height: usize, width: usize) -> Plane<'a> {
        assert_eq!(data.len(), height * width, "plane size");
        Plane { data, height, width }
    }

    /// Bilinear sample with pixel centres at integer coordinates; positions
    /// outside the plane are clamped to its border.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let v = |x: usize, y: usize| self.data[y * self.width + x] as f64;
        let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
        let bottom = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConnectionScore {
    /// Mean of `PAF . e` over the samples.
    pub score: f64,
    /// Distance prior, zero when disabled.
    pub prior: f64,
    pub aligned_fraction: f64,
    pub valid: bool,
}

/// Line integral of the PAF along `a -> b`.
///
/// Samples `cfg.num_integral_samples` points evenly from `a` to `b`
/// inclusive. Valid when enough samples align with the segment and
/// `score + prior > 0`, where `prior = min(0.5 * H / |b - a| - 1, 0)`.
pub fn connection_score(
    paf_x: Plane<'_>,
    paf_y: Plane<'_>,
    a: &Keypoint,
    b: &Keypoint,
    cfg: &DecodeConfig,
) -> Result<ConnectionScore, DecodeError> {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = dx.hypot(dy);
    if len < 1e-6 {
        return Err(DecodeError::DegenerateSegment { x: a.x, y: a.y });
    }
    let (ex, ey) = (dx / len, dy / len);
    let n = cfg.num_integral_samples;
    let mut sum = 0.0;
    let mut aligned = 0usize;
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let (px, py) = (a.x + t * dx, a.y + t * dy);
        let dot = paf_x.bilinear(px, py) * ex + paf_y.bilinear(px, py) * ey;
        sum += dot;
        if dot > cfg.sample_alignment_threshold {
            aligned += 1;
        }
    }
    let score = sum / n as f64;
    let prior = if cfg.use_distance_prior {
        (0.5 * paf_x.height as f64 / len - 1.0).min(0.0)
    } else {
        0.0
    };
    let aligned_fraction = aligned as f64 / n as f64;
    Ok(ConnectionScore {
        score,
        prior,
        aligned_fraction,
        valid: aligned_fraction >= cfg.min_aligned_fraction && score + prior > 0.0,
    })
}

/// A scored candidate limb between two keypoint candidates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub limb_id: usize,
    /// Index into the candidates of the limb's first joint.
    pub keypoint_a: usize,
    /// Index into the candidates of the limb's second joint.
    pub keypoint_b: usize,
    /// Alignment score plus distance prior.
    pub score: f64,
}

/// Greedy matching: highest score first, ties by `(a, b)`; a connection is
/// kept when neither endpoint has been used.
pub fn match_limb(mut connections: Vec<Connection>) -> Vec<Connection> {
    connections.sort_by(|p, q| {
        q.score
            .total_cmp(&p.score)
            .then(p.keypoint_a.cmp(&q.keypoint_a))
            .then(p.keypoint_b.cmp(&q.keypoint_b))
    });
    let mut used_a = std::collections::HashSet::new();
    let mut used_b = std::collections::HashSet::new();
    connections
        .into_iter()
        .filter(|c| {
            if used_a.contains(&c.keypoint_a) || used_b.contains(&c.keypoint_b) {
                return false;
            }
            used_a.insert(c.keypoint_a);
            used_b.insert(c.keypoint_b);
            true
        })
        .collect()
}

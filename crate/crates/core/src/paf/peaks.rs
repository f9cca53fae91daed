use super::{DecodeConfig, Keypoint};

/// Peaks of one `h x w` plane, in row-major order.
///
/// A pixel is a candidate when it exceeds the threshold and is `>=` each of
/// its 4-neighbours. Candidates that form a 4-connected plateau of equal
/// values yield a single peak at the plateau's first pixel in row-major order.
/// Finally, a peak closer than `cfg.peak_suppression_radius` to a stronger
/// one (earlier in row-major order on ties) is dropped.
pub fn plane_peaks(plane: &[f32], h: usize, w: usize, joint_id: usize, cfg: &DecodeConfig) -> Vec<Keypoint> {
    let peaks = local_maxima(plane, h, w, joint_id, cfg);
    let r = cfg.peak_suppression_radius;
    if r <= 0.0 || peaks.len() < 2 {
        return peaks;
    }
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    order.sort_by(|&a, &b| peaks[b].score.total_cmp(&peaks[a].score).then(a.cmp(&b)));
    let mut keep = vec![false; peaks.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let p = &peaks[i];
        if kept.iter().all(|&k| (peaks[k].x - p.x).hypot(peaks[k].y - p.y) >= r) {
            keep[i] = true;
            kept.push(i);
        }
    }
    peaks.into_iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect()
}

fn local_maxima(plane: &[f32], h: usize, w: usize, joint_id: usize, cfg: &DecodeConfig) -> Vec<Keypoint> {
    let at = |x: usize, y: usize| plane[y * w + x];
    let thr = cfg.peak_threshold as f32;
    let is_candidate = |x: usize, y: usize| {
        let v = at(x, y);
        v > thr
            && (x == 0 || v >= at(x - 1, y))
            && (x + 1 == w || v >= at(x + 1, y))
            && (y == 0 || v >= at(x, y - 1))
            && (y + 1 == h || v >= at(x, y + 1))
    };

    let mut visited = vec![false; h * w];
    let mut peaks = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if visited[y * w + x] || !is_candidate(x, y) {
                continue;
            }
            let v = at(x, y);
            visited[y * w + x] = true;
            stack.push((x, y));
            while let Some((cx, cy)) = stack.pop() {
                let mut visit = |nx: usize, ny: usize| {
                    let i = ny * w + nx;
                    if !visited[i] && at(nx, ny) == v && is_candidate(nx, ny) {
                        visited[i] = true;
                        stack.push((nx, ny));
                    }
                };
                if cx > 0 {
                    visit(cx - 1, cy);
                }
                if cx + 1 < w {
                    visit(cx + 1, cy);
                }
                if cy > 0 {
                    visit(cx, cy - 1);
                }
                if cy + 1 < h {
                    visit(cx, cy + 1);
                }
            }
            let (dx, dy) = if cfg.subpixel {
                let row = |i: usize| at(i, y) as f64;
                let col = |i: usize| at(x, i) as f64;
                (
                    if x > 0 && x + 1 < w { vertex(row(x - 1), row(x), row(x + 1)) } else { 0.0 },
                    if y > 0 && y + 1 < h { vertex(col(y - 1), col(y), col(y + 1)) } else { 0.0 },
                )
            } else {
                (0.0, 0.0)
            };
            peaks.push(Keypoint {
                joint_id,
                x: (x as f64 + dx).clamp(0.0, (w - 1) as f64),
                y: (y as f64 + dy).clamp(0.0, (h - 1) as f64),
                score: v as f64,
            });
        }
    }
    peaks
}

/// Offset of the vertex of the parabola through `(-1, l), (0, c), (1, r)`,
/// clamped to half a pixel. Zero when the samples are not strictly concave.
fn vertex(l: f64, c: f64, r: f64) -> f64 {
    let curvature = l - 2.0 * c + r;
    if curvature >= 0.0 {
        return 0.0;
    }
    (0.5 * (l - r) / curvature).clamp(-0.5, 0.5)
}

//! Merging of collinear neighboring segments and removal of short ones.

use std::cmp::Ordering;

use nalgebra::{Point2, Vector2};

use crate::config::PreprocessConfig;
use crate::geometry::{orientation_difference, Intrinsics, LineSegment2D};
use crate::union_find::UnionFind;

/// Sort key of a segment: the lexicographically smaller endpoint, then the other.
pub fn segment_sort_key(s: &LineSegment2D) -> [f64; 4] {
    let (a, b) = if (s.p.x, s.p.y) <= (s.q.x, s.q.y) {
        (s.p, s.q)
    } else {
        (s.q, s.p)
    };
    [a.x, a.y, b.x, b.y]
}

pub fn cmp_segments(a: &LineSegment2D, b: &LineSegment2D) -> Ordering {
    segment_sort_key(a)
        .iter()
        .zip(segment_sort_key(b).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Smallest of the four endpoint-to-endpoint distances.
pub fn min_endpoint_distance(a: &LineSegment2D, b: &LineSegment2D) -> f64 {
    [(a.p, b.p), (a.p, b.q), (a.q, b.p), (a.q, b.q)]
        .iter()
        .map(|(u, v)| (u - v).norm())
        .fold(f64::INFINITY, f64::min)
}

fn mergeable(a: &LineSegment2D, b: &LineSegment2D, max_angle: f64, max_gap: f64) -> bool {
    orientation_difference(a.orientation(), b.orientation()) < max_angle && min_endpoint_distance(a, b) < max_gap
}

/// Replaces a group of segments by one spanning the extreme endpoint
/// projections onto the group's length-weighted mean direction.
fn fuse(group: &[&LineSegment2D]) -> LineSegment2D {
    let (mut s2, mut c2, mut total) = (0.0, 0.0, 0.0);
    let mut centroid = Vector2::zeros();
    for s in group {
        let t = 2.0 * s.orientation();
        s2 += s.length * t.sin();
        c2 += s.length * t.cos();
        centroid += s.midpoint().coords * s.length;
        total += s.length;
    }
    centroid /= total;
    let theta = 0.5 * s2.atan2(c2);
    let u = Vector2::new(theta.cos(), theta.sin());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in group {
        for e in [s.p, s.q] {
            let t = u.dot(&(e.coords - centroid));
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    let p = Point2::from(centroid + u * lo);
    let q = Point2::from(centroid + u * hi);
    let mut out = LineSegment2D::new(group[0].frame_id, p, q).expect("merged span is positive");
    out.label = None;
    out
}

fn merge_once(segments: &[LineSegment2D], max_angle: f64, max_gap: f64) -> (Vec<LineSegment2D>, bool) {
    let n = segments.len();
    let mut uf = UnionFind::new(n);
    let mut any = false;
    for i in 0..n {
        for j in (i + 1)..n {
            if mergeable(&segments[i], &segments[j], max_angle, max_gap) {
                uf.union(i, j);
                any = true;
            }
        }
    }
    if !any {
        return (segments.to_vec(), false);
    }
    let out = uf
        .sets()
        .into_iter()
        .map(|set| {
            if set.len() == 1 {
                segments[set[0]].clone()
            } else {
                let mut group: Vec<&LineSegment2D> = set.iter().map(|&i| &segments[i]).collect();
                group.sort_by(|a, b| cmp_segments(a, b));
                fuse(&group)
            }
        })
        .collect();
    (out, true)
}

/// Transitively merges segments of one frame whose orientations differ by
/// less than the merge angle and whose nearest endpoints are closer than the
/// merge gap. Merging repeats until no pair qualifies, so the result is a
/// fixed point. Output is sorted by [`segment_sort_key`].
pub fn merge_segments(segments: &[LineSegment2D], k: &Intrinsics, cfg: &PreprocessConfig) -> Vec<LineSegment2D> {
    debug_assert!(segments.windows(2).all(|w| w[0].frame_id == w[1].frame_id));
    let max_angle = cfg.merge_angle_deg.to_radians();
    let max_gap = cfg.merge_gap_fraction * k.min_dim();
    let mut current: Vec<LineSegment2D> = segments.to_vec();
    current.sort_by(cmp_segments);
    loop {
        let (next, changed) = merge_once(&current, max_angle, max_gap);
        current = next;
        current.sort_by(cmp_segments);
        if !changed {
            return current;
        }
    }
}

/// Keeps segments with length at least the minimum-length fraction of `min(w, h)`.
pub fn filter_short(segments: &[LineSegment2D], k: &Intrinsics, cfg: &PreprocessConfig) -> Vec<LineSegment2D> {
    let min_len = cfg.min_length_fraction * k.min_dim();
    segments.iter().filter(|s| s.length >= min_len).cloned().collect()
}

/// Merges and filters every frame; output is grouped by ascending frame id.
pub fn preprocess(segments: &[LineSegment2D], k: &Intrinsics, cfg: &PreprocessConfig) -> Vec<LineSegment2D> {
    let mut frame_ids: Vec<u32> = segments.iter().map(|s| s.frame_id).collect();
    frame_ids.sort_unstable();
    frame_ids.dedup();
    let mut out = Vec::with_capacity(segments.len());
    for id in frame_ids {
        let frame: Vec<LineSegment2D> = segments.iter().filter(|s| s.frame_id == id).cloned().collect();
        out.extend(filter_short(&merge_segments(&frame, k, cfg), k, cfg));
    }
    out
}

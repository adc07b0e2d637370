//! Matching Manhattan segments between nearby frames and grouping the
//! matches into tracks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Point2, SMatrix, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::TrackingConfig;
use crate::error::{Error, Result};
use crate::geometry::{orientation_difference, Axis, FrameRotations, Intrinsics, LineSegment2D, Rotation};
use crate::io::dataset::PointMatches;
use crate::rotation::close_pairs;
use crate::union_find::UnionFind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrackObservation {
    pub frame_id: u32,
    /// Index into the stage's segment list.
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineTrack {
    pub id: usize,
    pub label: Axis,
    /// Sorted by frame id; at most one per frame.
    pub observations: Vec<TrackObservation>,
}

impl LineTrack {
    pub fn observation_in(&self, frame_id: u32) -> Option<&TrackObservation> {
        self.observations
            .binary_search_by_key(&frame_id, |o| o.frame_id)
            .ok()
            .map(|i| &self.observations[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatch {
    /// Segment in `frame_a`.
    pub a: usize,
    /// Segment in `frame_b`.
    pub b: usize,
    pub distance: f64,
}

/// One-to-one matches between two frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMatch {
    pub frame_a: u32,
    pub frame_b: u32,
    pub matches: Vec<SegmentMatch>,
    /// Homography from `frame_a` to `frame_b`, row-major.
    pub homography: [f64; 9],
}

/// Frame index pairs whose optical axes differ by less than the pair angle.
pub fn candidate_pairs(rotations: &FrameRotations, cfg: &TrackingConfig) -> Vec<(usize, usize)> {
    close_pairs(rotations, cfg.pair_angle_deg)
}

/// Scales `h` to Frobenius norm √3 with a positive last entry when possible.
pub fn normalize_homography(h: &Matrix3<f64>) -> Matrix3<f64> {
    let mut out = h * (3f64.sqrt() / h.norm());
    if out[(2, 2)] < 0.0 {
        out = -out;
    }
    out
}

/// Homography induced by a pure rotation from camera `i` to camera `j`.
pub fn rotation_homography(k: &Intrinsics, ri: &Rotation, rj: &Rotation) -> Matrix3<f64> {
    normalize_homography(&(k.matrix() * rj.matrix() * ri.matrix().transpose() * k.inverse_matrix()))
}

fn similarity_normalizer(points: &[Point2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::new(p.x, p.y, 0.0))
        / n;
    let spread = points
        .iter()
        .map(|p| ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if spread > 0.0 { 2f64.sqrt() / spread } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn weighted_dlt(pairs: &[(Point2<f64>, Point2<f64>)], weights: &[f64]) -> Result<Matrix3<f64>> {
    let src: Vec<Point2<f64>> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point2<f64>> = pairs.iter().map(|p| p.1).collect();
    let (ta, tb) = (similarity_normalizer(&src), similarity_normalizer(&dst));
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for ((a, b), w) in pairs.iter().zip(weights) {
        let x = ta * Vector3::new(a.x, a.y, 1.0);
        let y = tb * Vector3::new(b.x, b.y, 1.0);
        let r1 =
            SMatrix::<f64, 1, 9>::from_row_slice(&[0.0, 0.0, 0.0, -x.x, -x.y, -x.z, y.y * x.x, y.y * x.y, y.y * x.z]);
        let r2 =
            SMatrix::<f64, 1, 9>::from_row_slice(&[x.x, x.y, x.z, 0.0, 0.0, 0.0, -y.x * x.x, -y.x * x.y, -y.x * x.z]);
        ata += (r1.transpose() * r1 + r2.transpose() * r2) * *w;
    }
    let eig = SymmetricEigen::new(ata);
    let i = eig.eigenvalues.imin();
    let v = eig.eigenvectors.column(i);
    let hn = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    let tb_inv = tb
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular normalization".into()))?;
    Ok(normalize_homography(&(tb_inv * hn * ta)))
}

/// Homography from point correspondences: normalized direct linear
/// transform, then iteratively reweighted: Huber weights (1 px) first,
/// Cauchy weights afterwards to suppress gross outliers.
pub fn estimate_homography(pairs: &[(Point2<f64>, Point2<f64>)]) -> Result<Matrix3<f64>> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "homography needs at least 4 point matches, got {}",
            pairs.len()
        )));
    }
    let mut weights = vec![1.0; pairs.len()];
    let mut h = weighted_dlt(pairs, &weights)?;
    for iter in 0..10 {
        for ((a, b), w) in pairs.iter().zip(weights.iter_mut()) {
            let e = warp_point(&h, a).map(|p| (p - b).norm()).unwrap_or(f64::INFINITY);
            *w = match iter < 4 {
                true if e <= 1.0 => 1.0,
                true => 1.0 / e,
                false => 1.0 / (1.0 + e * e),
            };
        }
        h = weighted_dlt(pairs, &weights)?;
    }
    Ok(h)
}

pub fn warp_point(h: &Matrix3<f64>, p: &Point2<f64>) -> Result<Point2<f64>> {
    let v = h * Vector3::new(p.x, p.y, 1.0);
    let scale = v.x.abs().max(v.y.abs()).max(1.0);
    if v.z.abs() <= 1e-12 * scale {
        return Err(Error::DegenerateWarp);
    }
    Ok(Point2::new(v.x / v.z, v.y / v.z))
}

/// Normalized image line through two points: `l·[x, y, 1] = signed distance`.
fn line_through(p: &Point2<f64>, q: &Point2<f64>) -> Vector3<f64> {
    let l = Vector3::new(p.x, p.y, 1.0).cross(&Vector3::new(q.x, q.y, 1.0));
    l / l.x.hypot(l.y)
}

fn point_line_distance(l: &Vector3<f64>, p: &Point2<f64>) -> f64 {
    (l.x * p.x + l.y * p.y + l.z).abs()
}

/// Smallest of the four endpoint-to-line distances between `a` warped by
/// `h` and `b`.
pub fn segment_distance(a: &LineSegment2D, b: &LineSegment2D, h: &Matrix3<f64>) -> Result<f64> {
    let (pa, qa) = (warp_point(h, &a.p)?, warp_point(h, &a.q)?);
    if (pa - qa).norm() == 0.0 {
        return Err(Error::DegenerateWarp);
    }
    let la = line_through(&pa, &qa);
    let lb = line_through(&b.p, &b.q);
    Ok([
        point_line_distance(&lb, &pa),
        point_line_distance(&lb, &qa),
        point_line_distance(&la, &b.p),
        point_line_distance(&la, &b.q),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min))
}

fn warped_orientation(a: &LineSegment2D, h: &Matrix3<f64>) -> Result<f64> {
    let (p, q) = (warp_point(h, &a.p)?, warp_point(h, &a.q)?);
    let d = q - p;
    Ok(d.y.atan2(d.x).rem_euclid(std::f64::consts::PI))
}

/// Mutual-nearest matching of labeled segments `seg_a` (frame a) against
/// `seg_b` (frame b) under the homography `h` from a to b. Indices refer to
/// `segments`.
pub fn match_segments(
    segments: &[LineSegment2D],
    seg_a: &[usize],
    seg_b: &[usize],
    h: &Matrix3<f64>,
    k: &Intrinsics,
    cfg: &TrackingConfig,
) -> Vec<SegmentMatch> {
    let max_dist = cfg.match_distance_fraction * k.min_dim();
    let max_angle = cfg.match_angle_deg.to_radians();
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (ia, &a) in seg_a.iter().enumerate() {
        let sa = &segments[a];
        let Some(label) = sa.label else { continue };
        let Ok(theta) = warped_orientation(sa, h) else { continue };
        for (ib, &b) in seg_b.iter().enumerate() {
            let sb = &segments[b];
            if sb.label != Some(label) {
                continue;
            }
            let Ok(d) = segment_distance(sa, sb, h) else { continue };
            if d < max_dist && orientation_difference(theta, sb.orientation()) < max_angle {
                candidates.push((ia, ib, d));
            }
        }
    }
    let better = |cand: (f64, usize), cur: Option<(f64, usize)>| match cur {
        None => true,
        Some(c) => cand.0 < c.0 || (cand.0 == c.0 && cand.1 < c.1),
    };
    let mut best_a: Vec<Option<(f64, usize)>> = vec![None; seg_a.len()];
    let mut best_b: Vec<Option<(f64, usize)>> = vec![None; seg_b.len()];
    for &(ia, ib, d) in &candidates {
        if better((d, seg_b[ib]), best_a[ia]) {
            best_a[ia] = Some((d, seg_b[ib]));
        }
        if better((d, seg_a[ia]), best_b[ib]) {
            best_b[ib] = Some((d, seg_a[ia]));
        }
    }
    let mut out: Vec<SegmentMatch> = candidates
        .into_iter()
        .filter(|&(ia, ib, _)| best_a[ia].map(|x| x.1) == Some(seg_b[ib]) && best_b[ib].map(|x| x.1) == Some(seg_a[ia]))
        .map(|(ia, ib, d)| SegmentMatch {
            a: seg_a[ia],
            b: seg_b[ib],
            distance: d,
        })
        .collect();
    out.sort_by_key(|m| (m.a, m.b));
    out
}

/// Per-frame segment index lists, keyed by frame id.
pub fn segments_by_frame(segments: &[LineSegment2D]) -> BTreeMap<u32, Vec<usize>> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        map.entry(s.frame_id).or_default().push(i);
    }
    map
}

/// Homography from frame `a` to frame `b`: from point matches when the
/// dataset provides them for this pair, otherwise rotation-induced.
pub fn pair_homography(
    frame_a: u32,
    frame_b: u32,
    k: &Intrinsics,
    rotations: &FrameRotations,
    point_matches: &[PointMatches],
) -> Result<Matrix3<f64>> {
    if frame_a == frame_b {
        return Ok(normalize_homography(&Matrix3::identity()));
    }
    for pm in point_matches {
        if pm.frame_a == frame_a && pm.frame_b == frame_b {
            return estimate_homography(&pm.points);
        }
        if pm.frame_a == frame_b && pm.frame_b == frame_a {
            let flipped: Vec<_> = pm.points.iter().map(|(x, y)| (*y, *x)).collect();
            return estimate_homography(&flipped);
        }
    }
    Ok(rotation_homography(
        k,
        rotations.require(frame_a)?,
        rotations.require(frame_b)?,
    ))
}

/// Matches two frames. The computation always runs from the lower to the
/// higher frame id, so swapping the arguments swaps the result exactly.
pub fn match_pair(
    frame_a: u32,
    frame_b: u32,
    segments: &[LineSegment2D],
    by_frame: &BTreeMap<u32, Vec<usize>>,
    k: &Intrinsics,
    rotations: &FrameRotations,
    point_matches: &[PointMatches],
    cfg: &TrackingConfig,
) -> Result<PairMatch> {
    if frame_a > frame_b {
        let m = match_pair(frame_b, frame_a, segments, by_frame, k, rotations, point_matches, cfg)?;
        let h = Matrix3::from_row_slice(&m.homography)
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular homography".into()))?;
        let mut matches: Vec<SegmentMatch> = m
            .matches
            .iter()
            .map(|x| SegmentMatch {
                a: x.b,
                b: x.a,
                distance: x.distance,
            })
            .collect();
        matches.sort_by_key(|m| (m.a, m.b));
        return Ok(PairMatch {
            frame_a,
            frame_b,
            matches,
            homography: row_major(&normalize_homography(&h)),
        });
    }
    let h = pair_homography(frame_a, frame_b, k, rotations, point_matches)?;
    let empty = Vec::new();
    let sa = by_frame.get(&frame_a).unwrap_or(&empty);
    let sb = by_frame.get(&frame_b).unwrap_or(&empty);
    Ok(PairMatch {
        frame_a,
        frame_b,
        matches: match_segments(segments, sa, sb, &h, k, cfg),
        homography: row_major(&h),
    })
}

fn row_major(h: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = h[(r, c)];
        }
    }
    out
}

/// Groups matches into tracks. Edges are added from the smallest distance
/// up, and an edge that would put two observations in one frame is dropped.
pub fn form_tracks(segments: &[LineSegment2D], pairs: &[PairMatch]) -> Vec<LineTrack> {
    let mut edges: Vec<(f64, usize, usize)> = pairs
        .iter()
        .flat_map(|p| p.matches.iter().map(|m| (m.distance, m.a.min(m.b), m.a.max(m.b))))
        .collect();
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    edges.dedup_by(|x, y| x.1 == y.1 && x.2 == y.2);
    let mut uf = UnionFind::new(segments.len());
    let mut frames: Vec<Vec<u32>> = segments.iter().map(|s| vec![s.frame_id]).collect();
    for (_, a, b) in edges {
        let (ra, rb) = (uf.find(a), uf.find(b));
        if ra == rb {
            continue;
        }
        let (fa, fb) = (&frames[ra], &frames[rb]);
        let disjoint = {
            let (mut i, mut j) = (0, 0);
            let mut ok = true;
            while i < fa.len() && j < fb.len() {
                match fa[i].cmp(&fb[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        ok = false;
                        break;
                    }
                }
            }
            ok
        };
        if !disjoint {
            continue;
        }
        let mut merged: Vec<u32> = fa.iter().chain(fb.iter()).cloned().collect();
        merged.sort_unstable();
        let root = uf.union(a, b);
        frames[root] = merged;
    }
    uf.sets()
        .into_iter()
        .filter(|set| set.len() >= 2)
        .enumerate()
        .map(|(id, set)| {
            let mut observations: Vec<TrackObservation> = set
                .iter()
                .map(|&s| TrackObservation {
                    frame_id: segments[s].frame_id,
                    segment: s,
                })
                .collect();
            observations.sort();
            LineTrack {
                id,
                label: segments[set[0]].label.expect("matched segments are labeled"),
                observations,
            }
        })
        .collect()
}

/// Output of the tracking stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingResult {
    pub tracks: Vec<LineTrack>,
    pub pair_count: usize,
    pub match_count: usize,
}

impl TrackingResult {
    /// Track id of every segment, index-aligned with the segment list.
    pub fn track_of_segment(&self, n_segments: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_segments];
        for t in &self.tracks {
            for o in &t.observations {
                out[o.segment] = Some(t.id);
            }
        }
        out
    }
}

/// Matches every candidate pair and forms tracks. `segments` must carry labels.
pub fn track_lines(
    segments: &[LineSegment2D],
    k: &Intrinsics,
    rotations: &FrameRotations,
    point_matches: &[PointMatches],
    cfg: &TrackingConfig,
) -> Result<TrackingResult> {
    let by_frame = segments_by_frame(segments);
    let pairs = candidate_pairs(rotations, cfg);
    let mut matches = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        matches.push(match_pair(
            rotations.ids[i],
            rotations.ids[j],
            segments,
            &by_frame,
            k,
            rotations,
            point_matches,
            cfg,
        )?);
    }
    let match_count = matches.iter().map(|m| m.matches.len()).sum();
    Ok(TrackingResult {
        tracks: form_tracks(segments, &matches),
        pair_count: pairs.len(),
        match_count,
    })
}

/// Writes `track_id,frame_id,segment_index,label`.
pub fn write_tracks_csv(path: &Path, tracks: &[LineTrack]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "track_id,frame_id,segment_index,label").map_err(io)?;
    for t in tracks {
        for o in &t.observations {
            writeln!(w, "{},{},{},{}", t.id, o.frame_id, o.segment, t.label).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RotationConfig;
    use crate::rotation::classify_segments;
    use crate::synth::{generate_scene, RoomConfig, SceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(600.0, 600.0, 640.0, 400.0, 1280, 800).unwrap()
    }

    fn seg(f: u32, px: f64, py: f64, qx: f64, qy: f64, label: Axis) -> LineSegment2D {
        let mut s = LineSegment2D::new(f, Point2::new(px, py), Point2::new(qx, qy)).unwrap();
        s.label = Some(label);
        s
    }

    fn yaw(deg: f64) -> Rotation {
        Rotation::exp(&Vector3::new(0.0, deg.to_radians(), 0.0))
    }

    #[test]
    fn candidate_pairs_follow_pan_geometry() {
        let rots = FrameRotations::sequential((0..10).map(|i| yaw(i as f64)).collect());
        let pairs = candidate_pairs(&rots, &TrackingConfig::default());
        let expected: Vec<(usize, usize)> = (0..9).map(|i| (i, i + 1)).collect();
        assert_eq!(pairs, expected);
        let same = FrameRotations::sequential(vec![Rotation::identity(); 4]);
        assert_eq!(candidate_pairs(&same, &TrackingConfig::default()).len(), 6);
    }

    #[test]
    fn candidate_pairs_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rots: Vec<Rotation> = (0..40)
            .map(|_| {
                Rotation::exp(&Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    0.0,
                ))
            })
            .collect();
        let fr = FrameRotations::sequential(rots.clone());
        let mut brute = Vec::new();
        for i in 0..40 {
            for j in (i + 1)..40 {
                let (a, b) = (rots[i].matrix().row(2), rots[j].matrix().row(2));
                if a.dot(&b).clamp(-1.0, 1.0).acos() < 2f64.to_radians() {
                    brute.push((i, j));
                }
            }
        }
        assert_eq!(candidate_pairs(&fr, &TrackingConfig::default()), brute);
    }

    #[test]
    fn same_frame_homography_is_identity() {
        let h = pair_homography(3, 3, &k(), &FrameRotations::sequential(vec![]), &[]).unwrap();
        assert!((h - Matrix3::identity()).norm() < 1e-12);
        let r = yaw(7.0);
        let h = rotation_homography(&k(), &r, &r);
        assert!((h - Matrix3::identity()).norm() < 1e-12);
        assert!((h.norm() - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rotation_homography_transfers_points_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ri = Rotation::exp(&Vector3::new(0.1, 0.3, -0.05));
        let rj = Rotation::exp(&Vector3::new(0.11, 0.33, -0.04));
        let h = rotation_homography(&k(), &ri, &rj);
        for _ in 0..100 {
            let p = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-3.0..3.0),
            );
            let (Some(xi), Some(xj)) = (k().project(&(ri.matrix() * p)), k().project(&(rj.matrix() * p))) else {
                continue;
            };
            if !k().contains(&xi) || !k().contains(&xj) {
                continue;
            }
            let e = (warp_point(&h, &xi).unwrap() - xj).norm();
            assert!(e < 1e-8, "{e}");
        }
    }

    #[test]
    fn small_parallax_transfer_error_is_bounded() {
        let (ds, gt) = generate_scene(&SceneConfig {
            rooms: vec![RoomConfig {
                n_frames: 120,
                ..RoomConfig::default()
            }],
            ..SceneConfig::default()
        })
        .unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..119 {
            let h = rotation_homography(&ds.intrinsics, &gt.rotations[i], &gt.rotations[i + 1]);
            for l in &gt.lines {
                for t in [0.0, 0.5, 1.0] {
                    let x = Vector3::from(l.a) * (1.0 - t) + Vector3::from(l.b) * t;
                    let pi = ds
                        .intrinsics
                        .project(&(gt.rotations[i].matrix() * (x - gt.translation(i))));
                    let pj = ds
                        .intrinsics
                        .project(&(gt.rotations[i + 1].matrix() * (x - gt.translation(i + 1))));
                    if let (Some(pi), Some(pj)) = (pi, pj) {
                        if ds.intrinsics.contains(&pi) {
                            worst = worst.max((warp_point(&h, &pi).unwrap() - pj).norm());
                        }
                    }
                }
            }
        }
        assert!(worst < 10.0, "worst transfer error {worst}");
    }

    #[test]
    fn segment_distance_cases() {
        let h = Matrix3::identity();
        let a = seg(0, 0.0, 0.0, 100.0, 0.0, Axis::X);
        let b = seg(1, 200.0, 0.0, 300.0, 0.0, Axis::X);
        assert!(segment_distance(&a, &b, &h).unwrap().abs() < 1e-12);
        let c = seg(1, 10.0, 7.5, 90.0, 7.5, Axis::X);
        assert!((segment_distance(&a, &c, &h).unwrap() - 7.5).abs() < 1e-12);
    }

    #[test]
    fn segment_distance_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut r = || rng.random_range(0.0..800.0);
            let a = seg(0, r(), r(), r(), r(), Axis::X);
            let b = seg(1, r(), r(), r(), r(), Axis::X);
            let h = rotation_homography(&k(), &Rotation::identity(), &yaw(1.0));
            let wa = |p: &Point2<f64>| {
                let v = h * Vector3::new(p.x, p.y, 1.0);
                Point2::new(v.x / v.z, v.y / v.z)
            };
            let (pa, qa) = (wa(&a.p), wa(&a.q));
            let dist = |p: &Point2<f64>, s: &Point2<f64>, e: &Point2<f64>| {
                let d = e - s;
                ((p - s).x * d.y - (p - s).y * d.x).abs() / d.norm()
            };
            let oracle = [
                dist(&pa, &b.p, &b.q),
                dist(&qa, &b.p, &b.q),
                dist(&b.p, &pa, &qa),
                dist(&b.q, &pa, &qa),
            ]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
            assert!((segment_distance(&a, &b, &h).unwrap() - oracle).abs() < 1e-8);
        }
    }

    #[test]
    fn point_at_infinity_is_degenerate() {
        let h = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -10.0);
        let a = seg(0, 10.0, 0.0, 20.0, 5.0, Axis::X);
        let b = seg(1, 0.0, 0.0, 10.0, 0.0, Axis::X);
        assert!(matches!(segment_distance(&a, &b, &h), Err(Error::DegenerateWarp)));
    }

    fn two_frame(segs: Vec<LineSegment2D>) -> (Vec<LineSegment2D>, BTreeMap<u32, Vec<usize>>, FrameRotations) {
        let by = segments_by_frame(&segs);
        (
            segs,
            by,
            FrameRotations::sequential(vec![Rotation::identity(), Rotation::identity()]),
        )
    }

    #[test]
    fn match_thresholds_are_strict() {
        let cfg = TrackingConfig::default();
        // distance threshold 0.05 * 800 = 40 px
        for (offset, expect) in [(39.9, 1), (40.0, 0)] {
            let (segs, by, rots) = two_frame(vec![
                seg(0, 100.0, 100.0, 300.0, 100.0, Axis::X),
                seg(1, 100.0, 100.0 + offset, 300.0, 100.0 + offset, Axis::X),
            ]);
            let m = match_pair(0, 1, &segs, &by, &k(), &rots, &[], &cfg).unwrap();
            assert_eq!(m.matches.len(), expect, "offset {offset}");
        }
        // angle threshold 1°
        for (deg, expect) in [(0.99, 1), (1.01, 0)] {
            let t = f64::to_radians(deg);
            let (segs, by, rots) = two_frame(vec![
                seg(0, 100.0, 100.0, 300.0, 100.0, Axis::X),
                seg(
                    1,
                    100.0,
                    100.0,
                    100.0 + 200.0 * t.cos(),
                    100.0 + 200.0 * t.sin(),
                    Axis::X,
                ),
            ]);
            let m = match_pair(0, 1, &segs, &by, &k(), &rots, &[], &cfg).unwrap();
            assert_eq!(m.matches.len(), expect, "angle {deg}");
        }
        // labels must agree
        let (segs, by, rots) = two_frame(vec![
            seg(0, 100.0, 100.0, 300.0, 100.0, Axis::X),
            seg(1, 100.0, 100.0, 300.0, 100.0, Axis::Y),
        ]);
        assert!(match_pair(0, 1, &segs, &by, &k(), &rots, &[], &cfg)
            .unwrap()
            .matches
            .is_empty());
    }

    #[test]
    fn duplicate_candidates_match_once() {
        let (segs, by, rots) = two_frame(vec![
            seg(0, 100.0, 100.0, 300.0, 100.0, Axis::X),
            seg(1, 100.0, 102.0, 300.0, 102.0, Axis::X),
            seg(1, 100.0, 102.0, 300.0, 102.0, Axis::X),
        ]);
        let m = match_pair(0, 1, &segs, &by, &k(), &rots, &[], &TrackingConfig::default()).unwrap();
        assert_eq!(m.matches.len(), 1);
        assert_eq!(m.matches[0].b, 1);
    }

    #[test]
    fn mutual_nearest_is_required() {
        // a0 prefers b, but b prefers a1
        let (segs, by, rots) = two_frame(vec![
            seg(0, 100.0, 100.0, 300.0, 100.0, Axis::X),
            seg(0, 100.0, 111.0, 300.0, 111.0, Axis::X),
            seg(1, 100.0, 110.0, 300.0, 110.0, Axis::X),
        ]);
        let m = match_pair(0, 1, &segs, &by, &k(), &rots, &[], &TrackingConfig::default()).unwrap();
        assert_eq!(m.matches.len(), 1);
        assert_eq!((m.matches[0].a, m.matches[0].b), (1, 2));
    }

    #[test]
    fn too_few_point_matches_is_an_error() {
        let pm = PointMatches {
            frame_a: 0,
            frame_b: 1,
            points: vec![(Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)); 3],
        };
        let r = pair_homography(
            0,
            1,
            &k(),
            &FrameRotations::sequential(vec![Rotation::identity(); 2]),
            &[pm],
        );
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn dlt_recovers_rotation_homography_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = rotation_homography(
            &k(),
            &Rotation::identity(),
            &Rotation::exp(&Vector3::new(0.01, 0.03, 0.002)),
        );
        let mut pts: Vec<(Point2<f64>, Point2<f64>)> = (0..60)
            .map(|_| {
                let p = Point2::new(rng.random_range(0.0..1280.0), rng.random_range(0.0..800.0));
                (p, warp_point(&truth, &p).unwrap())
            })
            .collect();
        for p in pts.iter_mut().take(4) {
            p.1 += nalgebra::Vector2::new(25.0, -30.0);
        }
        let h = estimate_homography(&pts).unwrap();
        for (a, _) in pts.iter().skip(4) {
            let e = (warp_point(&h, a).unwrap() - warp_point(&truth, a).unwrap()).norm();
            assert!(e < 0.05, "{e}");
        }
    }

    #[test]
    fn chain_forms_one_track_and_conflicts_split() {
        let segs = vec![
            seg(0, 0.0, 0.0, 10.0, 0.0, Axis::X),
            seg(1, 0.0, 1.0, 10.0, 1.0, Axis::X),
            seg(2, 0.0, 2.0, 10.0, 2.0, Axis::X),
            seg(2, 0.0, 3.0, 10.0, 3.0, Axis::X),
        ];
        let pm = |a: u32, b: u32, x: usize, y: usize, d: f64| PairMatch {
            frame_a: a,
            frame_b: b,
            matches: vec![SegmentMatch {
                a: x,
                b: y,
                distance: d,
            }],
            homography: [0.0; 9],
        };
        let tracks = form_tracks(&segs, &[pm(0, 1, 0, 1, 1.0), pm(1, 2, 1, 2, 2.0)]);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].observations.len(), 3);
        // segment 3 conflicts with segment 2 in frame 2; the weaker edge is dropped
        let tracks = form_tracks(&segs, &[pm(0, 1, 0, 1, 1.0), pm(1, 2, 1, 2, 2.0), pm(0, 2, 0, 3, 3.0)]);
        assert_eq!(tracks.len(), 1);
        assert!(tracks[0].observations.iter().all(|o| o.segment != 3));
        // the result does not depend on pair order
        let again = form_tracks(&segs, &[pm(0, 2, 0, 3, 3.0), pm(1, 2, 1, 2, 2.0), pm(0, 1, 0, 1, 1.0)]);
        assert_eq!(tracks, again);
    }

    #[test]
    fn matching_is_symmetric_and_precise_on_noise_free_frames() {
        let (ds, gt) = generate_scene(&SceneConfig {
            rooms: vec![RoomConfig {
                n_frames: 120,
                ..RoomConfig::default()
            }],
            ..SceneConfig::default()
        })
        .unwrap();
        let fr = ds.frame_rotations();
        let a = classify_segments(&ds.segments, &ds.intrinsics, &fr, &gt.frame, &RotationConfig::default()).unwrap();
        let segs = a.apply(&ds.segments);
        let by = segments_by_frame(&segs);
        let cfg = TrackingConfig::default();
        let (mut tp, mut total) = (0, 0);
        for i in 0..119u32 {
            let m = match_pair(i, i + 1, &segs, &by, &ds.intrinsics, &fr, &[], &cfg).unwrap();
            let r = match_pair(i + 1, i, &segs, &by, &ds.intrinsics, &fr, &[], &cfg).unwrap();
            let mut back: Vec<(usize, usize)> = r.matches.iter().map(|x| (x.b, x.a)).collect();
            back.sort_unstable();
            let fwd: Vec<(usize, usize)> = m.matches.iter().map(|x| (x.a, x.b)).collect();
            assert_eq!(fwd, back);
            for x in &m.matches {
                assert_eq!(gt.segment_lines[x.a], gt.segment_lines[x.b]);
                tp += 1;
            }
            for &sa in &by[&i] {
                for &sb in &by[&(i + 1)] {
                    if segs[sa].label.is_some()
                        && segs[sb].label.is_some()
                        && gt.segment_lines[sa] == gt.segment_lines[sb]
                    {
                        total += 1;
                    }
                }
            }
        }
        assert!(tp as f64 >= 0.95 * total as f64, "recall {tp}/{total}");
    }
}

//! Junction, orthogonal, parallel and floor coplanarity detection.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::CoplanarityConfig;
use crate::error::{Error, Result};
use crate::geometry::{Axis, FrameRotations, Intrinsics, LineSegment2D, ManhattanFrame, Rotation};
use crate::io::dataset::{Dataset, NormalMap};
use crate::preprocess::min_endpoint_distance;
use crate::tracking::LineTrack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Junction,
    Orthogonal,
    Parallel,
    Floor,
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationKind::Junction => "junction",
            RelationKind::Orthogonal => "orthogonal",
            RelationKind::Parallel => "parallel",
            RelationKind::Floor => "floor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationMember {
    pub track: usize,
    pub frame_id: u32,
    pub segment: usize,
}

/// Two lines (or all floor lines) sharing a plane whose normal is the
/// Manhattan axis `normal_axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoplanarityRelation {
    pub kind: RelationKind,
    /// Two members for pairwise kinds; every floor observation, sorted by
    /// (track, frame), for the floor relation.
    pub members: Vec<RelationMember>,
    pub normal_axis: Axis,
}

impl CoplanarityRelation {
    pub fn plane_normal(&self, frame: &ManhattanFrame) -> Vector3<f64> {
        *frame.axis(self.normal_axis).as_vector()
    }

    /// Distinct tracks of the floor relation, ascending.
    pub fn tracks(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.members.iter().map(|m| m.track).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// Average global normal inside a quad and the mean angle of its pixels to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadStats {
    pub mean: Vector3<f64>,
    pub deviation_rad: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FloorMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl FloorMask {
    pub fn get(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && x < self.width as i64
            && y < self.height as i64
            && self.data[y as usize * self.width as usize + x as usize]
    }
}

fn cross2(o: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counter-clockwise convex hull (monotone chain) without collinear points.
fn convex_hull(points: &[Point2<f64>]) -> Vec<Point2<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2<f64>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross2(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

fn polygon_area(poly: &[Point2<f64>]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| cross2(&Point2::origin(), &poly[i], &poly[(i + 1) % n]))
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Pixel rows `(y, x0, x1)` (inclusive) whose centers lie in the convex hull
/// of the four endpoints, clipped to the image.
pub fn quad_spans(a: &LineSegment2D, b: &LineSegment2D, width: u32, height: u32) -> Result<Vec<(u32, u32, u32)>> {
    let hull = convex_hull(&[a.p, a.q, b.p, b.q]);
    if hull.len() < 3 || polygon_area(&hull) < 1.0 {
        return Err(Error::EmptyQuad("quad area below one square pixel".into()));
    }
    let ymin = hull.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let ymax = hull
        .iter()
        .map(|p| p.y)
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min(height as f64 - 1.0);
    let mut spans = Vec::new();
    let n = hull.len();
    let mut y = ymin;
    while y <= ymax {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            let (p, q) = (hull[i], hull[(i + 1) % n]);
            if (p.y <= y && y <= q.y) || (q.y <= y && y <= p.y) {
                if p.y == q.y {
                    lo = lo.min(p.x.min(q.x));
                    hi = hi.max(p.x.max(q.x));
                } else {
                    let x = p.x + (y - p.y) / (q.y - p.y) * (q.x - p.x);
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
        }
        let x0 = lo.ceil().max(0.0);
        let x1 = hi.floor().min(width as f64 - 1.0);
        if x0 <= x1 {
            spans.push((y as u32, x0 as u32, x1 as u32));
        }
        y += 1.0;
    }
    Ok(spans)
}

fn pixel_angle(n: &Vector3<f64>, m: &Vector3<f64>) -> f64 {
    n.cross(m).norm().atan2(n.dot(m))
}

/// Average global-frame normal inside the quad spanned by two segments and
/// the mean angular deviation of the pixel normals from it.
pub fn quad_normal_stats(a: &LineSegment2D, b: &LineSegment2D, map: &NormalMap, r: &Rotation) -> Result<QuadStats> {
    let spans = quad_spans(a, b, map.width, map.height)?;
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for &(y, x0, x1) in &spans {
        for x in x0..=x1 {
            if let Some(n) = map.get(x as i64, y as i64) {
                sum += n;
                count += 1;
            }
        }
    }
    finish_stats(&spans, map, r, sum, count)
}

fn finish_stats(
    spans: &[(u32, u32, u32)],
    map: &NormalMap,
    r: &Rotation,
    sum: Vector3<f64>,
    count: usize,
) -> Result<QuadStats> {
    if count == 0 || sum.norm() == 0.0 {
        return Err(Error::EmptyQuad("no valid normals inside the quad".into()));
    }
    let m = sum.normalize();
    let mut total = 0.0;
    for &(y, x0, x1) in spans {
        for x in x0..=x1 {
            if let Some(n) = map.get(x as i64, y as i64) {
                total += pixel_angle(&n, &m);
            }
        }
    }
    Ok(QuadStats {
        mean: r.matrix().transpose() * m,
        deviation_rad: total / count as f64,
        pixels: count,
    })
}

/// Row prefix sums of camera-frame normals and valid-pixel counts.
struct NormalIntegral {
    width: usize,
    sums: Vec<[f64; 4]>,
}

impl NormalIntegral {
    fn new(map: &NormalMap) -> Self {
        let (w, h) = (map.width as usize, map.height as usize);
        let mut sums = vec![[0.0; 4]; (w + 1) * h];
        for y in 0..h {
            let row = y * (w + 1);
            for x in 0..w {
                let v = map.data[y * w + x];
                let mut acc = sums[row + x];
                if v != [0.0; 3] {
                    acc[0] += v[0] as f64;
                    acc[1] += v[1] as f64;
                    acc[2] += v[2] as f64;
                    acc[3] += 1.0;
                }
                sums[row + x + 1] = acc;
            }
        }
        NormalIntegral { width: w, sums }
    }

    fn span_sum(&self, spans: &[(u32, u32, u32)]) -> (Vector3<f64>, usize) {
        let mut s = [0.0; 4];
        for &(y, x0, x1) in spans {
            let row = y as usize * (self.width + 1);
            let (a, b) = (self.sums[row + x0 as usize], self.sums[row + x1 as usize + 1]);
            for c in 0..4 {
                s[c] += b[c] - a[c];
            }
        }
        (Vector3::new(s[0], s[1], s[2]), s[3].round() as usize)
    }
}

/// Outcome of testing a quad against a candidate normal.
fn quad_test(
    a: &LineSegment2D,
    b: &LineSegment2D,
    map: &NormalMap,
    integral: &NormalIntegral,
    r: &Rotation,
    candidates: &[Axis],
    frame: &ManhattanFrame,
    cfg: &CoplanarityConfig,
) -> Option<Axis> {
    let spans = quad_spans(a, b, map.width, map.height).ok()?;
    let (sum, count) = integral.span_sum(&spans);
    if count == 0 || sum.norm() == 0.0 {
        return None;
    }
    let mean_global = r.matrix().transpose() * sum.normalize();
    let mut best: Option<(f64, Axis)> = None;
    for &ax in candidates {
        let angle = frame.axis(ax).as_vector().dot(&mean_global).abs().min(1.0).acos();
        if best.is_none_or(|(b, _)| angle < b) {
            best = Some((angle, ax));
        }
    }
    let (angle, axis) = best?;
    if angle >= cfg.normal_angle_deg.to_radians() {
        return None;
    }
    // Mean resultant length ρ = mean cos θ bounds the mean angle:
    // 1 − ρ ≤ mean θ ≤ π·sqrt((1 − ρ)/2).
    let thr = cfg.deviation_deg.to_radians();
    let rho = (sum.norm() / count as f64).min(1.0);
    if 1.0 - rho >= thr {
        return None;
    }
    if std::f64::consts::PI * ((1.0 - rho) / 2.0).sqrt() < thr {
        return Some(axis);
    }
    let stats = finish_stats(&spans, map, r, sum, count).ok()?;
    (stats.deviation_rad < thr).then_some(axis)
}

/// Pixels whose global normal is within the floor angle of `up`, dilated
/// once with a 3×3 square.
pub fn floor_mask(map: &NormalMap, r: &Rotation, up: &Vector3<f64>, floor_angle_deg: f64) -> FloorMask {
    let (w, h) = (map.width as usize, map.height as usize);
    let up_cam = r.matrix() * up;
    let cos_t = floor_angle_deg.to_radians().cos();
    let raw: Vec<bool> = map
        .data
        .iter()
        .map(|v| {
            if *v == [0.0; 3] {
                return false;
            }
            let n = Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64);
            n.dot(&up_cam) / n.norm() > cos_t
        })
        .collect();
    let mut data = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut hit = false;
            'outer: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx >= 0
                        && yy >= 0
                        && (xx as usize) < w
                        && (yy as usize) < h
                        && raw[yy as usize * w + xx as usize]
                    {
                        hit = true;
                        break 'outer;
                    }
                }
            }
            data[y * w + x] = hit;
        }
    }
    FloorMask {
        width: map.width,
        height: map.height,
        data,
    }
}

/// Pixels under a segment: unit steps along its longer image extent,
/// rounded to the nearest pixel.
pub fn rasterize_segment(s: &LineSegment2D, width: u32, height: u32) -> Vec<(i64, i64)> {
    let d = s.q - s.p;
    let steps = d.x.abs().max(d.y.abs()).ceil().max(1.0) as usize;
    let mut out: Vec<(i64, i64)> = (0..=steps)
        .map(|i| {
            let p = s.p + d * (i as f64 / steps as f64);
            (
                (p.x.round() as i64).clamp(0, width as i64 - 1),
                (p.y.round() as i64).clamp(0, height as i64 - 1),
            )
        })
        .collect();
    out.dedup();
    out
}

pub fn is_floor_segment(s: &LineSegment2D, mask: &FloorMask) -> bool {
    matches!(s.label, Some(Axis::X) | Some(Axis::Y))
        && rasterize_segment(s, mask.width, mask.height)
            .into_iter()
            .all(|(x, y)| mask.get(x, y))
}

/// Detections of one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameDetections {
    pub pairwise: Vec<CoplanarityRelation>,
    /// Floor segments that belong to a track.
    pub floor: Vec<RelationMember>,
}

/// Runs the enabled pairwise detectors and the floor classifier on one frame.
/// `seg_indices` lists the frame's segments; `track_of` maps every segment
/// to its track.
pub fn detect_in_frame(
    frame_id: u32,
    seg_indices: &[usize],
    segments: &[LineSegment2D],
    track_of: &[Option<usize>],
    map: Option<&NormalMap>,
    r: &Rotation,
    k: &Intrinsics,
    frame: &ManhattanFrame,
    cfg: &CoplanarityConfig,
) -> Result<FrameDetections> {
    let needs_map = cfg.orthogonal || cfg.parallel || cfg.floor;
    if needs_map && map.is_none() {
        return Err(Error::NoData(format!("frame {frame_id} has no normal map")));
    }
    let tracked: Vec<(usize, usize, Axis)> = seg_indices
        .iter()
        .filter_map(|&i| Some((i, track_of[i]?, segments[i].label?)))
        .collect();
    let integral = match map {
        Some(m) if cfg.orthogonal || cfg.parallel => Some(NormalIntegral::new(m)),
        _ => None,
    };
    let junction_gap = cfg.junction_distance_fraction * k.min_dim();
    let mut out = FrameDetections::default();
    for (x, &(ia, ta, la)) in tracked.iter().enumerate() {
        for &(ib, tb, lb) in &tracked[x + 1..] {
            if ta == tb {
                continue;
            }
            let members = {
                let (ma, mb) = (
                    RelationMember {
                        track: ta,
                        frame_id,
                        segment: ia,
                    },
                    RelationMember {
                        track: tb,
                        frame_id,
                        segment: ib,
                    },
                );
                if ta < tb {
                    vec![ma, mb]
                } else {
                    vec![mb, ma]
                }
            };
            let (sa, sb) = (&segments[ia], &segments[ib]);
            if la != lb {
                let third = la.third(lb).expect("distinct axes");
                if cfg.junction && min_endpoint_distance(sa, sb) < junction_gap {
                    out.pairwise.push(CoplanarityRelation {
                        kind: RelationKind::Junction,
                        members: members.clone(),
                        normal_axis: third,
                    });
                }
                if cfg.orthogonal {
                    let (m, ig) = (map.expect("checked"), integral.as_ref().expect("built"));
                    if let Some(axis) = quad_test(sa, sb, m, ig, r, &[third], frame, cfg) {
                        out.pairwise.push(CoplanarityRelation {
                            kind: RelationKind::Orthogonal,
                            members,
                            normal_axis: axis,
                        });
                    }
                }
            } else if cfg.parallel {
                let (m, ig) = (map.expect("checked"), integral.as_ref().expect("built"));
                if let Some(axis) = quad_test(sa, sb, m, ig, r, &la.others(), frame, cfg) {
                    out.pairwise.push(CoplanarityRelation {
                        kind: RelationKind::Parallel,
                        members,
                        normal_axis: axis,
                    });
                }
            }
        }
    }
    if cfg.floor {
        let mask = floor_mask(map.expect("checked"), r, &up_direction(frame), cfg.floor_angle_deg);
        for &(i, t, _) in &tracked {
            if is_floor_segment(&segments[i], &mask) {
                out.floor.push(RelationMember {
                    track: t,
                    frame_id,
                    segment: i,
                });
            }
        }
    }
    Ok(out)
}

/// Up is opposite the frame's gravity-aligned axis.
pub fn up_direction(frame: &ManhattanFrame) -> Vector3<f64> {
    -frame.axis(Axis::Z).as_vector()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoplanarityResult {
    /// Pairwise relations ordered by frame, then members, then kind; the
    /// floor relation, if any, last.
    pub relations: Vec<CoplanarityRelation>,
}

impl CoplanarityResult {
    pub fn count(&self, kind: RelationKind) -> usize {
        self.relations.iter().filter(|r| r.kind == kind).count()
    }

    pub fn floor(&self) -> Option<&CoplanarityRelation> {
        self.relations.iter().find(|r| r.kind == RelationKind::Floor)
    }
}

/// Runs detection over all frames of the dataset. `segments` carry labels;
/// `rotations` are the refined rotations keyed by the dataset's frame ids.
pub fn detect_relations(
    dataset: &Dataset,
    segments: &[LineSegment2D],
    tracks: &[LineTrack],
    rotations: &FrameRotations,
    frame: &ManhattanFrame,
    cfg: &CoplanarityConfig,
) -> Result<CoplanarityResult> {
    let mut track_of = vec![None; segments.len()];
    for t in tracks {
        for o in &t.observations {
            track_of[o.segment] = Some(t.id);
        }
    }
    let by_frame = crate::tracking::segments_by_frame(segments);
    let needs_map = cfg.orthogonal || cfg.parallel || cfg.floor;
    let mut relations = Vec::new();
    let mut floor = Vec::new();
    for (idx, info) in dataset.frames.iter().enumerate() {
        let seg_indices = by_frame.get(&info.id).map(Vec::as_slice).unwrap_or(&[]);
        let has_tracked = seg_indices.iter().any(|&i| track_of[i].is_some());
        let map = if needs_map {
            if info.normal_map.is_none() {
                return Err(Error::NoData(format!("frame {} has no normal map", info.id)));
            }
            if !has_tracked {
                continue;
            }
            dataset.normal_map(idx)?
        } else {
            None
        };
        let r = rotations.require(info.id)?;
        let det = detect_in_frame(
            info.id,
            seg_indices,
            segments,
            &track_of,
            map.as_ref(),
            r,
            &dataset.intrinsics,
            frame,
            cfg,
        )?;
        relations.extend(det.pairwise);
        floor.extend(det.floor);
    }
    relations
        .sort_by(|a, b| (a.members[0].frame_id, &a.members, a.kind).cmp(&(b.members[0].frame_id, &b.members, b.kind)));
    floor.sort();
    let n_floor_tracks = {
        let mut t: Vec<usize> = floor.iter().map(|m| m.track).collect();
        t.dedup();
        t.len()
    };
    if n_floor_tracks >= 2 {
        relations.push(CoplanarityRelation {
            kind: RelationKind::Floor,
            members: floor,
            normal_axis: Axis::Z,
        });
    }
    Ok(CoplanarityResult { relations })
}

/// Writes `kind,frame_id,track_a,track_b,normal_axis`; floor rows list one
/// track each, with the first frame it was seen on the floor.
pub fn write_relations_csv(path: &Path, relations: &[CoplanarityRelation]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "kind,frame_id,track_a,track_b,normal_axis").map_err(io)?;
    for r in relations {
        if r.kind == RelationKind::Floor {
            let mut last = None;
            for m in &r.members {
                if last != Some(m.track) {
                    writeln!(w, "floor,{},{},,{}", m.frame_id, m.track, r.normal_axis).map_err(io)?;
                    last = Some(m.track);
                }
            }
        } else {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.kind, r.members[0].frame_id, r.members[0].track, r.members[1].track, r.normal_axis
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> Intrinsics {
        Intrinsics::new(600.0, 600.0, 640.0, 400.0, 1280, 800).unwrap()
    }

    fn seg(px: f64, py: f64, qx: f64, qy: f64, label: Option<Axis>) -> LineSegment2D {
        let mut s = LineSegment2D::new(0, Point2::new(px, py), Point2::new(qx, qy)).unwrap();
        s.label = label;
        s
    }

    #[test]
    fn constant_map_gives_zero_deviation() {
        let n = Vector3::new(0.2, -0.3, 0.9).normalize();
        let map = NormalMap::constant(1280, 800, n);
        let st = quad_normal_stats(
            &seg(100.0, 100.0, 400.0, 120.0, None),
            &seg(110.0, 300.0, 380.0, 310.0, None),
            &map,
            &Rotation::identity(),
        )
        .unwrap();
        assert!((st.mean - n).norm() < 1e-6);
        assert!(st.deviation_rad < 1e-6);
    }

    #[test]
    fn mean_is_rotated_into_the_global_frame() {
        let n = Vector3::new(0.0, 0.0, -1.0);
        let r = Rotation::exp(&Vector3::new(0.3, -0.2, 0.5));
        let map = NormalMap::constant(1280, 800, n);
        let st = quad_normal_stats(
            &seg(100.0, 100.0, 400.0, 100.0, None),
            &seg(100.0, 300.0, 400.0, 300.0, None),
            &map,
            &r,
        )
        .unwrap();
        assert!((st.mean - r.matrix().transpose() * n).norm() < 1e-6);
    }

    #[test]
    fn two_halves_ten_degrees_apart_deviate_five() {
        let mut map = NormalMap::constant(1280, 800, Vector3::z());
        let t = 10f64.to_radians();
        let tilted = [t.sin() as f32, 0.0, t.cos() as f32];
        // quad covers x in [100, 299], y in [100, 299]; the right half tilts
        for y in 0..800 {
            for x in 200..1280 {
                map.set(x, y, tilted);
            }
        }
        let st = quad_normal_stats(
            &seg(100.0, 100.0, 299.0, 100.0, None),
            &seg(100.0, 299.0, 299.0, 299.0, None),
            &map,
            &Rotation::identity(),
        )
        .unwrap();
        assert_eq!(st.pixels, 200 * 200);
        assert!(
            (st.deviation_rad.to_degrees() - 5.0).abs() < 1e-4,
            "{}",
            st.deviation_rad.to_degrees()
        );
    }

    #[test]
    fn empty_quads_are_errors() {
        let map = NormalMap::constant(1280, 800, Vector3::z());
        let r = quad_normal_stats(
            &seg(0.0, 0.0, 100.0, 0.0, None),
            &seg(200.0, 0.0, 300.0, 0.0, None),
            &map,
            &Rotation::identity(),
        );
        assert!(matches!(r, Err(Error::EmptyQuad(_))));
        let mut invalid = map.clone();
        invalid.data.iter_mut().for_each(|v| *v = [0.0; 3]);
        let r = quad_normal_stats(
            &seg(0.0, 0.0, 100.0, 0.0, None),
            &seg(0.0, 50.0, 100.0, 50.0, None),
            &invalid,
            &Rotation::identity(),
        );
        assert!(matches!(r, Err(Error::EmptyQuad(_))));
    }

    #[test]
    fn spans_match_brute_force_point_in_hull() {
        let cases = [
            (seg(10.3, 20.7, 80.1, 25.2, None), seg(30.0, 70.5, 95.9, 60.1, None)),
            (seg(10.0, 10.0, 60.0, 60.0, None), seg(10.0, 60.0, 60.0, 10.0, None)),
            (seg(-20.0, 5.0, 40.0, 5.5, None), seg(-10.0, 30.0, 20.0, 29.0, None)),
        ];
        for (a, b) in cases {
            let spans = quad_spans(&a, &b, 100, 100).unwrap();
            let hull = convex_hull(&[a.p, a.q, b.p, b.q]);
            let mut brute = 0;
            for y in 0..100 {
                for x in 0..100 {
                    let p = Point2::new(x as f64, y as f64);
                    let n = hull.len();
                    if (0..n).all(|i| cross2(&hull[i], &hull[(i + 1) % n], &p) >= -1e-9) {
                        brute += 1;
                    }
                }
            }
            let total: u32 = spans.iter().map(|(_, a, b)| b - a + 1).sum();
            assert_eq!(total as usize, brute);
        }
    }

    #[test]
    fn fast_path_matches_exact_deviation_decision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = ManhattanFrame::canonical();
        let cfg = CoplanarityConfig::default();
        for noise in [0.0, 2.0, 4.0, 6.0, 10.0, 30.0] {
            let mut map = NormalMap::constant(320, 240, Vector3::zeros() + Vector3::y());
            let d = Normal::new(0.0, f64::to_radians(noise)).unwrap();
            for y in 0..240 {
                for x in 0..320 {
                    let n = Vector3::new(d.sample(&mut rng), 1.0, d.sample(&mut rng)).normalize();
                    map.set(x, y, [n.x as f32, n.y as f32, n.z as f32]);
                }
            }
            let (a, b) = (
                seg(20.0, 20.0, 300.0, 30.0, Some(Axis::X)),
                seg(30.0, 200.0, 290.0, 210.0, Some(Axis::X)),
            );
            let exact = quad_normal_stats(&a, &b, &map, &Rotation::identity()).unwrap();
            let fast = quad_test(
                &a,
                &b,
                &map,
                &NormalIntegral::new(&map),
                &Rotation::identity(),
                &[Axis::Y, Axis::Z],
                &frame,
                &cfg,
            );
            let expect = exact.deviation_rad < 5f64.to_radians() && exact.mean.y.abs() > 20f64.to_radians().cos();
            assert_eq!(
                fast.is_some(),
                expect,
                "noise {noise}: deviation {}",
                exact.deviation_rad.to_degrees()
            );
        }
    }

    fn wall_setup() -> (NormalMap, FloorMask) {
        // upper half: wall facing the camera (normal -z in camera); lower half: floor
        let mut map = NormalMap::constant(1280, 800, Vector3::new(0.0, 0.0, -1.0));
        for y in 500..800 {
            for x in 0..1280 {
                map.set(x, y, [0.0, -1.0, 0.0]);
            }
        }
        let frame = ManhattanFrame::from_columns(&nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0))
            .unwrap();
        let mask = floor_mask(&map, &Rotation::identity(), &up_direction(&frame), 25.0);
        (map, mask)
    }

    #[test]
    fn dilation_admits_one_pixel_boundary() {
        let (_, mask) = wall_setup();
        assert!(mask.get(10, 499));
        assert!(!mask.get(10, 498));
        let on_boundary = seg(100.0, 499.0, 400.0, 499.0, Some(Axis::X));
        assert!(is_floor_segment(&on_boundary, &mask));
        let outside = seg(100.0, 498.0, 400.0, 498.0, Some(Axis::X));
        assert!(!is_floor_segment(&outside, &mask));
        let vertical = seg(100.0, 600.0, 100.0, 700.0, Some(Axis::Z));
        assert!(!is_floor_segment(&vertical, &mask));
    }

    #[test]
    fn detectors_on_constructed_frame() {
        let (map, _) = wall_setup();
        // camera looks along +y of the global frame: x right, vertical is camera y
        let frame = ManhattanFrame::from_columns(&nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0))
            .unwrap();
        let segs = vec![
            seg(100.0, 100.0, 400.0, 100.0, Some(Axis::X)), // wall horizontal
            seg(100.0, 150.0, 100.0, 400.0, Some(Axis::Z)), // wall vertical, touches 0
            seg(500.0, 300.0, 800.0, 300.0, Some(Axis::X)), // wall horizontal
            seg(100.0, 600.0, 400.0, 600.0, Some(Axis::X)), // floor
            seg(500.0, 700.0, 800.0, 700.0, Some(Axis::X)), // floor
        ];
        let track_of: Vec<Option<usize>> = (0..5).map(Some).collect();
        let det = detect_in_frame(
            0,
            &[0, 1, 2, 3, 4],
            &segs,
            &track_of,
            Some(&map),
            &Rotation::identity(),
            &k(),
            &frame,
            &CoplanarityConfig::default(),
        )
        .unwrap();
        let kinds: Vec<(RelationKind, usize, usize, Axis)> = det
            .pairwise
            .iter()
            .map(|r| (r.kind, r.members[0].track, r.members[1].track, r.normal_axis))
            .collect();
        assert!(kinds.contains(&(RelationKind::Junction, 0, 1, Axis::Y)));
        assert!(kinds.contains(&(RelationKind::Orthogonal, 0, 1, Axis::Y)));
        assert!(kinds.contains(&(RelationKind::Parallel, 0, 2, Axis::Y)));
        assert!(kinds.contains(&(RelationKind::Parallel, 3, 4, Axis::Z)));
        // the wall-floor pair spans two planes
        assert!(!kinds.iter().any(|k| k.1 == 2 && k.2 == 3));
        let floor: Vec<usize> = det.floor.iter().map(|m| m.segment).collect();
        assert_eq!(floor, vec![3, 4]);
    }

    #[test]
    fn junction_threshold_is_strict() {
        let frame = ManhattanFrame::canonical();
        let cfg = CoplanarityConfig {
            orthogonal: false,
            parallel: false,
            floor: false,
            ..CoplanarityConfig::default()
        };
        for (gap, expect) in [(79.9, 1), (81.0, 0)] {
            let segs = vec![
                seg(100.0, 100.0, 300.0, 100.0, Some(Axis::X)),
                seg(300.0 + gap, 100.0, 300.0 + gap, 400.0, Some(Axis::Y)),
            ];
            let det = detect_in_frame(
                0,
                &[0, 1],
                &segs,
                &[Some(0), Some(1)],
                None,
                &Rotation::identity(),
                &k(),
                &frame,
                &cfg,
            )
            .unwrap();
            assert_eq!(det.pairwise.len(), expect, "gap {gap}");
        }
        // untracked segments bind nothing
        let segs = vec![
            seg(100.0, 100.0, 300.0, 100.0, Some(Axis::X)),
            seg(300.0, 100.0, 300.0, 400.0, Some(Axis::Y)),
        ];
        let det = detect_in_frame(
            0,
            &[0, 1],
            &segs,
            &[Some(0), None],
            None,
            &Rotation::identity(),
            &k(),
            &frame,
            &cfg,
        )
        .unwrap();
        assert!(det.pairwise.is_empty());
    }

    #[test]
    fn missing_normal_map_is_an_error_when_needed() {
        let r = detect_in_frame(
            0,
            &[],
            &[],
            &[],
            None,
            &Rotation::identity(),
            &k(),
            &ManhattanFrame::canonical(),
            &CoplanarityConfig::default(),
        );
        assert!(matches!(r, Err(Error::NoData(_))));
    }

    #[test]
    fn noisy_wall_quads_are_detected() {
        // the rotation refinement stage does not matter here; the frame is exact
        let frame = ManhattanFrame::canonical();
        let cfg = CoplanarityConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let d = Normal::new(0.0, 5f64.to_radians() / std::f64::consts::SQRT_2).unwrap();
        let (w, h) = (200u32, 160u32);
        let mut hits = 0;
        for _ in 0..200 {
            let mut map = NormalMap::constant(w, h, Vector3::z());
            for y in 0..h {
                for x in 0..w {
                    let n = Vector3::new(d.sample(&mut rng), d.sample(&mut rng), 1.0).normalize();
                    map.set(x, y, [n.x as f32, n.y as f32, n.z as f32]);
                }
            }
            let (a, b) = (
                seg(20.0, 20.0, 180.0, 20.0, Some(Axis::X)),
                seg(20.0, 30.0, 20.0, 140.0, Some(Axis::Y)),
            );
            if quad_test(
                &a,
                &b,
                &map,
                &NormalIntegral::new(&map),
                &Rotation::identity(),
                &[Axis::Z],
                &frame,
                &cfg,
            )
            .is_some()
            {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.9 * 200.0, "{hits}/200");
    }
}

//! Comparison of pipeline outputs against synthetic ground truth.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point2, Rotation3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::ba::ErrorStats;
use crate::coplanarity::RelationKind;
use crate::error::{Error, Result};
use crate::geometry::{
    geodesic_angle, orientation_difference, pixel_to_global_ray, Axis, LineSegment2D, ManhattanFrame, Rotation,
};
use crate::io::state::PipelineState;
use crate::pipeline::StageTiming;
use crate::preprocess::min_endpoint_distance;
use crate::synth::{Face, GroundTruth};
use crate::tracking::LineTrack;

/// `y ≈ scale · rotation · x + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub offset: Vector3<f64>,
    /// Root mean square residual after alignment.
    pub rmse: f64,
    /// The source points were collinear, so rotation about their common
    /// axis is left at the minimal rotation.
    pub collinear: bool,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.offset
    }
}

fn principal_axis(points: &[Vector3<f64>], mean: &Vector3<f64>) -> (Vector3<f64>, f64, f64) {
    let scatter = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .fold(Matrix3::zeros(), |a, b| a + b);
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    (
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
    )
}

/// Least-squares similarity taking `source` onto `target` (Umeyama).
/// Collinear sources fall back to aligning the two principal axes.
pub fn similarity_align(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Similarity> {
    if source.len() != target.len() {
        return Err(Error::InvalidInput("point sets differ in size".into()));
    }
    if source.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "alignment needs 3 points, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let mx = source.iter().sum::<Vector3<f64>>() / n;
    let my = target.iter().sum::<Vector3<f64>>() / n;
    let var_x = source.iter().map(|x| (x - mx).norm_squared()).sum::<f64>() / n;
    if var_x <= f64::MIN_POSITIVE {
        return Err(Error::InsufficientData("source points coincide".into()));
    }
    let (dx, l1, l2) = principal_axis(source, &mx);
    let collinear = l2 <= 1e-12 * l1;
    let (scale, rotation) = if collinear {
        log::warn!("camera path is collinear, aligning with 5 degrees of freedom");
        let (mut dy, _, _) = principal_axis(target, &my);
        let ux: Vec<f64> = source.iter().map(|x| (x - mx).dot(&dx)).collect();
        let uy: Vec<f64> = target.iter().map(|y| (y - my).dot(&dy)).collect();
        let mut cross: f64 = ux.iter().zip(&uy).map(|(a, b)| a * b).sum();
        if cross < 0.0 {
            dy = -dy;
            cross = -cross;
        }
        let r = Rotation3::rotation_between(&dx, &dy).unwrap_or_else(|| {
            let perp = dx
                .cross(&Vector3::x())
                .try_normalize(1e-6)
                .unwrap_or_else(|| dx.cross(&Vector3::y()).normalize());
            Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(perp), std::f64::consts::PI)
        });
        (cross / ux.iter().map(|a| a * a).sum::<f64>(), r.into_inner())
    } else {
        let cov = source
            .iter()
            .zip(target)
            .map(|(x, y)| (y - my) * (x - mx).transpose())
            .fold(Matrix3::zeros(), |a, b| a + b)
            / n;
        let svd = cov.svd(true, true);
        let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        let mut d = Vector3::new(1.0, 1.0, 1.0);
        if u.determinant() * vt.determinant() < 0.0 {
            d[2] = -1.0;
        }
        let r = u * Matrix3::from_diagonal(&d) * vt;
        (svd.singular_values.dot(&d) / var_x, r)
    };
    let offset = my - scale * rotation * mx;
    let mut sim = Similarity {
        scale,
        rotation,
        offset,
        rmse: 0.0,
        collinear,
    };
    sim.rmse = (source
        .iter()
        .zip(target)
        .map(|(x, y)| (sim.apply(x) - y).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(sim)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AngleStats {
    pub mean_deg: f64,
    pub max_deg: f64,
}

impl AngleStats {
    pub fn between(a: &[Rotation], b: &[Rotation]) -> Self {
        let e: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(x, y)| geodesic_angle(x, y).to_degrees())
            .collect();
        AngleStats {
            mean_deg: e.iter().sum::<f64>() / e.len().max(1) as f64,
            max_deg: e.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationError {
    pub rmse_m: f64,
    /// `None` when the ground truth has no scene diameter.
    pub rmse_percent_diameter: Option<f64>,
    pub frames: usize,
    pub alignment: Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativeErrorStats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub count: usize,
    /// Scale applied to the estimated depths before comparison.
    pub scale: f64,
}

/// Per-kind detection quality, counted over (frame, track pair) instances;
/// floor is counted over tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub kind: RelationKind,
    pub detected: usize,
    pub correct: usize,
    /// `None` when nothing was detected.
    pub precision: Option<f64>,
    pub reference: usize,
    pub recalled: usize,
    /// `None` when the reference set is empty.
    pub recall: Option<f64>,
}

impl DetectionScore {
    fn new(kind: RelationKind, detected: usize, correct: usize, reference: usize, recalled: usize) -> Self {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        DetectionScore {
            kind,
            detected,
            correct,
            precision: ratio(correct, detected),
            reference,
            recalled,
            recall: ratio(recalled, reference),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionSummary {
    pub before: ErrorStats,
    pub after: ErrorStats,
}

/// Every metric is optional: a stage that has not run, or ground truth that
/// cannot be matched, leaves its field empty and adds a note to `absent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rotation_before: AngleStats,
    pub rotation_after: Option<AngleStats>,
    pub translation: Option<TranslationError>,
    pub depth: Option<RelativeErrorStats>,
    pub coplanarity: Vec<DetectionScore>,
    pub reprojection: Option<ReprojectionSummary>,
    pub registered_ratio: Option<f64>,
    pub timings: Vec<StageTiming>,
    pub absent: Vec<String>,
}

fn point_segment_distance(x: &Point2<f64>, s: &LineSegment2D) -> f64 {
    let d = s.q - s.p;
    let t = ((x - s.p).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
    (x - (s.p + t * d)).norm()
}

/// Ground-truth line of each segment. Segments that survived preprocessing
/// unchanged match a dataset segment exactly; merged segments take the line
/// of the nearest dataset segment in the same frame.
pub fn segment_lines(
    state: &PipelineState,
    gt: &GroundTruth,
    segments: &[LineSegment2D],
) -> Result<Vec<Option<usize>>> {
    let data = &state.dataset.segments;
    if data.len() != gt.segment_lines.len() {
        return Err(Error::InvalidInput(format!(
            "ground truth lists {} segments, dataset has {}",
            gt.segment_lines.len(),
            data.len()
        )));
    }
    let mut by_frame: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        by_frame.entry(s.frame_id).or_default().push(i);
    }
    let tol = 0.05 * state.dataset.intrinsics.min_dim();
    Ok(segments
        .iter()
        .map(|s| {
            let candidates = by_frame.get(&s.frame_id)?;
            let score = |i: usize| {
                let d = &data[i];
                let mid = point_segment_distance(&s.midpoint(), d).min(point_segment_distance(&d.midpoint(), s));
                mid + orientation_difference(s.orientation(), d.orientation()).to_degrees()
            };
            let best = candidates
                .iter()
                .copied()
                .min_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)))?;
            (score(best) < tol).then(|| gt.segment_lines[best])
        })
        .collect())
}

/// Majority ground-truth line of each track; ties go to the lower line id.
pub fn track_lines(tracks: &[LineTrack], seg_lines: &[Option<usize>]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for t in tracks {
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for o in &t.observations {
            if let Some(l) = seg_lines[o.segment] {
                *votes.entry(l).or_default() += 1;
            }
        }
        if let Some((line, _)) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
            out.insert(t.id, *line);
        }
    }
    out
}

/// Maps each estimated axis to the closest ground-truth axis, up to sign.
pub fn axis_mapping(estimated: &ManhattanFrame, truth: &ManhattanFrame) -> [Axis; 3] {
    let mut out = [Axis::X; 3];
    for a in Axis::ALL {
        out[a.index()] = Axis::ALL
            .iter()
            .copied()
            .min_by(|x, y| {
                let ex = estimated.axis(a).line_angle_to(truth.axis(*x));
                let ey = estimated.axis(a).line_angle_to(truth.axis(*y));
                ex.total_cmp(&ey)
            })
            .expect("three axes");
    }
    out
}

fn coplanarity_scores(
    state: &PipelineState,
    gt: &GroundTruth,
    seg_lines: &[Option<usize>],
    absent: &mut Vec<String>,
) -> Result<Vec<DetectionScore>> {
    let (Some(tracking), Some(cop), Some(refined)) = (&state.tracking, &state.coplanarity, &state.refined) else {
        absent.push("coplanarity: stage has not run".into());
        return Ok(Vec::new());
    };
    if gt.coplanar_pairs.is_empty() {
        absent.push("coplanarity: ground truth lists no coplanar pairs".into());
        return Ok(Vec::new());
    }
    let segments = state.labeled_segments()?;
    let line_of = track_lines(&tracking.tracks, seg_lines);
    let map = axis_mapping(&refined.frame, &gt.frame);
    let cfg = &state.config.coplanarity;
    let truly_coplanar = |ta: usize, tb: usize, axis: Axis| match (line_of.get(&ta), line_of.get(&tb)) {
        (Some(&a), Some(&b)) => gt.are_coplanar(a, b) && gt.lines[a].face.normal_axis() == map[axis.index()],
        _ => false,
    };

    let mut found: BTreeMap<RelationKind, Vec<(u32, usize, usize)>> = BTreeMap::new();
    let mut correct: BTreeMap<RelationKind, usize> = BTreeMap::new();
    for r in cop.relations.iter().filter(|r| r.kind != RelationKind::Floor) {
        let (a, b) = (r.members[0], r.members[1]);
        found.entry(r.kind).or_default().push((a.frame_id, a.track, b.track));
        if truly_coplanar(a.track, b.track, r.normal_axis) {
            *correct.entry(r.kind).or_default() += 1;
        }
    }
    for v in found.values_mut() {
        v.sort_unstable();
    }

    // reference instances: co-observed tracked pairs whose lines share a face
    let mut track_of = vec![None; segments.len()];
    for t in &tracking.tracks {
        for o in &t.observations {
            track_of[o.segment] = Some(t.id);
        }
    }
    let junction_gap = cfg.junction_distance_fraction * state.dataset.intrinsics.min_dim();
    let mut reference: BTreeMap<RelationKind, Vec<(u32, usize, usize)>> = BTreeMap::new();
    for idx in crate::tracking::segments_by_frame(&segments).values() {
        for (x, &i) in idx.iter().enumerate() {
            for &j in &idx[x + 1..] {
                let (Some(ti), Some(tj)) = (track_of[i], track_of[j]) else {
                    continue;
                };
                let (Some(li), Some(lj)) = (segments[i].label, segments[j].label) else {
                    continue;
                };
                let (Some(&gi), Some(&gj)) = (line_of.get(&ti), line_of.get(&tj)) else {
                    continue;
                };
                if ti == tj || !gt.are_coplanar(gi, gj) {
                    continue;
                }
                let key = (segments[i].frame_id, ti.min(tj), ti.max(tj));
                if li == lj {
                    reference.entry(RelationKind::Parallel).or_default().push(key);
                } else {
                    reference.entry(RelationKind::Orthogonal).or_default().push(key);
                    if min_endpoint_distance(&segments[i], &segments[j]) < junction_gap {
                        reference.entry(RelationKind::Junction).or_default().push(key);
                    }
                }
            }
        }
    }

    let mut scores = Vec::new();
    for (kind, enabled) in [
        (RelationKind::Junction, cfg.junction),
        (RelationKind::Orthogonal, cfg.orthogonal),
        (RelationKind::Parallel, cfg.parallel),
    ] {
        if !enabled {
            continue;
        }
        let det = found.get(&kind).map(Vec::as_slice).unwrap_or(&[]);
        let refs = reference.get(&kind).map(Vec::as_slice).unwrap_or(&[]);
        let recalled = refs.iter().filter(|k| det.binary_search(k).is_ok()).count();
        scores.push(DetectionScore::new(
            kind,
            det.len(),
            correct.get(&kind).copied().unwrap_or(0),
            refs.len(),
            recalled,
        ));
    }
    if cfg.floor {
        let detected: Vec<usize> = cop.floor().map(|f| f.tracks()).unwrap_or_default();
        let on_floor = |t: &usize| line_of.get(t).is_some_and(|&l| gt.lines[l].face == Face::Floor);
        let reference: Vec<usize> = tracking.tracks.iter().map(|t| t.id).filter(on_floor).collect();
        let correct = detected.iter().filter(|t| on_floor(t)).count();
        let recalled = reference.iter().filter(|t| detected.binary_search(t).is_ok()).count();
        scores.push(DetectionScore::new(
            RelationKind::Floor,
            detected.len(),
            correct,
            reference.len(),
            recalled,
        ));
    }
    Ok(scores)
}

fn depth_errors(
    state: &PipelineState,
    gt: &GroundTruth,
    seg_lines: &[Option<usize>],
) -> Result<Option<RelativeErrorStats>> {
    let (Some(linear), Some(tracking)) = (&state.linear, &state.tracking) else {
        return Ok(None);
    };
    let segments = state.labeled_segments()?;
    let line_of = track_lines(&tracking.tracks, seg_lines);
    let k = &state.dataset.intrinsics;
    let mut pairs = Vec::new();
    for d in &linear.depths {
        let (Some(&l), Some(fi)) = (line_of.get(&d.track), state.dataset.frame_index(d.frame_id)) else {
            continue;
        };
        let line = &gt.lines[l];
        let c = gt.translation(fi);
        let ray = pixel_to_global_ray(&segments[d.segment].midpoint(), k, &gt.rotations[fi])?.into_inner();
        let dir = (line.b() - line.a()).normalize();
        // closest point of the ray to the line
        let w = c - line.a();
        let (b, dd, e) = (ray.dot(&dir), ray.dot(&w), dir.dot(&w));
        let denom = 1.0 - b * b;
        if denom < 1e-12 {
            continue;
        }
        pairs.push((d.depth, (b * e - dd) / denom));
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    let scale = pairs.iter().map(|(e, t)| e * t).sum::<f64>() / pairs.iter().map(|(e, _)| e * e).sum::<f64>();
    let mut rel: Vec<f64> = pairs.iter().map(|(e, t)| (scale * e - t).abs() / t.abs()).collect();
    rel.sort_by(f64::total_cmp);
    Ok(Some(RelativeErrorStats {
        mean: rel.iter().sum::<f64>() / rel.len() as f64,
        median: rel[rel.len() / 2],
        max: *rel.last().expect("nonempty"),
        count: rel.len(),
        scale,
    }))
}

fn translation_error(state: &PipelineState, gt: &GroundTruth) -> Result<Option<TranslationError>> {
    let estimated: Vec<(u32, Vector3<f64>)> = if let Some(ba) = &state.ba {
        let p = &ba.problem;
        p.frame_ids
            .iter()
            .enumerate()
            .map(|(c, f)| (*f, p.translation(c)))
            .collect()
    } else if let Some(lin) = &state.linear {
        lin.registered_frames()
            .into_iter()
            .map(|f| (f, lin.translation(f).expect("registered")))
            .collect()
    } else {
        return Ok(None);
    };
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (f, t) in estimated {
        if let Some(i) = state.dataset.frame_index(f) {
            src.push(t);
            dst.push(gt.translation(i));
        }
    }
    let alignment = similarity_align(&src, &dst)?;
    Ok(Some(TranslationError {
        rmse_m: alignment.rmse,
        rmse_percent_diameter: (gt.scene_diameter > 0.0).then(|| 100.0 * alignment.rmse / gt.scene_diameter),
        frames: src.len(),
        alignment,
    }))
}

/// Scores a state against ground truth. Reads the state only.
pub fn evaluate(state: &PipelineState, gt: &GroundTruth, timings: &[StageTiming]) -> Result<EvaluationReport> {
    let n = state.dataset.frames.len();
    if gt.rotations.len() != n || !(gt.translations.is_empty() || gt.translations.len() == n) {
        return Err(Error::InvalidInput(
            "ground truth and dataset differ in frame count".into(),
        ));
    }
    let mut absent = Vec::new();
    let rotation_before = AngleStats::between(&state.dataset.rotations(), &gt.rotations);
    let rotation_after = state
        .refined
        .as_ref()
        .map(|r| AngleStats::between(&r.rotations.rotations, &gt.rotations));
    if rotation_after.is_none() {
        absent.push("rotation_after: rotations have not been refined".into());
    }

    let has_lines = !(gt.lines.is_empty() || gt.segment_lines.is_empty());
    if !has_lines {
        absent.push("depth, coplanarity: ground truth has no line assignment".into());
    }
    let seg_lines = match &state.preprocessed {
        Some(segs) if has_lines => Some(segment_lines(state, gt, segs)?),
        _ => None,
    };
    let translation = if gt.translations.is_empty() {
        absent.push("translation: ground truth has no camera centers".into());
        Ok(None)
    } else {
        translation_error(state, gt)
    };
    if translation
        .as_ref()
        .is_ok_and(|t| t.as_ref().is_some_and(|t| t.rmse_percent_diameter.is_none()))
    {
        absent.push("translation.rmse_percent_diameter: ground truth has no scene diameter".into());
    }
    let translation = match translation {
        Ok(t) => t,
        Err(e @ Error::InsufficientData(_)) => {
            absent.push(format!("translation: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    if translation.is_none() && state.linear.is_none() && !gt.translations.is_empty() {
        absent.push("translation: nothing has been solved".into());
    }
    let (depth, coplanarity) = match &seg_lines {
        Some(sl) => (
            depth_errors(state, gt, sl)?,
            coplanarity_scores(state, gt, sl, &mut absent)?,
        ),
        None => (None, Vec::new()),
    };
    if depth.is_none() && has_lines {
        absent.push("depth: no solved depth matches a ground-truth line".into());
    }
    let reprojection = state.ba.as_ref().map(|b| ReprojectionSummary {
        before: b.initial_reprojection,
        after: b.final_reprojection,
    });
    if reprojection.is_none() {
        absent.push("reprojection: bundle adjustment has not run".into());
    }
    Ok(EvaluationReport {
        rotation_before,
        rotation_after,
        translation,
        depth,
        coplanarity,
        reprojection,
        registered_ratio: state.linear.as_ref().map(|l| l.registered_ratio),
        timings: timings.to_vec(),
        absent,
    })
}

impl EvaluationReport {
    pub fn score(&self, kind: RelationKind) -> Option<&DetectionScore> {
        self.coplanarity.iter().find(|s| s.kind == kind)
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Export(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

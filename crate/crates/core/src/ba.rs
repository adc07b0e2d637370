//! Bundle adjustment over Manhattan lines, camera poses and intrinsics.
//!
//! A line with fixed direction `A` is stored as its closest point to the
//! origin `Λ` (so `A·Λ = 0`). In camera `(R, T)` its interpretation-plane
//! normal is `m = R((Λ − T) × A)`, and the signed pixel distance of an image
//! point with normalized coordinates `x̂ = K⁻¹[x, y, 1]` to the projected
//! line is
//!
//! ```text
//! s = m·x̂ / sqrt((m₁/f_x)² + (m₂/f_y)²)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Point2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::config::BaConfig;
use crate::coplanarity::{CoplanarityRelation, RelationKind};
use crate::error::{Error, Result};
use crate::geometry::{skew, Axis, FrameRotations, Intrinsics, LineSegment2D, ManhattanFrame, Rotation};
use crate::sfm::{viewing_ray, SfmSolution};
use crate::tracking::LineTrack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line3D {
    pub track: usize,
    pub label: Axis,
    pub lambda: [f64; 3],
    pub direction: [f64; 3],
}

impl Line3D {
    pub fn lambda(&self) -> Vector3<f64> {
        Vector3::from(self.lambda)
    }

    pub fn direction(&self) -> Vector3<f64> {
        Vector3::from(self.direction)
    }

    /// Line through `point` with direction `a`, stored by its closest point
    /// to the origin.
    pub fn through(track: usize, label: Axis, point: &Vector3<f64>, a: &Vector3<f64>) -> Self {
        let a = a.normalize();
        Line3D {
            track,
            label,
            lambda: (point - a * a.dot(point)).into(),
            direction: a.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaObservation {
    pub line: usize,
    pub camera: usize,
    pub frame_id: u32,
    pub segment: usize,
    pub p: [f64; 2],
    pub q: [f64; 2],
}

/// `(Λ_a − Λ_b)·normal = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaCoplanar {
    pub a: usize,
    pub b: usize,
    pub normal: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaProblem {
    pub lines: Vec<Line3D>,
    pub frame_ids: Vec<u32>,
    pub rotations: Vec<Rotation>,
    pub translations: Vec<[f64; 3]>,
    pub intrinsics: Intrinsics,
    pub observations: Vec<BaObservation>,
    pub coplanar: Vec<BaCoplanar>,
    /// Camera whose translation stays fixed.
    pub pinned: usize,
    /// Mean distance of the lines to the origin held by the scale gauge.
    pub scale_target: f64,
    /// Focal lengths at initialization; the bounds are relative to them.
    pub initial_focal: [f64; 2],
}

pub fn image_line(line: &Line3D, r: &Rotation, t: &Vector3<f64>) -> Vector3<f64> {
    r.matrix() * (line.lambda() - t).cross(&line.direction())
}

fn normalized(k: &Intrinsics, x: &Point2<f64>) -> Vector3<f64> {
    Vector3::new((x.x - k.cx) / k.fx, (x.y - k.cy) / k.fy, 1.0)
}

/// Signed pixel distance of `x` to the image line with plane normal `m`.
pub fn signed_distance(m: &Vector3<f64>, x: &Point2<f64>, k: &Intrinsics) -> f64 {
    m.dot(&normalized(k, x)) / ((m.x / k.fx).powi(2) + (m.y / k.fy).powi(2)).sqrt()
}

/// Mean of the endpoint distances to the projected line, and whether both
/// endpoints lie on the same side (then the mean equals the average
/// distance over the whole segment).
pub fn reprojection_detail(
    line: &Line3D,
    p: &Point2<f64>,
    q: &Point2<f64>,
    r: &Rotation,
    t: &Vector3<f64>,
    k: &Intrinsics,
) -> Result<(f64, bool)> {
    let m = image_line(line, r, t);
    let rc = r.matrix() * (line.lambda() - t);
    let ra = r.matrix() * line.direction();
    if ra.z.abs() <= 1e-12 && rc.z <= 0.0 {
        return Err(Error::BehindCamera {
            track_id: line.track,
            frame_id: 0,
        });
    }
    if (m.x / k.fx).hypot(m.y / k.fy) <= 1e-300 {
        return Err(Error::Numeric("line projects to a point".into()));
    }
    let (sp, sq) = (signed_distance(&m, p, k), signed_distance(&m, q, k));
    Ok(((sp.abs() + sq.abs()) / 2.0, sp * sq >= 0.0))
}

pub fn residual_reprojection(
    line: &Line3D,
    p: &Point2<f64>,
    q: &Point2<f64>,
    r: &Rotation,
    t: &Vector3<f64>,
    k: &Intrinsics,
) -> Result<f64> {
    reprojection_detail(line, p, q, r, t, k).map(|x| x.0)
}

pub fn residual_colinearity(line: &Line3D) -> f64 {
    line.direction().dot(&line.lambda())
}

pub fn residual_coplanarity(a: &Line3D, b: &Line3D, normal: &Vector3<f64>) -> f64 {
    (a.lambda() - b.lambda()).dot(normal)
}

/// Derivative of [`residual_colinearity`] with respect to `Λ`, at fixed direction.
pub fn colinearity_jacobian(line: &Line3D) -> Vector3<f64> {
    line.direction()
}

/// Derivatives of [`residual_coplanarity`] with respect to `Λ_a` and `Λ_b`.
pub fn coplanarity_jacobian(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    (*normal, -*normal)
}

/// Signed endpoint distance and its derivatives with respect to `Λ`, `T`,
/// a left rotation increment, and `(f_x, f_y, c_x, c_y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndpointJacobian {
    pub s: f64,
    pub d_lambda: Vector3<f64>,
    pub d_translation: Vector3<f64>,
    pub d_rotation: Vector3<f64>,
    pub d_intrinsics: Vector4<f64>,
}

pub fn endpoint_jacobian(
    line: &Line3D,
    x: &Point2<f64>,
    r: &Rotation,
    t: &Vector3<f64>,
    k: &Intrinsics,
) -> EndpointJacobian {
    let a = line.direction();
    let m = image_line(line, r, t);
    let xh = normalized(k, x);
    let (fx, fy) = (k.fx, k.fy);
    let n = ((m.x / fx).powi(2) + (m.y / fy).powi(2)).sqrt();
    let num = m.dot(&xh);
    let s = num / n;
    let ds_dm = xh / n - Vector3::new(m.x / (fx * fx), m.y / (fy * fy), 0.0) * (num / (n * n * n));
    let dm_dlambda = -r.matrix() * skew(&a);
    let dm_drot = -skew(&m);
    let d_fx = -m.x * (x.x - k.cx) / (fx * fx * n) + num * m.x * m.x / (fx * fx * fx * n * n * n);
    let d_fy = -m.y * (x.y - k.cy) / (fy * fy * n) + num * m.y * m.y / (fy * fy * fy * n * n * n);
    EndpointJacobian {
        s,
        d_lambda: dm_dlambda.transpose() * ds_dm,
        d_translation: -(dm_dlambda.transpose() * ds_dm),
        d_rotation: dm_drot.transpose() * ds_dm,
        d_intrinsics: Vector4::new(d_fx, d_fy, -m.x / (fx * n), -m.y / (fy * n)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_values(v: &[f64]) -> Self {
        if v.is_empty() {
            return ErrorStats::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        ErrorStats {
            mean,
            std: var.sqrt(),
            count: v.len(),
        }
    }
}

impl BaProblem {
    pub fn translation(&self, camera: usize) -> Vector3<f64> {
        Vector3::from(self.translations[camera])
    }

    pub fn endpoints(&self, o: &BaObservation) -> (Point2<f64>, Point2<f64>) {
        (Point2::new(o.p[0], o.p[1]), Point2::new(o.q[0], o.q[1]))
    }

    /// Mean endpoint distance of every observation.
    pub fn reprojection_errors(&self) -> Result<Vec<f64>> {
        self.observations
            .iter()
            .map(|o| {
                let (p, q) = self.endpoints(o);
                residual_reprojection(
                    &self.lines[o.line],
                    &p,
                    &q,
                    &self.rotations[o.camera],
                    &self.translation(o.camera),
                    &self.intrinsics,
                )
            })
            .collect()
    }

    pub fn reprojection_stats(&self) -> Result<ErrorStats> {
        Ok(ErrorStats::from_values(&self.reprojection_errors()?))
    }

    fn mean_line_distance(&self) -> f64 {
        self.lines.iter().map(|l| l.lambda().norm()).sum::<f64>() / self.lines.len().max(1) as f64
    }

    /// Weighted cost and its parts: reprojection, geometric, gauge.
    pub fn cost(&self, cfg: &BaConfig) -> Result<CostParts> {
        let mut reproj = 0.0;
        for (i, o) in self.observations.iter().enumerate() {
            let m = image_line(
                &self.lines[o.line],
                &self.rotations[o.camera],
                &self.translation(o.camera),
            );
            let (p, q) = self.endpoints(o);
            let (sp, sq) = (
                signed_distance(&m, &p, &self.intrinsics),
                signed_distance(&m, &q, &self.intrinsics),
            );
            if !sp.is_finite() || !sq.is_finite() {
                return Err(Error::NonFinite(format!(
                    "reprojection residual of observation {i} (track {}, frame {})",
                    self.lines[o.line].track, o.frame_id
                )));
            }
            reproj += 0.5 * (sp * sp + sq * sq);
        }
        let mut geom = 0.0;
        for l in &self.lines {
            geom += residual_colinearity(l).powi(2);
        }
        for c in &self.coplanar {
            geom += residual_coplanarity(&self.lines[c.a], &self.lines[c.b], &Vector3::from(c.normal)).powi(2);
        }
        let gauge = cfg.gauge_weight * (self.mean_line_distance() - self.scale_target).powi(2);
        let total = cfg.reprojection_weight * reproj + cfg.geometric_weight * geom + gauge;
        if !total.is_finite() {
            return Err(Error::NonFinite("bundle adjustment cost".into()));
        }
        Ok(CostParts {
            total,
            reprojection: reproj,
            geometric: geom,
            gauge,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParts {
    pub total: f64,
    pub reprojection: f64,
    pub geometric: f64,
    pub gauge: f64,
}

/// Builds the problem from the linear solution: each track's mid-points
/// `T_i + λ D` are fitted by a line along its Manhattan direction.
pub fn init_from_linear(
    solution: &SfmSolution,
    segments: &[LineSegment2D],
    tracks: &[LineTrack],
    relations: &[CoplanarityRelation],
    rotations: &FrameRotations,
    k: &Intrinsics,
    frame: &ManhattanFrame,
) -> Result<BaProblem> {
    let frame_ids = solution.registered_frames();
    if frame_ids.is_empty() {
        return Err(Error::MissingStage("linear solution registers no frames".into()));
    }
    let camera_of: BTreeMap<u32, usize> = frame_ids.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let translations: Vec<[f64; 3]> = frame_ids
        .iter()
        .map(|f| solution.translation(*f).expect("registered").into())
        .collect();
    let cam_rotations = frame_ids
        .iter()
        .map(|f| rotations.require(*f).cloned())
        .collect::<Result<Vec<_>>>()?;
    let mut lines = Vec::new();
    let mut line_of_track = BTreeMap::new();
    let mut observations = Vec::new();
    for t in tracks {
        let a = *frame.axis(t.label).as_vector();
        let mut points = Vec::new();
        let mut obs = Vec::new();
        for o in &t.observations {
            let (Some(&cam), Some(depth)) = (camera_of.get(&o.frame_id), solution.depth(t.id, o.frame_id)) else {
                continue;
            };
            let ray = viewing_ray(&segments[o.segment], k, rotations)?;
            points.push(Vector3::from(translations[cam]) + ray * depth);
            let s = &segments[o.segment];
            obs.push(BaObservation {
                line: lines.len(),
                camera: cam,
                frame_id: o.frame_id,
                segment: o.segment,
                p: [s.p.x, s.p.y],
                q: [s.q.x, s.q.y],
            });
        }
        if points.is_empty() {
            continue;
        }
        let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        line_of_track.insert(t.id, lines.len());
        lines.push(Line3D::through(t.id, t.label, &mean, &a));
        observations.extend(obs);
    }
    let mut coplanar = Vec::new();
    let mut seen = BTreeSet::new();
    let mut push = |a: usize, b: usize, axis: Axis, coplanar: &mut Vec<BaCoplanar>| {
        let (a, b) = (a.min(b), a.max(b));
        if a != b && seen.insert((a, b, axis)) {
            coplanar.push(BaCoplanar {
                a,
                b,
                normal: (*frame.axis(axis).as_vector()).into(),
            });
        }
    };
    for rel in relations {
        let ls: Vec<usize> = rel
            .tracks()
            .iter()
            .filter_map(|t| line_of_track.get(t).copied())
            .collect();
        if rel.kind == RelationKind::Floor {
            for w in ls.windows(2) {
                push(w[0], w[1], rel.normal_axis, &mut coplanar);
            }
        } else if ls.len() == 2 {
            push(ls[0], ls[1], rel.normal_axis, &mut coplanar);
        }
    }
    let mut problem = BaProblem {
        lines,
        frame_ids,
        rotations: cam_rotations,
        translations,
        intrinsics: *k,
        observations,
        coplanar,
        pinned: camera_of[&solution.pinned_frame],
        scale_target: 0.0,
        initial_focal: [k.fx, k.fy],
    };
    problem.scale_target = problem.mean_line_distance();
    Ok(problem)
}

/// Parameter layout for a phase: lines, free translations, then rotations
/// (phase ≥ 2) and intrinsics (phase 3).
struct Layout {
    n_lines: usize,
    t_index: Vec<Option<usize>>,
    r_offset: Option<usize>,
    k_offset: Option<usize>,
    n: usize,
}

impl Layout {
    fn new(p: &BaProblem, phase: u8) -> Self {
        let n_lines = 3 * p.lines.len();
        let mut n = n_lines;
        let t_index = (0..p.frame_ids.len())
            .map(|c| {
                (c != p.pinned).then(|| {
                    n += 3;
                    n - 3
                })
            })
            .collect();
        let r_offset = (phase >= 2).then(|| {
            n += 3 * p.frame_ids.len();
            n - 3 * p.frame_ids.len()
        });
        let k_offset = (phase >= 3).then(|| {
            n += 4;
            n - 4
        });
        Layout {
            n_lines,
            t_index,
            r_offset,
            k_offset,
            n,
        }
    }
}

/// Gauss–Newton system `JᵀJ`, `Jᵀr` (weights folded in).
fn linearize(p: &BaProblem, layout: &Layout, cfg: &BaConfig) -> (DMatrix<f64>, DVector<f64>) {
    let n = layout.n;
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut g = DVector::<f64>::zeros(n);
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(16);
    let add = |entries: &[(usize, f64)], r: f64, h: &mut DMatrix<f64>, g: &mut DVector<f64>| {
        for &(i, ji) in entries {
            g[i] += ji * r;
            for &(j, jj) in entries {
                h[(i, j)] += ji * jj;
            }
        }
    };
    let wr = (cfg.reprojection_weight / 2.0).sqrt();
    for o in &p.observations {
        let line = &p.lines[o.line];
        let (r, t) = (&p.rotations[o.camera], p.translation(o.camera));
        for x in [Point2::new(o.p[0], o.p[1]), Point2::new(o.q[0], o.q[1])] {
            let jac = endpoint_jacobian(line, &x, r, &t, &p.intrinsics);
            entries.clear();
            for a in 0..3 {
                entries.push((3 * o.line + a, wr * jac.d_lambda[a]));
            }
            if let Some(ti) = layout.t_index[o.camera] {
                for a in 0..3 {
                    entries.push((ti + a, wr * jac.d_translation[a]));
                }
            }
            if let Some(ro) = layout.r_offset {
                for a in 0..3 {
                    entries.push((ro + 3 * o.camera + a, wr * jac.d_rotation[a]));
                }
            }
            if let Some(ko) = layout.k_offset {
                for a in 0..4 {
                    entries.push((ko + a, wr * jac.d_intrinsics[a]));
                }
            }
            add(&entries, wr * jac.s, &mut h, &mut g);
        }
    }
    let wg = cfg.geometric_weight.sqrt();
    for (l, line) in p.lines.iter().enumerate() {
        let a = colinearity_jacobian(line);
        entries.clear();
        for c in 0..3 {
            entries.push((3 * l + c, wg * a[c]));
        }
        add(&entries, wg * residual_colinearity(line), &mut h, &mut g);
    }
    for cp in &p.coplanar {
        let nrm = Vector3::from(cp.normal);
        let (ja, jb) = coplanarity_jacobian(&nrm);
        entries.clear();
        for c in 0..3 {
            entries.push((3 * cp.a + c, wg * ja[c]));
            entries.push((3 * cp.b + c, wg * jb[c]));
        }
        add(
            &entries,
            wg * residual_coplanarity(&p.lines[cp.a], &p.lines[cp.b], &nrm),
            &mut h,
            &mut g,
        );
    }
    // scale gauge: √w (mean ‖Λ‖ − target); dense over lines
    if !p.lines.is_empty() {
        let w = cfg.gauge_weight.sqrt();
        let nl = p.lines.len() as f64;
        entries.clear();
        for (l, line) in p.lines.iter().enumerate() {
            let lam = line.lambda();
            let norm = lam.norm();
            if norm > 0.0 {
                for c in 0..3 {
                    entries.push((3 * l + c, w * lam[c] / (norm * nl)));
                }
            }
        }
        add(&entries, w * (p.mean_line_distance() - p.scale_target), &mut h, &mut g);
    }
    debug_assert!(layout.n_lines <= n);
    (h, g)
}

fn apply_step(p: &BaProblem, layout: &Layout, delta: &DVector<f64>, cfg: &BaConfig) -> BaProblem {
    let mut out = p.clone();
    for (l, line) in out.lines.iter_mut().enumerate() {
        let a = line.direction();
        let lam = line.lambda() + Vector3::new(delta[3 * l], delta[3 * l + 1], delta[3 * l + 2]);
        line.lambda = (lam - a * a.dot(&lam)).into();
    }
    for (c, ti) in layout.t_index.iter().enumerate() {
        if let Some(ti) = ti {
            let t = out.translation(c) + Vector3::new(delta[*ti], delta[ti + 1], delta[ti + 2]);
            out.translations[c] = t.into();
        }
    }
    if let Some(ro) = layout.r_offset {
        for (c, r) in out.rotations.iter_mut().enumerate() {
            let d = Vector3::new(delta[ro + 3 * c], delta[ro + 3 * c + 1], delta[ro + 3 * c + 2]);
            *r = Rotation::exp(&d).compose(r);
        }
    }
    if let Some(ko) = layout.k_offset {
        let k = &mut out.intrinsics;
        let [lo, hi] = cfg.focal_bounds;
        k.fx = (k.fx + delta[ko]).clamp(lo * p.initial_focal[0], hi * p.initial_focal[0]);
        k.fy = (k.fy + delta[ko + 1]).clamp(lo * p.initial_focal[1], hi * p.initial_focal[1]);
        k.cx += delta[ko + 2];
        k.cy += delta[ko + 3];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaLogEntry {
    pub phase: u8,
    pub iteration: usize,
    pub cost: f64,
    pub candidate_cost: f64,
    pub damping: f64,
    pub accepted: bool,
}

pub fn write_cost_log(path: &Path, log: &[BaLogEntry]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "phase,iteration,cost,candidate_cost,damping,accepted").map_err(io)?;
    for e in log {
        writeln!(
            w,
            "{},{},{:e},{:e},{:e},{}",
            e.phase, e.iteration, e.cost, e.candidate_cost, e.damping, e.accepted as u8
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Runs one phase of damped Gauss–Newton. Only steps that lower the cost
/// (after re-projecting `Λ` and clamping the focal lengths) are accepted.
pub fn optimize_phase(
    p: &BaProblem,
    phase: u8,
    cfg: &BaConfig,
    log: &mut Vec<BaLogEntry>,
) -> Result<(BaProblem, usize)> {
    let layout = Layout::new(p, phase);
    let mut current = p.clone();
    let mut cost = current.cost(cfg)?.total;
    let mut mu = 1e-4;
    let mut accepted_steps = 0;
    for iteration in 0..cfg.max_iterations {
        if cost == 0.0 {
            break;
        }
        let (h, g) = linearize(&current, &layout, cfg);
        let max_diag = (0..layout.n).map(|i| h[(i, i)]).fold(0.0, f64::max);
        let floor = 1e-12 * max_diag.max(1e-300);
        let mut improved = false;
        while mu < 1e12 {
            let mut damped = h.clone();
            for i in 0..layout.n {
                damped[(i, i)] += mu * h[(i, i)].max(floor);
            }
            let Some(chol) = damped.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            let candidate = apply_step(&current, &layout, &delta, cfg);
            let new_cost = match candidate.cost(cfg) {
                Ok(c) => c.total,
                Err(Error::NonFinite(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            let accept = new_cost < cost;
            log.push(BaLogEntry {
                phase,
                iteration,
                cost,
                candidate_cost: new_cost,
                damping: mu,
                accepted: accept,
            });
            if accept {
                let rel = (cost - new_cost) / cost;
                current = candidate;
                cost = new_cost;
                mu = (mu / 10.0).max(1e-12);
                accepted_steps += 1;
                improved = rel >= cfg.relative_tolerance;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok((current, accepted_steps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: u8,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaResult {
    pub problem: BaProblem,
    pub phases: Vec<PhaseSummary>,
    pub log: Vec<BaLogEntry>,
    pub initial_reprojection: ErrorStats,
    pub final_reprojection: ErrorStats,
}

/// Runs phases 1 through `last_phase`.
pub fn optimize(p: &BaProblem, cfg: &BaConfig, last_phase: u8) -> Result<BaResult> {
    if !(1..=3).contains(&last_phase) {
        return Err(Error::Config(format!("phase must be 1, 2 or 3, got {last_phase}")));
    }
    let initial_reprojection = p.reprojection_stats()?;
    let mut current = p.clone();
    let mut log = Vec::new();
    let mut phases = Vec::new();
    for phase in 1..=last_phase {
        let initial_cost = current.cost(cfg)?.total;
        let (next, accepted_steps) = optimize_phase(&current, phase, cfg, &mut log)?;
        current = next;
        phases.push(PhaseSummary {
            phase,
            initial_cost,
            final_cost: current.cost(cfg)?.total,
            accepted_steps,
        });
    }
    Ok(BaResult {
        final_reprojection: current.reprojection_stats()?,
        problem: current,
        phases,
        log,
        initial_reprojection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, RoomConfig, SceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(600.0, 620.0, 640.0, 400.0, 1280, 800).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng) -> (Line3D, Rotation, Vector3<f64>, Point2<f64>) {
        let axis = Axis::from_index(rng.random_range(0..3)).unwrap();
        let mut a = Vector3::zeros();
        a[axis.index()] = 1.0;
        let pt = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(2.0..6.0),
        );
        let line = Line3D::through(0, axis, &pt, &a);
        let r = Rotation::exp(&Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        ));
        let t = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let x = Point2::new(rng.random_range(0.0..1280.0), rng.random_range(0.0..800.0));
        (line, r, t, x)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn reprojection_jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (line, r, t, x) = random_state(&mut rng);
            let kk = k();
            let jac = endpoint_jacobian(&line, &x, &r, &t, &kk);
            let s = |line: &Line3D, r: &Rotation, t: &Vector3<f64>, kk: &Intrinsics| {
                signed_distance(&image_line(line, r, t), &x, kk)
            };
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = h;
                let shift = |d: Vector3<f64>| Line3D {
                    lambda: (line.lambda() + d).into(),
                    ..line.clone()
                };
                let fd = (s(&shift(e), &r, &t, &kk) - s(&shift(-e), &r, &t, &kk)) / (2.0 * h);
                worst = worst.max(rel_err(fd, jac.d_lambda[a]));
                let fd = (s(&line, &r, &(t + e), &kk) - s(&line, &r, &(t - e), &kk)) / (2.0 * h);
                worst = worst.max(rel_err(fd, jac.d_translation[a]));
                let fd = (s(&line, &Rotation::exp(&e).compose(&r), &t, &kk)
                    - s(&line, &Rotation::exp(&-e).compose(&r), &t, &kk))
                    / (2.0 * h);
                worst = worst.max(rel_err(fd, jac.d_rotation[a]));
            }
            for a in 0..4 {
                let bump = |d: f64| {
                    let mut k2 = kk;
                    match a {
                        0 => k2.fx += d,
                        1 => k2.fy += d,
                        2 => k2.cx += d,
                        _ => k2.cy += d,
                    }
                    k2
                };
                // intrinsics are pixels in the hundreds; the step is relative
                let hk = h * [kk.fx, kk.fy, kk.cx, kk.cy][a];
                let fd = (s(&line, &r, &t, &bump(hk)) - s(&line, &r, &t, &bump(-hk))) / (2.0 * hk);
                worst = worst.max(rel_err(fd, jac.d_intrinsics[a]));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn mean_distance_jacobian_matches_central_differences() {
        // r = (|s_p| + |s_q|)/2, away from sign changes
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut tested = 0;
        while tested < 100 {
            let (line, r, t, p) = random_state(&mut rng);
            let q = Point2::new(rng.random_range(0.0..1280.0), rng.random_range(0.0..800.0));
            let kk = k();
            let (jp, jq) = (
                endpoint_jacobian(&line, &p, &r, &t, &kk),
                endpoint_jacobian(&line, &q, &r, &t, &kk),
            );
            if jp.s.abs() < 1e-3 || jq.s.abs() < 1e-3 {
                continue;
            }
            tested += 1;
            let analytic = (jp.d_translation * jp.s.signum() + jq.d_translation * jq.s.signum()) / 2.0;
            for a in 0..3 {
                let mut e = Vector3::zeros();
                e[a] = h;
                let f = |tt: Vector3<f64>| residual_reprojection(&line, &p, &q, &r, &tt, &kk).unwrap();
                let fd = (f(t + e) - f(t - e)) / (2.0 * h);
                worst = worst.max(rel_err(fd, analytic[a]));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn geometric_residuals_and_jacobians() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        for _ in 0..100 {
            let a = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let lam = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let line = Line3D {
                track: 0,
                label: Axis::X,
                lambda: lam.into(),
                direction: a.into(),
            };
            assert!((residual_colinearity(&line) - a.dot(&lam)).abs() < 1e-12);
            let other = Line3D {
                lambda: (lam * 0.5 + a).into(),
                ..line.clone()
            };
            let n = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            assert!((residual_coplanarity(&line, &other, &n) - (lam - (lam * 0.5 + a)).dot(&n)).abs() < 1e-12);
            // derivatives are the constant vectors used in `linearize`
            for c in 0..3 {
                let mut e = Vector3::zeros();
                e[c] = h;
                let sh = |d: Vector3<f64>| Line3D {
                    lambda: (lam + d).into(),
                    ..line.clone()
                };
                let fd = (residual_colinearity(&sh(e)) - residual_colinearity(&sh(-e))) / (2.0 * h);
                assert!(rel_err(fd, a[c]) < 1e-5);
                let fd =
                    (residual_coplanarity(&sh(e), &other, &n) - residual_coplanarity(&sh(-e), &other, &n)) / (2.0 * h);
                assert!(rel_err(fd, n[c]) < 1e-5);
                let fd =
                    (residual_coplanarity(&other, &sh(e), &n) - residual_coplanarity(&other, &sh(-e), &n)) / (2.0 * h);
                assert!(rel_err(fd, -n[c]) < 1e-5);
            }
        }
        let on = Line3D {
            track: 0,
            label: Axis::X,
            lambda: [0.0, 1.0, 0.0],
            direction: [1.0, 0.0, 0.0],
        };
        assert_eq!(residual_colinearity(&on), 0.0);
        let along = Line3D {
            lambda: [1.0, 0.0, 0.0],
            ..on.clone()
        };
        assert_eq!(residual_colinearity(&along), 1.0);
        let offset = Line3D {
            lambda: [0.0, 1.5, 0.0],
            ..on.clone()
        };
        assert!((residual_coplanarity(&offset, &on, &Vector3::y()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reprojection_examples() {
        let line = Line3D::through(0, Axis::X, &Vector3::new(0.0, 0.0, 4.0), &Vector3::x());
        let (r, t) = (Rotation::identity(), Vector3::zeros());
        let kk = Intrinsics::new(600.0, 600.0, 640.0, 400.0, 1280, 800).unwrap();
        let on = residual_reprojection(
            &line,
            &Point2::new(100.0, 400.0),
            &Point2::new(900.0, 400.0),
            &r,
            &t,
            &kk,
        )
        .unwrap();
        assert!(on.abs() < 1e-12);
        let off = residual_reprojection(
            &line,
            &Point2::new(100.0, 407.0),
            &Point2::new(900.0, 407.0),
            &r,
            &t,
            &kk,
        )
        .unwrap();
        assert!((off - 7.0).abs() < 1e-9);
    }

    #[test]
    fn endpoint_mean_matches_sampled_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut checked = 0;
        while checked < 50 {
            let (line, r, t, p) = random_state(&mut rng);
            let q = Point2::new(
                p.x + rng.random_range(-200.0..200.0),
                p.y + rng.random_range(-200.0..200.0),
            );
            let kk = k();
            let (mean, same_side) = reprojection_detail(&line, &p, &q, &r, &t, &kk).unwrap();
            if !same_side {
                continue;
            }
            checked += 1;
            let m = image_line(&line, &r, &t);
            let n = 10_000;
            // trapezoid rule is exact for a linear integrand
            let sampled = (0..=n)
                .map(|i| {
                    let u = i as f64 / n as f64;
                    let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                    w * signed_distance(&m, &(p + (q - p) * u), &kk).abs()
                })
                .sum::<f64>()
                / n as f64;
            assert!((sampled - mean).abs() < 1e-9 * mean.max(1.0), "{sampled} vs {mean}");
        }
    }

    fn ground_truth_problem(noise_px: f64) -> BaProblem {
        let (ds, gt) = generate_scene(&SceneConfig {
            rooms: vec![RoomConfig {
                n_frames: 24,
                ..RoomConfig::default()
            }],
            ..SceneConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut lines: Vec<Line3D> = Vec::new();
        let mut line_index = BTreeMap::new();
        let mut observations = Vec::new();
        for (i, s) in ds.segments.iter().enumerate() {
            let gl = &gt.lines[gt.segment_lines[i]];
            let li = *line_index.entry(gl.id).or_insert_with(|| {
                let a = *gt.frame.axis(gl.label).as_vector();
                lines.push(Line3D::through(gl.id, gl.label, &Vector3::from(gl.a), &a));
                lines.len() - 1
            });
            let mut jitter = || {
                if noise_px > 0.0 {
                    rng.random_range(-noise_px..noise_px)
                } else {
                    0.0
                }
            };
            observations.push(BaObservation {
                line: li,
                camera: ds.frame_index(s.frame_id).unwrap(),
                frame_id: s.frame_id,
                segment: i,
                p: [s.p.x + jitter(), s.p.y + jitter()],
                q: [s.q.x + jitter(), s.q.y + jitter()],
            });
        }
        let mut p = BaProblem {
            lines,
            frame_ids: ds.frame_ids(),
            rotations: gt.rotations.clone(),
            translations: gt.translations.clone(),
            intrinsics: ds.intrinsics,
            observations,
            coplanar: Vec::new(),
            pinned: 0,
            scale_target: 0.0,
            initial_focal: [ds.intrinsics.fx, ds.intrinsics.fy],
        };
        p.scale_target = p.mean_line_distance();
        p
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let p = ground_truth_problem(0.0);
        let cfg = BaConfig::default();
        assert!(p.cost(&cfg).unwrap().total < 1e-16);
        let res = optimize(&p, &cfg, 3).unwrap();
        for (a, b) in res.problem.lines.iter().zip(&p.lines) {
            assert!((a.lambda() - b.lambda()).norm() < 1e-10);
        }
        for c in 0..p.frame_ids.len() {
            assert!((res.problem.translation(c) - p.translation(c)).norm() < 1e-10);
            assert!((res.problem.rotations[c].matrix() - p.rotations[c].matrix()).norm() < 1e-10);
        }
        assert!((res.problem.intrinsics.fx - p.intrinsics.fx).abs() < 1e-10);
    }

    #[test]
    fn noisy_endpoints_do_not_increase_error() {
        let mut p = ground_truth_problem(0.5);
        // perturb the structure so there is something to fix
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in p.lines.iter_mut() {
            let d = Vector3::new(
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
            );
            let a = l.direction();
            let lam = l.lambda() + d;
            l.lambda = (lam - a * a.dot(&lam)).into();
        }
        let cfg = BaConfig::default();
        let res = optimize(&p, &cfg, 3).unwrap();
        assert!(res.final_reprojection.mean <= res.initial_reprojection.mean);
        assert!(res.final_reprojection.mean > 0.0);
        let mut last = f64::INFINITY;
        for e in res.log.iter().filter(|e| e.accepted) {
            assert!(e.candidate_cost <= e.cost && e.cost <= last);
            last = e.candidate_cost;
        }
        for w in res.phases.windows(2) {
            assert!(w[1].initial_cost <= w[0].final_cost);
        }
        for l in &res.problem.lines {
            assert!(residual_colinearity(l).abs() < 1e-9);
        }
    }
}

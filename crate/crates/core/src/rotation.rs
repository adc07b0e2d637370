//! Manhattan segment classification and camera rotation refinement.
//!
//! The objective is
//!
//! ```text
//! Σ_i Σ_s (m_sᵀ R_i v_s)² + λ Σ_(i,j) ‖R_iᵀ R_j − R_i⁰ᵀ R_j⁰‖²_F
//! ```
//!
//! where `m_s` is the camera-frame interpretation-plane normal of segment `s`
//! and `v_s` the vanishing direction of its label. Rotations are updated on
//! the left, `R ← exp(δ) R`; frame 0 is held at its initial value.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::{FrameConfig, RotationConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    camera_plane_normal, skew, unit_angle, Axis, FrameRotations, Intrinsics, LineSegment2D, ManhattanFrame, Rotation,
    UnitVec3,
};
use crate::manhattan::{classify_normal, estimate_frame};

/// Per-segment Manhattan labels, index-aligned with the segment list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManhattanAssignment {
    pub labels: Vec<Option<Axis>>,
}

impl ManhattanAssignment {
    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Copies the labels into the segments' `label` fields.
    pub fn apply(&self, segments: &[LineSegment2D]) -> Vec<LineSegment2D> {
        segments
            .iter()
            .zip(&self.labels)
            .map(|(s, l)| LineSegment2D { label: *l, ..s.clone() })
            .collect()
    }
}

/// Unordered frame pairs `(i, j)`, `i < j`, as indices into a [`FrameRotations`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLogEntry {
    pub outer: usize,
    pub iteration: usize,
    pub cost: f64,
    pub data_cost: f64,
    pub smoothness_cost: f64,
    pub damping: f64,
    pub accepted: bool,
}

pub fn write_cost_log(path: &Path, log: &[CostLogEntry]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "outer,iteration,cost,data_cost,smoothness_cost,damping,accepted").map_err(io)?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.outer, e.iteration, e.cost, e.data_cost, e.smoothness_cost, e.damping, e.accepted
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Labels every segment with the 85° rule under the given rotations.
pub fn classify_segments(
    segments: &[LineSegment2D],
    k: &Intrinsics,
    rotations: &FrameRotations,
    frame: &ManhattanFrame,
    cfg: &RotationConfig,
) -> Result<ManhattanAssignment> {
    let mut labels = Vec::with_capacity(segments.len());
    for s in segments {
        let r = rotations.require(s.frame_id)?;
        let label = crate::geometry::interpretation_plane(s, k, r)
            .ok()
            .and_then(|n| classify_normal(n.as_vector(), frame, cfg.manhattan_angle_deg));
        labels.push(label);
    }
    Ok(ManhattanAssignment { labels })
}

/// Angle between the optical axes of two cameras, in radians.
pub fn optical_axis_angle(a: &Rotation, b: &Rotation) -> f64 {
    unit_angle(&a.optical_axis(), &b.optical_axis())
}

/// Pairs whose optical axes differ by less than `angle_deg`. Angles within
/// 1e-12 rad of the threshold count as equal to it and are excluded.
pub fn close_pairs(rotations: &FrameRotations, angle_deg: f64) -> Vec<(usize, usize)> {
    let limit = angle_deg.to_radians() - 1e-12;
    let axes: Vec<Vector3<f64>> = rotations.rotations.iter().map(|r| r.optical_axis()).collect();
    let mut pairs = Vec::new();
    for i in 0..axes.len() {
        for j in (i + 1)..axes.len() {
            if unit_angle(&axes[i], &axes[j]) < limit {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

pub fn build_neighbor_graph(rotations: &FrameRotations, cfg: &RotationConfig) -> NeighborGraph {
    NeighborGraph {
        pairs: close_pairs(rotations, cfg.neighbor_angle_deg),
    }
}

/// A labeled segment's data term inputs.
#[derive(Debug, Clone, Copy)]
struct Observation {
    frame: usize,
    /// Unit interpretation-plane normal in camera coordinates.
    m: Vector3<f64>,
    axis: usize,
}

fn observations(
    segments: &[LineSegment2D],
    assignment: &ManhattanAssignment,
    k: &Intrinsics,
    rotations: &FrameRotations,
) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    for (s, l) in segments.iter().zip(&assignment.labels) {
        let Some(axis) = l else { continue };
        let frame = rotations
            .index_of(s.frame_id)
            .ok_or_else(|| Error::InvalidInput(format!("no rotation for frame {}", s.frame_id)))?;
        let Some(m) = camera_plane_normal(s, k) else {
            continue;
        };
        out.push(Observation {
            frame,
            m,
            axis: axis.index(),
        });
    }
    Ok(out)
}

/// The rotation-refinement objective and its Gauss-Newton linearization.
pub struct RotationProblem {
    obs: Vec<Observation>,
    pairs: Vec<(usize, usize)>,
    targets: Vec<Matrix3<f64>>,
    lambda: f64,
    n_frames: usize,
    joint_frame: bool,
}

/// Current values of the refined variables.
#[derive(Debug, Clone)]
pub struct RotationState {
    pub rotations: Vec<Matrix3<f64>>,
    /// Columns are the vanishing directions.
    pub frame: Matrix3<f64>,
}

impl RotationProblem {
    pub fn new(
        segments: &[LineSegment2D],
        assignment: &ManhattanAssignment,
        graph: &NeighborGraph,
        initial: &FrameRotations,
        k: &Intrinsics,
        cfg: &RotationConfig,
    ) -> Result<Self> {
        let obs = observations(segments, assignment, k, initial)?;
        if obs.is_empty() {
            return Err(Error::NoData("no labeled Manhattan segments".into()));
        }
        let r0 = &initial.rotations;
        let targets = graph
            .pairs
            .iter()
            .map(|&(i, j)| r0[i].matrix().transpose() * r0[j].matrix())
            .collect();
        Ok(RotationProblem {
            obs,
            pairs: graph.pairs.clone(),
            targets,
            lambda: cfg.smoothness_weight,
            n_frames: initial.len(),
            joint_frame: cfg.joint_frame,
        })
    }

    /// Free parameters: three per frame except frame 0, plus three for the
    /// frame when it is optimized.
    pub fn n_params(&self) -> usize {
        3 * (self.n_frames - 1) + if self.joint_frame { 3 } else { 0 }
    }

    fn frame_offset(&self) -> usize {
        3 * (self.n_frames - 1)
    }

    /// `(data, smoothness)` parts of the cost.
    pub fn cost(&self, st: &RotationState) -> (f64, f64) {
        let data = self
            .obs
            .iter()
            .map(|o| o.m.dot(&(st.rotations[o.frame] * st.frame.column(o.axis))).powi(2))
            .sum();
        let smooth = self
            .pairs
            .iter()
            .zip(&self.targets)
            .map(|(&(i, j), t)| (st.rotations[i].transpose() * st.rotations[j] - t).norm_squared())
            .sum::<f64>()
            * self.lambda;
        (data, smooth)
    }

    /// Stacked residual vector (data residuals, then 9 per neighbor pair).
    pub fn residuals(&self, st: &RotationState) -> DVector<f64> {
        let sl = self.lambda.sqrt();
        let mut r = DVector::zeros(self.obs.len() + 9 * self.pairs.len());
        for (n, o) in self.obs.iter().enumerate() {
            r[n] = o.m.dot(&(st.rotations[o.frame] * st.frame.column(o.axis)));
        }
        let base = self.obs.len();
        for (p, (&(i, j), t)) in self.pairs.iter().zip(&self.targets).enumerate() {
            let e = (st.rotations[i].transpose() * st.rotations[j] - t) * sl;
            for (q, v) in e.iter().enumerate() {
                r[base + 9 * p + q] = *v;
            }
        }
        r
    }

    /// Dense Jacobian of [`Self::residuals`] with respect to the increments.
    pub fn jacobian(&self, st: &RotationState) -> DMatrix<f64> {
        let sl = self.lambda.sqrt();
        let mut jac = DMatrix::zeros(self.obs.len() + 9 * self.pairs.len(), self.n_params());
        for (n, o) in self.obs.iter().enumerate() {
            let v = st.frame.column(o.axis).into_owned();
            let r = &st.rotations[o.frame];
            if o.frame > 0 {
                let d = (r * v).cross(&o.m);
                jac.view_mut((n, 3 * (o.frame - 1)), (1, 3)).copy_from(&d.transpose());
            }
            if self.joint_frame {
                let d = v.cross(&(r.transpose() * o.m));
                jac.view_mut((n, self.frame_offset()), (1, 3)).copy_from(&d.transpose());
            }
        }
        let base = self.obs.len();
        for (p, &(i, j)) in self.pairs.iter().enumerate() {
            let (ri, rj) = (&st.rotations[i], &st.rotations[j]);
            for axis in 0..3 {
                let d = ri.transpose() * skew(&Vector3::ith(axis, 1.0)) * rj * sl;
                for (q, v) in d.iter().enumerate() {
                    if j > 0 {
                        jac[(base + 9 * p + q, 3 * (j - 1) + axis)] += v;
                    }
                    if i > 0 {
                        jac[(base + 9 * p + q, 3 * (i - 1) + axis)] -= v;
                    }
                }
            }
        }
        jac
    }

    /// Normal equations `(JᵀJ, Jᵀr)` assembled without forming `J`.
    fn normal_equations(&self, st: &RotationState) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_params();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let fo = self.frame_offset();
        for o in &self.obs {
            let v = st.frame.column(o.axis).into_owned();
            let r = &st.rotations[o.frame];
            let res = o.m.dot(&(r * v));
            let mut blocks: Vec<(usize, Vector3<f64>)> = Vec::with_capacity(2);
            if o.frame > 0 {
                blocks.push((3 * (o.frame - 1), (r * v).cross(&o.m)));
            }
            if self.joint_frame {
                blocks.push((fo, v.cross(&(r.transpose() * o.m))));
            }
            for (a, ja) in &blocks {
                for (b, jb) in &blocks {
                    let mut view = h.view_mut((*a, *b), (3, 3));
                    view += ja * jb.transpose();
                }
                let mut gv = g.rows_mut(*a, 3);
                gv += ja * res;
            }
        }
        let sl = self.lambda.sqrt();
        for (&(i, j), t) in self.pairs.iter().zip(&self.targets) {
            let (ri, rj) = (&st.rotations[i], &st.rotations[j]);
            let e = (ri.transpose() * rj - t) * sl;
            // columns: d residual / d δ_j (the δ_i columns are their negation)
            let mut dj = nalgebra::SMatrix::<f64, 9, 3>::zeros();
            for axis in 0..3 {
                let d = ri.transpose() * skew(&Vector3::ith(axis, 1.0)) * rj * sl;
                for (q, v) in d.iter().enumerate() {
                    dj[(q, axis)] = *v;
                }
            }
            let ev = nalgebra::SVector::<f64, 9>::from_iterator(e.iter().cloned());
            let jtj = dj.transpose() * dj;
            let jte = dj.transpose() * ev;
            let idx = |f: usize| (f > 0).then(|| 3 * (f - 1));
            let (ii, jj) = (idx(i), idx(j));
            if let Some(a) = jj {
                let mut v = h.view_mut((a, a), (3, 3));
                v += jtj;
                let mut gv = g.rows_mut(a, 3);
                gv += jte;
            }
            if let Some(a) = ii {
                let mut v = h.view_mut((a, a), (3, 3));
                v += jtj;
                let mut gv = g.rows_mut(a, 3);
                gv -= jte;
            }
            if let (Some(a), Some(b)) = (ii, jj) {
                let mut v = h.view_mut((a, b), (3, 3));
                v -= jtj;
                let mut v = h.view_mut((b, a), (3, 3));
                v -= jtj;
            }
        }
        (h, g)
    }

    /// Applies an increment vector, re-orthonormalizing every rotation.
    pub fn apply(&self, st: &RotationState, delta: &DVector<f64>) -> Result<RotationState> {
        let mut out = st.clone();
        for f in 1..self.n_frames {
            let d = Vector3::new(delta[3 * (f - 1)], delta[3 * (f - 1) + 1], delta[3 * (f - 1) + 2]);
            out.rotations[f] = *Rotation::nearest(&(Rotation::exp(&d).matrix() * st.rotations[f]))?.matrix();
        }
        if self.joint_frame {
            let fo = self.frame_offset();
            let d = Vector3::new(delta[fo], delta[fo + 1], delta[fo + 2]);
            out.frame = *Rotation::nearest(&(Rotation::exp(&d).matrix() * st.frame))?.matrix();
        }
        Ok(out)
    }
}

fn damped_solve(h: &DMatrix<f64>, g: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
    let n = h.nrows();
    let max_diag = (0..n).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-300);
    let mut a = h.clone();
    for i in 0..n {
        a[(i, i)] += mu * h[(i, i)].max(1e-12 * max_diag);
    }
    a.cholesky().map(|c| -c.solve(g))
}

/// Result of one call to [`refine_rotations`].
#[derive(Debug, Clone)]
pub struct RefineResult {
    pub rotations: FrameRotations,
    pub frame: ManhattanFrame,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

/// Damped Gauss-Newton on the refinement objective starting at `initial`.
/// The smoothness targets are the relative rotations of `anchor`.
#[allow(clippy::too_many_arguments)]
pub fn refine_rotations(
    segments: &[LineSegment2D],
    assignment: &ManhattanAssignment,
    graph: &NeighborGraph,
    anchor: &FrameRotations,
    initial: &FrameRotations,
    k: &Intrinsics,
    frame: &ManhattanFrame,
    cfg: &RotationConfig,
    outer: usize,
    log: &mut Vec<CostLogEntry>,
) -> Result<RefineResult> {
    if anchor.ids != initial.ids {
        return Err(Error::InvalidInput(
            "anchor and initial rotations cover different frames".into(),
        ));
    }
    if !(cfg.smoothness_weight >= 0.0) {
        return Err(Error::Config("smoothness weight must be non-negative".into()));
    }
    let problem = RotationProblem::new(segments, assignment, graph, anchor, k, cfg)?;
    let mut st = RotationState {
        rotations: initial.rotations.iter().map(|r| *r.matrix()).collect(),
        frame: frame.as_matrix(),
    };
    let (d0, s0) = problem.cost(&st);
    let initial_cost = d0 + s0;
    let mut cost = initial_cost;
    log.push(CostLogEntry {
        outer,
        iteration: 0,
        cost,
        data_cost: d0,
        smoothness_cost: s0,
        damping: 0.0,
        accepted: true,
    });
    let mut mu = 1e-4;
    let mut iterations = 0;
    while iterations < cfg.max_inner_iterations && cost > 0.0 && problem.n_params() > 0 {
        iterations += 1;
        let (h, g) = problem.normal_equations(&st);
        let mut accepted = false;
        let mut decrease = 0.0;
        while mu < 1e16 {
            if let Some(step) = damped_solve(&h, &g, mu) {
                let trial = problem.apply(&st, &step)?;
                let (d1, s1) = problem.cost(&trial);
                let c1 = d1 + s1;
                let ok = c1.is_finite() && c1 < cost;
                log.push(CostLogEntry {
                    outer,
                    iteration: iterations,
                    cost: c1,
                    data_cost: d1,
                    smoothness_cost: s1,
                    damping: mu,
                    accepted: ok,
                });
                if ok {
                    decrease = cost - c1;
                    cost = c1;
                    st = trial;
                    mu = (mu / 10.0).max(1e-12);
                    accepted = true;
                    break;
                }
            }
            mu *= 10.0;
        }
        if !accepted || decrease < cfg.relative_tolerance * (cost + decrease) {
            break;
        }
    }
    let rotations = st.rotations.iter().map(Rotation::nearest).collect::<Result<Vec<_>>>()?;
    Ok(RefineResult {
        rotations: FrameRotations::new(initial.ids.clone(), rotations)?,
        frame: ManhattanFrame::from_columns(Rotation::nearest(&st.frame)?.matrix())?,
        iterations,
        initial_cost,
        final_cost: cost,
    })
}

/// Output of the classify / refine alternation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub rotations: FrameRotations,
    pub frame: ManhattanFrame,
    pub assignment: ManhattanAssignment,
    pub outer_iterations: usize,
    /// Labeled segment count at the start of each outer iteration, then the final count.
    pub label_counts: Vec<usize>,
    pub converged: bool,
    pub cost_log: Vec<CostLogEntry>,
}

/// Alternates classification and refinement until the labels stop changing.
#[allow(clippy::too_many_arguments)]
pub fn refine_loop(
    segments: &[LineSegment2D],
    k: &Intrinsics,
    initial: &FrameRotations,
    frame: &ManhattanFrame,
    gravity: &UnitVec3,
    frame_cfg: &FrameConfig,
    cfg: &RotationConfig,
) -> Result<RefineOutcome> {
    let graph = build_neighbor_graph(initial, cfg);
    let mut rotations = initial.clone();
    let mut frame = *frame;
    let mut assignment = classify_segments(segments, k, &rotations, &frame, cfg)?;
    let mut label_counts = vec![assignment.labeled_count()];
    let mut cost_log = Vec::new();
    let mut converged = false;
    let mut outer = 0;
    while outer < cfg.max_outer_iterations {
        outer += 1;
        let res = refine_rotations(
            segments,
            &assignment,
            &graph,
            initial,
            &rotations,
            k,
            &frame,
            cfg,
            outer,
            &mut cost_log,
        )?;
        rotations = res.rotations;
        frame = if cfg.joint_frame {
            res.frame
        } else {
            estimate_frame(segments, k, &rotations, gravity, frame_cfg, cfg)?.0
        };
        let next = classify_segments(segments, k, &rotations, &frame, cfg)?;
        label_counts.push(next.labeled_count());
        let stable = next == assignment;
        assignment = next;
        if stable {
            converged = true;
            break;
        }
    }
    Ok(RefineOutcome {
        rotations,
        frame,
        assignment,
        outer_iterations: outer,
        label_counts,
        converged,
        cost_log,
    })
}

/// Mean geodesic distance between matching rotations, in radians.
pub fn mean_rotation_error(a: &[Rotation], b: &[Rotation]) -> f64 {
    let n = a.len().min(b.len()).max(1);
    a.iter()
        .zip(b)
        .map(|(x, y)| crate::geometry::geodesic_angle(x, y))
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::geodesic_angle;
    use crate::synth::{generate_scene, GroundTruth, RoomConfig, SceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> RotationState {
        let mut rv = || {
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            )
        };
        RotationState {
            rotations: (0..n).map(|_| *Rotation::exp(&rv()).matrix()).collect(),
            frame: *Rotation::exp(&rv()).matrix(),
        }
    }

    fn small_problem(rng: &mut ChaCha8Rng, joint: bool) -> RotationProblem {
        let n = 4;
        let mut obs = Vec::new();
        for f in 0..n {
            for axis in 0..3 {
                let m = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                obs.push(Observation { frame: f, m, axis });
            }
        }
        let targets = (0..3)
            .map(|_| *Rotation::exp(&Vector3::new(rng.random_range(-1.0..1.0), 0.3, 0.1)).matrix())
            .collect();
        RotationProblem {
            obs,
            pairs: vec![(0, 1), (1, 2), (0, 3)],
            targets,
            lambda: 0.7,
            n_frames: n,
            joint_frame: joint,
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let p = small_problem(&mut rng, trial % 2 == 0);
            let st = random_state(&mut rng, 4);
            let jac = p.jacobian(&st);
            let h = 1e-6;
            for c in 0..p.n_params() {
                let mut e = DVector::zeros(p.n_params());
                e[c] = h;
                let rp = p.residuals(&p.apply(&st, &e).unwrap());
                e[c] = -h;
                let rm = p.residuals(&p.apply(&st, &e).unwrap());
                let fd = (rp - rm) / (2.0 * h);
                let an = jac.column(c);
                let err = (&fd - an).norm() / an.norm().max(1e-8);
                assert!(err < 1e-5, "trial {trial} column {c}: relative error {err}");
            }
        }
    }

    #[test]
    fn normal_equations_match_dense_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for joint in [false, true] {
            let p = small_problem(&mut rng, joint);
            let st = random_state(&mut rng, 4);
            let j = p.jacobian(&st);
            let r = p.residuals(&st);
            let (h, g) = p.normal_equations(&st);
            assert!((h - j.transpose() * &j).norm() < 1e-10);
            assert!((g - j.transpose() * r).norm() < 1e-10);
        }
    }

    #[test]
    fn neighbor_graph_matches_brute_force() {
        let rots: Vec<Rotation> = (0..120)
            .map(|i| Rotation::exp(&Vector3::new(0.0, (i as f64 * 3.0).to_radians(), 0.0)))
            .collect();
        let fr = FrameRotations::sequential(rots.clone());
        let g = build_neighbor_graph(&fr, &RotationConfig::default());
        let mut brute = Vec::new();
        for i in 0..120 {
            for j in (i + 1)..120 {
                let zi = rots[i].matrix().row(2).transpose();
                let zj = rots[j].matrix().row(2).transpose();
                if zi.dot(&zj).clamp(-1.0, 1.0).acos() < 10f64.to_radians() {
                    brute.push((i, j));
                }
            }
        }
        assert_eq!(g.pairs, brute);
        // identical rotations give a complete graph; 15° apart gives none
        let same = FrameRotations::sequential(vec![Rotation::identity(); 4]);
        assert_eq!(build_neighbor_graph(&same, &RotationConfig::default()).pairs.len(), 6);
        let apart = FrameRotations::sequential(vec![
            Rotation::identity(),
            Rotation::exp(&Vector3::new(0.0, 0.0, 15f64.to_radians())),
        ]);
        // rotation about the optical axis keeps z; rotate about gravity (camera y) instead
        assert_eq!(build_neighbor_graph(&apart, &RotationConfig::default()).pairs.len(), 1);
        let apart = FrameRotations::sequential(vec![
            Rotation::identity(),
            Rotation::exp(&Vector3::new(0.0, 15f64.to_radians(), 0.0)),
        ]);
        assert!(build_neighbor_graph(&apart, &RotationConfig::default())
            .pairs
            .is_empty());
    }

    fn drift_scene(walk: f64, lines: usize) -> (crate::io::dataset::Dataset, GroundTruth) {
        generate_scene(&SceneConfig {
            rooms: vec![RoomConfig {
                n_frames: 60,
                n_wall_lines: lines,
                ..RoomConfig::default()
            }],
            rotation_walk_std_deg: walk,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn exact_rotations_are_a_fixed_point() {
        let (ds, gt) = drift_scene(0.0, 40);
        let fr = ds.frame_rotations();
        let out = refine_loop(
            &ds.segments,
            &ds.intrinsics,
            &fr,
            &gt.frame,
            &ds.gravity,
            &FrameConfig::default(),
            &RotationConfig::default(),
        )
        .unwrap();
        assert_eq!(out.outer_iterations, 1);
        for (a, b) in out.rotations.rotations.iter().zip(&gt.rotations) {
            assert!(geodesic_angle(a, b) < 1e-10);
        }
    }

    #[test]
    fn noise_free_labels_match_generator() {
        let (ds, gt) = drift_scene(0.0, 40);
        let a = classify_segments(
            &ds.segments,
            &ds.intrinsics,
            &ds.frame_rotations(),
            &gt.frame,
            &RotationConfig::default(),
        )
        .unwrap();
        let mut agree = 0;
        for (l, &line) in a.labels.iter().zip(&gt.segment_lines) {
            if let Some(l) = l {
                assert_eq!(*l, gt.lines[line].label);
                agree += 1;
            }
        }
        // only segments whose plane is nearly orthogonal to a second axis stay unlabeled
        assert!(
            agree as f64 > 0.8 * ds.segments.len() as f64,
            "{agree} of {}",
            ds.segments.len()
        );
    }

    #[test]
    fn huge_smoothness_preserves_relative_rotations() {
        let (ds, gt) = drift_scene(0.2, 60);
        let fr = ds.frame_rotations();
        let cfg = RotationConfig {
            smoothness_weight: 1e9,
            ..RotationConfig::default()
        };
        let graph = build_neighbor_graph(&fr, &cfg);
        let a = classify_segments(&ds.segments, &ds.intrinsics, &fr, &gt.frame, &cfg).unwrap();
        let mut log = Vec::new();
        let res = refine_rotations(
            &ds.segments,
            &a,
            &graph,
            &fr,
            &fr,
            &ds.intrinsics,
            &gt.frame,
            &cfg,
            1,
            &mut log,
        )
        .unwrap();
        for &(i, j) in &graph.pairs {
            let before = fr.rotations[i].matrix().transpose() * fr.rotations[j].matrix();
            let after = res.rotations.rotations[i].matrix().transpose() * res.rotations.rotations[j].matrix();
            assert!((before - after).abs().max() < 1e-6);
        }
    }

    #[test]
    fn drift_is_reduced_and_cost_never_increases() {
        let (ds, gt) = drift_scene(0.2, 150);
        let fr = ds.frame_rotations();
        let before = mean_rotation_error(&fr.rotations, &gt.rotations);
        let (frame, _) = estimate_frame(
            &ds.segments,
            &ds.intrinsics,
            &fr,
            &ds.gravity,
            &FrameConfig::default(),
            &RotationConfig::default(),
        )
        .unwrap();
        let out = refine_loop(
            &ds.segments,
            &ds.intrinsics,
            &fr,
            &frame,
            &ds.gravity,
            &FrameConfig::default(),
            &RotationConfig::default(),
        )
        .unwrap();
        let after = mean_rotation_error(&out.rotations.rotations, &gt.rotations);
        eprintln!("drift before {before} after {after} outer {}", out.outer_iterations);
        assert!(after * 3.0 <= before, "before {before} after {after}");
        assert!(out.outer_iterations <= 10);
        for w in out.cost_log.windows(2) {
            if w[1].accepted && w[1].iteration > 0 && w[0].outer == w[1].outer {
                let prev = out
                    .cost_log
                    .iter()
                    .rfind(|e| e.outer == w[1].outer && e.accepted && e.iteration < w[1].iteration)
                    .unwrap();
                assert!(w[1].cost <= prev.cost);
            }
        }
    }

    #[test]
    fn no_labels_is_a_no_data_error() {
        let (ds, _) = drift_scene(0.0, 10);
        let fr = ds.frame_rotations();
        let a = ManhattanAssignment {
            labels: vec![None; ds.segments.len()],
        };
        let g = build_neighbor_graph(&fr, &RotationConfig::default());
        let r = refine_rotations(
            &ds.segments,
            &a,
            &g,
            &fr,
            &fr,
            &ds.intrinsics,
            &ManhattanFrame::canonical(),
            &RotationConfig::default(),
            1,
            &mut Vec::new(),
        );
        assert!(matches!(r, Err(Error::NoData(_))));
    }
}

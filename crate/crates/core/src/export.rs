//! Line model export as ASCII PLY and JSON.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::ba::{self, BaProblem};
use crate::error::{Error, Result};
use crate::geometry::{Axis, Intrinsics};
use crate::io::state::PipelineState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCamera {
    pub frame_id: u32,
    /// Global-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub center: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLine {
    pub track: usize,
    pub label: Axis,
    pub lambda: [f64; 3],
    pub direction: [f64; 3],
    /// Range of the line parameter covered by the observations.
    pub extent: [f64; 2],
    pub endpoints: [[f64; 3]; 2],
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineModel {
    /// `"ba"` or `"linear"`.
    pub source: String,
    pub intrinsics: Intrinsics,
    pub cameras: Vec<ModelCamera>,
    pub lines: Vec<ModelLine>,
}

/// Parameter along the line of the point closest to the ray `c + u d`.
fn ray_line_parameter(lambda: &Vector3<f64>, a: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let d = d.normalize();
    let w = lambda - c;
    let b = a.dot(&d);
    let denom = 1.0 - b * b;
    if denom < 1e-12 {
        return None;
    }
    Some((b * d.dot(&w) - a.dot(&w)) / denom)
}

/// Builds the model from a solved problem. Each line is clipped to the
/// span of its observation endpoints projected onto it; lines with no
/// usable observation are dropped.
pub fn build_model(p: &BaProblem, source: &str) -> LineModel {
    let k = &p.intrinsics;
    let kinv = k.inverse_matrix();
    let mut spans: Vec<Option<[f64; 2]>> = vec![None; p.lines.len()];
    let mut counts = vec![0usize; p.lines.len()];
    for o in &p.observations {
        let line = &p.lines[o.line];
        let (lambda, a) = (line.lambda(), line.direction());
        let c = p.translation(o.camera);
        let rt = p.rotations[o.camera].matrix().transpose();
        counts[o.line] += 1;
        for x in [Point2::new(o.p[0], o.p[1]), Point2::new(o.q[0], o.q[1])] {
            let d = rt * kinv * Vector3::new(x.x, x.y, 1.0);
            if let Some(s) = ray_line_parameter(&lambda, &a, &c, &d) {
                let span = spans[o.line].get_or_insert([s, s]);
                span[0] = span[0].min(s);
                span[1] = span[1].max(s);
            }
        }
    }
    let lines = p
        .lines
        .iter()
        .zip(spans)
        .zip(counts)
        .filter_map(|((l, span), observations)| {
            let [s0, s1] = span?;
            let (lambda, a) = (l.lambda(), l.direction());
            Some(ModelLine {
                track: l.track,
                label: l.label,
                lambda: l.lambda,
                direction: l.direction,
                extent: [s0, s1],
                endpoints: [(lambda + s0 * a).into(), (lambda + s1 * a).into()],
                observations,
            })
        })
        .collect();
    let cameras = p
        .frame_ids
        .iter()
        .enumerate()
        .map(|(c, f)| ModelCamera {
            frame_id: *f,
            rotation: p.rotations[c].to_row_major(),
            center: p.translations[c],
        })
        .collect();
    LineModel {
        source: source.to_string(),
        intrinsics: p.intrinsics,
        cameras,
        lines,
    }
}

/// Model of the most refined stage available.
pub fn model_from_state(state: &PipelineState) -> Result<LineModel> {
    if let Some(b) = &state.ba {
        return Ok(build_model(&b.problem, "ba"));
    }
    let Some(linear) = &state.linear else {
        return Err(Error::Export("nothing has been solved yet".into()));
    };
    let segs = state.labeled_segments()?;
    let (rotations, frame) = state.refined_geometry()?;
    let tracks = &state.tracking.as_ref().expect("solved implies tracked").tracks;
    let relations = &state.coplanarity.as_ref().expect("solved implies detected").relations;
    let problem = ba::init_from_linear(
        linear,
        &segs,
        tracks,
        relations,
        rotations,
        &state.dataset.intrinsics,
        frame,
    )
    .map_err(|e| Error::Export(e.to_string()))?;
    Ok(build_model(&problem, "linear"))
}

/// ASCII PLY: two white vertices per line joined by an edge, then one green
/// vertex per camera center.
pub fn to_ply(model: &LineModel) -> String {
    let nv = 2 * model.lines.len() + model.cameras.len();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment line model\n");
    let _ = writeln!(s, "element vertex {nv}");
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    let _ = writeln!(s, "element edge {}", model.lines.len());
    s.push_str("property int vertex1\nproperty int vertex2\nend_header\n");
    let mut vertex = |p: &[f64; 3], rgb: [u8; 3]| {
        let _ = writeln!(
            s,
            "{:.9} {:.9} {:.9} {} {} {}",
            p[0], p[1], p[2], rgb[0], rgb[1], rgb[2]
        );
    };
    for l in &model.lines {
        vertex(&l.endpoints[0], [255, 255, 255]);
        vertex(&l.endpoints[1], [255, 255, 255]);
    }
    for c in &model.cameras {
        vertex(&c.center, [0, 255, 0]);
    }
    for i in 0..model.lines.len() {
        let _ = writeln!(s, "{} {}", 2 * i, 2 * i + 1);
    }
    s
}

pub fn write_ply(path: &Path, model: &LineModel) -> Result<()> {
    std::fs::write(path, to_ply(model)).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, model: &LineModel) -> Result<()> {
    let text = serde_json::to_string_pretty(model).map_err(|e| Error::Export(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ba::{BaObservation, Line3D};
    use crate::geometry::Rotation;

    /// One X line at y = 0, z = 4 seen by two cameras on the x axis.
    fn tiny_problem() -> BaProblem {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let line = Line3D::through(0, Axis::X, &Vector3::new(0.0, 0.0, 4.0), &Vector3::x());
        // both cameras see the metre either side of their own x
        let obs = |camera: usize| BaObservation {
            line: 0,
            camera,
            frame_id: camera as u32,
            segment: camera,
            p: [320.0 - 125.0, 240.0],
            q: [320.0 + 125.0, 240.0],
        };
        BaProblem {
            lines: vec![line],
            frame_ids: vec![0, 1],
            rotations: vec![Rotation::identity(), Rotation::identity()],
            translations: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            intrinsics: k,
            observations: vec![obs(0), obs(1)],
            coplanar: Vec::new(),
            pinned: 0,
            scale_target: 4.0,
            initial_focal: [500.0, 500.0],
        }
    }

    #[test]
    fn extent_covers_all_observations() {
        let m = build_model(&tiny_problem(), "ba");
        assert_eq!(m.lines.len(), 1);
        let [s0, s1] = m.lines[0].extent;
        // camera 0 sees [−1, 1], camera 1 sees [0, 2]
        assert!((s0 + 1.0).abs() < 1e-12 && (s1 - 2.0).abs() < 1e-12, "{s0} {s1}");
        assert!((Vector3::from(m.lines[0].endpoints[1]) - Vector3::new(2.0, 0.0, 4.0)).norm() < 1e-12);
    }

    #[test]
    fn one_line_two_cameras_counts() {
        let ply = to_ply(&build_model(&tiny_problem(), "ba"));
        assert!(ply.contains("element vertex 4\n"));
        assert!(ply.contains("element edge 1\n"));
        let body: Vec<&str> = ply.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 5);
        assert!(body[2].ends_with(" 0 255 0") && body[3].ends_with(" 0 255 0"));
        assert_eq!(body[4], "0 1");
    }

    #[test]
    fn export_is_repeatable() {
        let m = build_model(&tiny_problem(), "ba");
        assert_eq!(to_ply(&m), to_ply(&build_model(&tiny_problem(), "ba")));
    }

    #[test]
    fn parallel_ray_has_no_parameter() {
        let l = Vector3::new(0.0, 1.0, 0.0);
        assert!(ray_line_parameter(&l, &Vector3::x(), &Vector3::zeros(), &Vector3::x()).is_none());
    }
}

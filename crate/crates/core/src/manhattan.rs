//! Manhattan frame extraction by voting interpretation planes onto a
//! discretized Gaussian sphere.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::{FrameConfig, RotationConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    interpretation_plane, Axis, FrameRotations, Intrinsics, LineSegment2D, ManhattanFrame, Rotation, UnitVec3,
};

/// Number of bins of the level-5 subdivided icosahedron.
pub const SPHERE_BINS: usize = 10242;
const SUBDIVISIONS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SphereGrid {
    pub directions: Vec<Vector3<f64>>,
    pub votes: Vec<f64>,
}

/// Sphere votes normalized by their maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteMap {
    pub directions: Vec<Vector3<f64>>,
    pub values: Vec<f64>,
    /// Largest raw vote before normalization; zero when nothing voted.
    pub max_value: f64,
}

impl VoteMap {
    pub fn is_empty(&self) -> bool {
        self.max_value == 0.0
    }

    /// Writes `x,y,z,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "x,y,z,value").map_err(io)?;
        for (d, v) in self.directions.iter().zip(&self.values) {
            writeln!(w, "{},{},{},{}", d.x, d.y, d.z, v).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Vertices of an icosahedron subdivided five times and projected to the
/// unit sphere (12, 42, 162, 642, 2562, 10242 vertices per level).
pub fn build_sphere_grid() -> SphereGrid {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..SUBDIVISIONS {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push((verts[key.0] + verts[key.1]).normalize());
                verts.len() - 1
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let n = verts.len();
    SphereGrid {
        directions: verts,
        votes: vec![0.0; n],
    }
}

/// Adds each segment's pixel length to every bin within the voting band of
/// its interpretation plane, then normalizes by the maximum.
pub fn vote(
    segments: &[LineSegment2D],
    k: &Intrinsics,
    rotations: &FrameRotations,
    cfg: &FrameConfig,
) -> Result<VoteMap> {
    let mut grid = build_sphere_grid();
    let band = cfg.vote_angle_rad.sin();
    for s in segments {
        let r = rotations.require(s.frame_id)?;
        let Ok(n) = interpretation_plane(s, k, r) else {
            continue;
        };
        let n = n.as_vector();
        for (d, v) in grid.directions.iter().zip(grid.votes.iter_mut()) {
            if n.dot(d).abs() < band {
                *v += s.length;
            }
        }
    }
    let max_value = grid.votes.iter().cloned().fold(0.0, f64::max);
    if max_value == 0.0 {
        log::warn!("vote map is empty");
    }
    let values = if max_value > 0.0 {
        grid.votes.iter().map(|v| v / max_value).collect()
    } else {
        grid.votes
    };
    Ok(VoteMap {
        directions: grid.directions,
        values,
        max_value,
    })
}

/// Highest-valued bin among those accepted by `keep`, ties to the lowest index.
fn peak(map: &VoteMap, keep: impl Fn(&Vector3<f64>) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, d) in map.directions.iter().enumerate() {
        if keep(d) && best.is_none_or(|b| map.values[i] > map.values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Reads the vertical axis as the strongest peak near gravity and the first
/// horizontal axis as the strongest peak on the great circle orthogonal to it.
pub fn extract_frame(map: &VoteMap, gravity: &UnitVec3, cfg: &FrameConfig) -> Result<ManhattanFrame> {
    let g = gravity.as_vector();
    let cone = cfg.gravity_cone_deg.to_radians().cos();
    let iz = peak(map, |d| d.dot(g).abs() >= cone)
        .filter(|&i| map.values[i] > 0.0)
        .ok_or_else(|| Error::ExtractionFailure(format!("no votes within {}° of gravity", cfg.gravity_cone_deg)))?;
    let dz = map.directions[iz];
    let vz = if dz.dot(g) >= 0.0 { dz } else { -dz };
    let band = cfg.orthogonal_band_deg.to_radians().sin();
    let ix = peak(map, |d| d.dot(&vz).abs() <= band)
        .filter(|&i| map.values[i] > 0.0)
        .ok_or_else(|| Error::ExtractionFailure("no votes orthogonal to the vertical peak".into()))?;
    ManhattanFrame::from_z_and_x(&vz, &map.directions[ix])
}

/// Labels a plane normal by the 85° rule: the normal is nearly orthogonal to
/// exactly one axis and clearly not orthogonal to the other two.
pub fn classify_normal(n: &Vector3<f64>, frame: &ManhattanFrame, manhattan_angle_deg: f64) -> Option<Axis> {
    // folded angle θ ∈ [0°, 90°] exceeds the threshold iff |cos θ| is below its cosine
    let c = manhattan_angle_deg.to_radians().cos();
    let far: Vec<bool> = Axis::ALL
        .iter()
        .map(|a| n.dot(frame.axis(*a).as_vector()).abs() < c)
        .collect();
    match far.as_slice() {
        [true, false, false] => Some(Axis::X),
        [false, true, false] => Some(Axis::Y),
        [false, false, true] => Some(Axis::Z),
        _ => None,
    }
}

fn smallest_eigenvector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let eig = SymmetricEigen::new(*m);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // the direction is determined only when the normals span a plane
    if eig.eigenvalues[idx[1]] <= 1e-12 * eig.eigenvalues[idx[2]].max(1e-300) {
        return None;
    }
    Some(eig.eigenvectors.column(idx[0]).into_owned())
}

/// Least-squares polish of grid peaks: each axis becomes the direction most
/// orthogonal to the plane normals of the segments classified to it, and
/// the three axes are projected onto the nearest rotation.
pub fn refine_frame(
    initial: &ManhattanFrame,
    segments: &[LineSegment2D],
    k: &Intrinsics,
    rotations: &FrameRotations,
    rot_cfg: &RotationConfig,
) -> Result<ManhattanFrame> {
    let normals: Vec<(Vector3<f64>, f64)> = segments
        .iter()
        .filter_map(|s| {
            let r = rotations.get(s.frame_id)?;
            interpretation_plane(s, k, r).ok().map(|n| (n.into_inner(), s.length))
        })
        .collect();
    let mut frame = *initial;
    for _ in 0..5 {
        let mut scatter = [Matrix3::zeros(); 3];
        for (n, w) in &normals {
            if let Some(a) = classify_normal(n, &frame, rot_cfg.manhattan_angle_deg) {
                scatter[a.index()] += n * n.transpose() * *w;
            }
        }
        let mut cols = frame.as_matrix();
        for a in Axis::ALL {
            if let Some(v) = smallest_eigenvector(&scatter[a.index()]) {
                let prev = frame.axis(a).as_vector();
                cols.set_column(a.index(), &if v.dot(prev) < 0.0 { -v } else { v });
            }
        }
        let r = Rotation::nearest(&cols)?;
        let next = ManhattanFrame::from_columns(r.matrix())?;
        let moved = Axis::ALL
            .iter()
            .map(|a| next.axis(*a).angle_to(frame.axis(*a)))
            .fold(0.0, f64::max);
        frame = next;
        if moved < 1e-15 {
            break;
        }
    }
    Ok(frame)
}

/// Vote, read peaks and optionally polish them.
pub fn estimate_frame(
    segments: &[LineSegment2D],
    k: &Intrinsics,
    rotations: &FrameRotations,
    gravity: &UnitVec3,
    cfg: &FrameConfig,
    rot_cfg: &RotationConfig,
) -> Result<(ManhattanFrame, VoteMap)> {
    let map = vote(segments, k, rotations, cfg)?;
    let mut frame = extract_frame(&map, gravity, cfg)?;
    if cfg.refine_peaks {
        frame = refine_frame(&frame, segments, k, rotations, rot_cfg)?;
    }
    Ok((frame, map))
}

/// Angle between corresponding axes of two frames, after matching each axis
/// of `a` to the closest axis of `b` up to sign.
pub fn frame_axis_errors(a: &ManhattanFrame, b: &ManhattanFrame) -> [f64; 3] {
    let mut out = [0.0; 3];
    for ax in Axis::ALL {
        let v = a.axis(ax);
        out[ax.index()] = Axis::ALL
            .iter()
            .map(|bx| v.line_angle_to(b.axis(*bx)))
            .fold(f64::INFINITY, f64::min);
    }
    out
}

/// Summary of the frame stage kept in the pipeline state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEstimate {
    pub frame: ManhattanFrame,
    pub vote_max: f64,
}

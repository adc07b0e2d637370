//! Shared geometric types: pinhole intrinsics, rotations, unit directions,
//! 2D line segments and Manhattan frames.
//!
//! Conventions used throughout the crate:
//!
//! * camera frame is x right, y down, z forward (the viewing direction);
//! * a [`Rotation`] maps global coordinates into the camera frame, so a
//!   pixel `x` back-projects to the global ray `Rᵀ K⁻¹ x̃`;
//! * a camera with center `T` images a global point `P` at `K R (P - T)`;
//! * angles are radians internally, degrees only in configuration files.

use std::fmt;

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for orthonormality and determinant checks on rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        Axis::ALL.get(i).copied()
    }

    /// The two axes different from `self`, in ascending order.
    pub fn others(self) -> [Axis; 2] {
        match self {
            Axis::X => [Axis::Y, Axis::Z],
            Axis::Y => [Axis::X, Axis::Z],
            Axis::Z => [Axis::X, Axis::Y],
        }
    }

    /// The axis different from both `self` and `other`; `None` if they coincide.
    pub fn third(self, other: Axis) -> Option<Axis> {
        if self == other {
            return None;
        }
        Axis::from_index(3 - self.index() - other.index())
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "X",
            Axis::Y => "Y",
            Axis::Z => "Z",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "X" | "x" => Ok(Axis::X),
            "Y" | "y" => Ok(Axis::Y),
            "Z" | "z" => Ok(Axis::Z),
            other => Err(Error::Parse(format!("unknown axis `{other}`"))),
        }
    }
}

/// A unit-norm 3D direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct UnitVec3(Vector3<f64>);

impl UnitVec3 {
    pub fn new_normalize(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n < 1e-300 {
            return Err(Error::InvalidInput(format!("cannot normalize vector {v:?}")));
        }
        Ok(UnitVec3(v / n))
    }

    /// Wraps a vector already known to be unit norm.
    pub(crate) fn new_unchecked(v: Vector3<f64>) -> Self {
        UnitVec3(v)
    }

    pub fn x() -> Self {
        UnitVec3(Vector3::x())
    }

    pub fn y() -> Self {
        UnitVec3(Vector3::y())
    }

    pub fn z() -> Self {
        UnitVec3(Vector3::z())
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Vector3<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVec3) -> f64 {
        self.0.dot(&other.0)
    }

    /// Angle between the two directions, in `[0, π]`.
    pub fn angle_to(&self, other: &UnitVec3) -> f64 {
        unit_angle(&self.0, &other.0)
    }

    /// Angle between the two lines spanned by the directions, in `[0, π/2]`.
    pub fn line_angle_to(&self, other: &UnitVec3) -> f64 {
        let a = self.angle_to(other);
        a.min(std::f64::consts::PI - a)
    }
}

impl std::ops::Neg for UnitVec3 {
    type Output = UnitVec3;

    fn neg(self) -> UnitVec3 {
        UnitVec3(-self.0)
    }
}

impl TryFrom<[f64; 3]> for UnitVec3 {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        let v = Vector3::from(v);
        if ((v.norm() - 1.0).abs()) > 1e-9 {
            return Err(Error::InvalidInput(format!("vector {v:?} is not unit norm")));
        }
        Ok(UnitVec3(v))
    }
}

impl From<UnitVec3> for [f64; 3] {
    fn from(v: UnitVec3) -> [f64; 3] {
        [v.0.x, v.0.y, v.0.z]
    }
}

/// Angle between two unit vectors, numerically stable near 0 and π.
pub fn unit_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Pinhole intrinsics without skew or distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!("bad focal lengths in {self:?}")));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidInput(format!(
                "principal point outside image in {self:?}"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `min(width, height)` in pixels; every relative pixel threshold scales with it.
    pub fn min_dim(&self) -> f64 {
        self.width.min(self.height) as f64
    }

    /// Normalized camera coordinates `K⁻¹ [x, y, 1]ᵀ` (not unit length).
    pub fn backproject(&self, pt: &Point2<f64>) -> Vector3<f64> {
        Vector3::new((pt.x - self.cx) / self.fx, (pt.y - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point; `None` when it is not in front of the camera.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Point2<f64>> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some(Point2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn contains(&self, pt: &Point2<f64>) -> bool {
        pt.x >= 0.0 && pt.y >= 0.0 && pt.x <= (self.width - 1) as f64 && pt.y <= (self.height - 1) as f64
    }
}

/// A proper rotation mapping global coordinates into a camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and determinant within [`ROTATION_TOLERANCE`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        Self::from_matrix_tol(m, ROTATION_TOLERANCE)
    }

    pub fn from_matrix_tol(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("rotation has non-finite entries".into()));
        }
        let det = m.determinant();
        if det < 0.0 {
            return Err(Error::InvalidInput("improper rotation (determinant -1)".into()));
        }
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err > tol || (det - 1.0).abs() > tol {
            return Err(Error::InvalidInput(format!(
                "matrix is not orthonormal (|RᵀR - I| = {err:.3e}, det = {det})"
            )));
        }
        Ok(Rotation(m))
    }

    /// Nearest rotation in Frobenius norm (polar decomposition via SVD).
    pub fn nearest(m: &Matrix3<f64>) -> Result<Self> {
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::Numeric("svd failed in rotation projection".into())),
        };
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Ok(Rotation(u * d * v_t))
    }

    pub(crate) fn new_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Rodrigues' formula for a rotation vector `w` (axis times angle).
    pub fn exp(w: &Vector3<f64>) -> Self {
        let theta = w.norm();
        let k = skew(w);
        if theta < 1e-8 {
            // second-order series; the remainder is below machine precision
            return Rotation(Matrix3::identity() + k + k * k * 0.5);
        }
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Rotation(Matrix3::identity() + k * a + k * k * b)
    }

    /// Rotation vector of `self`, inverse of [`Rotation::exp`].
    pub fn log(&self) -> Vector3<f64> {
        let r = &self.0;
        let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        if theta < 1e-8 {
            return w * 0.5;
        }
        if std::f64::consts::PI - theta < 1e-6 {
            // near π the antisymmetric part vanishes; read the axis off R + I
            let m = r + Matrix3::identity();
            let col = (0..3)
                .max_by(|&a, &b| m.column(a).norm().total_cmp(&m.column(b).norm()))
                .unwrap_or(0);
            let axis = m.column(col).normalize();
            let sign = if axis.dot(&w) < 0.0 { -1.0 } else { 1.0 };
            return axis * theta * sign;
        }
        w * (theta / (2.0 * theta.sin()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    /// Camera optical axis expressed in global coordinates (third row of `R`).
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.0.row(2).transpose()
    }

    /// Left-multiplies by `exp(w)` and re-projects onto SO(3).
    pub fn perturbed(&self, w: &Vector3<f64>) -> Rotation {
        let m = Rotation::exp(w).0 * self.0;
        Rotation::nearest(&m).unwrap_or(Rotation(m))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn row_major_matrix(v: &[f64; 9]) -> Matrix3<f64> {
        Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
    }
}

impl TryFrom<[f64; 9]> for Rotation {
    type Error = Error;

    fn try_from(v: [f64; 9]) -> Result<Self> {
        Rotation::from_matrix(Rotation::row_major_matrix(&v))
    }
}

impl From<Rotation> for [f64; 9] {
    fn from(r: Rotation) -> [f64; 9] {
        r.to_row_major()
    }
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Camera rotations keyed by strictly increasing frame ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRotations {
    pub ids: Vec<u32>,
    pub rotations: Vec<Rotation>,
}

impl FrameRotations {
    pub fn new(ids: Vec<u32>, rotations: Vec<Rotation>) -> Result<Self> {
        if ids.len() != rotations.len() {
            return Err(Error::InvalidInput(format!(
                "{} frame ids for {} rotations",
                ids.len(),
                rotations.len()
            )));
        }
        if ids.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("frame ids must be strictly increasing".into()));
        }
        Ok(FrameRotations { ids, rotations })
    }

    /// Frames numbered `0..n`.
    pub fn sequential(rotations: Vec<Rotation>) -> Self {
        FrameRotations {
            ids: (0..rotations.len() as u32).collect(),
            rotations,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, frame_id: u32) -> Option<usize> {
        self.ids.binary_search(&frame_id).ok()
    }

    pub fn get(&self, frame_id: u32) -> Option<&Rotation> {
        self.index_of(frame_id).map(|i| &self.rotations[i])
    }

    /// Rotation of a segment's frame, or an error naming the frame.
    pub fn require(&self, frame_id: u32) -> Result<&Rotation> {
        self.get(frame_id)
            .ok_or_else(|| Error::InvalidInput(format!("no rotation for frame {frame_id}")))
    }
}

/// A 2D line segment observed in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSegment2D {
    pub frame_id: u32,
    pub p: Point2<f64>,
    pub q: Point2<f64>,
    pub length: f64,
    pub label: Option<Axis>,
}

impl LineSegment2D {
    pub fn new(frame_id: u32, p: Point2<f64>, q: Point2<f64>) -> Result<Self> {
        if ![p.x, p.y, q.x, q.y].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite segment endpoint".into()));
        }
        let length = (p - q).norm();
        if length <= 0.0 {
            return Err(Error::DegenerateSegment);
        }
        Ok(LineSegment2D {
            frame_id,
            p,
            q,
            length,
            label: None,
        })
    }

    pub fn midpoint(&self) -> Point2<f64> {
        nalgebra::center(&self.p, &self.q)
    }

    /// Undirected angle of the segment in the image, in `[0, π)`.
    pub fn orientation(&self) -> f64 {
        let d = self.q - self.p;
        d.y.atan2(d.x).rem_euclid(std::f64::consts::PI)
    }
}

/// Difference between two undirected line orientations, in `[0, π/2]`.
pub fn orientation_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::PI);
    d.min(std::f64::consts::PI - d)
}

/// The three orthogonal vanishing directions in global coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManhattanFrame {
    pub vx: UnitVec3,
    pub vy: UnitVec3,
    pub vz: UnitVec3,
}

impl ManhattanFrame {
    pub fn canonical() -> Self {
        ManhattanFrame {
            vx: UnitVec3::x(),
            vy: UnitVec3::y(),
            vz: UnitVec3::z(),
        }
    }

    /// Builds a right-handed frame from `vz` and an approximate `vx`: `vx` is
    /// projected orthogonal to `vz` and `vy = vz × vx`.
    pub fn from_z_and_x(vz: &Vector3<f64>, vx_approx: &Vector3<f64>) -> Result<Self> {
        let vz = UnitVec3::new_normalize(*vz)?;
        let z = vz.as_vector();
        let vx = UnitVec3::new_normalize(vx_approx - z * z.dot(vx_approx))?;
        let vy = UnitVec3::new_normalize(z.cross(vx.as_vector()))?;
        Ok(ManhattanFrame { vx, vy, vz })
    }

    /// Frame whose axes are the columns of `m` (must be a proper rotation).
    pub fn from_columns(m: &Matrix3<f64>) -> Result<Self> {
        let frame = ManhattanFrame {
            vx: UnitVec3::new_normalize(m.column(0).into())?,
            vy: UnitVec3::new_normalize(m.column(1).into())?,
            vz: UnitVec3::new_normalize(m.column(2).into())?,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn as_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[*self.vx.as_vector(), *self.vy.as_vector(), *self.vz.as_vector()])
    }

    pub fn axis(&self, axis: Axis) -> &UnitVec3 {
        match axis {
            Axis::X => &self.vx,
            Axis::Y => &self.vy,
            Axis::Z => &self.vz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (x, y, z) = (self.vx.as_vector(), self.vy.as_vector(), self.vz.as_vector());
        let ortho = x.dot(y).abs().max(y.dot(z).abs()).max(x.dot(z).abs());
        let hand = (z.cross(x) - y).norm();
        if ortho > 1e-9 || hand > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "manhattan frame not right-handed orthonormal (dot {ortho:.2e}, handedness {hand:.2e})"
            )));
        }
        Ok(())
    }
}

fn ensure_finite(pt: &Point2<f64>) -> Result<()> {
    if pt.x.is_finite() && pt.y.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite pixel {pt:?}")))
    }
}

/// Unit viewing ray of a pixel in global coordinates, `normalize(Rᵀ K⁻¹ x̃)`.
pub fn pixel_to_global_ray(pt: &Point2<f64>, k: &Intrinsics, r: &Rotation) -> Result<UnitVec3> {
    ensure_finite(pt)?;
    UnitVec3::new_normalize(r.matrix().transpose() * k.backproject(pt))
}

/// Flips `v` so that its largest-magnitude component is positive.
pub fn canonicalize_sign(v: Vector3<f64>) -> Vector3<f64> {
    let idx = v.iamax();
    if v[idx] < 0.0 {
        -v
    } else {
        v
    }
}

/// Unit normal of the plane through the camera center and a segment, in
/// camera coordinates, without sign canonicalization. `None` if degenerate.
pub(crate) fn camera_plane_normal(seg: &LineSegment2D, k: &Intrinsics) -> Option<Vector3<f64>> {
    let a = k.backproject(&seg.p);
    let b = k.backproject(&seg.q);
    let c = a.normalize().cross(&b.normalize());
    let n = c.norm();
    // nearly degenerate planes have an unstable normal
    if !(n >= 1e-8) {
        return None;
    }
    Some(c / n)
}

/// Normal of the interpretation plane of `seg` in global coordinates.
pub fn interpretation_plane(seg: &LineSegment2D, k: &Intrinsics, r: &Rotation) -> Result<UnitVec3> {
    let rp = pixel_to_global_ray(&seg.p, k, r)?;
    let rq = pixel_to_global_ray(&seg.q, k, r)?;
    let c = rp.as_vector().cross(rq.as_vector());
    if c.norm() < 1e-12 {
        return Err(Error::DegenerateSegment);
    }
    Ok(UnitVec3::new_unchecked(canonicalize_sign(c.normalize())))
}

/// Geodesic distance between two rotations: the rotation angle of `aᵀb`.
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    let m = a.matrix().transpose() * b.matrix();
    // atan2 form keeps precision for tiny angles where acos does not
    let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() * 0.5;
    s.atan2((m.trace() - 1.0) * 0.5)
}

pub fn rotation_from_axis_angle(axis: &UnitVec3, angle: f64) -> Rotation {
    Rotation::exp(&(axis.as_vector() * angle))
}

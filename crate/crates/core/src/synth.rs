//! Synthetic Manhattan-world scenes with ground truth.
//!
//! Rooms are axis-aligned boxes in a room-aligned "world" frame whose floor is
//! `z = 0`; the global frame is the world frame rotated by `room_yaw_deg`
//! about the vertical, so the true Manhattan directions are not grid aligned.
//! Cameras walk a horizontal circle around each room's center with the
//! optical axis pointing outward and tilted down by `pitch_deg`.

use nalgebra::{Matrix3, Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orientation_difference, Axis, Intrinsics, LineSegment2D, ManhattanFrame, Rotation, UnitVec3};
use crate::io::dataset::{Dataset, FrameInfo, NormalMap, NormalMapSource};
use crate::preprocess::{cmp_segments, min_endpoint_distance};

/// Near-plane depth for visibility clipping, meters.
pub const NEAR_PLANE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub rooms: Vec<RoomConfig>,
    pub fx: f64,
    pub fy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera height above the floor, meters.
    pub camera_height: f64,
    /// Downward tilt of the optical axis, degrees.
    pub pitch_deg: f64,
    /// Radius of the circular camera path, meters.
    pub radius: f64,
    /// Rotation of the rooms about the vertical relative to the global frame.
    pub room_yaw_deg: f64,
    /// Per-frame random-walk rotation noise (RMS angle per step), degrees.
    pub rotation_walk_std_deg: f64,
    /// Independent per-frame rotation noise (RMS angle), degrees.
    pub rotation_white_std_deg: f64,
    pub endpoint_noise_px: f64,
    /// RMS angular noise added to every normal-map pixel, degrees.
    pub normal_noise_deg: f64,
    /// Lines keep at least this distance from wall corners and the ceiling, meters.
    pub wall_margin: f64,
    /// Lowest height of any wall line, meters.
    pub wall_line_min_height: f64,
    /// Floor lines keep at least this distance from the walls, meters.
    pub floor_margin: f64,
    pub min_line_length: f64,
    pub max_line_length: f64,
    pub seed: u64,
    /// What happens to segments of distinct lines that preprocessing would merge.
    pub collision: CollisionPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionPolicy {
    /// Both segments are dropped, so no frame holds an ambiguous pair.
    #[default]
    DropBoth,
    /// The longest segment is kept and the others dropped; denser, but a
    /// line can vanish in one frame while a near-duplicate stays.
    KeepLongest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomConfig {
    /// Center of the floor rectangle in world coordinates, meters.
    pub center: [f64; 2],
    /// Extents along world x, y, z, meters.
    pub size: [f64; 3],
    pub n_frames: usize,
    pub n_wall_lines: usize,
    pub n_floor_lines: usize,
}

impl Default for RoomConfig {
    fn default() -> Self {
        RoomConfig {
            center: [0.0, 0.0],
            size: [8.0, 6.0, 3.0],
            n_frames: 120,
            n_wall_lines: 40,
            n_floor_lines: 12,
        }
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            rooms: vec![RoomConfig::default()],
            fx: 600.0,
            fy: 600.0,
            width: 1280,
            height: 800,
            camera_height: 1.5,
            pitch_deg: 15.0,
            radius: 0.3,
            room_yaw_deg: 20.0,
            rotation_walk_std_deg: 0.0,
            rotation_white_std_deg: 0.0,
            endpoint_noise_px: 0.0,
            normal_noise_deg: 0.0,
            wall_margin: 0.8,
            wall_line_min_height: 0.9,
            floor_margin: 1.0,
            min_line_length: 0.8,
            max_line_length: 2.5,
            seed: 1,
            collision: CollisionPolicy::DropBoth,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rooms.is_empty() {
            return Err(Error::Config("scene needs at least one room".into()));
        }
        let stds = [
            self.rotation_walk_std_deg,
            self.rotation_white_std_deg,
            self.endpoint_noise_px,
            self.normal_noise_deg,
        ];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("noise standard deviations must be non-negative".into()));
        }
        if !(self.radius >= 0.0) {
            return Err(Error::Config("radius must be non-negative".into()));
        }
        if !(self.min_line_length > 0.0 && self.max_line_length >= self.min_line_length) {
            return Err(Error::Config("line length range is empty".into()));
        }
        self.intrinsics()?;
        for (i, room) in self.rooms.iter().enumerate() {
            if room.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::Config(format!("room {i} has zero volume")));
            }
            if room.n_frames < 2 {
                return Err(Error::Config(format!("room {i} needs at least 2 frames")));
            }
            if !(self.camera_height > 0.0 && self.camera_height < room.size[2]) {
                return Err(Error::Config(format!("camera height outside room {i}")));
            }
            if self.radius >= 0.5 * room.size[0].min(room.size[1]) {
                return Err(Error::Config(format!("camera circle leaves room {i}")));
            }
            let free_wall = room.size[0].min(room.size[1]) - 2.0 * self.wall_margin;
            let free_height = room.size[2] - self.wall_margin - self.wall_line_min_height;
            let free_floor = room.size[0].min(room.size[1]) - 2.0 * self.floor_margin;
            if room.n_wall_lines > 0 && (free_wall < self.min_line_length || free_height < self.min_line_length) {
                return Err(Error::Config(format!("room {i} walls too small for the line margins")));
            }
            if room.n_floor_lines > 0 && free_floor < self.min_line_length {
                return Err(Error::Config(format!("room {i} floor too small for the line margins")));
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.fx,
            self.fy,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn n_frames(&self) -> usize {
        self.rooms.iter().map(|r| r.n_frames).sum()
    }
}

/// Face of a room box that carries lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Face {
    XMin,
    XMax,
    YMin,
    YMax,
    Floor,
}

impl Face {
    /// Manhattan axis of the face normal.
    pub fn normal_axis(self) -> Axis {
        match self {
            Face::XMin | Face::XMax => Axis::X,
            Face::YMin | Face::YMax => Axis::Y,
            Face::Floor => Axis::Z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLine {
    pub id: usize,
    pub room: usize,
    pub face: Face,
    pub label: Axis,
    /// Endpoints in global coordinates.
    pub a: [f64; 3],
    pub b: [f64; 3],
    /// Signed offset of the supporting face plane along the face normal axis
    /// of the true Manhattan frame.
    pub plane_offset: f64,
}

impl GroundTruthLine {
    pub fn a(&self) -> Vector3<f64> {
        Vector3::from(self.a)
    }

    pub fn b(&self) -> Vector3<f64> {
        Vector3::from(self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
///
/// Only the rotations and the frame are required when loading; the
/// evaluation reports whatever the remaining fields allow.
pub struct GroundTruth {
    pub rotations: Vec<Rotation>,
    /// Camera centers in global coordinates.
    #[serde(default)]
    pub translations: Vec<[f64; 3]>,
    pub frame: ManhattanFrame,
    #[serde(default)]
    pub lines: Vec<GroundTruthLine>,
    /// 3D line of every dataset segment, index-aligned with `Dataset::segments`.
    #[serde(default)]
    pub segment_lines: Vec<usize>,
    /// Ordered pairs `(a, b)` of lines lying on a common face plane; symmetric.
    #[serde(default)]
    pub coplanar_pairs: Vec<(usize, usize)>,
    /// Largest distance between two room corners, meters; 0 when unknown.
    #[serde(default)]
    pub scene_diameter: f64,
}

impl GroundTruth {
    pub fn translation(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.translations[i])
    }

    pub fn are_coplanar(&self, a: usize, b: usize) -> bool {
        self.coplanar_pairs.binary_search(&(a, b)).is_ok()
    }

    /// Line of the segment with the given frame and endpoints, if any.
    pub fn line_of_segment(&self, dataset_segments: &[LineSegment2D], seg: &LineSegment2D) -> Option<usize> {
        dataset_segments
            .iter()
            .position(|s| {
                s.frame_id == seg.frame_id
                    && (((s.p - seg.p).norm() < 1e-6 && (s.q - seg.q).norm() < 1e-6)
                        || ((s.p - seg.q).norm() < 1e-6 && (s.q - seg.p).norm() < 1e-6))
            })
            .map(|i| self.segment_lines[i])
    }
}

/// Analytic normal-map renderer for one synthetic frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticNormalMap {
    pub intrinsics: Intrinsics,
    /// True camera rotation (global to camera).
    pub rotation: Rotation,
    /// Camera center in world coordinates.
    pub center_world: [f64; 3],
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub room_yaw_rad: f64,
    pub noise_deg: f64,
    pub seed: u64,
}

impl SyntheticNormalMap {
    pub fn render(&self) -> NormalMap {
        let k = &self.intrinsics;
        let yaw = yaw_matrix(self.room_yaw_rad);
        // camera to world: world = Yᵀ Rᵀ cam
        let cam_to_world = yaw.transpose() * self.rotation.matrix().transpose();
        let world_to_cam = cam_to_world.transpose();
        let o = Vector3::from(self.center_world);
        let (lo, hi) = (Vector3::from(self.room_min), Vector3::from(self.room_max));
        let face_normals: [Vector3<f64>; 6] = {
            let mut n = [Vector3::zeros(); 6];
            for ax in 0..3 {
                // hitting the max face of axis `ax` means the normal points toward -ax
                let mut v = Vector3::zeros();
                v[ax] = -1.0;
                n[2 * ax] = world_to_cam * v;
                n[2 * ax + 1] = world_to_cam * -v;
            }
            n
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = (self.noise_deg > 0.0)
            .then(|| Normal::new(0.0, self.noise_deg.to_radians() / std::f64::consts::SQRT_2).expect("finite std"));
        let mut map = NormalMap {
            width: k.width,
            height: k.height,
            data: vec![[0.0; 3]; (k.width * k.height) as usize],
        };
        for y in 0..k.height {
            for x in 0..k.width {
                let d = cam_to_world * k.backproject(&Point2::new(x as f64, y as f64));
                let mut best = (f64::INFINITY, 0usize);
                for ax in 0..3 {
                    if d[ax] > 0.0 {
                        let t = (hi[ax] - o[ax]) / d[ax];
                        if t < best.0 {
                            best = (t, 2 * ax);
                        }
                    } else if d[ax] < 0.0 {
                        let t = (lo[ax] - o[ax]) / d[ax];
                        if t < best.0 {
                            best = (t, 2 * ax + 1);
                        }
                    }
                }
                let mut n = face_normals[best.1];
                if let Some(dist) = &noise {
                    let (t1, t2) = tangent_basis(&n);
                    n = (n + t1 * dist.sample(&mut rng) + t2 * dist.sample(&mut rng)).normalize();
                }
                map.set(x, y, [n.x as f32, n.y as f32, n.z as f32]);
            }
        }
        map
    }
}

fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = n.cross(&helper).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

pub(crate) fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// World-to-camera rotation for a camera looking along heading `theta`
/// (radians about +z) and tilted down by `pitch` radians.
fn camera_rotation_world(theta: f64, pitch: f64) -> Matrix3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let forward = Vector3::new(cp * ct, cp * st, -sp);
    let right = Vector3::new(st, -ct, 0.0);
    let down = forward.cross(&right);
    Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
}

/// Rotation-noise model: compounding random walk plus white noise. Both
/// standard deviations are RMS rotation angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationNoise {
    pub walk_std_deg: f64,
    pub white_std_deg: f64,
}

fn random_rotation_vector<R: Rng>(rng: &mut R, rms_deg: f64) -> Vector3<f64> {
    if rms_deg == 0.0 {
        return Vector3::zeros();
    }
    let d = Normal::new(0.0, rms_deg.to_radians() / 3f64.sqrt()).expect("finite std");
    Vector3::new(d.sample(rng), d.sample(rng), d.sample(rng))
}

/// Applies `R⁰ᵢ = driftᵢ · whiteᵢ · Rᵢ` with `drift₀ = I` and
/// `driftᵢ = exp(stepᵢ) · driftᵢ₋₁`.
pub fn corrupt_rotations<R: Rng>(truth: &[Rotation], model: &RotationNoise, rng: &mut R) -> Vec<Rotation> {
    let mut drift = Matrix3::identity();
    truth
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if i > 0 {
                drift = Rotation::exp(&random_rotation_vector(rng, model.walk_std_deg)).matrix() * drift;
            }
            let white = Rotation::exp(&random_rotation_vector(rng, model.white_std_deg));
            let m = drift * white.matrix() * r.matrix();
            if model.walk_std_deg == 0.0 && model.white_std_deg == 0.0 {
                *r
            } else {
                Rotation::nearest(&m).unwrap_or(*r)
            }
        })
        .collect()
}

/// Clips a global 3D segment to the camera's visible region and returns its
/// image endpoints.
pub fn project_segment(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    k: &Intrinsics,
    r: &Rotation,
    center: &Vector3<f64>,
) -> Option<(Point2<f64>, Point2<f64>)> {
    let ca = r.matrix() * (a - center);
    let cb = r.matrix() * (b - center);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let dz = cb.z - ca.z;
    if dz.abs() < 1e-15 {
        if ca.z <= NEAR_PLANE {
            return None;
        }
    } else {
        let t = (NEAR_PLANE - ca.z) / dz;
        if dz > 0.0 {
            t0 = t0.max(t);
        } else {
            t1 = t1.min(t);
        }
    }
    if t0 >= t1 {
        return None;
    }
    let pa = k.project(&(ca + (cb - ca) * t0))?;
    let pb = k.project(&(ca + (cb - ca) * t1))?;
    clip_to_image(pa, pb, k)
}

/// Liang-Barsky clipping against `[0, w-1] × [0, h-1]`.
fn clip_to_image(p: Point2<f64>, q: Point2<f64>, k: &Intrinsics) -> Option<(Point2<f64>, Point2<f64>)> {
    let d = q - p;
    let (xmax, ymax) = ((k.width - 1) as f64, (k.height - 1) as f64);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (pk, qk) in [(-d.x, p.x), (d.x, xmax - p.x), (-d.y, p.y), (d.y, ymax - p.y)] {
        if pk == 0.0 {
            if qk < 0.0 {
                return None;
            }
        } else {
            let t = qk / pk;
            if pk < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    if t0 >= t1 {
        return None;
    }
    Some((p + d * t0, p + d * t1))
}

struct RoomBox {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

fn place_lines(
    cfg: &SceneConfig,
    room_idx: usize,
    room: &RoomConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(Face, Axis, Vector3<f64>, Vector3<f64>)> {
    let half = Vector3::new(room.size[0] / 2.0, room.size[1] / 2.0, 0.0);
    let c = Vector3::new(room.center[0], room.center[1], 0.0);
    let lo = c - half;
    let hi = c + half + Vector3::new(0.0, 0.0, room.size[2]);
    let mut out = Vec::new();
    let zlo = cfg.wall_line_min_height;
    let zhi = room.size[2] - cfg.wall_margin;
    let length = |rng: &mut ChaCha8Rng, avail: f64| {
        let top = cfg.max_line_length.min(avail);
        if top <= cfg.min_line_length {
            top
        } else {
            rng.random_range(cfg.min_line_length..top)
        }
    };
    let perimeter = 2.0 * (room.size[0] + room.size[1]);
    for _ in 0..room.n_wall_lines {
        // walls weighted by length
        let u: f64 = rng.random_range(0.0..perimeter);
        let face = if u < room.size[0] {
            Face::YMin
        } else if u < 2.0 * room.size[0] {
            Face::YMax
        } else if u < 2.0 * room.size[0] + room.size[1] {
            Face::XMin
        } else {
            Face::XMax
        };
        let (along, fixed_axis, fixed) = match face {
            Face::YMin => (0usize, 1usize, lo.y),
            Face::YMax => (0, 1, hi.y),
            Face::XMin => (1, 0, lo.x),
            Face::XMax => (1, 0, hi.x),
            Face::Floor => unreachable!(),
        };
        let (wall_lo, wall_hi) = (lo[along] + cfg.wall_margin, hi[along] - cfg.wall_margin);
        let vertical = rng.random_bool(0.5);
        let mut a = Vector3::zeros();
        let mut b = Vector3::zeros();
        a[fixed_axis] = fixed;
        b[fixed_axis] = fixed;
        let label = if vertical {
            let len = length(rng, zhi - zlo);
            let pos = rng.random_range(wall_lo..wall_hi);
            let z0 = rng.random_range(zlo..=(zhi - len));
            a[along] = pos;
            b[along] = pos;
            a.z = z0;
            b.z = z0 + len;
            Axis::Z
        } else {
            let len = length(rng, wall_hi - wall_lo);
            let s0 = rng.random_range(wall_lo..=(wall_hi - len));
            let z = rng.random_range(zlo..zhi);
            a[along] = s0;
            b[along] = s0 + len;
            a.z = z;
            b.z = z;
            Axis::from_index(along).expect("axis")
        };
        out.push((face, label, a, b));
    }
    for _ in 0..room.n_floor_lines {
        let along = if rng.random_bool(0.5) { 0usize } else { 1usize };
        let other = 1 - along;
        let (f_lo, f_hi) = (lo[along] + cfg.floor_margin, hi[along] - cfg.floor_margin);
        let len = length(rng, f_hi - f_lo);
        let s0 = rng.random_range(f_lo..=(f_hi - len));
        let o = rng.random_range((lo[other] + cfg.floor_margin)..(hi[other] - cfg.floor_margin));
        let mut a = Vector3::zeros();
        let mut b = Vector3::zeros();
        a[along] = s0;
        b[along] = s0 + len;
        a[other] = o;
        b[other] = o;
        out.push((Face::Floor, Axis::from_index(along).expect("axis"), a, b));
    }
    let _ = room_idx;
    out
}

/// Generates a synthetic dataset and its ground truth.
pub fn generate_scene(cfg: &SceneConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let yaw_rad = cfg.room_yaw_deg.to_radians();
    let yaw = yaw_matrix(yaw_rad);
    let mut geo_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    geo_rng.set_stream(1);
    let mut rot_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rot_rng.set_stream(2);
    let mut px_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    px_rng.set_stream(3);

    let gt_frame = ManhattanFrame {
        vx: UnitVec3::new_normalize(yaw * Vector3::x())?,
        vy: UnitVec3::new_normalize(-(yaw * Vector3::y()))?,
        vz: UnitVec3::new_normalize(-Vector3::z())?,
    };

    // lines
    let mut lines = Vec::new();
    let mut boxes = Vec::new();
    for (ri, room) in cfg.rooms.iter().enumerate() {
        let half = Vector3::new(room.size[0] / 2.0, room.size[1] / 2.0, 0.0);
        let c = Vector3::new(room.center[0], room.center[1], 0.0);
        boxes.push(RoomBox {
            min: c - half,
            max: c + half + Vector3::new(0.0, 0.0, room.size[2]),
        });
        for (face, label, a, b) in place_lines(cfg, ri, room, &mut geo_rng) {
            let (ag, bg) = (yaw * a, yaw * b);
            let axis = face.normal_axis();
            let plane_offset = gt_frame.axis(axis).as_vector().dot(&ag);
            lines.push(GroundTruthLine {
                id: lines.len(),
                room: ri,
                face,
                label,
                a: ag.into(),
                b: bg.into(),
                plane_offset,
            });
        }
    }

    // cameras
    let pitch = cfg.pitch_deg.to_radians();
    let mut rotations = Vec::new();
    let mut centers_world = Vec::new();
    let mut frame_room = Vec::new();
    for (ri, room) in cfg.rooms.iter().enumerate() {
        for f in 0..room.n_frames {
            let theta = 2.0 * std::f64::consts::PI * f as f64 / room.n_frames as f64;
            let center = Vector3::new(
                room.center[0] + cfg.radius * theta.cos(),
                room.center[1] + cfg.radius * theta.sin(),
                cfg.camera_height,
            );
            let r_world = camera_rotation_world(theta, pitch);
            rotations.push(Rotation::nearest(&(r_world * yaw.transpose()))?);
            centers_world.push(center);
            frame_room.push(ri);
        }
    }
    let translations: Vec<[f64; 3]> = centers_world.iter().map(|c| (yaw * c).into()).collect();
    let initial = corrupt_rotations(
        &rotations,
        &RotationNoise {
            walk_std_deg: cfg.rotation_walk_std_deg,
            white_std_deg: cfg.rotation_white_std_deg,
        },
        &mut rot_rng,
    );

    // projections
    let min_len = 0.05 * k.min_dim();
    let merge_gap = 0.05 * k.min_dim();
    let merge_angle = 1f64.to_radians();
    let px_noise = (cfg.endpoint_noise_px > 0.0).then(|| Normal::new(0.0, cfg.endpoint_noise_px).expect("finite std"));
    let mut segments = Vec::new();
    let mut segment_lines = Vec::new();
    for (fi, r) in rotations.iter().enumerate() {
        let center = Vector3::from(translations[fi]);
        let mut frame_segs: Vec<(LineSegment2D, usize)> = Vec::new();
        for line in lines.iter().filter(|l| l.room == frame_room[fi]) {
            let Some((mut p, mut q)) = project_segment(&line.a(), &line.b(), &k, r, &center) else {
                continue;
            };
            if let Some(d) = &px_noise {
                p += nalgebra::Vector2::new(d.sample(&mut px_rng), d.sample(&mut px_rng));
                q += nalgebra::Vector2::new(d.sample(&mut px_rng), d.sample(&mut px_rng));
            }
            if (p - q).norm() < min_len {
                continue;
            }
            frame_segs.push((LineSegment2D::new(fi as u32, p, q)?, line.id));
        }
        let fuses = |a: &LineSegment2D, b: &LineSegment2D| {
            min_endpoint_distance(a, b) < merge_gap
                && orientation_difference(a.orientation(), b.orientation()) < merge_angle
        };
        let mut kept: Vec<(LineSegment2D, usize)> = Vec::with_capacity(frame_segs.len());
        match cfg.collision {
            CollisionPolicy::DropBoth => {
                let mut drop = vec![false; frame_segs.len()];
                for i in 0..frame_segs.len() {
                    for j in (i + 1)..frame_segs.len() {
                        if fuses(&frame_segs[i].0, &frame_segs[j].0) {
                            drop[i] = true;
                            drop[j] = true;
                        }
                    }
                }
                kept.extend(frame_segs.into_iter().zip(drop).filter(|(_, d)| !d).map(|(s, _)| s));
            }
            CollisionPolicy::KeepLongest => {
                frame_segs.sort_by(|a, b| b.0.length.total_cmp(&a.0.length).then_with(|| cmp_segments(&a.0, &b.0)));
                for cand in frame_segs {
                    if !kept.iter().any(|(k, _)| fuses(k, &cand.0)) {
                        kept.push(cand);
                    }
                }
            }
        }
        kept.sort_by(|a, b| cmp_segments(&a.0, &b.0));
        for (s, l) in kept {
            segments.push(s);
            segment_lines.push(l);
        }
    }

    let frames = rotations
        .iter()
        .enumerate()
        .map(|(fi, r)| {
            let b = &boxes[frame_room[fi]];
            FrameInfo {
                id: fi as u32,
                rotation: initial[fi],
                normal_map: Some(NormalMapSource::Synthetic(SyntheticNormalMap {
                    intrinsics: k,
                    rotation: *r,
                    center_world: centers_world[fi].into(),
                    room_min: b.min.into(),
                    room_max: b.max.into(),
                    room_yaw_rad: yaw_rad,
                    noise_deg: cfg.normal_noise_deg,
                    seed: cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fi as u64 + 1)),
                })),
            }
        })
        .collect();

    let mut coplanar_pairs = Vec::new();
    for a in &lines {
        for b in &lines {
            if a.id != b.id
                && a.face.normal_axis() == b.face.normal_axis()
                && (a.plane_offset - b.plane_offset).abs() < 1e-9
            {
                coplanar_pairs.push((a.id, b.id));
            }
        }
    }
    coplanar_pairs.sort_unstable();

    let mut scene_diameter: f64 = 0.0;
    let corners: Vec<Vector3<f64>> = boxes
        .iter()
        .flat_map(|b| {
            (0..8).map(move |m| {
                Vector3::new(
                    if m & 1 == 0 { b.min.x } else { b.max.x },
                    if m & 2 == 0 { b.min.y } else { b.max.y },
                    if m & 4 == 0 { b.min.z } else { b.max.z },
                )
            })
        })
        .collect();
    for a in &corners {
        for b in &corners {
            scene_diameter = scene_diameter.max((a - b).norm());
        }
    }

    let dataset = Dataset {
        intrinsics: k,
        gravity: gt_frame.vz,
        frames,
        segments,
        point_matches: Vec::new(),
    };
    let truth = GroundTruth {
        rotations,
        translations,
        frame: gt_frame,
        lines,
        segment_lines,
        coplanar_pairs,
        scene_diameter,
    };
    Ok((dataset, truth))
}

impl GroundTruth {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::load(path, "ground_truth", e.to_string()))
    }
}

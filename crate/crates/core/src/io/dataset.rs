//! Dataset layout on disk:
//!
//! ```text
//! dir/
//!   manifest.json   intrinsics, gravity, frames (id, row-major rotation, normal map path)
//!   segments.csv    frame_id,px,py,qx,qy
//!   normals_*.pfm   3-channel camera-frame normal maps
//!   matches.csv     optional point correspondences: frame_a,frame_b,xa,ya,xb,yb
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FrameRotations, Intrinsics, LineSegment2D, Rotation, UnitVec3};
use crate::io::pfm::{read_pfm, read_pfm_dimensions, write_pfm, PfmImage};
use crate::synth::SyntheticNormalMap;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEGMENTS_FILE: &str = "segments.csv";
pub const MATCHES_FILE: &str = "matches.csv";

/// Rotations within this distance of orthonormal are projected onto SO(3).
pub const ROTATION_REPAIR_TOLERANCE: f64 = 1e-6;

/// Per-pixel camera-frame surface normals, row-major from the top-left pixel.
/// Zero vectors mark invalid pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 3]>,
}

impl NormalMap {
    pub fn constant(width: u32, height: u32, n: Vector3<f64>) -> Self {
        let n = n.normalize();
        NormalMap {
            width,
            height,
            data: vec![[n.x as f32, n.y as f32, n.z as f32]; (width * height) as usize],
        }
    }

    /// Normal at pixel `(x, y)`, `None` for invalid or out-of-range pixels.
    pub fn get(&self, x: i64, y: i64) -> Option<Vector3<f64>> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return None;
        }
        let v = self.data[y as usize * self.width as usize + x as usize];
        if v == [0.0; 3] {
            return None;
        }
        Some(Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64))
    }

    pub fn set(&mut self, x: u32, y: u32, n: [f32; 3]) {
        self.data[y as usize * self.width as usize + x as usize] = n;
    }

    fn from_pfm(img: PfmImage) -> Self {
        let data = img
            .data
            .into_iter()
            .map(|v| {
                let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                if !n2.is_finite() || n2 == 0.0 {
                    [0.0; 3]
                } else if (n2 - 1.0).abs() > 1e-5 {
                    let n = n2.sqrt();
                    [v[0] / n, v[1] / n, v[2] / n]
                } else {
                    v
                }
            })
            .collect();
        NormalMap {
            width: img.width,
            height: img.height,
            data,
        }
    }
}

/// Where a frame's normal map comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormalMapSource {
    /// PFM file, read on demand.
    File { path: PathBuf },
    /// Rendered analytically from a synthetic scene.
    Synthetic(SyntheticNormalMap),
    /// Held in memory.
    Grid(NormalMap),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameInfo {
    pub id: u32,
    pub rotation: Rotation,
    pub normal_map: Option<NormalMapSource>,
}

/// Point correspondences between two frames, used by the correspondence
/// homography estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMatches {
    pub frame_a: u32,
    pub frame_b: u32,
    pub points: Vec<(Point2<f64>, Point2<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    /// Downward gravity direction in global coordinates.
    pub gravity: UnitVec3,
    pub frames: Vec<FrameInfo>,
    pub segments: Vec<LineSegment2D>,
    #[serde(default)]
    pub point_matches: Vec<PointMatches>,
}

#[derive(Serialize, Deserialize)]
struct ManifestIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    id: u32,
    rotation: Vec<f64>,
    #[serde(default)]
    normal_map: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    intrinsics: ManifestIntrinsics,
    gravity: Vec<f64>,
    frames: Vec<ManifestFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    point_matches: Option<String>,
}

impl Dataset {
    pub fn frame_index(&self, frame_id: u32) -> Option<usize> {
        self.frames.binary_search_by_key(&frame_id, |f| f.id).ok()
    }

    pub fn rotations(&self) -> Vec<Rotation> {
        self.frames.iter().map(|f| f.rotation).collect()
    }

    pub fn frame_rotations(&self) -> FrameRotations {
        FrameRotations {
            ids: self.frame_ids(),
            rotations: self.rotations(),
        }
    }

    pub fn frame_ids(&self) -> Vec<u32> {
        self.frames.iter().map(|f| f.id).collect()
    }

    /// Segments of one frame, in dataset order.
    pub fn segments_of(&self, frame_id: u32) -> impl Iterator<Item = &LineSegment2D> {
        self.segments.iter().filter(move |s| s.frame_id == frame_id)
    }

    /// Loads or renders the normal map of the frame at `index`.
    pub fn normal_map(&self, index: usize) -> Result<Option<NormalMap>> {
        let frame = &self.frames[index];
        let map = match &frame.normal_map {
            None => return Ok(None),
            Some(NormalMapSource::Grid(m)) => m.clone(),
            Some(NormalMapSource::Synthetic(s)) => s.render(),
            Some(NormalMapSource::File { path }) => {
                let f = File::open(path).map_err(|e| Error::io(path, e))?;
                let img = read_pfm(BufReader::new(f)).map_err(|e| Error::load(path, "normal_map", e.to_string()))?;
                NormalMap::from_pfm(img)
            }
        };
        if map.width != self.intrinsics.width || map.height != self.intrinsics.height {
            return Err(Error::load(
                format!("frame {}", frame.id),
                "normal_map",
                format!(
                    "size {}x{} does not match image size {}x{}",
                    map.width, map.height, self.intrinsics.width, self.intrinsics.height
                ),
            ));
        }
        Ok(Some(map))
    }

    /// Checks every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        for w in self.frames.windows(2) {
            if w[1].id <= w[0].id {
                return Err(Error::InvalidInput(format!(
                    "frame ids must be strictly increasing ({} then {})",
                    w[0].id, w[1].id
                )));
            }
        }
        for (i, s) in self.segments.iter().enumerate() {
            if self.frame_index(s.frame_id).is_none() {
                return Err(Error::InvalidInput(format!(
                    "segment {i} references unknown frame {}",
                    s.frame_id
                )));
            }
            if !(s.length > 0.0) || ((s.p - s.q).norm() - s.length).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("segment {i} has inconsistent length")));
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::load(&manifest_path, "manifest", e.to_string()))?;

        let mi = &manifest.intrinsics;
        let intrinsics = Intrinsics::new(mi.fx, mi.fy, mi.cx, mi.cy, mi.width, mi.height)
            .map_err(|e| Error::load(&manifest_path, "intrinsics", e.to_string()))?;

        if manifest.gravity.len() != 3 {
            return Err(Error::load(&manifest_path, "gravity", "expected 3 components"));
        }
        let gravity = UnitVec3::new_normalize(Vector3::new(
            manifest.gravity[0],
            manifest.gravity[1],
            manifest.gravity[2],
        ))
        .map_err(|e| Error::load(&manifest_path, "gravity", e.to_string()))?;

        let mut frames = Vec::with_capacity(manifest.frames.len());
        for (i, mf) in manifest.frames.iter().enumerate() {
            let field = |name: &str| format!("frames[{i}] (id {}).{name}", mf.id);
            let rot: [f64; 9] = mf
                .rotation
                .as_slice()
                .try_into()
                .map_err(|_| Error::load(&manifest_path, field("rotation"), "expected 9 row-major entries"))?;
            let rotation = parse_rotation(&rot).map_err(|msg| Error::load(&manifest_path, field("rotation"), msg))?;
            let normal_map = match &mf.normal_map {
                None => None,
                Some(rel) => {
                    let path = dir.join(rel);
                    let f = File::open(&path).map_err(|e| {
                        Error::load(
                            &manifest_path,
                            field("normal_map"),
                            format!("cannot open {}: {e}", path.display()),
                        )
                    })?;
                    let (w, h) =
                        read_pfm_dimensions(f).map_err(|e| Error::load(&path, field("normal_map"), e.to_string()))?;
                    if (w, h) != (intrinsics.width, intrinsics.height) {
                        return Err(Error::load(
                            &path,
                            field("normal_map"),
                            format!(
                                "size {w}x{h} does not match image size {}x{}",
                                intrinsics.width, intrinsics.height
                            ),
                        ));
                    }
                    Some(NormalMapSource::File { path })
                }
            };
            frames.push(FrameInfo {
                id: mf.id,
                rotation,
                normal_map,
            });
        }
        for w in frames.windows(2) {
            if w[1].id <= w[0].id {
                return Err(Error::load(
                    &manifest_path,
                    "frames",
                    "frame ids must be strictly increasing",
                ));
            }
        }

        let segments = read_segments(&dir.join(SEGMENTS_FILE))?;
        let mut ds = Dataset {
            intrinsics,
            gravity,
            frames,
            segments,
            point_matches: Vec::new(),
        };
        for (i, s) in ds.segments.iter().enumerate() {
            if ds.frame_index(s.frame_id).is_none() {
                return Err(Error::load(
                    dir.join(SEGMENTS_FILE),
                    format!("row {}.frame_id", i + 1),
                    format!("unknown frame {}", s.frame_id),
                ));
            }
        }
        if let Some(rel) = &manifest.point_matches {
            ds.point_matches = read_matches(&dir.join(rel))?;
        }
        Ok(ds)
    }

    /// Writes the dataset layout. Normal maps of every source kind are
    /// materialized as PFM files.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut frames = Vec::with_capacity(self.frames.len());
        for (i, f) in self.frames.iter().enumerate() {
            let normal_map = match self.normal_map(i)? {
                None => None,
                Some(map) => {
                    let name = format!("normals_{:05}.pfm", f.id);
                    let path = dir.join(&name);
                    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
                    let img = PfmImage {
                        width: map.width,
                        height: map.height,
                        data: map.data,
                    };
                    let mut w = BufWriter::new(file);
                    write_pfm(&mut w, &img).map_err(|e| Error::io(&path, e))?;
                    w.flush().map_err(|e| Error::io(&path, e))?;
                    Some(name)
                }
            };
            frames.push(ManifestFrame {
                id: f.id,
                rotation: f.rotation.to_row_major().to_vec(),
                normal_map,
            });
        }
        let k = &self.intrinsics;
        let g = self.gravity.as_vector();
        let manifest = Manifest {
            intrinsics: ManifestIntrinsics {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
                width: k.width,
                height: k.height,
            },
            gravity: vec![g.x, g.y, g.z],
            frames,
            point_matches: (!self.point_matches.is_empty()).then(|| MATCHES_FILE.to_string()),
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        write_segments(&dir.join(SEGMENTS_FILE), &self.segments)?;
        if !self.point_matches.is_empty() {
            write_matches(&dir.join(MATCHES_FILE), &self.point_matches)?;
        }
        Ok(())
    }
}

fn parse_rotation(v: &[f64; 9]) -> std::result::Result<Rotation, String> {
    let m = Rotation::row_major_matrix(v);
    if m.iter().any(|x| !x.is_finite()) {
        return Err("non-finite entries".into());
    }
    if m.determinant() < 0.0 {
        return Err("improper rotation (determinant -1)".into());
    }
    let err = (m.transpose() * m - nalgebra::Matrix3::identity()).abs().max();
    if err > ROTATION_REPAIR_TOLERANCE || (m.determinant() - 1.0).abs() > ROTATION_REPAIR_TOLERANCE {
        return Err(format!("not orthonormal (|RᵀR - I| = {err:.3e})"));
    }
    // exact-enough rotations are kept bit for bit so save/load round-trips
    if err <= crate::geometry::ROTATION_TOLERANCE
        && (m.determinant() - 1.0).abs() <= crate::geometry::ROTATION_TOLERANCE
    {
        return Ok(Rotation::new_unchecked(m));
    }
    Rotation::nearest(&m).map_err(|e| e.to_string())
}

/// Reads `segments.csv` (`frame_id,px,py,qx,qy`).
pub fn read_segments(path: &Path) -> Result<Vec<LineSegment2D>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected = ["frame_id", "px", "py", "qx", "qy"];
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::load(
            path,
            "header",
            format!("expected `{}`", expected.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::load(path, format!("row {row}.{}", expected[c]), "not a number"))
        };
        let frame_id: u32 = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::load(path, format!("row {row}.frame_id"), "not an integer"))?;
        let seg = LineSegment2D::new(frame_id, Point2::new(num(1)?, num(2)?), Point2::new(num(3)?, num(4)?))
            .map_err(|e| Error::load(path, format!("row {row}"), e.to_string()))?;
        out.push(seg);
    }
    Ok(out)
}

pub fn write_segments(path: &Path, segments: &[LineSegment2D]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["frame_id", "px", "py", "qx", "qy"])
        .map_err(|e| csv_err(path, e))?;
    for s in segments {
        w.write_record(&[
            s.frame_id.to_string(),
            s.p.x.to_string(),
            s.p.y.to_string(),
            s.q.x.to_string(),
            s.q.y.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_matches(path: &Path) -> Result<Vec<PointMatches>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: Vec<PointMatches> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::load(path, format!("row {}", i + 1), "malformed value"))
        };
        let (a, b) = (field(0)? as u32, field(1)? as u32);
        let pair = (Point2::new(field(2)?, field(3)?), Point2::new(field(4)?, field(5)?));
        match out.iter_mut().find(|m| m.frame_a == a && m.frame_b == b) {
            Some(m) => m.points.push(pair),
            None => out.push(PointMatches {
                frame_a: a,
                frame_b: b,
                points: vec![pair],
            }),
        }
    }
    Ok(out)
}

fn write_matches(path: &Path, matches: &[PointMatches]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["frame_a", "frame_b", "xa", "ya", "xb", "yb"])
        .map_err(|e| csv_err(path, e))?;
    for m in matches {
        for (a, b) in &m.points {
            w.write_record(&[
                m.frame_a.to_string(),
                m.frame_b.to_string(),
                a.x.to_string(),
                a.y.to_string(),
                b.x.to_string(),
                b.y.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::load(path, "csv", e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        let k = Intrinsics::new(100.0, 100.0, 40.0, 30.0, 80, 60).unwrap();
        Dataset {
            intrinsics: k,
            gravity: UnitVec3::new_normalize(Vector3::new(0.0, 0.0, -1.0)).unwrap(),
            frames: vec![
                FrameInfo {
                    id: 0,
                    rotation: Rotation::identity(),
                    normal_map: Some(NormalMapSource::Grid(NormalMap::constant(
                        80,
                        60,
                        Vector3::new(0.0, 0.3, -1.0),
                    ))),
                },
                FrameInfo {
                    id: 4,
                    rotation: Rotation::exp(&Vector3::new(0.0, 0.1, 0.0)),
                    normal_map: None,
                },
            ],
            segments: vec![
                LineSegment2D::new(0, Point2::new(1.25, 2.0), Point2::new(30.0, 2.5)).unwrap(),
                LineSegment2D::new(4, Point2::new(0.1, 0.2), Point2::new(0.3, 59.0)).unwrap(),
            ],
            point_matches: vec![PointMatches {
                frame_a: 0,
                frame_b: 4,
                points: vec![(Point2::new(1.0, 2.0), Point2::new(3.0, 4.0))],
            }],
        }
    }

    #[test]
    fn save_then_load_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.intrinsics, ds.intrinsics);
        assert_eq!(back.segments, ds.segments);
        assert_eq!(back.rotations(), ds.rotations());
        assert_eq!(back.point_matches, ds.point_matches);
        assert_eq!(back.normal_map(0).unwrap(), ds.normal_map(0).unwrap());
        assert!(back.normal_map(1).unwrap().is_none());
        back.validate().unwrap();
    }

    #[test]
    fn missing_normal_map_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset().save(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("normals_00000.pfm")).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("id 0") && err.contains("normal_map"), "{err}");
    }

    #[test]
    fn improper_rotation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset().save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        m["frames"][1]["rotation"] = serde_json::json!([1, 0, 0, 0, 1, 0, 0, 0, -1]);
        std::fs::write(&path, m.to_string()).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("improper rotation"), "{err}");
    }

    #[test]
    fn slightly_skewed_rotation_is_repaired() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset().save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        m["frames"][0]["rotation"] = serde_json::json!([1, 2e-7, 0, 0, 1, 0, 0, 0, 1]);
        std::fs::write(&path, m.to_string()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        Rotation::from_matrix(*ds.frames[0].rotation.matrix()).unwrap();

        m["frames"][0]["rotation"] = serde_json::json!([1, 1e-3, 0, 0, 1, 0, 0, 0, 1]);
        std::fs::write(&path, m.to_string()).unwrap();
        assert!(Dataset::load(dir.path())
            .unwrap_err()
            .to_string()
            .contains("not orthonormal"));
    }

    #[test]
    fn segment_with_unknown_frame_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny_dataset();
        ds.segments
            .push(LineSegment2D::new(9, Point2::new(0.0, 0.0), Point2::new(5.0, 5.0)).unwrap());
        ds.save(dir.path()).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("unknown frame 9"), "{err}");
    }

    #[test]
    fn bad_segment_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset().save(dir.path()).unwrap();
        std::fs::write(dir.path().join(SEGMENTS_FILE), "frame,px,py,qx,qy\n0,1,2,3,4\n").unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset().save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), Dataset::load(dir.path()).unwrap());
    }
}

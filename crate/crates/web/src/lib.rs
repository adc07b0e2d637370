//! WebAssembly bindings for the browser demo in `www/`. The page builds a
//! small synthetic room, shows the segments of one frame colored by their
//! Manhattan label, refines the rotations and reconstructs a plan view.
//!
//! [`Session`] holds the plain Rust logic; [`Demo`] wraps it for JavaScript.

use msfm_core::eval::{evaluate, AngleStats};
use msfm_core::export::model_from_state;
use msfm_core::io::state::{PipelineState, Stage};
use msfm_core::pipeline::run_stage;
use msfm_core::synth::{generate_scene, GroundTruth, RoomConfig, SceneConfig};
use msfm_core::{Axis, PipelineConfig};
use nalgebra::Vector3;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Serialize)]
pub struct RefineSummary {
    pub labeled: usize,
    pub segments: usize,
    pub outer_iterations: usize,
    pub before: AngleStats,
    pub after: AngleStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanView {
    /// `[x0, y0, x1, y1, label]` per line, in meters along the horizontal Manhattan axes.
    pub lines: Vec<[f64; 5]>,
    pub cameras: Vec<[f64; 2]>,
    pub registered_ratio: f64,
    pub translation_rmse_percent: Option<f64>,
    pub reprojection_before: Option<f64>,
    pub reprojection_after: Option<f64>,
}

pub struct Session {
    pub state: PipelineState,
    pub truth: GroundTruth,
}

fn label_code(label: Option<Axis>) -> f64 {
    match label {
        None => -1.0,
        Some(Axis::X) => 0.0,
        Some(Axis::Y) => 1.0,
        Some(Axis::Z) => 2.0,
    }
}

impl Session {
    /// A 320×200 room circled by `n_frames` cameras.
    pub fn new(n_frames: usize, walk_deg: f64, noise_px: f64, seed: u64) -> msfm_core::Result<Self> {
        let scene = SceneConfig {
            rooms: vec![RoomConfig {
                n_frames,
                n_wall_lines: 40,
                n_floor_lines: 10,
                ..RoomConfig::default()
            }],
            width: 320,
            height: 200,
            fx: 150.0,
            fy: 150.0,
            rotation_walk_std_deg: walk_deg,
            endpoint_noise_px: noise_px,
            seed,
            ..SceneConfig::default()
        };
        let (dataset, truth) = generate_scene(&scene)?;
        let mut config = PipelineConfig::default();
        // neighbors are one step of the circle apart
        config.tracking.pair_angle_deg = 1.1 * 360.0 / n_frames as f64;
        Ok(Session {
            state: PipelineState::new(dataset, config),
            truth,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.state.dataset.frames.len()
    }

    /// Segments of frame `index` as `[px, py, qx, qy, label]`, with label −1
    /// for unlabeled and 0, 1, 2 for the axes. Labels appear once the
    /// rotations are refined.
    pub fn frame_segments(&self, index: usize) -> Vec<[f64; 5]> {
        let Some(frame) = self.state.dataset.frames.get(index) else {
            return Vec::new();
        };
        let segs = self
            .state
            .labeled_segments()
            .unwrap_or_else(|_| self.state.dataset.segments.clone());
        segs.iter()
            .filter(|s| s.frame_id == frame.id)
            .map(|s| [s.p.x, s.p.y, s.q.x, s.q.y, label_code(s.label)])
            .collect()
    }

    fn run_until(&mut self, last: Stage) -> msfm_core::Result<()> {
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            if !self.state.has(stage) {
                run_stage(&mut self.state, stage).map_err(|e| e.in_stage(stage.name()))?;
            }
        }
        Ok(())
    }

    pub fn refine(&mut self) -> msfm_core::Result<RefineSummary> {
        self.run_until(Stage::RefineRotations)?;
        let refined = self.state.refined.as_ref().expect("refined");
        Ok(RefineSummary {
            labeled: refined.assignment.labeled_count(),
            segments: refined.assignment.labels.len(),
            outer_iterations: refined.outer_iterations,
            before: AngleStats::between(&self.state.dataset.rotations(), &self.truth.rotations),
            after: AngleStats::between(&refined.rotations.rotations, &self.truth.rotations),
        })
    }

    pub fn reconstruct(&mut self) -> msfm_core::Result<PlanView> {
        self.run_until(Stage::Ba)?;
        let model = model_from_state(&self.state)?;
        let report = evaluate(&self.state, &self.truth, &[])?;
        let (_, frame) = self.state.refined_geometry()?;
        let (h0, h1) = (frame.vx.as_vector(), frame.vy.as_vector());
        let plan = |p: &[f64; 3]| {
            let v = Vector3::from(*p);
            [v.dot(h0), v.dot(h1)]
        };
        let lines = model
            .lines
            .iter()
            .map(|l| {
                let (a, b) = (plan(&l.endpoints[0]), plan(&l.endpoints[1]));
                [a[0], a[1], b[0], b[1], label_code(Some(l.label))]
            })
            .collect();
        Ok(PlanView {
            lines,
            cameras: model.cameras.iter().map(|c| plan(&c.center)).collect(),
            registered_ratio: self.state.linear.as_ref().map_or(0.0, |s| s.registered_ratio),
            translation_rmse_percent: report.translation.and_then(|t| t.rmse_percent_diameter),
            reprojection_before: report.reprojection.as_ref().map(|r| r.before.mean),
            reprojection_after: report.reprojection.as_ref().map(|r| r.after.mean),
        })
    }
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(n_frames: u32, walk_deg: f64, noise_px: f64, seed: u32) -> Result<Demo, JsError> {
        let session = Session::new(n_frames as usize, walk_deg, noise_px, seed as u64).map_err(js_err)?;
        Ok(Demo { session })
    }

    #[wasm_bindgen(js_name = frameCount)]
    pub fn frame_count(&self) -> u32 {
        self.session.frame_count() as u32
    }

    /// Flattened `[px, py, qx, qy, label]` records.
    #[wasm_bindgen(js_name = frameSegments)]
    pub fn frame_segments(&self, index: u32) -> Vec<f64> {
        self.session.frame_segments(index as usize).concat()
    }

    /// Extracts the Manhattan frame and refines the rotations; returns a JSON summary.
    pub fn refine(&mut self) -> Result<String, JsError> {
        let summary = self.session.refine().map_err(js_err)?;
        serde_json::to_string(&summary).map_err(js_err)
    }

    /// Runs the remaining stages; returns the plan view as JSON.
    pub fn reconstruct(&mut self) -> Result<String, JsError> {
        let view = self.session.reconstruct().map_err(js_err)?;
        serde_json::to_string(&view).map_err(js_err)
    }
}

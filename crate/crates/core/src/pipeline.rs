//! Stage driver. Each stage reads the outputs of the stages before it from a
//! [`PipelineState`] and clears the outputs of the stages after it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ba::{self, BaResult};
use crate::coplanarity;
use crate::error::{Error, Result};
use crate::geometry::{FrameRotations, LineSegment2D, ManhattanFrame};
use crate::io::dataset::write_segments;
use crate::io::state::{save_state, PipelineState, Stage};
use crate::manhattan::{estimate_frame, FrameEstimate};
use crate::preprocess::preprocess;
use crate::rotation::{self, classify_segments, refine_loop, RefineOutcome};
use crate::sfm;
use crate::tracking;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Where [`run_pipeline`] persists its progress.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// State file rewritten after every completed stage.
    pub state_path: Option<PathBuf>,
    /// Directory receiving the per-stage CSV logs.
    pub log_dir: Option<PathBuf>,
}

fn require<T>(v: &Option<T>, stage: Stage) -> Result<&T> {
    v.as_ref()
        .ok_or_else(|| Error::MissingStage(format!("`{stage}` has not run")))
}

impl PipelineState {
    /// Preprocessed segments carrying the labels of the last classification.
    pub fn labeled_segments(&self) -> Result<Vec<LineSegment2D>> {
        let segs = require(&self.preprocessed, Stage::Preprocess)?;
        let refined = require(&self.refined, Stage::RefineRotations)?;
        Ok(refined.assignment.apply(segs))
    }

    /// Refined rotations and Manhattan frame.
    pub fn refined_geometry(&self) -> Result<(&FrameRotations, &ManhattanFrame)> {
        let refined = require(&self.refined, Stage::RefineRotations)?;
        Ok((&refined.rotations, &refined.frame))
    }
}

pub fn run_preprocess(state: &mut PipelineState) -> Result<()> {
    state.invalidate_from(Stage::Preprocess);
    let segs = preprocess(
        &state.dataset.segments,
        &state.dataset.intrinsics,
        &state.config.preprocess,
    );
    if segs.is_empty() {
        return Err(Error::NoData("no segment survives preprocessing".into()));
    }
    state.preprocessed = Some(segs);
    Ok(())
}

pub fn run_frame(state: &mut PipelineState) -> Result<()> {
    state.require_before(Stage::Frame)?;
    state.invalidate_from(Stage::Frame);
    let segs = require(&state.preprocessed, Stage::Preprocess)?;
    let (frame, map) = estimate_frame(
        segs,
        &state.dataset.intrinsics,
        &state.dataset.frame_rotations(),
        &state.dataset.gravity,
        &state.config.frame,
        &state.config.rotation,
    )?;
    state.frame = Some(FrameEstimate {
        frame,
        vote_max: map.max_value,
    });
    Ok(())
}

/// With refinement disabled the input rotations are kept and the segments
/// are only classified.
pub fn run_refine(state: &mut PipelineState) -> Result<()> {
    state.require_before(Stage::RefineRotations)?;
    state.invalidate_from(Stage::RefineRotations);
    let segs = require(&state.preprocessed, Stage::Preprocess)?;
    let frame = require(&state.frame, Stage::Frame)?.frame;
    let initial = state.dataset.frame_rotations();
    let k = &state.dataset.intrinsics;
    let cfg = &state.config.rotation;
    let outcome = if cfg.enabled {
        refine_loop(
            segs,
            k,
            &initial,
            &frame,
            &state.dataset.gravity,
            &state.config.frame,
            cfg,
        )?
    } else {
        let assignment = classify_segments(segs, k, &initial, &frame, cfg)?;
        RefineOutcome {
            label_counts: vec![assignment.labeled_count()],
            rotations: initial,
            frame,
            assignment,
            outer_iterations: 0,
            converged: true,
            cost_log: Vec::new(),
        }
    };
    state.refined = Some(outcome);
    Ok(())
}

pub fn run_track(state: &mut PipelineState) -> Result<()> {
    state.require_before(Stage::Track)?;
    state.invalidate_from(Stage::Track);
    let segs = state.labeled_segments()?;
    let (rotations, _) = state.refined_geometry()?;
    let result = tracking::track_lines(
        &segs,
        &state.dataset.intrinsics,
        rotations,
        &state.dataset.point_matches,
        &state.config.tracking,
    )?;
    state.tracking = Some(result);
    Ok(())
}

pub fn run_coplanarity(state: &mut PipelineState) -> Result<()> {
    state.require_before(Stage::Coplanarity)?;
    state.invalidate_from(Stage::Coplanarity);
    let segs = state.labeled_segments()?;
    let (rotations, frame) = state.refined_geometry()?;
    let tracks = &require(&state.tracking, Stage::Track)?.tracks;
    let result = coplanarity::detect_relations(
        &state.dataset,
        &segs,
        tracks,
        rotations,
        frame,
        &state.config.coplanarity,
    )?;
    state.coplanarity = Some(result);
    Ok(())
}

pub fn run_solve(state: &mut PipelineState) -> Result<()> {
    state.require_before(Stage::Solve)?;
    state.invalidate_from(Stage::Solve);
    let segs = state.labeled_segments()?;
    let (rotations, frame) = state.refined_geometry()?;
    let tracks = &require(&state.tracking, Stage::Track)?.tracks;
    let relations = &require(&state.coplanarity, Stage::Coplanarity)?.relations;
    let system = sfm::assemble(
        &segs,
        tracks,
        relations,
        rotations,
        &state.dataset.intrinsics,
        frame,
        &state.config.sfm,
    )?;
    let solution = sfm::solve(&system, &state.config.sfm)?;
    state.linear = Some(solution);
    Ok(())
}

/// Runs bundle adjustment phases `1..=last_phase`. When adjustment is
/// disabled the initialization is stored without any phase.
pub fn run_ba(state: &mut PipelineState, last_phase: u8) -> Result<()> {
    state.require_before(Stage::Ba)?;
    state.invalidate_from(Stage::Ba);
    let segs = state.labeled_segments()?;
    let (rotations, frame) = state.refined_geometry()?;
    let tracks = &require(&state.tracking, Stage::Track)?.tracks;
    let relations = &require(&state.coplanarity, Stage::Coplanarity)?.relations;
    let linear = require(&state.linear, Stage::Solve)?;
    let problem = ba::init_from_linear(
        linear,
        &segs,
        tracks,
        relations,
        rotations,
        &state.dataset.intrinsics,
        frame,
    )?;
    let result = if state.config.ba.enabled {
        ba::optimize(&problem, &state.config.ba, last_phase)?
    } else {
        let stats = problem.reprojection_stats()?;
        BaResult {
            problem,
            phases: Vec::new(),
            log: Vec::new(),
            initial_reprojection: stats,
            final_reprojection: stats,
        }
    };
    state.ba = Some(result);
    Ok(())
}

pub fn run_stage(state: &mut PipelineState, stage: Stage) -> Result<()> {
    match stage {
        Stage::Preprocess => run_preprocess(state),
        Stage::Frame => run_frame(state),
        Stage::RefineRotations => run_refine(state),
        Stage::Track => run_track(state),
        Stage::Coplanarity => run_coplanarity(state),
        Stage::Solve => run_solve(state),
        Stage::Ba => run_ba(state, state.config.ba.last_phase),
    }
}

/// Writes the CSV log of `stage`, if it has one.
pub fn write_stage_log(state: &PipelineState, stage: Stage, dir: &Path) -> Result<()> {
    match stage {
        Stage::Preprocess => write_segments(
            &dir.join("segments_preprocessed.csv"),
            require(&state.preprocessed, stage)?,
        ),
        Stage::Frame => Ok(()),
        Stage::RefineRotations => {
            let refined = require(&state.refined, stage)?;
            rotation::write_cost_log(&dir.join("rotation_cost.csv"), &refined.cost_log)
        }
        Stage::Track => tracking::write_tracks_csv(&dir.join("tracks.csv"), &require(&state.tracking, stage)?.tracks),
        Stage::Coplanarity => coplanarity::write_relations_csv(
            &dir.join("relations.csv"),
            &require(&state.coplanarity, stage)?.relations,
        ),
        Stage::Solve => require(&state.linear, stage)?.write_json(&dir.join("solution.json")),
        Stage::Ba => ba::write_cost_log(&dir.join("ba_cost.csv"), &require(&state.ba, stage)?.log),
    }
}

/// Runs every stage not yet completed, in order. The state is saved after
/// each stage, so a failure leaves the earlier outputs on disk. Errors carry
/// the name of the failing stage.
pub fn run_pipeline(state: &mut PipelineState, opts: &RunOptions) -> Result<Vec<StageTiming>> {
    let mut timings = Vec::new();
    for stage in Stage::ALL {
        if state.has(stage) {
            continue;
        }
        log::info!("running {stage}");
        let start = Instant::now();
        run_stage(state, stage).map_err(|e| e.in_stage(stage.name()))?;
        timings.push(StageTiming {
            stage: stage.name().to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = &opts.log_dir {
            write_stage_log(state, stage, dir).map_err(|e| e.in_stage(stage.name()))?;
        }
        if let Some(path) = &opts.state_path {
            save_state(path, state).map_err(|e| e.in_stage(stage.name()))?;
        }
    }
    Ok(timings)
}

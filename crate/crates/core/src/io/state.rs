//! Pipeline state file: `MSFM`, a little-endian `u32` version, a `u64`
//! payload length, then the JSON-encoded [`PipelineState`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ba::BaResult;
use crate::config::PipelineConfig;
use crate::coplanarity::CoplanarityResult;
use crate::error::{Error, Result};
use crate::geometry::LineSegment2D;
use crate::io::dataset::Dataset;
use crate::manhattan::FrameEstimate;
use crate::rotation::RefineOutcome;
use crate::sfm::SfmSolution;
use crate::tracking::TrackingResult;

pub const STATE_MAGIC: [u8; 4] = *b"MSFM";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Preprocess,
    Frame,
    RefineRotations,
    Track,
    Coplanarity,
    Solve,
    Ba,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Preprocess,
        Stage::Frame,
        Stage::RefineRotations,
        Stage::Track,
        Stage::Coplanarity,
        Stage::Solve,
        Stage::Ba,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Frame => "frame",
            Stage::RefineRotations => "refine-rotations",
            Stage::Track => "track",
            Stage::Coplanarity => "coplanarity",
            Stage::Solve => "solve",
            Stage::Ba => "ba",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|s| *s == self).expect("listed");
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inputs plus the output of every completed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub dataset: Dataset,
    pub config: PipelineConfig,
    pub preprocessed: Option<Vec<LineSegment2D>>,
    pub frame: Option<FrameEstimate>,
    pub refined: Option<RefineOutcome>,
    pub tracking: Option<TrackingResult>,
    pub coplanarity: Option<CoplanarityResult>,
    pub linear: Option<SfmSolution>,
    pub ba: Option<BaResult>,
}

impl PipelineState {
    pub fn new(dataset: Dataset, config: PipelineConfig) -> Self {
        PipelineState {
            dataset,
            config,
            preprocessed: None,
            frame: None,
            refined: None,
            tracking: None,
            coplanarity: None,
            linear: None,
            ba: None,
        }
    }

    pub fn has(&self, stage: Stage) -> bool {
        match stage {
            Stage::Preprocess => self.preprocessed.is_some(),
            Stage::Frame => self.frame.is_some(),
            Stage::RefineRotations => self.refined.is_some(),
            Stage::Track => self.tracking.is_some(),
            Stage::Coplanarity => self.coplanarity.is_some(),
            Stage::Solve => self.linear.is_some(),
            Stage::Ba => self.ba.is_some(),
        }
    }

    /// The last completed stage.
    pub fn completed(&self) -> Option<Stage> {
        Stage::ALL.iter().rev().copied().find(|s| self.has(*s))
    }

    /// Clears `stage` and everything after it.
    pub fn invalidate_from(&mut self, stage: Stage) {
        for s in Stage::ALL.iter().filter(|s| **s >= stage) {
            match s {
                Stage::Preprocess => self.preprocessed = None,
                Stage::Frame => self.frame = None,
                Stage::RefineRotations => self.refined = None,
                Stage::Track => self.tracking = None,
                Stage::Coplanarity => self.coplanarity = None,
                Stage::Solve => self.linear = None,
                Stage::Ba => self.ba = None,
            }
        }
    }

    /// Fails unless every stage before `stage` has completed.
    pub fn require_before(&self, stage: Stage) -> Result<()> {
        match stage.previous() {
            Some(p) if !self.has(p) => Err(Error::MissingStage(format!("`{stage}` needs `{p}` to run first"))),
            Some(p) => self.require_before(p),
            None => Ok(()),
        }
    }

    /// Completed stages form a prefix of the stage order.
    pub fn validate(&self) -> Result<()> {
        let mut gap = None;
        for s in Stage::ALL {
            match (self.has(s), gap) {
                (false, None) => gap = Some(s),
                (true, Some(g)) => {
                    return Err(Error::Parse(format!("state has `{s}` output but no `{g}` output")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn encode_state(state: &PipelineState) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(state).map_err(|e| Error::Parse(e.to_string()))?;
    let mut out = Vec::with_capacity(payload.len() + 16);
    out.extend_from_slice(&STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_state(bytes: &[u8]) -> Result<PipelineState> {
    if bytes.len() < 16 || bytes[..4] != STATE_MAGIC {
        return Err(Error::Parse("not a state file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != STATE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: STATE_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if body.len() as u64 != len {
        return Err(Error::Parse(format!(
            "state payload is {} bytes, header says {len}",
            body.len()
        )));
    }
    let state: PipelineState = serde_json::from_slice(body).map_err(|e| Error::Parse(e.to_string()))?;
    state.validate()?;
    Ok(state)
}

/// Writes through a temporary file so a failed write never leaves a
/// truncated state behind.
pub fn save_state(path: &Path, state: &PipelineState) -> Result<()> {
    let bytes = encode_state(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_state(path: &Path) -> Result<PipelineState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes)
}

//! Pipeline configuration. Every threshold is a named key in the JSON
//! document; angles are given in degrees and converted at use sites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub frame: FrameConfig,
    pub rotation: RotationConfig,
    pub tracking: TrackingConfig,
    pub coplanarity: CoplanarityConfig,
    pub sfm: SfmConfig,
    pub ba: BaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Maximum orientation difference for merging neighbors.
    pub merge_angle_deg: f64,
    /// Maximum endpoint gap for merging, as a fraction of `min(w, h)`.
    pub merge_gap_fraction: f64,
    /// Minimum kept segment length, as a fraction of `min(w, h)`.
    pub min_length_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    /// Half-width of the voting band around each interpretation plane, radians.
    pub vote_angle_rad: f64,
    /// Cone around gravity in which the vertical peak is searched.
    pub gravity_cone_deg: f64,
    /// Band around the great circle orthogonal to the vertical peak.
    pub orthogonal_band_deg: f64,
    /// Least-squares refinement of the grid peaks from classified segments.
    pub refine_peaks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationConfig {
    pub enabled: bool,
    /// A segment belongs to an axis when its plane normal is farther than this from it.
    pub manhattan_angle_deg: f64,
    /// Frames whose optical axes differ by less than this are neighbors.
    pub neighbor_angle_deg: f64,
    /// Weight of the relative-rotation smoothness term.
    pub smoothness_weight: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub relative_tolerance: f64,
    /// Optimize the Manhattan directions together with the rotations instead
    /// of holding them fixed and re-extracting between outer iterations.
    pub joint_frame: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Frame pairs are matched when their optical axes differ by less than this.
    pub pair_angle_deg: f64,
    /// Maximum segment distance, as a fraction of `min(w, h)`.
    pub match_distance_fraction: f64,
    pub match_angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoplanarityConfig {
    /// Maximum angle between the quad's average normal and the plane axis.
    pub normal_angle_deg: f64,
    /// Maximum mean deviation of quad normals from their average.
    pub deviation_deg: f64,
    /// Junction endpoint distance, as a fraction of `min(w, h)`.
    pub junction_distance_fraction: f64,
    /// Pixels whose normal is within this angle of up are floor.
    pub floor_angle_deg: f64,
    pub junction: bool,
    pub orthogonal: bool,
    pub parallel: bool,
    pub floor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmConfig {
    /// Lower bound on every depth variable, meters.
    pub depth_epsilon: f64,
    /// Weight of the soft mean-depth scale row.
    pub scale_weight: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaConfig {
    pub enabled: bool,
    pub reprojection_weight: f64,
    pub geometric_weight: f64,
    /// Weight of the soft scale-gauge residual.
    pub gauge_weight: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    /// Focal lengths stay within `[lo, hi]` times their initial value.
    pub focal_bounds: [f64; 2],
    /// Last phase to run (1: lines and translations, 2: + rotations, 3: + intrinsics).
    pub last_phase: u8,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            merge_angle_deg: 1.0,
            merge_gap_fraction: 0.05,
            min_length_fraction: 0.05,
        }
    }
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            vote_angle_rad: 0.03,
            gravity_cone_deg: 10.0,
            orthogonal_band_deg: 1.0,
            refine_peaks: true,
        }
    }
}

impl Default for RotationConfig {
    fn default() -> Self {
        RotationConfig {
            enabled: true,
            manhattan_angle_deg: 85.0,
            neighbor_angle_deg: 10.0,
            smoothness_weight: 0.1,
            max_outer_iterations: 10,
            max_inner_iterations: 100,
            relative_tolerance: 1e-10,
            joint_frame: true,
        }
    }
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            pair_angle_deg: 2.0,
            match_distance_fraction: 0.05,
            match_angle_deg: 1.0,
        }
    }
}

impl Default for CoplanarityConfig {
    fn default() -> Self {
        CoplanarityConfig {
            normal_angle_deg: 20.0,
            deviation_deg: 5.0,
            junction_distance_fraction: 0.1,
            floor_angle_deg: 25.0,
            junction: true,
            orthogonal: true,
            parallel: true,
            floor: true,
        }
    }
}

impl Default for SfmConfig {
    fn default() -> Self {
        SfmConfig {
            depth_epsilon: 1e-3,
            scale_weight: 1e6,
            max_iterations: 500,
        }
    }
}

impl Default for BaConfig {
    fn default() -> Self {
        BaConfig {
            enabled: true,
            reprojection_weight: 1.0,
            geometric_weight: 1e4,
            gauge_weight: 1e6,
            max_iterations: 200,
            relative_tolerance: 1e-10,
            focal_bounds: [0.5, 2.0],
            last_phase: 3,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("preprocess.merge_angle_deg", self.preprocess.merge_angle_deg),
            ("frame.vote_angle_rad", self.frame.vote_angle_rad),
            ("frame.gravity_cone_deg", self.frame.gravity_cone_deg),
            ("frame.orthogonal_band_deg", self.frame.orthogonal_band_deg),
            ("rotation.manhattan_angle_deg", self.rotation.manhattan_angle_deg),
            ("tracking.pair_angle_deg", self.tracking.pair_angle_deg),
            ("tracking.match_angle_deg", self.tracking.match_angle_deg),
            ("coplanarity.normal_angle_deg", self.coplanarity.normal_angle_deg),
            ("coplanarity.deviation_deg", self.coplanarity.deviation_deg),
            ("sfm.depth_epsilon", self.sfm.depth_epsilon),
            ("sfm.scale_weight", self.sfm.scale_weight),
            ("ba.reprojection_weight", self.ba.reprojection_weight),
            ("ba.geometric_weight", self.ba.geometric_weight),
            ("ba.gauge_weight", self.ba.gauge_weight),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("`{name}` must be positive, got {v}")));
            }
        }
        if !(self.rotation.smoothness_weight >= 0.0) {
            return Err(Error::Config(
                "`rotation.smoothness_weight` must be non-negative".into(),
            ));
        }
        if !(1..=3).contains(&self.ba.last_phase) {
            return Err(Error::Config("`ba.last_phase` must be 1, 2 or 3".into()));
        }
        let [lo, hi] = self.ba.focal_bounds;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return Err(Error::Config("`ba.focal_bounds` must bracket 1".into()));
        }
        Ok(())
    }
}

#![allow(dead_code)]

use msfm_core::synth::{generate_scene, GroundTruth, RoomConfig, SceneConfig};
use msfm_core::{Dataset, PipelineConfig};

/// A small room at reduced resolution that runs end to end in a second or two.
pub fn small_scene() -> SceneConfig {
    SceneConfig {
        rooms: vec![RoomConfig {
            n_frames: 48,
            n_wall_lines: 40,
            n_floor_lines: 10,
            ..RoomConfig::default()
        }],
        width: 320,
        height: 200,
        fx: 150.0,
        fy: 150.0,
        seed: 5,
        ..SceneConfig::default()
    }
}

/// Adjacent frames of [`small_scene`] are 7.5° apart.
pub fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.tracking.pair_angle_deg = 8.0;
    cfg
}

pub fn small_dataset() -> (Dataset, GroundTruth) {
    generate_scene(&small_scene()).unwrap()
}

//! Benchmark fixtures shared by the criterion targets.

use ivt_core::model::ModelConfig;
use ivt_core::synth::SceneSpec;
use ivt_core::train::{RunConfig, TrainConfig};

/// The desk-scale geometry used by the convergence fixture, with enough
/// frames for a `frames`-long clip.
pub fn desk(frames: usize) -> RunConfig {
    RunConfig {
        scene: SceneSpec {
            seed: 42,
            joints: 4,
            channels: 1,
            frames,
            amplitude: 0.0,
            ..SceneSpec::default()
        },
        model: ModelConfig::default(),
        train: TrainConfig {
            frames,
            ..TrainConfig::default()
        },
    }
}

//! Inputs shared by the benchmarks.

use vsr_core::dataseq::{ClipBatch, SequencePair};
use vsr_core::synth::{toy_clip, ToyConfig};
use vsr_core::trainer::TrainConfig;
use vsr_core::{Shape, Tensor};

/// Deterministic pseudo-random tensor in `[0, 1)`.
pub fn pattern(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..shape.len())
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f32 / (1u64 << 24) as f32
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// The toy-scale training configuration used by the step benchmarks.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        t_len: 5,
        batch: 2,
        crop_hr: 128,
        gen_res_blocks: 2,
        gen_filters: 16,
        align_res_blocks: 2,
        align_filters: 16,
        disc_blocks: 4,
        disc_base_filters: 8,
        disc_dense_width: 64,
        ..TrainConfig::default()
    }
}

/// A clip batch cut from toy clips matching [`toy_config`].
pub fn toy_batch(cfg: &TrainConfig) -> ClipBatch {
    let toy = ToyConfig {
        size: cfg.crop_hr,
        frames: cfg.t_len,
        ..Default::default()
    };
    let clips: Vec<_> = (0..cfg.batch as u64)
        .map(|s| {
            let pair = SequencePair::from_hr("b", toy_clip(&toy, s).unwrap().hr, cfg.scale, cfg.kernel).unwrap();
            (pair.hr.frames().to_vec(), pair.lr.frames().to_vec())
        })
        .collect();
    ClipBatch::from_clips(&clips, cfg.scale).unwrap()
}

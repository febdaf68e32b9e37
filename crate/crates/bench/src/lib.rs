//! Fixtures shared by the benchmarks in `benches/`.

use lumaflow_core::data::{generate_clips, generate_paired, PairedSample, SceneParams};
use lumaflow_core::{NetConfig, VelocityNet, VideoClip};

/// Default-resolution clips (32x32, 8 frames).
pub fn clips(count: usize) -> Vec<VideoClip> {
    generate_clips(count, 7, &SceneParams::default())
        .expect("default scene parameters are valid")
        .into_iter()
        .map(|(_, c)| c)
        .collect()
}

pub fn paired() -> PairedSample {
    generate_paired(1, 7, &SceneParams::default())
        .expect("default scene parameters are valid")
        .remove(0)
        .1
}

pub fn net(cfg: NetConfig) -> VelocityNet<f32> {
    VelocityNet::new(cfg, 1).expect("valid net config")
}

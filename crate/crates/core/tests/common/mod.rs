#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stylefuse::guidance::{BranchEvaluation, ConditioningBundle, GuidanceConfig, GuidanceMode};
use stylefuse::pipeline::backend::{Backend, Fusion};
use stylefuse::pipeline::StepParams;
use stylefuse::teacher::SamplingParams;
use stylefuse::tensor::FeatureMap;
use stylefuse::toy::ToyBackend;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn random_features(rng: &mut ChaCha8Rng, batch: usize, tokens: usize, channels: usize) -> FeatureMap {
    let values = normal_vec(rng, batch * tokens * channels);
    FeatureMap::new(Array3::from_shape_vec((batch, tokens, channels), values).unwrap()).unwrap()
}

pub fn random_latent(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    Array4::from_shape_vec(shape, normal_vec(rng, n)).unwrap()
}

pub fn toy() -> ToyBackend {
    ToyBackend::new(0).unwrap()
}

/// Prompt, empty negative prompt, positive and negative style images.
pub fn bundle(backend: &dyn Backend, prompt: &str) -> ConditioningBundle {
    let style = |name: &str| backend.encode_style(&std::fs::read(fixture(name)).unwrap()).unwrap();
    ConditioningBundle {
        text_pos: backend.encode_text(prompt).unwrap(),
        text_neg: backend.encode_text("").unwrap(),
        style_pos: Some(style("style_watercolor.png")),
        style_neg: Some(style("style_negative.png")),
    }
}

pub fn step_params(mode: GuidanceMode, scale: f64, fusion: Fusion) -> StepParams {
    StepParams {
        guidance: GuidanceConfig::from_scale(mode, scale),
        fusion,
        evaluation: BranchEvaluation::Batched,
    }
}

/// Student with the given fusion and text guidance; teacher with text guidance.
pub fn sampling(fusion: Fusion, scale: f64) -> SamplingParams {
    SamplingParams {
        student: step_params(GuidanceMode::TextCfg, scale, fusion),
        teacher: step_params(GuidanceMode::TextCfg, scale, fusion),
    }
}

pub fn bits(a: &Array4<f32>) -> Vec<u32> {
    a.iter().map(|v| v.to_bits()).collect()
}

//! Generation orchestration: conditioning, scheduling and mechanism wiring.

pub mod backend;
pub mod config;
pub mod dump;
pub mod schedule;
pub mod step;

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use config::{BackendKind, FusionMode, GenerationConfig, PartialConfig};
pub use schedule::{LatentState, TimestepSchedule, TRAIN_TIMESTEPS};
pub use step::{denoise_step, StepEvent, StepObserver, StepParams, TrajectoryRecorder};

use crate::error::{Error, Result};
use crate::guidance::ConditioningBundle;
use crate::teacher::{run_guided, Models};
use backend::Backend;
use step::{StepTimer, Tee};

/// Instantiates the backend named by a config.
///
/// Only the toy backend ships with this crate; `external` backends are
/// provided by implementing [`Backend`] and calling [`generate`] directly.
pub fn open_backend(kind: BackendKind) -> Result<Box<dyn Backend>> {
    match kind {
        BackendKind::Toy => Ok(Box::new(crate::toy::ToyBackend::new(crate::toy::DEFAULT_WEIGHT_SEED)?)),
        BackendKind::External => Err(Error::Backend(
            "no external backend is linked into this build; implement `Backend` and call `generate`".into(),
        )),
    }
}

fn read_image_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })
}

/// Encodes prompts and style images into the positive/negative bundle.
///
/// An empty negative prompt encodes as the empty string.
pub fn prepare_conditioning(config: &GenerationConfig, backend: &dyn Backend) -> Result<ConditioningBundle> {
    if config.prompt.trim().is_empty() {
        return Err(Error::config("prompt", "a non-empty prompt is required"));
    }
    let text_pos = backend.encode_text(&config.prompt)?;
    let text_neg = backend.encode_text(&config.negative_prompt)?;
    let style_pos = config
        .style_image_path
        .as_deref()
        .map(|p| backend.encode_style(&read_image_bytes(p)?))
        .transpose()?;
    let style_neg = config
        .negative_style_image_path
        .as_deref()
        .map(|p| backend.encode_style(&read_image_bytes(p)?))
        .transpose()?;
    Ok(ConditioningBundle {
        text_pos,
        text_neg,
        style_pos,
        style_neg,
    })
}

/// Timestep of one completed step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSummary {
    pub index: usize,
    pub timestep: u32,
    pub teacher_active: bool,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub image: RgbImage,
    pub latent: LatentState,
    pub trajectory: Vec<StepSummary>,
    /// Wall-clock seconds per step.
    pub step_seconds: Vec<f64>,
}

/// Runs one generation end to end and decodes the result.
pub fn generate(config: &GenerationConfig, backend: &dyn Backend) -> Result<Generation> {
    generate_observed(config, backend, &mut ())
}

/// [`generate`], reporting every step to `observer`.
pub fn generate_observed(
    config: &GenerationConfig,
    backend: &dyn Backend,
    observer: &mut dyn StepObserver,
) -> Result<Generation> {
    config.validate()?;
    for warning in config.warnings() {
        log::warn!("{warning}");
    }
    let schedule = TimestepSchedule::new(config.steps)?;
    let conds = prepare_conditioning(config, backend)?;
    let (c, h, w) = backend.latent_shape();
    let init = LatentState::initial_noise(config.seed, (1, c, h, w), &schedule);

    let mut timer = StepTimer::default();
    let models = Models {
        teacher: backend.teacher(),
        student: backend.denoiser(),
    };
    let teacher = config.teacher();
    let latent = run_guided(
        models,
        &init,
        &conds,
        &teacher,
        &schedule,
        &config.sampling_params(),
        &mut Tee(&mut timer, observer),
    )?;

    let image = backend.decode(&latent.z)?;
    let factor = backend.vae_scale_factor();
    if image.dimensions() != ((w * factor) as u32, (h * factor) as u32) {
        return Err(Error::Backend(format!(
            "decoder produced {:?}, expected {}x{}",
            image.dimensions(),
            w * factor,
            h * factor
        )));
    }
    let trajectory = (0..schedule.len())
        .map(|index| StepSummary {
            index,
            timestep: schedule.timestep(index),
            teacher_active: teacher.replaces(index),
        })
        .collect();
    Ok(Generation {
        image,
        latent,
        trajectory,
        step_seconds: timer.seconds,
    })
}

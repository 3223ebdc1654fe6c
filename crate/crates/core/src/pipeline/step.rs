use std::time::Duration;

use crate::error::Result;
use crate::guidance::{scfg_predict, BranchEvaluation, ConditioningBundle, GuidanceConfig};
use crate::pipeline::backend::{Denoiser, Fusion, Hooks};
use crate::pipeline::{LatentState, TimestepSchedule};
use crate::teacher::AttentionMapStore;

/// Per-step settings of one denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub guidance: GuidanceConfig,
    pub fusion: Fusion,
    pub evaluation: BranchEvaluation,
}

/// Guided noise prediction followed by one scheduler update.
pub fn denoise_step(
    denoiser: &dyn Denoiser,
    state: &LatentState,
    conds: &ConditioningBundle,
    schedule: &TimestepSchedule,
    params: &StepParams,
    hooks: &mut Hooks<'_>,
) -> Result<LatentState> {
    let eps = scfg_predict(
        denoiser,
        state,
        conds,
        &params.guidance,
        params.fusion,
        params.evaluation,
        hooks,
    )?;
    schedule.step(state, &eps)
}

/// What happened during one step of a run.
#[derive(Debug, Clone, Copy)]
pub struct StepEvent<'a> {
    pub step_index: usize,
    pub timestep: u32,
    /// Student latent after the update.
    pub student: &'a LatentState,
    /// Teacher latent after the update, on steps where the teacher ran.
    pub teacher: Option<&'a LatentState>,
    pub teacher_maps: Option<&'a AttentionMapStore>,
    /// Maps the student applied, when the observer asked for them.
    pub student_maps: Option<&'a AttentionMapStore>,
    pub elapsed: Duration,
}

/// Receives every step of a run as it completes.
pub trait StepObserver {
    /// Capture the student's applied maps on every step.
    fn wants_student_maps(&self) -> bool {
        false
    }

    fn on_step(&mut self, event: StepEvent<'_>) -> Result<()>;
}

impl StepObserver for () {
    fn on_step(&mut self, _event: StepEvent<'_>) -> Result<()> {
        Ok(())
    }
}

/// One recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedStep {
    pub step_index: usize,
    pub timestep: u32,
    pub student: LatentState,
    pub teacher: Option<LatentState>,
    pub teacher_maps: Option<AttentionMapStore>,
    pub student_maps: Option<AttentionMapStore>,
}

/// Keeps a full copy of every step. Meant for audits on small backends.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecorder {
    pub record_maps: bool,
    pub steps: Vec<RecordedStep>,
}

impl TrajectoryRecorder {
    pub fn with_maps() -> Self {
        Self {
            record_maps: true,
            steps: Vec::new(),
        }
    }

    pub fn student_latents(&self) -> impl Iterator<Item = &LatentState> {
        self.steps.iter().map(|s| &s.student)
    }
}

impl StepObserver for TrajectoryRecorder {
    fn wants_student_maps(&self) -> bool {
        self.record_maps
    }

    fn on_step(&mut self, event: StepEvent<'_>) -> Result<()> {
        self.steps.push(RecordedStep {
            step_index: event.step_index,
            timestep: event.timestep,
            student: event.student.clone(),
            teacher: event.teacher.cloned(),
            teacher_maps: event.teacher_maps.filter(|_| self.record_maps).cloned(),
            student_maps: event.student_maps.cloned(),
        });
        Ok(())
    }
}

/// Per-step wall-clock timings.
#[derive(Debug, Clone, Default)]
pub struct StepTimer {
    pub seconds: Vec<f64>,
}

impl StepObserver for StepTimer {
    fn on_step(&mut self, event: StepEvent<'_>) -> Result<()> {
        self.seconds.push(event.elapsed.as_secs_f64());
        Ok(())
    }
}

/// Fans one event out to two observers.
pub struct Tee<'a, 'b>(pub &'a mut dyn StepObserver, pub &'b mut dyn StepObserver);

impl StepObserver for Tee<'_, '_> {
    fn wants_student_maps(&self) -> bool {
        self.0.wants_student_maps() || self.1.wants_student_maps()
    }

    fn on_step(&mut self, event: StepEvent<'_>) -> Result<()> {
        self.0.on_step(event)?;
        self.1.on_step(event)
    }
}

//! Teacher-guided self-attention replacement.
//!
//! A teacher (the base model with its style branch off) denoises in lockstep
//! with the student from the same initial noise. For the first `t_cutoff`
//! steps the teacher steps first, its self-attention maps are captured at
//! every self-attention layer, and the student applies those maps to its own
//! values. After the cutoff the teacher is no longer evaluated.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::ConditioningBundle;
use crate::pipeline::backend::{Denoiser, Hooks, LayerId, LayerTopology};
use crate::pipeline::step::{denoise_step, StepEvent, StepObserver, StepParams};
use crate::pipeline::{LatentState, TimestepSchedule};
use crate::tensor::AttentionMap;

/// Self-attention maps of one denoising step, one entry per layer.
///
/// Each entry carries every head, shaped `(batch, heads, queries, keys)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapStore {
    step_index: usize,
    timestep: u32,
    entries: BTreeMap<LayerId, AttentionMap>,
}

impl AttentionMapStore {
    pub fn new(step_index: usize, timestep: u32) -> Self {
        Self {
            step_index,
            timestep,
            entries: BTreeMap::new(),
        }
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn timestep(&self) -> u32 {
        self.timestep
    }

    /// Inserting a layer twice keeps the latest map.
    pub fn insert(&mut self, layer: LayerId, map: AttentionMap) {
        self.entries.insert(layer, map);
    }

    pub fn get(&self, layer: LayerId) -> Option<&AttentionMap> {
        self.entries.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.entries.keys().copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (LayerId, &AttentionMap)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_entries(self) -> impl Iterator<Item = (LayerId, AttentionMap)> {
        self.entries.into_iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// The batch shared by every entry, `None` when empty or mixed.
    pub fn batch(&self) -> Option<usize> {
        let mut batches = self.entries.values().map(AttentionMap::batch);
        let first = batches.next()?;
        batches.all(|b| b == first).then_some(first)
    }

    /// Number of `f32` weights held.
    pub fn weight_count(&self) -> usize {
        self.entries.values().map(|m| m.as_array().len()).sum()
    }

    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|(k, m)| Ok((*k, m.batch_slice(start, len)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            step_index: self.step_index,
            timestep: self.timestep,
            entries,
        })
    }

    /// Stacks `other` after `self` along the batch axis, layer by layer.
    pub fn concat_batch(&self, other: &Self) -> Result<Self> {
        if self.entries.keys().ne(other.entries.keys()) {
            return Err(Error::Integrity("stores cover different layers".into()));
        }
        let entries = self
            .entries
            .iter()
            .map(|(k, a)| {
                let b = &other.entries[k];
                let stacked = ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()])
                    .map_err(|e| Error::Dimension(e.to_string()))?;
                Ok((*k, AttentionMap::from_array(stacked)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            step_index: self.step_index,
            timestep: self.timestep,
            entries,
        })
    }

    /// Exactly one entry per self-attention layer of `topology`, nothing else.
    pub fn ensure_complete(&self, topology: &LayerTopology) -> Result<()> {
        let expected: Vec<LayerId> = topology.self_attention().map(|l| l.id).collect();
        let actual: Vec<LayerId> = self.layers().collect();
        if expected != actual {
            return Err(Error::Integrity(format!(
                "step {} store covers layers {actual:?}, expected {expected:?}",
                self.step_index
            )));
        }
        Ok(())
    }
}

/// When and whether the teacher donates its self-attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub enabled: bool,
    /// Number of initial denoising steps with replacement.
    pub t_cutoff: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            t_cutoff: 20,
        }
    }
}

impl TeacherConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            t_cutoff: 0,
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.enabled && self.t_cutoff > total_steps {
            return Err(Error::config(
                "teacher_cutoff",
                format!("cutoff {} exceeds the {total_steps} denoising steps", self.t_cutoff),
            ));
        }
        Ok(())
    }

    /// Steps that use the teacher's maps.
    pub fn active_steps(&self) -> usize {
        if self.enabled {
            self.t_cutoff
        } else {
            0
        }
    }

    pub fn replaces(&self, step_index: usize) -> bool {
        step_index < self.active_steps()
    }
}

/// One teacher step with capture hooks on every self-attention layer.
pub fn capture_step(
    teacher: &dyn Denoiser,
    z_teacher: &LatentState,
    prompt_cond: &ConditioningBundle,
    schedule: &TimestepSchedule,
    params: &StepParams,
) -> Result<(LatentState, AttentionMapStore)> {
    let mut store = AttentionMapStore::new(z_teacher.step_index, z_teacher.timestep);
    let next = denoise_step(
        teacher,
        z_teacher,
        prompt_cond,
        schedule,
        params,
        &mut Hooks::capturing(&mut store),
    )?;
    store.ensure_complete(teacher.topology())?;
    Ok((next, store))
}

/// One student step with every self-attention map taken from `store`.
pub fn inject_step(
    student: &dyn Denoiser,
    z_student: &LatentState,
    full_cond: &ConditioningBundle,
    store: &AttentionMapStore,
    schedule: &TimestepSchedule,
    params: &StepParams,
) -> Result<LatentState> {
    denoise_step(
        student,
        z_student,
        full_cond,
        schedule,
        params,
        &mut Hooks::injecting(store),
    )
}

/// The two denoisers taking part in a guided run.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub teacher: &'a dyn Denoiser,
    pub student: &'a dyn Denoiser,
}

/// Step parameters for each side. The teacher never sees a style condition,
/// so its guidance mode is always text guidance.
#[derive(Debug, Clone, Copy)]
pub struct SamplingParams {
    pub student: StepParams,
    pub teacher: StepParams,
}

/// Runs the student over the whole schedule, with teacher maps injected for
/// the first `tcfg.t_cutoff` steps. Returns the student's final latent.
pub fn run_guided(
    models: Models<'_>,
    init_noise: &LatentState,
    conds: &ConditioningBundle,
    tcfg: &TeacherConfig,
    schedule: &TimestepSchedule,
    params: &SamplingParams,
    observer: &mut dyn StepObserver,
) -> Result<LatentState> {
    tcfg.validate(schedule.len())?;
    if init_noise.step_index != 0 {
        return Err(Error::config(
            "steps",
            format!("guided runs start at step 0, got {}", init_noise.step_index),
        ));
    }
    let teacher_cond = conds.text_only();
    let mut teacher_state = init_noise.clone();
    let mut student_state = init_noise.clone();

    for step in 0..schedule.len() {
        let started = Instant::now();
        let mut student_maps = observer
            .wants_student_maps()
            .then(|| AttentionMapStore::new(step, student_state.timestep));

        let teacher_store = if tcfg.replaces(step) {
            let (next, store) = capture_step(models.teacher, &teacher_state, &teacher_cond, schedule, &params.teacher)?;
            teacher_state = next;
            Some(store)
        } else {
            None
        };

        let mut hooks = Hooks {
            inject: teacher_store.as_ref(),
            capture: student_maps.as_mut(),
            taps: None,
        };
        student_state = denoise_step(
            models.student,
            &student_state,
            conds,
            schedule,
            &params.student,
            &mut hooks,
        )?;

        observer.on_step(StepEvent {
            step_index: step,
            timestep: schedule.timestep(step),
            student: &student_state,
            teacher: teacher_store.as_ref().map(|_| &teacher_state),
            teacher_maps: teacher_store.as_ref(),
            student_maps: student_maps.as_ref(),
            elapsed: started.elapsed(),
        })?;
    }
    Ok(student_state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::backend::{LayerInfo, LayerKind};

    fn topology() -> LayerTopology {
        let layer = |id, kind| LayerInfo {
            id: LayerId(id),
            name: format!("l{id}"),
            kind,
            tokens: 4,
            channels: 2,
            heads: 1,
        };
        LayerTopology {
            layers: vec![
                layer(0, LayerKind::SelfAttention),
                layer(1, LayerKind::DualCrossAttention),
                layer(2, LayerKind::SelfAttention),
            ],
        }
    }

    #[test]
    fn completeness_check() {
        let mut store = AttentionMapStore::new(0, 981);
        store.insert(LayerId(0), AttentionMap::uniform(1, 1, 4, 4));
        assert!(matches!(store.ensure_complete(&topology()), Err(Error::Integrity(_))));
        store.insert(LayerId(2), AttentionMap::uniform(1, 1, 4, 4));
        assert!(store.ensure_complete(&topology()).is_ok());
        store.insert(LayerId(1), AttentionMap::uniform(1, 1, 4, 4));
        assert!(store.ensure_complete(&topology()).is_err());
    }

    #[test]
    fn batch_concat_and_slice() {
        let mut a = AttentionMapStore::new(0, 1);
        a.insert(LayerId(0), AttentionMap::uniform(1, 2, 3, 3));
        let mut b = AttentionMapStore::new(0, 1);
        b.insert(LayerId(0), AttentionMap::uniform(1, 2, 3, 3));
        let both = a.concat_batch(&b).unwrap();
        assert_eq!(both.batch(), Some(2));
        assert_eq!(both.batch_slice(1, 1).unwrap(), b);
        assert_eq!(both.weight_count(), 2 * 2 * 3 * 3);

        let mut c = AttentionMapStore::new(0, 1);
        c.insert(LayerId(5), AttentionMap::uniform(1, 2, 3, 3));
        assert!(a.concat_batch(&c).is_err());
    }

    #[test]
    fn cutoff_validation() {
        assert!(TeacherConfig {
            enabled: true,
            t_cutoff: 11
        }
        .validate(10)
        .is_err());
        assert!(TeacherConfig {
            enabled: true,
            t_cutoff: 10
        }
        .validate(10)
        .is_ok());
        assert!(TeacherConfig {
            enabled: false,
            t_cutoff: 11
        }
        .validate(10)
        .is_ok());
        let t = TeacherConfig {
            enabled: true,
            t_cutoff: 3,
        };
        assert!(t.replaces(2) && !t.replaces(3));
        assert!(!TeacherConfig::disabled().replaces(0));
    }
}

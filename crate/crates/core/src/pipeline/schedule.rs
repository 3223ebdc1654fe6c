//! Deterministic DDIM (η = 0) scheduling over a scaled-linear beta schedule.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::guidance::NoisePrediction;

pub const TRAIN_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;

/// A latent at some point of the reverse process.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `(batch, channels, height, width)`
    pub z: Array4<f32>,
    /// Diffusion timestep of `z`; 0 once the schedule is exhausted.
    pub timestep: u32,
    /// Number of scheduler updates already applied.
    pub step_index: usize,
}

impl LatentState {
    /// Unit Gaussian noise drawn from `seed`, positioned at the first step of `schedule`.
    pub fn initial_noise(seed: u64, shape: (usize, usize, usize, usize), schedule: &TimestepSchedule) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
        Self {
            z,
            timestep: schedule.timestep(0),
            step_index: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
    }
}

/// Strictly decreasing inference timesteps with their cumulative alphas.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepSchedule {
    timesteps: Vec<u32>,
    /// `ᾱ` at each inference timestep.
    alphas_cumprod: Vec<f64>,
}

impl TimestepSchedule {
    /// Evenly spaced ("leading", offset 1) timesteps, e.g. 981, 961, …, 1 for 50 steps.
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 || steps >= TRAIN_TIMESTEPS {
            return Err(Error::config(
                "steps",
                format!("step count must be in 1..{TRAIN_TIMESTEPS}, got {steps}"),
            ));
        }
        let all = training_alphas_cumprod();
        let ratio = TRAIN_TIMESTEPS / steps;
        let timesteps: Vec<u32> = (0..steps).rev().map(|i| (i * ratio + 1) as u32).collect();
        let alphas_cumprod = timesteps.iter().map(|&t| all[t as usize]).collect();
        Ok(Self {
            timesteps,
            alphas_cumprod,
        })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn timesteps(&self) -> &[u32] {
        &self.timesteps
    }

    /// Timestep at `step_index`; 0 past the end.
    pub fn timestep(&self, step_index: usize) -> u32 {
        self.timesteps.get(step_index).copied().unwrap_or(0)
    }

    pub fn alpha_cumprod(&self, step_index: usize) -> f64 {
        self.alphas_cumprod.get(step_index).copied().unwrap_or(1.0)
    }

    /// Forward-noises a clean latent to the level of `step_index`.
    pub fn add_noise(&self, clean: &Array4<f32>, noise: &Array4<f32>, step_index: usize) -> Result<Array4<f32>> {
        if clean.dim() != noise.dim() {
            return Err(Error::Dimension("clean latent and noise differ in shape".into()));
        }
        let alpha = self.alpha_cumprod(step_index);
        let (a, b) = (alpha.sqrt(), (1.0 - alpha).sqrt());
        let mut out = clean.clone();
        out.zip_mut_with(noise, |x, &n| *x = (a * f64::from(*x) + b * f64::from(n)) as f32);
        Ok(out)
    }

    /// One deterministic DDIM update from `state` using the guided noise estimate.
    ///
    /// The last step jumps to `ᾱ = 1`, i.e. returns the predicted clean latent.
    pub fn step(&self, state: &LatentState, eps: &NoisePrediction) -> Result<LatentState> {
        let i = state.step_index;
        if i >= self.len() {
            return Err(Error::config(
                "steps",
                format!("step {i} is past the end of a {}-step schedule", self.len()),
            ));
        }
        if state.z.dim() != eps.dim() {
            return Err(Error::Dimension(format!(
                "latent {:?} and noise prediction {:?} differ",
                state.z.dim(),
                eps.dim()
            )));
        }
        let alpha = self.alphas_cumprod[i];
        let alpha_prev = self.alpha_cumprod(i + 1);
        let (sqrt_a, sqrt_1ma) = (alpha.sqrt(), (1.0 - alpha).sqrt());
        let (sqrt_ap, sqrt_1map) = (alpha_prev.sqrt(), (1.0 - alpha_prev).sqrt());

        let mut z = state.z.clone();
        z.zip_mut_with(eps.as_array(), |x, &e| {
            let clean = (f64::from(*x) - sqrt_1ma * e) / sqrt_a;
            *x = (sqrt_ap * clean + sqrt_1map * e) as f32;
        });
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("latent diverged at step {i}")));
        }
        Ok(LatentState {
            z,
            timestep: self.timestep(i + 1),
            step_index: i + 1,
        })
    }
}

fn training_alphas_cumprod() -> Vec<f64> {
    let (start, end) = (BETA_START.sqrt(), BETA_END.sqrt());
    let mut cumprod = 1.0;
    (0..TRAIN_TIMESTEPS)
        .map(|i| {
            let beta = (start + (end - start) * i as f64 / (TRAIN_TIMESTEPS - 1) as f64).powi(2);
            cumprod *= 1.0 - beta;
            cumprod
        })
        .collect()
}

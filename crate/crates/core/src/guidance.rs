//! Classifier-free guidance over text, and over text plus a negative style image.

use ndarray::{concatenate, s, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::backend::{BranchCondition, Denoiser, Fusion, Hooks};
use crate::pipeline::LatentState;
use crate::teacher::AttentionMapStore;
use crate::tensor::Embedding;

/// A noise estimate with the latent's shape. Held in `f64` so guidance
/// arithmetic adds no rounding of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction(Array4<f64>);

impl NoisePrediction {
    pub fn new(eps: Array4<f64>) -> Result<Self> {
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("noise prediction is not finite".into()));
        }
        Ok(Self(eps))
    }

    pub fn from_f32(eps: &Array4<f32>) -> Result<Self> {
        Self::new(eps.mapv(f64::from))
    }

    pub fn as_array(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array4<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }
}

/// Positive and negative conditions for both cross-attention branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub text_pos: Embedding,
    pub text_neg: Embedding,
    pub style_pos: Option<Embedding>,
    pub style_neg: Option<Embedding>,
}

impl ConditioningBundle {
    /// The same prompts with both style conditions removed.
    pub fn text_only(&self) -> Self {
        Self {
            text_pos: self.text_pos.clone(),
            text_neg: self.text_neg.clone(),
            style_pos: None,
            style_neg: None,
        }
    }

    /// `[positive, negative]` branch conditions for a guidance mode.
    ///
    /// Under text guidance the negative branch keeps the positive style, so
    /// only the text condition is pushed against.
    pub fn branches(&self, mode: GuidanceMode) -> Result<[BranchCondition<'_>; 2]> {
        let positive = BranchCondition {
            text: &self.text_pos,
            style: self.style_pos.as_ref(),
        };
        let negative_style = match mode {
            GuidanceMode::TextCfg => self.style_pos.as_ref(),
            GuidanceMode::StyleCfg => Some(self.style_neg.as_ref().ok_or_else(|| {
                Error::config(
                    "negative_style_image_path",
                    "style_cfg guidance needs a negative style image",
                )
            })?),
        };
        let negative = BranchCondition {
            text: &self.text_neg,
            style: negative_style,
        };
        Ok([positive, negative])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Negative branch: negative prompt, same style.
    #[default]
    TextCfg,
    /// Negative branch: negative prompt and negative style image.
    StyleCfg,
}

/// Guidance weight `w` in the `(1 + w)·pos − w·neg` convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub weight: f64,
}

impl GuidanceConfig {
    /// Converts a conventional guidance scale `s` (`neg + s·(pos − neg)`) to `w = s − 1`.
    pub fn from_scale(mode: GuidanceMode, scale: f64) -> Self {
        Self {
            mode,
            weight: scale - 1.0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.weight + 1.0
    }
}

/// Whether the two guidance branches share one denoiser call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchEvaluation {
    #[default]
    Batched,
    Sequential,
}

/// `(1 + w)·eps_cond − w·eps_neg`, evaluated as `eps_cond + w·(eps_cond − eps_neg)`
/// so that `w = 0` and equal branches return `eps_cond` bit-for-bit.
pub fn cfg_combine(eps_cond: &NoisePrediction, eps_neg: &NoisePrediction, w: f64) -> Result<NoisePrediction> {
    if eps_cond.dim() != eps_neg.dim() {
        return Err(Error::Dimension(format!(
            "guidance branches differ in shape: {:?} vs {:?}",
            eps_cond.dim(),
            eps_neg.dim()
        )));
    }
    let mut out = eps_cond.0.clone();
    out.zip_mut_with(&eps_neg.0, |c, &n| *c += w * (*c - n));
    NoisePrediction::new(out)
}

/// Evaluates the positive and negative branches on the same latent and
/// combines them with [`cfg_combine`].
///
/// An injected store must hold batch 1 (shared by both branches) or twice
/// the latent batch (`[positive…, negative…]`). Captured maps come back in
/// the same `[positive…, negative…]` layout.
pub fn scfg_predict(
    model: &dyn Denoiser,
    z: &LatentState,
    bundle: &ConditioningBundle,
    cfg: &GuidanceConfig,
    fusion: Fusion,
    evaluation: BranchEvaluation,
    hooks: &mut Hooks<'_>,
) -> Result<NoisePrediction> {
    let [positive, negative] = bundle.branches(cfg.mode)?;
    let (eps_pos, eps_neg) = match evaluation {
        BranchEvaluation::Batched if model.is_stateless() => {
            predict_batched(model, z, positive, negative, fusion, hooks)?
        }
        _ => predict_sequential(model, z, positive, negative, fusion, hooks)?,
    };
    if cfg.weight < 0.0 {
        log::warn!(
            "negative guidance weight {} pushes toward the negative branch",
            cfg.weight
        );
    }
    cfg_combine(&eps_pos, &eps_neg, cfg.weight)
}

fn predict_batched(
    model: &dyn Denoiser,
    z: &LatentState,
    positive: BranchCondition<'_>,
    negative: BranchCondition<'_>,
    fusion: Fusion,
    hooks: &mut Hooks<'_>,
) -> Result<(NoisePrediction, NoisePrediction)> {
    let batch = z.z.dim().0;
    let stacked = concatenate(Axis(0), &[z.z.view(), z.z.view()]).map_err(|e| Error::Dimension(e.to_string()))?;
    let conds: Vec<_> = std::iter::repeat_n(positive, batch)
        .chain(std::iter::repeat_n(negative, batch))
        .collect();
    let eps = model.predict(&stacked, z.timestep, &conds, fusion, hooks)?.into_array();
    Ok((
        NoisePrediction::new(eps.slice(s![..batch, .., .., ..]).to_owned())?,
        NoisePrediction::new(eps.slice(s![batch.., .., .., ..]).to_owned())?,
    ))
}

fn predict_sequential(
    model: &dyn Denoiser,
    z: &LatentState,
    positive: BranchCondition<'_>,
    negative: BranchCondition<'_>,
    fusion: Fusion,
    hooks: &mut Hooks<'_>,
) -> Result<(NoisePrediction, NoisePrediction)> {
    let batch = z.z.dim().0;
    let mut captured = Vec::with_capacity(2);
    let mut outputs = Vec::with_capacity(2);
    for (index, cond) in [positive, negative].into_iter().enumerate() {
        let sliced = match hooks.inject {
            Some(store) if store.batch() == Some(2 * batch) => Some(store.batch_slice(index * batch, batch)?),
            _ => None,
        };
        let mut local_capture = hooks
            .capture
            .as_ref()
            .map(|s| AttentionMapStore::new(s.step_index(), s.timestep()));
        let mut branch_hooks = Hooks {
            inject: sliced.as_ref().or(hooks.inject),
            capture: local_capture.as_mut(),
            taps: hooks.taps.as_deref_mut(),
        };
        let conds = vec![cond; batch];
        outputs.push(model.predict(&z.z, z.timestep, &conds, fusion, &mut branch_hooks)?);
        captured.extend(local_capture);
    }
    if let Some(target) = hooks.capture.as_deref_mut() {
        let [pos, neg]: [AttentionMapStore; 2] = captured
            .try_into()
            .map_err(|_| Error::Integrity("branch captures missing".into()))?;
        for (layer, map) in pos.concat_batch(&neg)?.into_entries() {
            target.insert(layer, map);
        }
    }
    let eps_neg = outputs.pop().expect("two branches");
    let eps_pos = outputs.pop().expect("two branches");
    Ok((eps_pos, eps_neg))
}

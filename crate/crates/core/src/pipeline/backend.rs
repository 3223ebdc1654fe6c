//! The contract a diffusion backend implements to be driven by the pipeline.
//!
//! A backend exposes a [`Denoiser`] whose self-attention layers route through
//! [`Hooks::self_attention`], which is where capture and injection happen.
//! The routing lives here, not in the backends, so every backend gets the
//! same store validation and the same injection arithmetic.

use std::fmt;

use image::RgbImage;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::attention::{self, apply_attention};
use crate::error::{Error, Result};
use crate::guidance::NoisePrediction;
use crate::teacher::AttentionMapStore;
use crate::tensor::{AttentionMap, Embedding, FeatureMap};

/// Stable index of a hookable layer within a denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId(pub usize);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    SelfAttention,
    /// Text and style cross-attention branches sharing one query.
    DualCrossAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: LayerId,
    pub name: String,
    pub kind: LayerKind,
    /// Query tokens seen by the layer.
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
}

/// Hook points of a denoiser, in evaluation order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerTopology {
    pub layers: Vec<LayerInfo>,
}

impl LayerTopology {
    pub fn self_attention(&self) -> impl Iterator<Item = &LayerInfo> {
        self.layers.iter().filter(|l| l.kind == LayerKind::SelfAttention)
    }

    pub fn cross_attention(&self) -> impl Iterator<Item = &LayerInfo> {
        self.layers.iter().filter(|l| l.kind == LayerKind::DualCrossAttention)
    }

    pub fn get(&self, id: LayerId) -> Option<&LayerInfo> {
        self.layers.iter().find(|l| l.id == id)
    }
}

/// How the text and style cross-attention outputs are merged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fusion {
    /// `f_text + λ · f_style`
    WeightedSum { lambda: f32 },
    /// AdaIN of the text features onto the style features' statistics.
    CrossModalAdain,
}

impl Fusion {
    pub fn fuse(&self, f_text: &FeatureMap, f_style: &FeatureMap) -> Result<FeatureMap> {
        match *self {
            Fusion::WeightedSum { lambda } => attention::weighted_sum_fusion(f_text, f_style, lambda),
            Fusion::CrossModalAdain => attention::cross_modal_adain_fusion(f_text, f_style),
        }
    }
}

/// The conditions one batch entry is evaluated under.
#[derive(Debug, Clone, Copy)]
pub struct BranchCondition<'a> {
    pub text: &'a Embedding,
    /// `None` disables the style branch entirely.
    pub style: Option<&'a Embedding>,
}

/// Everything recorded at one self-attention layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionTap {
    pub layer: LayerId,
    pub q: FeatureMap,
    pub k: FeatureMap,
    pub v: FeatureMap,
    /// The map actually applied, stored or freshly computed.
    pub map: AttentionMap,
    /// `map · v`, before the output projection.
    pub output: FeatureMap,
}

/// Branch outputs of one dual cross-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionTap {
    pub layer: LayerId,
    pub text: FeatureMap,
    pub style: Option<FeatureMap>,
    /// What was added to the residual stream.
    pub fused: FeatureMap,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Taps {
    pub self_attention: Vec<SelfAttentionTap>,
    pub cross_attention: Vec<CrossAttentionTap>,
}

/// Per-call instrumentation of a forward pass.
///
/// `inject` replaces every self-attention map with the stored one;
/// `capture` records the map each self-attention layer applied.
#[derive(Default)]
pub struct Hooks<'a> {
    pub inject: Option<&'a AttentionMapStore>,
    pub capture: Option<&'a mut AttentionMapStore>,
    pub taps: Option<&'a mut Taps>,
}

impl<'a> Hooks<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn injecting(store: &'a AttentionMapStore) -> Self {
        Self {
            inject: Some(store),
            ..Self::default()
        }
    }

    pub fn capturing(store: &'a mut AttentionMapStore) -> Self {
        Self {
            capture: Some(store),
            ..Self::default()
        }
    }

    /// Checks the hook set against a topology before a forward pass starts.
    pub fn validate(&self, topology: &LayerTopology) -> Result<()> {
        let Some(store) = self.inject else {
            return Ok(());
        };
        for id in store.layers() {
            match topology.get(id) {
                Some(info) if info.kind == LayerKind::SelfAttention => {}
                Some(info) => {
                    return Err(Error::Integrity(format!(
                        "store holds a map for cross-attention layer {}",
                        info.name
                    )))
                }
                None => return Err(Error::UnknownLayer(id.0)),
            }
        }
        for info in topology.self_attention() {
            if store.get(info.id).is_none() {
                return Err(Error::Integrity(format!(
                    "store is missing self-attention layer {} ({})",
                    info.id, info.name
                )));
            }
        }
        Ok(())
    }

    /// Runs one self-attention layer through the hooks.
    ///
    /// With an injected store the stored map is applied to this model's own
    /// `v`; otherwise the map is computed from `q` and `k`.
    pub fn self_attention(
        &mut self,
        layer: LayerId,
        q: &FeatureMap,
        k: &FeatureMap,
        v: &FeatureMap,
        heads: usize,
    ) -> Result<FeatureMap> {
        let map = match self.inject {
            Some(store) => {
                let stored = store
                    .get(layer)
                    .ok_or_else(|| Error::Integrity(format!("no stored map for self-attention layer {layer}")))?;
                let (sb, sh, sq, sk) = stored.dim();
                let expected_batch_ok = sb == q.batch() || sb == 1;
                if !expected_batch_ok || sh != heads || sq != q.tokens() || sk != k.tokens() {
                    return Err(Error::Dimension(format!(
                        "stored map {:?} does not fit layer {layer} (batch {}, heads {heads}, {} x {} tokens)",
                        stored.dim(),
                        q.batch(),
                        q.tokens(),
                        k.tokens()
                    )));
                }
                stored.clone()
            }
            None => attention::attention_map(q, k, heads)?,
        };
        let output = apply_attention(&map, v)?;
        if let Some(store) = self.capture.as_deref_mut() {
            store.insert(layer, map.clone());
        }
        if let Some(taps) = self.taps.as_deref_mut() {
            taps.self_attention.push(SelfAttentionTap {
                layer,
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                map,
                output: output.clone(),
            });
        }
        Ok(output)
    }

    pub fn record_cross_attention(&mut self, tap: impl FnOnce() -> CrossAttentionTap) {
        if let Some(taps) = self.taps.as_deref_mut() {
            taps.cross_attention.push(tap());
        }
    }
}

/// A noise-predicting network with hookable attention.
pub trait Denoiser: Send + Sync {
    fn topology(&self) -> &LayerTopology;

    /// Predicts the noise in `z` (`(batch, channels, height, width)`) at `timestep`.
    ///
    /// `conds` holds one condition per batch entry. Implementations must call
    /// [`Hooks::validate`] first and route every self-attention layer through
    /// [`Hooks::self_attention`].
    fn predict(
        &self,
        z: &Array4<f32>,
        timestep: u32,
        conds: &[BranchCondition<'_>],
        fusion: Fusion,
        hooks: &mut Hooks<'_>,
    ) -> Result<NoisePrediction>;

    /// Whether concurrent calls and batched branch evaluation are safe.
    fn is_stateless(&self) -> bool {
        true
    }
}

/// A complete text-to-image backend: denoiser, encoders and latent decoder.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// The style-transfer model.
    fn denoiser(&self) -> &dyn Denoiser;

    /// The base model used as layout teacher. Defaults to the student with its
    /// style branch disabled, which is what the pipeline does when it strips
    /// the style condition from the teacher's inputs.
    fn teacher(&self) -> &dyn Denoiser {
        self.denoiser()
    }

    fn encode_text(&self, text: &str) -> Result<Embedding>;

    /// Encodes a style image from its file bytes.
    fn encode_style(&self, image_bytes: &[u8]) -> Result<Embedding>;

    /// `(channels, height, width)` of one latent.
    fn latent_shape(&self) -> (usize, usize, usize);

    /// Image pixels per latent pixel along each axis.
    fn vae_scale_factor(&self) -> usize;

    /// Decodes a batch-1 latent into an 8-bit RGB image.
    fn decode(&self, z: &Array4<f32>) -> Result<RgbImage>;

    fn is_stateless(&self) -> bool {
        self.denoiser().is_stateless() && self.teacher().is_stateless()
    }
}

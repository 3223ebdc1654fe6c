//! A desk-scale deterministic backend whose attention layers are all hookable.
//!
//! Two resolution levels (8×8 and 4×4 tokens), each with one self-attention
//! layer, one dual text/style cross-attention block and a pointwise MLP.
//! Encoders are hash-based; the VAE is a fixed linear map.

mod denoiser;
mod encoders;

use image::RgbImage;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

pub use denoiser::ToyDenoiser;
pub use encoders::ToyEncoders;

use crate::error::{Error, Result};
use crate::pipeline::backend::{Backend, Denoiser};
use crate::tensor::Embedding;

use denoiser::WeightRng;

/// Weight seed of the backend selected by `backend = "toy"`.
pub const DEFAULT_WEIGHT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub latent_channels: usize,
    /// Side of the square latent; must be even.
    pub latent_size: usize,
    pub channels: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub text_tokens: usize,
    pub style_tokens: usize,
    pub vae_scale: usize,
    /// Reuse the text key/value projections for the style branch.
    pub tie_style_projections: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 8,
            channels: 16,
            heads: 2,
            embed_dim: 16,
            text_tokens: 8,
            style_tokens: 4,
            vae_scale: 4,
            tie_style_projections: false,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("latent_size", self.latent_size),
            ("channels", self.channels),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("text_tokens", self.text_tokens),
            ("style_tokens", self.style_tokens),
            ("vae_scale", self.vae_scale),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*key, "must be positive"));
        }
        if !self.latent_size.is_multiple_of(2) {
            return Err(Error::config("latent_size", "must be even"));
        }
        if !self.channels.is_multiple_of(2 * self.heads) {
            return Err(Error::config(
                "channels",
                "must split evenly into heads and sin/cos halves",
            ));
        }
        Ok(())
    }

    pub(crate) fn level_tokens(&self, level: usize) -> usize {
        let side = self.latent_size >> level;
        side * side
    }
}

/// Builds the denoiser and encoders from one weight seed.
pub fn build_toy(seed: u64) -> Result<(ToyDenoiser, ToyEncoders)> {
    build_toy_with(seed, &ToyConfig::default())
}

pub fn build_toy_with(seed: u64, config: &ToyConfig) -> Result<(ToyDenoiser, ToyEncoders)> {
    let mut rng = WeightRng::new(seed);
    let denoiser = ToyDenoiser::build(config, &mut rng)?;
    let encoders = ToyEncoders::build(config, &mut rng)?;
    Ok((denoiser, encoders))
}

/// The toy denoiser and encoders behind the [`Backend`] interface.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    denoiser: ToyDenoiser,
    encoders: ToyEncoders,
}

impl ToyBackend {
    pub fn new(seed: u64) -> Result<Self> {
        Self::with_config(seed, &ToyConfig::default())
    }

    pub fn with_config(seed: u64, config: &ToyConfig) -> Result<Self> {
        let (denoiser, encoders) = build_toy_with(seed, config)?;
        Ok(Self { denoiser, encoders })
    }

    pub fn toy_denoiser(&self) -> &ToyDenoiser {
        &self.denoiser
    }

    pub fn encoders(&self) -> &ToyEncoders {
        &self.encoders
    }
}

impl Backend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn denoiser(&self) -> &dyn Denoiser {
        &self.denoiser
    }

    fn encode_text(&self, text: &str) -> Result<Embedding> {
        self.encoders.encode_text(text)
    }

    fn encode_style(&self, image_bytes: &[u8]) -> Result<Embedding> {
        self.encoders.encode_style(image_bytes)
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        let c = self.denoiser.config();
        (c.latent_channels, c.latent_size, c.latent_size)
    }

    fn vae_scale_factor(&self) -> usize {
        self.denoiser.config().vae_scale
    }

    fn decode(&self, z: &Array4<f32>) -> Result<RgbImage> {
        self.encoders.decode(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::backend::LayerKind;

    #[test]
    fn same_seed_same_weights() {
        let (a, _) = build_toy(0).unwrap();
        let (b, _) = build_toy(0).unwrap();
        let (c, _) = build_toy(1).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        assert_ne!(a.weight_checksum(), c.weight_checksum());
    }

    #[test]
    fn topology_has_two_of_each() {
        let (d, _) = build_toy(0).unwrap();
        let topo = d.topology();
        assert_eq!(topo.self_attention().count(), 2);
        assert_eq!(topo.cross_attention().count(), 2);
        assert_eq!(topo.layers.len(), 4);
        assert_eq!(topo.layers[0].kind, LayerKind::SelfAttention);
        assert_eq!(topo.layers[0].tokens, 64);
        assert_eq!(topo.layers[2].tokens, 16);
    }

    #[test]
    fn config_validation() {
        let odd = ToyConfig {
            latent_size: 7,
            ..ToyConfig::default()
        };
        assert!(build_toy_with(0, &odd).is_err());
        let bad_heads = ToyConfig {
            heads: 3,
            ..ToyConfig::default()
        };
        assert!(bad_heads.validate().is_err());
    }

    #[test]
    fn text_encoder_is_deterministic_and_distinct() {
        let (_, enc) = build_toy(0).unwrap();
        let a = enc.encode_text("A red apple").unwrap();
        assert_eq!(a, enc.encode_text("a red, APPLE").unwrap());
        assert_ne!(a, enc.encode_text("A pink cup").unwrap());
        assert_ne!(enc.encode_text("").unwrap(), a);
        assert_eq!(enc.tokenize("")[0], "<bos>");
        assert_eq!(enc.tokenize("one two").len(), 8);
    }

    #[test]
    fn style_encoder_hashes_bytes() {
        let (_, enc) = build_toy(0).unwrap();
        let a = enc.encode_style(b"\x89PNG fake").unwrap();
        assert_eq!(a, enc.encode_style(b"\x89PNG fake").unwrap());
        assert_ne!(a, enc.encode_style(b"\x89PNG fakf").unwrap());
        assert_eq!((a.tokens(), a.dim()), (4, 16));
        assert!(enc.encode_style(b"").is_err());
    }

    #[test]
    fn vae_shapes() {
        let backend = ToyBackend::new(0).unwrap();
        let z = Array4::zeros((1, 4, 8, 8));
        let img = backend.decode(&z).unwrap();
        assert_eq!(img.dimensions(), (32, 32));
        let back = backend.encoders().encode_image(&img).unwrap();
        assert_eq!(back.dim(), (1, 4, 8, 8));
        assert!(backend.decode(&Array4::zeros((2, 4, 8, 8))).is_err());
    }
}

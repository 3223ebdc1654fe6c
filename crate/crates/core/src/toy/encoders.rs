use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Array4};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Embedding;

use super::denoiser::WeightRng;
use super::ToyConfig;

const BOS: &str = "<bos>";
const PAD: &str = "<pad>";

fn digest_seed(domain: &str, bytes: &[u8]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(bytes);
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

/// Hash-based encoders and a fixed linear VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoders {
    config: ToyConfig,
    /// `(scale², 3, latent_channels)`: one RGB-from-latent map per sub-pixel position.
    decoder: Array3<f32>,
    decoder_bias: [f32; 3],
    /// `(latent_channels, 3)`
    encoder: Array2<f32>,
}

impl ToyEncoders {
    pub(crate) fn build(config: &ToyConfig, rng: &mut WeightRng) -> Result<Self> {
        config.validate()?;
        let f = config.vae_scale;
        let c = config.latent_channels;
        let scale = 0.5 / (c as f32).sqrt();
        let decoder = rng
            .matrix(f * f * 3, c, scale)
            .into_shape_with_order((f * f, 3, c))
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let bias = rng.vector(3, 0.1);
        let encoder = rng.matrix(c, 3, 1.0 / 3f32.sqrt());
        Ok(Self {
            config: config.clone(),
            decoder,
            decoder_bias: [bias[0], bias[1], bias[2]],
            encoder,
        })
    }

    /// Lowercased alphanumeric words, framed by a start token and padded to a fixed length.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let words = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase);
        std::iter::once(BOS.to_string())
            .chain(words)
            .chain(std::iter::repeat(PAD.to_string()))
            .take(self.config.text_tokens)
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        let dim = self.config.embed_dim;
        let rows: Vec<Vec<f32>> = self
            .tokenize(text)
            .iter()
            .enumerate()
            .map(|(position, token)| {
                let mut rng = WeightRng::new(digest_seed("text", token.as_bytes()));
                let base = rng.vector(dim, 1.0);
                base.iter()
                    .enumerate()
                    .map(|(i, v)| v + 0.1 * ((position as f32 + 1.0) * (i as f32 + 1.0) * 0.37).sin())
                    .collect()
            })
            .collect();
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        let data =
            Array2::from_shape_vec((self.config.text_tokens, dim), flat).map_err(|e| Error::Encoder(e.to_string()))?;
        Embedding::new(data)
    }

    /// Style embedding keyed on the raw file bytes.
    pub fn encode_style(&self, image_bytes: &[u8]) -> Result<Embedding> {
        if image_bytes.is_empty() {
            return Err(Error::Encoder("style image is empty".into()));
        }
        let mut rng = WeightRng::new(digest_seed("style", image_bytes));
        Embedding::new(rng.matrix(self.config.style_tokens, self.config.embed_dim, 1.0))
    }

    /// Linear up-map from a batch-1 latent to an 8-bit image, `vae_scale` pixels per latent pixel.
    pub fn decode(&self, z: &Array4<f32>) -> Result<RgbImage> {
        let (batch, c, h, w) = z.dim();
        let s = self.config.latent_size;
        if batch != 1 || (c, h, w) != (self.config.latent_channels, s, s) {
            return Err(Error::Dimension(format!("cannot decode latent of shape {:?}", z.dim())));
        }
        let f = self.config.vae_scale;
        let mut image = RgbImage::new((w * f) as u32, (h * f) as u32);
        for (px, py, pixel) in image.enumerate_pixels_mut() {
            let (x, y) = (px as usize, py as usize);
            let sub = (y % f) * f + x % f;
            let mut rgb = [0u8; 3];
            for (channel, out) in rgb.iter_mut().enumerate() {
                let mut v = f64::from(self.decoder_bias[channel]);
                for k in 0..c {
                    v += f64::from(self.decoder[[sub, channel, k]]) * f64::from(z[[0, k, y / f, x / f]]);
                }
                *out = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
            }
            *pixel = Rgb(rgb);
        }
        Ok(image)
    }

    /// Linear down-map: block-average the image, then project RGB to latent channels.
    pub fn encode_image(&self, image: &RgbImage) -> Result<Array4<f32>> {
        let f = self.config.vae_scale;
        let s = self.config.latent_size;
        if image.dimensions() != ((s * f) as u32, (s * f) as u32) {
            return Err(Error::Dimension(format!(
                "toy VAE encodes {0}x{0} images, got {1:?}",
                s * f,
                image.dimensions()
            )));
        }
        let c = self.config.latent_channels;
        let mut z = Array4::zeros((1, c, s, s));
        for y in 0..s {
            for x in 0..s {
                let mut mean = [0f64; 3];
                for dy in 0..f {
                    for dx in 0..f {
                        let p = image.get_pixel((x * f + dx) as u32, (y * f + dy) as u32);
                        for (m, v) in mean.iter_mut().zip(p.0) {
                            *m += f64::from(v) / 127.5 - 1.0;
                        }
                    }
                }
                for k in 0..c {
                    let v: f64 = (0..3)
                        .map(|ch| f64::from(self.encoder[[k, ch]]) * mean[ch] / (f * f) as f64)
                        .sum();
                    z[[0, k, y, x]] = v as f32;
                }
            }
        }
        Ok(z)
    }
}

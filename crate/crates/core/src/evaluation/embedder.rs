use image::imageops::FilterType;
use image::RgbImage;
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tolerance on the norm of returned embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// Maps images and texts into a shared space of unit vectors.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

fn normalize(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

fn gaussian_from(seed: u64, len: usize) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Deterministic stand-in for a CLIP scorer.
///
/// Texts embed to a hash-seeded Gaussian direction; images are block-averaged
/// to 8×8 RGB and pushed through a fixed random projection. Scores carry no
/// semantics, only determinism and sensitivity to pixels and words.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    projection: Array2<f64>,
}

const MOCK_GRID: u32 = 8;

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        let features = (MOCK_GRID * MOCK_GRID * 3) as usize;
        let values = gaussian_from(0x5eed, features * dim);
        Self {
            dim,
            projection: Array2::from_shape_vec((dim, features), values).expect("sized above"),
        }
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(32)
    }
}

impl Embedder for MockEmbedder {
    fn name(&self) -> &str {
        "mock"
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Embedder("empty image".into()));
        }
        let small = image::imageops::resize(image, MOCK_GRID, MOCK_GRID, FilterType::Triangle);
        let features: Vec<f64> = small
            .pixels()
            .flat_map(|p| p.0)
            .map(|v| f64::from(v) / 127.5 - 1.0)
            .collect();
        let mut out: Vec<f64> = self
            .projection
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&features).map(|(w, x)| w * x).sum())
            .collect();
        // keeps a black image away from the zero vector
        out[0] += 1.0;
        Ok(normalize(&out))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let digest = Sha256::digest(text.trim().to_lowercase().as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"));
        Ok(normalize(&gaussian_from(seed, self.dim)))
    }
}

/// Returns fixed vectors; for exercising the scoring arithmetic.
#[derive(Debug, Clone)]
pub struct FixedEmbedder {
    pub image: Vec<f32>,
    pub text: Vec<f32>,
}

impl Embedder for FixedEmbedder {
    fn name(&self) -> &str {
        "fixed"
    }

    fn embed_image(&self, _image: &RgbImage) -> Result<Vec<f32>> {
        Ok(self.image.clone())
    }

    fn embed_text(&self, _text: &str) -> Result<Vec<f32>> {
        Ok(self.text.clone())
    }
}

//! Dense tensor newtypes shared by the kernels, the pipeline and the backends.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use crate::error::{Error, Result};

/// Tolerance on attention-row sums.
pub const ROW_SUM_TOLERANCE: f32 = 1e-5;

/// A batch of token sequences of channel vectors, shaped `(batch, tokens, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Array3<f32>);

impl FeatureMap {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (_, tokens, channels) = data.dim();
        if tokens == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "feature map needs at least one token and one channel, got {:?}",
                data.dim()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("feature map contains {bad}")));
        }
        Ok(Self(data))
    }

    pub fn from_shape_vec(shape: (usize, usize, usize), values: Vec<f32>) -> Result<Self> {
        let data = Array3::from_shape_vec(shape, values).map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(data)
    }

    /// Wraps an array produced by a kernel whose inputs were already validated.
    pub(crate) fn from_array(data: Array3<f32>) -> Self {
        debug_assert!(data.dim().1 > 0 && data.dim().2 > 0);
        Self(data)
    }

    pub fn zeros(batch: usize, tokens: usize, channels: usize) -> Self {
        Self(Array3::zeros((batch, tokens, channels)))
    }

    pub fn batch(&self) -> usize {
        self.0.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.0.dim().1
    }

    pub fn channels(&self) -> usize {
        self.0.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn into_array(self) -> Array3<f32> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Builds a batch-1 map from a `(tokens, channels)` sequence.
    pub fn from_sequence(seq: ArrayView2<'_, f32>) -> Self {
        Self(seq.to_owned().insert_axis(Axis(0)))
    }
}

/// Per-head row-stochastic query→key weights, shaped `(batch, heads, query_tokens, key_tokens)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(Array4<f32>);

impl AttentionMap {
    /// Validates row-stochasticity before wrapping.
    pub fn new(weights: Array4<f32>) -> Result<Self> {
        let (_, _, q, k) = weights.dim();
        if q == 0 || k == 0 {
            return Err(Error::Dimension(format!(
                "attention map needs non-empty query and key axes, got {:?}",
                weights.dim()
            )));
        }
        for row in weights.rows() {
            let mut sum = 0.0f64;
            for &w in row {
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Numeric(format!("attention weight {w} outside [0, 1]")));
                }
                sum += f64::from(w);
            }
            if (sum - 1.0).abs() > f64::from(ROW_SUM_TOLERANCE) {
                return Err(Error::Numeric(format!("attention row sums to {sum}")));
            }
        }
        Ok(Self(weights))
    }

    pub(crate) fn from_array(weights: Array4<f32>) -> Self {
        Self(weights)
    }

    /// Every query attends equally to every key.
    pub fn uniform(batch: usize, heads: usize, queries: usize, keys: usize) -> Self {
        Self(Array4::from_elem((batch, heads, queries, keys), 1.0 / keys as f32))
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }

    pub fn batch(&self) -> usize {
        self.0.dim().0
    }

    pub fn heads(&self) -> usize {
        self.0.dim().1
    }

    pub fn view(&self) -> ArrayView4<'_, f32> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array4<f32> {
        &self.0
    }

    pub fn into_array(self) -> Array4<f32> {
        self.0
    }

    /// Picks batch entries `[start, start + len)`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.batch() {
            return Err(Error::Dimension(format!(
                "batch slice {start}..{} out of range for batch {}",
                start + len,
                self.batch()
            )));
        }
        Ok(Self(
            self.0.slice(ndarray::s![start..start + len, .., .., ..]).to_owned(),
        ))
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f32 {
        self.0
            .rows()
            .into_iter()
            .map(|r| (r.iter().map(|&w| f64::from(w)).sum::<f64>() - 1.0).abs() as f32)
            .fold(0.0, f32::max)
    }
}

/// A conditioning sequence `(tokens, dim)` produced by a text or style encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Array2<f32>);

impl Embedding {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let (tokens, dim) = data.dim();
        if tokens == 0 || dim == 0 {
            return Err(Error::Dimension(format!(
                "embedding needs at least one token and one dim, got {:?}",
                data.dim()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding contains non-finite values".into()));
        }
        Ok(Self(data))
    }

    pub fn zeros(tokens: usize, dim: usize) -> Self {
        Self(Array2::zeros((tokens, dim)))
    }

    pub fn tokens(&self) -> usize {
        self.0.dim().0
    }

    pub fn dim(&self) -> usize {
        self.0.dim().1
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f32> {
        &self.0
    }
}

/// Little-endian `f32` bytes of any array, in logical (row-major) order.
pub fn le_bytes<'a>(values: impl IntoIterator<Item = &'a f32>) -> Vec<u8> {
    values.into_iter().flat_map(|v| v.to_le_bytes()).collect()
}

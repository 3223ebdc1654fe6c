//! Attention, instance statistics and the two cross-attention fusion rules.
//!
//! Storage is `f32`; every reduction (dot products, softmax sums, means and
//! variances) accumulates in `f64` and is rounded once on the way out.
//! All functions here are pure.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::tensor::{AttentionMap, FeatureMap};

/// Channels whose standard deviation falls below this are treated as constant.
pub const STD_EPSILON: f64 = 1e-5;

/// Query, key and value projections for one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
    heads: usize,
    head_dim: usize,
}

impl ProjectionSet {
    /// `w_q` maps query channels to `heads * head_dim`; `w_k`/`w_v` do the same for the key source.
    pub fn new(w_q: Array2<f32>, w_k: Array2<f32>, w_v: Array2<f32>, heads: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Dimension("attention needs at least one head".into()));
        }
        let inner = w_q.ncols();
        if inner == 0 || !inner.is_multiple_of(heads) {
            return Err(Error::Dimension(format!(
                "projection width {inner} is not a positive multiple of {heads} heads"
            )));
        }
        if w_k.ncols() != inner || w_v.ncols() != inner {
            return Err(Error::Dimension(format!(
                "projection widths differ: q {inner}, k {}, v {}",
                w_k.ncols(),
                w_v.ncols()
            )));
        }
        if w_k.nrows() != w_v.nrows() {
            return Err(Error::Dimension(format!(
                "key and value projections read different widths: {} vs {}",
                w_k.nrows(),
                w_v.nrows()
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            heads,
            head_dim: inner / heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn query(&self, f: &FeatureMap) -> Result<FeatureMap> {
        linear(f, &self.w_q, None)
    }

    /// Projects the key/value source into `(K, V)`.
    pub fn key_value(&self, source: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        Ok((linear(source, &self.w_k, None)?, linear(source, &self.w_v, None)?))
    }
}

/// Token-wise affine map `x · W + b`.
pub fn linear(x: &FeatureMap, weight: &Array2<f32>, bias: Option<&Array1<f32>>) -> Result<FeatureMap> {
    let (batch, tokens, channels) = x.dim();
    if weight.nrows() != channels {
        return Err(Error::Dimension(format!(
            "linear expects {} input channels, got {channels}",
            weight.nrows()
        )));
    }
    let out = weight.ncols();
    if let Some(b) = bias {
        if b.len() != out {
            return Err(Error::Dimension(format!(
                "bias has {} entries for {out} outputs",
                b.len()
            )));
        }
    }
    let mut result = Array3::<f32>::zeros((batch, tokens, out));
    let xs = x.view();
    for n in 0..batch {
        for t in 0..tokens {
            for o in 0..out {
                let mut acc = bias.map_or(0.0, |b| f64::from(b[o]));
                for c in 0..channels {
                    acc += f64::from(xs[[n, t, c]]) * f64::from(weight[[c, o]]);
                }
                result[[n, t, o]] = acc as f32;
            }
        }
    }
    Ok(FeatureMap::from_array(result))
}

fn ensure_finite(name: &str, f: &FeatureMap) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} contains non-finite values")))
    }
}

/// `softmax(Q Kᵀ / √d)` per head. `q` and `k` carry `heads * d` channels.
pub fn attention_map(q: &FeatureMap, k: &FeatureMap, heads: usize) -> Result<AttentionMap> {
    let (batch, queries, inner) = q.dim();
    let (kb, keys, k_inner) = k.dim();
    if heads == 0 || inner % heads != 0 {
        return Err(Error::Dimension(format!(
            "{inner} channels cannot be split into {heads} heads"
        )));
    }
    if kb != batch || k_inner != inner {
        return Err(Error::Dimension(format!(
            "query {:?} and key {:?} are not compatible",
            q.dim(),
            k.dim()
        )));
    }
    ensure_finite("query", q)?;
    ensure_finite("key", k)?;

    let head_dim = inner / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (qv, kv) = (q.view(), k.view());
    let mut weights = Array4::<f32>::zeros((batch, heads, queries, keys));
    let mut scores = vec![0.0f64; keys];
    for n in 0..batch {
        for h in 0..heads {
            let channels = h * head_dim..(h + 1) * head_dim;
            for i in 0..queries {
                for (j, score) in scores.iter_mut().enumerate() {
                    let dot: f64 = channels
                        .clone()
                        .map(|c| f64::from(qv[[n, i, c]]) * f64::from(kv[[n, j, c]]))
                        .sum();
                    *score = dot * scale;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    weights[[n, h, i, j]] = (s / total) as f32;
                }
            }
        }
    }
    Ok(AttentionMap::from_array(weights))
}

/// `M · V` per head. A batch-1 map is broadcast over every batch entry of `v`.
pub fn apply_attention(map: &AttentionMap, v: &FeatureMap) -> Result<FeatureMap> {
    let (mb, heads, queries, keys) = map.dim();
    let (batch, v_tokens, inner) = v.dim();
    if v_tokens != keys {
        return Err(Error::Dimension(format!(
            "map has {keys} keys but values have {v_tokens} tokens"
        )));
    }
    if mb != batch && mb != 1 {
        return Err(Error::Dimension(format!(
            "map batch {mb} does not match value batch {batch}"
        )));
    }
    if inner % heads != 0 {
        return Err(Error::Dimension(format!(
            "{inner} value channels cannot be split into {heads} heads"
        )));
    }
    ensure_finite("value", v)?;

    let head_dim = inner / heads;
    let (mv, vv) = (map.view(), v.view());
    let mut out = Array3::<f32>::zeros((batch, queries, inner));
    for n in 0..batch {
        let mn = if mb == 1 { 0 } else { n };
        for h in 0..heads {
            for i in 0..queries {
                for c in h * head_dim..(h + 1) * head_dim {
                    let acc: f64 = (0..keys)
                        .map(|j| f64::from(mv[[mn, h, i, j]]) * f64::from(vv[[n, j, c]]))
                        .sum();
                    out[[n, i, c]] = acc as f32;
                }
            }
        }
    }
    Ok(FeatureMap::from_array(out))
}

/// Attention output together with the map that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Attended {
    pub output: FeatureMap,
    pub map: AttentionMap,
}

/// `A(Q, K, V) = softmax(Q Kᵀ / √d) V`, exposing the map for capture.
pub fn attention(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap, heads: usize) -> Result<Attended> {
    if k.tokens() != v.tokens() || k.batch() != v.batch() {
        return Err(Error::Dimension(format!(
            "key {:?} and value {:?} disagree",
            k.dim(),
            v.dim()
        )));
    }
    let map = attention_map(q, k, heads)?;
    let output = apply_attention(&map, v)?;
    Ok(Attended { output, map })
}

/// Per-instance, per-channel mean and population standard deviation over tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStatistics {
    /// `(batch, channels)`
    pub mean: Array2<f64>,
    /// `(batch, channels)`, population std, always ≥ 0
    pub std: Array2<f64>,
}

pub fn channel_statistics(f: &FeatureMap) -> ChannelStatistics {
    let (batch, tokens, channels) = f.dim();
    let view = f.view();
    let mut mean = Array2::<f64>::zeros((batch, channels));
    let mut std = Array2::<f64>::zeros((batch, channels));
    for n in 0..batch {
        for c in 0..channels {
            let column = view.index_axis(Axis(0), n);
            let m = column.column(c).iter().map(|&x| f64::from(x)).sum::<f64>() / tokens as f64;
            let var = column
                .column(c)
                .iter()
                .map(|&x| (f64::from(x) - m).powi(2))
                .sum::<f64>()
                / tokens as f64;
            mean[[n, c]] = m;
            std[[n, c]] = var.sqrt();
        }
    }
    ChannelStatistics { mean, std }
}

/// Re-statistics `x` to the per-channel mean and std of `y`.
///
/// Token counts may differ; batch sizes must match. Channels of `x` with
/// std below [`STD_EPSILON`] normalize to zero, so they come out as `μ(y)`.
pub fn adain(x: &FeatureMap, y: &FeatureMap) -> Result<FeatureMap> {
    if x.channels() != y.channels() {
        return Err(Error::Dimension(format!(
            "adain channel mismatch: {} vs {}",
            x.channels(),
            y.channels()
        )));
    }
    if x.batch() != y.batch() {
        return Err(Error::Dimension(format!(
            "adain batch mismatch: {} vs {}",
            x.batch(),
            y.batch()
        )));
    }
    let content = channel_statistics(x);
    let style = channel_statistics(y);
    let (batch, tokens, channels) = x.dim();
    let xv = x.view();
    let mut out = Array3::<f32>::zeros((batch, tokens, channels));
    for n in 0..batch {
        for c in 0..channels {
            let (mu_x, sigma_x) = (content.mean[[n, c]], content.std[[n, c]]);
            let (mu_y, sigma_y) = (style.mean[[n, c]], style.std[[n, c]]);
            for t in 0..tokens {
                let normalized = if sigma_x < STD_EPSILON {
                    0.0
                } else {
                    (f64::from(xv[[n, t, c]]) - mu_x) / sigma_x
                };
                out[[n, t, c]] = (sigma_y * normalized + mu_y) as f32;
            }
        }
    }
    Ok(FeatureMap::from_array(out))
}

/// Adapter baseline: `f_text + λ · f_style`.
pub fn weighted_sum_fusion(f_text: &FeatureMap, f_style: &FeatureMap, lambda: f32) -> Result<FeatureMap> {
    if f_text.dim() != f_style.dim() {
        return Err(Error::Dimension(format!(
            "weighted sum shape mismatch: {:?} vs {:?}",
            f_text.dim(),
            f_style.dim()
        )));
    }
    let mut out = f_text.as_array().clone();
    out.zip_mut_with(f_style.as_array(), |t, &s| *t += lambda * s);
    Ok(FeatureMap::from_array(out))
}

/// Normalizes the text-queried features by the style-queried features' statistics.
///
/// Both inputs are outputs of cross-attention driven by the same queries.
pub fn cross_modal_adain_fusion(f_text: &FeatureMap, f_style: &FeatureMap) -> Result<FeatureMap> {
    adain(f_text, f_style)
}

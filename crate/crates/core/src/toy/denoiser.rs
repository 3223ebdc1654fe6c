use ndarray::{concatenate, Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::attention::{attention, linear, ProjectionSet};
use crate::error::{Error, Result};
use crate::guidance::NoisePrediction;
use crate::pipeline::backend::{
    BranchCondition, CrossAttentionTap, Denoiser, Fusion, Hooks, LayerId, LayerInfo, LayerKind, LayerTopology,
};
use crate::tensor::{Embedding, FeatureMap};

use super::ToyConfig;

/// Deterministic weight source: standard normals from a ChaCha stream.
pub(crate) struct WeightRng(ChaCha8Rng);

impl WeightRng {
    pub(crate) fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn matrix(&mut self, rows: usize, cols: usize, scale: f32) -> Array2<f32> {
        Array2::from_shape_simple_fn((rows, cols), || {
            let v: f32 = StandardNormal.sample(&mut self.0);
            v * scale
        })
    }

    pub(crate) fn vector(&mut self, len: usize, scale: f32) -> Array1<f32> {
        Array1::from_shape_simple_fn(len, || {
            let v: f32 = StandardNormal.sample(&mut self.0);
            v * scale
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: Array2<f32>,
    bias: Array1<f32>,
}

impl Dense {
    fn new(rng: &mut WeightRng, input: usize, output: usize) -> Self {
        Self {
            weight: rng.matrix(input, output, 1.0 / (input as f32).sqrt()),
            bias: rng.vector(output, 0.1),
        }
    }

    fn apply(&self, x: &FeatureMap) -> Result<FeatureMap> {
        linear(x, &self.weight, Some(&self.bias))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SelfAttentionLayer {
    id: LayerId,
    projections: ProjectionSet,
    out: Dense,
}

#[derive(Debug, Clone, PartialEq)]
struct DualCrossAttentionLayer {
    id: LayerId,
    text: ProjectionSet,
    style: ProjectionSet,
    /// Shared by both branches, applied before fusion.
    out: Dense,
}

#[derive(Debug, Clone, PartialEq)]
struct Level {
    self_attention: SelfAttentionLayer,
    cross_attention: DualCrossAttentionLayer,
    mix_in: Dense,
    mix_out: Dense,
}

/// Two-level attention denoiser: full resolution, then 2×2-pooled, then back.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: ToyConfig,
    input: Dense,
    time: Dense,
    levels: Vec<Level>,
    output: Dense,
    topology: LayerTopology,
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl ToyDenoiser {
    pub(crate) fn build(config: &ToyConfig, rng: &mut WeightRng) -> Result<Self> {
        config.validate()?;
        let d = config.channels;
        let input = Dense::new(rng, config.latent_channels, d);
        let time = Dense::new(rng, d, d);

        let mut levels = Vec::new();
        let mut layers = Vec::new();
        for level in 0..2 {
            let tokens = config.level_tokens(level);
            let self_id = LayerId(layers.len());
            layers.push(LayerInfo {
                id: self_id,
                name: format!("level{level}.self_attn"),
                kind: LayerKind::SelfAttention,
                tokens,
                channels: d,
                heads: config.heads,
            });
            let cross_id = LayerId(layers.len());
            layers.push(LayerInfo {
                id: cross_id,
                name: format!("level{level}.cross_attn"),
                kind: LayerKind::DualCrossAttention,
                tokens,
                channels: d,
                heads: config.heads,
            });

            let scale = 1.0 / (d as f32).sqrt();
            let self_attention = SelfAttentionLayer {
                id: self_id,
                projections: ProjectionSet::new(
                    rng.matrix(d, d, scale),
                    rng.matrix(d, d, scale),
                    rng.matrix(d, d, scale),
                    config.heads,
                )?,
                out: Dense::new(rng, d, d),
            };

            let e_scale = 1.0 / (config.embed_dim as f32).sqrt();
            let w_q = rng.matrix(d, d, scale);
            let text_k = rng.matrix(config.embed_dim, d, e_scale);
            let text_v = rng.matrix(config.embed_dim, d, e_scale);
            let mut style_k = rng.matrix(config.embed_dim, d, e_scale);
            let mut style_v = rng.matrix(config.embed_dim, d, e_scale);
            if config.tie_style_projections {
                style_k = text_k.clone();
                style_v = text_v.clone();
            }
            let cross_attention = DualCrossAttentionLayer {
                id: cross_id,
                text: ProjectionSet::new(w_q.clone(), text_k, text_v, config.heads)?,
                style: ProjectionSet::new(w_q, style_k, style_v, config.heads)?,
                out: Dense::new(rng, d, d),
            };

            levels.push(Level {
                self_attention,
                cross_attention,
                mix_in: Dense::new(rng, d, 2 * d),
                mix_out: Dense::new(rng, 2 * d, d),
            });
        }
        let output = Dense::new(rng, d, config.latent_channels);

        Ok(Self {
            config: config.clone(),
            input,
            time,
            levels,
            output,
            topology: LayerTopology { layers },
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// SHA-256 over every weight, in construction order.
    pub fn weight_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |values: &[f32]| {
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        };
        let dense = |d: &Dense, feed: &mut dyn FnMut(&[f32])| {
            feed(d.weight.as_slice().expect("standard layout"));
            feed(d.bias.as_slice().expect("standard layout"));
        };
        dense(&self.input, &mut feed);
        dense(&self.time, &mut feed);
        for level in &self.levels {
            for p in [
                &level.self_attention.projections,
                &level.cross_attention.text,
                &level.cross_attention.style,
            ] {
                for w in [&p.w_q, &p.w_k, &p.w_v] {
                    feed(w.as_slice().expect("standard layout"));
                }
            }
            dense(&level.self_attention.out, &mut feed);
            dense(&level.cross_attention.out, &mut feed);
            dense(&level.mix_in, &mut feed);
            dense(&level.mix_out, &mut feed);
        }
        dense(&self.output, &mut feed);
        hex::encode(hasher.finalize())
    }

    fn timestep_embedding(&self, timestep: u32) -> Array1<f32> {
        let d = self.config.channels;
        let half = d / 2;
        let mut emb = Array1::zeros(d);
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let angle = f64::from(timestep) * freq;
            emb[i] = angle.sin() as f32;
            emb[i + half] = angle.cos() as f32;
        }
        emb
    }

    fn check_inputs(&self, z: &Array4<f32>, conds: &[BranchCondition<'_>]) -> Result<()> {
        let (batch, c, h, w) = z.dim();
        let s = self.config.latent_size;
        if (c, h, w) != (self.config.latent_channels, s, s) {
            return Err(Error::Dimension(format!(
                "toy denoiser expects latents of {:?}, got {:?}",
                (self.config.latent_channels, s, s),
                (c, h, w)
            )));
        }
        if conds.len() != batch {
            return Err(Error::Dimension(format!(
                "{} conditions for a batch of {batch}",
                conds.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent is not finite".into()));
        }
        for cond in conds {
            let embeddings = std::iter::once(cond.text).chain(cond.style);
            for e in embeddings {
                if e.dim() != self.config.embed_dim {
                    return Err(Error::Dimension(format!(
                        "embedding width {} does not match {}",
                        e.dim(),
                        self.config.embed_dim
                    )));
                }
            }
        }
        Ok(())
    }

    fn self_attention(&self, layer: &SelfAttentionLayer, h: &FeatureMap, hooks: &mut Hooks<'_>) -> Result<FeatureMap> {
        let q = layer.projections.query(h)?;
        let (k, v) = layer.projections.key_value(h)?;
        let attended = hooks.self_attention(layer.id, &q, &k, &v, layer.projections.heads())?;
        layer.out.apply(&attended)
    }

    fn cross_attention(
        &self,
        layer: &DualCrossAttentionLayer,
        h: &FeatureMap,
        conds: &[BranchCondition<'_>],
        fusion: Fusion,
        hooks: &mut Hooks<'_>,
    ) -> Result<FeatureMap> {
        let heads = layer.text.heads();
        let mut texts = Vec::with_capacity(conds.len());
        let mut styles = Vec::with_capacity(conds.len());
        let mut fused = Vec::with_capacity(conds.len());
        for (n, cond) in conds.iter().enumerate() {
            let hn = FeatureMap::from_array(h.as_array().slice(ndarray::s![n..n + 1, .., ..]).to_owned());
            let q = layer.text.query(&hn)?;
            let f_text = branch(&layer.text, &q, cond.text, heads, &layer.out)?;
            let merged = match cond.style {
                Some(style) => {
                    let f_style = branch(&layer.style, &q, style, heads, &layer.out)?;
                    let merged = fusion.fuse(&f_text, &f_style)?;
                    styles.push(f_style);
                    merged
                }
                None => f_text.clone(),
            };
            texts.push(f_text);
            fused.push(merged);
        }
        let fused = stack(&fused)?;
        hooks.record_cross_attention(|| CrossAttentionTap {
            layer: layer.id,
            text: stack(&texts).expect("validated shapes"),
            style: (styles.len() == conds.len()).then(|| stack(&styles).expect("validated shapes")),
            fused: fused.clone(),
        });
        Ok(fused)
    }

    fn mix(&self, level: &Level, h: &FeatureMap) -> Result<FeatureMap> {
        let hidden = level.mix_in.apply(h)?.into_array().mapv(silu);
        level.mix_out.apply(&FeatureMap::from_array(hidden))
    }

    fn level(
        &self,
        level: &Level,
        mut h: FeatureMap,
        conds: &[BranchCondition<'_>],
        fusion: Fusion,
        hooks: &mut Hooks<'_>,
    ) -> Result<FeatureMap> {
        h = add(&h, &self.self_attention(&level.self_attention, &h, hooks)?);
        h = add(
            &h,
            &self.cross_attention(&level.cross_attention, &h, conds, fusion, hooks)?,
        );
        h = add(&h, &self.mix(level, &h)?);
        Ok(h)
    }

    fn pool(&self, h: &FeatureMap) -> FeatureMap {
        let s = self.config.latent_size;
        let half = s / 2;
        let (batch, _, d) = h.dim();
        let hv = h.view();
        let out = Array3::from_shape_fn((batch, half * half, d), |(n, t, c)| {
            let (y, x) = (t / half, t % half);
            let sum: f32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(dy, dx)| hv[[n, (2 * y + dy) * s + 2 * x + dx, c]])
                .sum();
            sum * 0.25
        });
        FeatureMap::from_array(out)
    }

    fn upsample(&self, h: &FeatureMap) -> FeatureMap {
        let s = self.config.latent_size;
        let half = s / 2;
        let (batch, _, d) = h.dim();
        let hv = h.view();
        let out = Array3::from_shape_fn((batch, s * s, d), |(n, t, c)| {
            let (y, x) = (t / s, t % s);
            hv[[n, (y / 2) * half + x / 2, c]]
        });
        FeatureMap::from_array(out)
    }
}

fn branch(
    proj: &ProjectionSet,
    q: &FeatureMap,
    embedding: &Embedding,
    heads: usize,
    out: &Dense,
) -> Result<FeatureMap> {
    let (k, v) = proj.key_value(&FeatureMap::from_sequence(embedding.view()))?;
    out.apply(&attention(q, &k, &v, heads)?.output)
}

fn add(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    FeatureMap::from_array(a.as_array() + b.as_array())
}

fn stack(maps: &[FeatureMap]) -> Result<FeatureMap> {
    let views: Vec<_> = maps.iter().map(FeatureMap::view).collect();
    concatenate(Axis(0), &views)
        .map(FeatureMap::from_array)
        .map_err(|e| Error::Dimension(e.to_string()))
}

impl Denoiser for ToyDenoiser {
    fn topology(&self) -> &LayerTopology {
        &self.topology
    }

    fn predict(
        &self,
        z: &Array4<f32>,
        timestep: u32,
        conds: &[BranchCondition<'_>],
        fusion: Fusion,
        hooks: &mut Hooks<'_>,
    ) -> Result<NoisePrediction> {
        hooks.validate(&self.topology)?;
        self.check_inputs(z, conds)?;
        let (batch, channels, height, width) = z.dim();

        // (b, c, h, w) -> (b, h*w, c)
        let tokens = z
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch, height * width, channels))
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let mut h = self.input.apply(&FeatureMap::new(tokens)?)?;
        let t_emb = self
            .time
            .apply(&FeatureMap::from_array(
                self.timestep_embedding(timestep)
                    .insert_axis(Axis(0))
                    .insert_axis(Axis(0)),
            ))?
            .into_array()
            .mapv(silu);
        h = FeatureMap::from_array(h.as_array() + &t_emb);

        let skip = self.level(&self.levels[0], h, conds, fusion, hooks)?;
        let coarse = self.level(&self.levels[1], self.pool(&skip), conds, fusion, hooks)?;
        let h = add(&skip, &self.upsample(&coarse));

        let eps_tokens = self.output.apply(&h)?.into_array();
        let eps = eps_tokens
            .into_shape_with_order((batch, height, width, channels))
            .map_err(|e| Error::Dimension(e.to_string()))?
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned();
        NoisePrediction::from_f32(&eps)
    }
}

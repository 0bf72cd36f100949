//! Clip embedders: a small space-time transformer over cube tokens, or a
//! table of externally computed clip vectors looked up by id.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use kinalign_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Dropout, Linear, TransformerConfig, TransformerStack};
use crate::signal::{VideoClip, FRAMES_PER_CLIP};

pub const PREFIX: &str = "vid";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyVideoConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Cube extent as (frames, rows, columns).
    pub tubelet: [usize; 3],
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for ToyVideoConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 1,
            tubelet: [2, 4, 4],
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 128,
            dropout: 0.1,
        }
    }
}

impl ToyVideoConfig {
    pub fn small() -> Self {
        Self {
            model_dim: 32,
            num_layers: 1,
            ff_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [t, h, w] = self.tubelet;
        if t == 0 || h == 0 || w == 0 || self.channels == 0 {
            return Err(Error::Config("tubelet and channel sizes must be positive".into()));
        }
        if FRAMES_PER_CLIP % t != 0 || self.height % h != 0 || self.width % w != 0 {
            return Err(Error::Config(format!(
                "tubelet {t}x{h}x{w} does not divide clip {FRAMES_PER_CLIP}x{}x{}",
                self.height, self.width
            )));
        }
        self.transformer().validate()
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            model_dim: self.model_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
        }
    }

    /// `(10 / t) * (H / h) * (W / w)`.
    pub fn num_tokens(&self) -> usize {
        let [t, h, w] = self.tubelet;
        (FRAMES_PER_CLIP / t) * (self.height / h) * (self.width / w)
    }

    pub fn cube_len(&self) -> usize {
        let [t, h, w] = self.tubelet;
        t * h * w * self.channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClipEmbedderSpec {
    ToyTransformer(ToyVideoConfig),
    Precomputed { dim: usize, source: PathBuf },
}

impl Default for ClipEmbedderSpec {
    fn default() -> Self {
        Self::ToyTransformer(ToyVideoConfig::default())
    }
}

impl ClipEmbedderSpec {
    pub fn output_dim(&self) -> usize {
        match self {
            Self::ToyTransformer(c) => c.model_dim,
            Self::Precomputed { dim, .. } => *dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipEmbedding {
    pub vector: Vec<f32>,
    pub id: String,
}

/// A clip handed to an embedder: pixels for the toy model, the id for a
/// precomputed table.
#[derive(Clone, Copy, Debug)]
pub struct ClipInput<'a> {
    pub id: &'a str,
    pub clip: Option<&'a VideoClip>,
}

/// Rearranges a clip into `[tokens, t*h*w*C]` cubes ordered by time block,
/// then row block, then column block. Inside a cube the order is
/// frame, row, column, channel.
pub fn cube_tokens<T: Real>(clip: &VideoClip, cfg: &ToyVideoConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if clip.height != cfg.height || clip.width != cfg.width || clip.channels != cfg.channels {
        return Err(Error::Input(format!(
            "clip is {}x{}x{}, embedder expects {}x{}x{}",
            clip.height, clip.width, clip.channels, cfg.height, cfg.width, cfg.channels
        )));
    }
    let [tt, th, tw] = cfg.tubelet;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let data = clip.data();
    let mut out = Vec::with_capacity(cfg.num_tokens() * cfg.cube_len());
    for bt in 0..FRAMES_PER_CLIP / tt {
        for by in 0..h / th {
            for bx in 0..w / tw {
                for dt in 0..tt {
                    for dy in 0..th {
                        for dx in 0..tw {
                            let (f, y, x) = (bt * tt + dt, by * th + dy, bx * tw + dx);
                            let base = ((f * h + y) * w + x) * c;
                            out.extend(data[base..base + c].iter().map(|&v| T::from_f64(v as f64)));
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![cfg.num_tokens(), cfg.cube_len()], out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyVideoEncoder {
    pub config: ToyVideoConfig,
    cube_proj: Linear,
    pos: ParamId,
    stack: TransformerStack,
}

impl ToyVideoEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: ToyVideoConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let cube_proj = Linear::new(store, &format!("{PREFIX}.cube_proj"), config.cube_len(), d, rng)?;
        let pos = store.add(
            format!("{PREFIX}.pos"),
            nn::normal_tensor(rng, vec![config.num_tokens(), d], nn::EMBED_INIT_STD),
        )?;
        let stack = TransformerStack::new(store, &format!("{PREFIX}.encoder"), &config.transformer(), rng)?;
        Ok(Self {
            config,
            cube_proj,
            pos,
            stack,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, config: ToyVideoConfig) -> Result<Self> {
        config.validate()?;
        let enc = Self {
            cube_proj: Linear::lookup(store, &format!("{PREFIX}.cube_proj"))?,
            pos: nn::lookup(store, &format!("{PREFIX}.pos"))?,
            stack: TransformerStack::lookup(store, &format!("{PREFIX}.encoder"), &config.transformer())?,
            config,
        };
        if store.get(enc.pos).value().shape() != [enc.config.num_tokens(), enc.config.model_dim]
            || enc.cube_proj.in_dim != enc.config.cube_len()
        {
            return Err(Error::Config("video encoder parameters disagree with the configuration".into()));
        }
        Ok(enc)
    }

    /// Projected cubes plus positional embeddings, `[B, T', D]`.
    pub fn cube_embed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, clips: &[&VideoClip]) -> Result<Var> {
        let (n, k) = (self.config.num_tokens(), self.config.cube_len());
        let mut data = Vec::with_capacity(clips.len() * n * k);
        for clip in clips {
            data.extend(cube_tokens::<T>(clip, &self.config)?.into_data());
        }
        let cubes = g.constant(Tensor::new(vec![clips.len(), n, k], data)?);
        let e = self.cube_proj.forward(g, store, cubes)?;
        let pos = g.param(store, self.pos);
        Ok(g.add_broadcast(e, pos)?)
    }

    /// Mean of the transformer outputs over all tokens, `[B, D]`.
    pub fn embed_var<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        clips: &[&VideoClip],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let tokens = self.cube_embed(g, store, clips)?;
        let out = self.stack.forward(g, store, tokens, dropout)?;
        Ok(g.mean_axis(out, 1)?)
    }
}

/// Clip vectors served by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedEmbeddings {
    pub dim: usize,
    pub table: HashMap<String, Vec<f32>>,
}

impl PrecomputedEmbeddings {
    pub fn get(&self, id: &str) -> Result<&[f32]> {
        self.table
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("no precomputed embedding for clip `{id}`")))
    }
}

/// Loads an embedding file, checking its declared dimension against `dim`.
/// With `ids`, only those entries are kept and each must be present.
pub fn load_precomputed(source: &Path, dim: usize, ids: Option<&[&str]>) -> Result<PrecomputedEmbeddings> {
    let file = crate::dataio::read_embedding_file(source)?;
    if file.dim != dim && !(file.entries.is_empty() && file.dim == 0) {
        return Err(Error::Format {
            source_name: source.display().to_string(),
            offset: 4,
            reason: format!("embedding dimension {} does not match expected {dim}", file.dim),
        });
    }
    let mut table: HashMap<String, Vec<f32>> = file.entries.into_iter().collect();
    if let Some(ids) = ids {
        let mut kept = HashMap::with_capacity(ids.len());
        for &id in ids {
            let v = table
                .remove(id)
                .ok_or_else(|| Error::Input(format!("no precomputed embedding for clip `{id}`")))?;
            kept.insert(id.to_string(), v);
        }
        table = kept;
    }
    Ok(PrecomputedEmbeddings { dim, table })
}

#[derive(Clone, Debug, PartialEq)]
pub enum VideoEncoder {
    Toy(ToyVideoEncoder),
    Precomputed(PrecomputedEmbeddings),
}

impl VideoEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, spec: &ClipEmbedderSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        match spec {
            ClipEmbedderSpec::ToyTransformer(c) => Ok(Self::Toy(ToyVideoEncoder::new(store, c.clone(), rng)?)),
            ClipEmbedderSpec::Precomputed { dim, source } => {
                Ok(Self::Precomputed(load_precomputed(source, *dim, None)?))
            }
        }
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, spec: &ClipEmbedderSpec) -> Result<Self> {
        match spec {
            ClipEmbedderSpec::ToyTransformer(c) => Ok(Self::Toy(ToyVideoEncoder::lookup(store, c.clone())?)),
            ClipEmbedderSpec::Precomputed { dim, source } => {
                Ok(Self::Precomputed(load_precomputed(source, *dim, None)?))
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Toy(e) => e.config.model_dim,
            Self::Precomputed(p) => p.dim,
        }
    }

    /// Clip embeddings `[B, D_vid]`; precomputed vectors enter as constants.
    pub fn embed_var<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        clips: &[ClipInput<'_>],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        match self {
            Self::Toy(enc) => {
                let pixels = clips
                    .iter()
                    .map(|c| {
                        c.clip
                            .ok_or_else(|| Error::Input(format!("clip `{}` has no frames", c.id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                enc.embed_var(g, store, &pixels, dropout)
            }
            Self::Precomputed(p) => {
                let mut data = Vec::with_capacity(clips.len() * p.dim);
                for c in clips {
                    data.extend(p.get(c.id)?.iter().map(|&v| T::from_f64(v as f64)));
                }
                Ok(g.constant(Tensor::new(vec![clips.len(), p.dim], data)?))
            }
        }
    }

    /// Evaluation-mode embedding of a single clip.
    pub fn embed_clip<T: Real>(&self, store: &ParamStore<T>, clip: ClipInput<'_>) -> Result<ClipEmbedding> {
        let mut g = Graph::new();
        let v = self.embed_var(&mut g, store, &[clip], None)?;
        Ok(ClipEmbedding {
            vector: g.value(v).data().iter().map(|x| x.as_f64() as f32).collect(),
            id: clip.id.to_string(),
        })
    }
}

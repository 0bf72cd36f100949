//! Layers shared by the IMU and video encoders. Layers hold only parameter ids;
//! values live in a [`ParamStore`] so the same layer runs in f32 or f64.

use kinalign_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Standard deviation for learnable embeddings (positional, CLS, mask).
pub(crate) const EMBED_INIT_STD: f64 = 0.02;

pub(crate) fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

fn uniform_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}

/// Runtime dropout configuration; `None` at call sites means evaluation mode.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(g.dropout(x, self.rate, self.rng)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(in_dim)`, zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = uniform_tensor(rng, vec![in_dim, out_dim], bound);
        Self::with_values(store, name, w, Tensor::zeros(vec![out_dim]))
    }

    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_values(store, name, Tensor::zeros(vec![in_dim, out_dim]), Tensor::zeros(vec![out_dim]))
    }

    pub fn with_values<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        weight: Tensor<T>,
        bias: Tensor<T>,
    ) -> Result<Self> {
        let (in_dim, out_dim) = match weight.shape() {
            &[i, o] if bias.shape() == [o] => (i, o),
            s => {
                return Err(Error::Config(format!(
                    "linear `{name}`: weight {s:?} and bias {:?} disagree",
                    bias.shape()
                )))
            }
        };
        Ok(Self {
            weight: store.add(format!("{name}.weight"), weight)?,
            bias: store.add(format!("{name}.bias"), bias)?,
            in_dim,
            out_dim,
        })
    }

    /// Binds to an existing store by name.
    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.weight"))?;
        let bias = lookup(store, &format!("{name}.bias"))?;
        let (in_dim, out_dim) = match store.get(weight).value().shape() {
            &[i, o] => (i, o),
            s => return Err(Error::Config(format!("`{name}.weight` has shape {s:?}"))),
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x` is `[.., in_dim]`; returns `[.., out_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        Ok(g.add_broadcast(h, b)?)
    }
}

pub(crate) fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Config(format!("parameter `{name}` missing from checkpoint")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            gain: lookup(store, &format!("{name}.gain"))?,
            bias: lookup(store, &format!("{name}.bias"))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }
}

/// Width and depth of a transformer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    num_heads: usize,
}

impl TransformerBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.ff_dim, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ff_dim, d, rng)?,
            num_heads: cfg.num_heads,
        })
    }

    fn lookup<T: Real>(store: &ParamStore<T>, name: &str, num_heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::lookup(store, &format!("{name}.ln1"))?,
            qkv: Linear::lookup(store, &format!("{name}.qkv"))?,
            proj: Linear::lookup(store, &format!("{name}.proj"))?,
            ln2: LayerNorm::lookup(store, &format!("{name}.ln2"))?,
            ff1: Linear::lookup(store, &format!("{name}.ff1"))?,
            ff2: Linear::lookup(store, &format!("{name}.ff2"))?,
            num_heads,
        })
    }

    /// `x` is `[groups, tokens, dim]`; attention runs within each group.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let (groups, tokens, d) = match g.shape(x) {
            &[a, b, c] => (a, b, c),
            s => return Err(Error::Input(format!("transformer input must be rank 3, got {s:?}"))),
        };
        let h = self.num_heads;
        let dh = d / h;

        let n1 = self.ln1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, n1)?;
        let split = |g: &mut Graph<T>, i: usize| -> Result<Var> {
            let part = g.narrow(qkv, 2, i * d, d)?;
            let part = g.reshape(part, vec![groups, tokens, h, dh])?;
            Ok(g.permute(part, &[0, 2, 1, 3])?)
        };
        let q = split(g, 0)?;
        let k = split(g, 1)?;
        let v = split(g, 2)?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 3)?;
        let o = g.matmul(attn, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, vec![groups, tokens, d])?;
        let mut o = self.proj.forward(g, store, o)?;
        if let Some(dr) = dropout.as_deref_mut() {
            o = dr.apply(g, o)?;
        }
        let x = g.add(x, o)?;

        let n2 = self.ln2.forward(g, store, x)?;
        let f = self.ff1.forward(g, store, n2)?;
        let f = g.gelu(f);
        let mut f = self.ff2.forward(g, store, f)?;
        if let Some(dr) = dropout.as_deref_mut() {
            f = dr.apply(g, f)?;
        }
        Ok(g.add(x, f)?)
    }
}

/// A stack of blocks plus a final layer norm. With zero layers the stack is
/// the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerStack {
    blocks: Vec<TransformerBlock>,
    final_norm: Option<LayerNorm>,
}

impl TransformerStack {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_layers)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if cfg.num_layers > 0 {
            Some(LayerNorm::new(store, &format!("{name}.norm"), cfg.model_dim)?)
        } else {
            None
        };
        Ok(Self { blocks, final_norm })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_layers)
            .map(|i| TransformerBlock::lookup(store, &format!("{name}.block{i}"), cfg.num_heads))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if cfg.num_layers > 0 {
            Some(LayerNorm::lookup(store, &format!("{name}.norm"))?)
        } else {
            None
        };
        Ok(Self { blocks, final_norm })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(g, store, x, dropout.as_deref_mut())?;
        }
        match &self.final_norm {
            Some(ln) => ln.forward(g, store, x),
            None => Ok(x),
        }
    }
}

//! Channel-independent patch transformer over IMU windows.
//!
//! Each of the M channels is cut into N patches of P samples, projected to D
//! dimensions with shared weights, given a learnable CLS token and positional
//! embedding, and run through a transformer that attends only within the
//! channel. The window embedding concatenates the M output CLS vectors.

use kinalign_tensor::{AdamW, Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Dropout, Linear, TransformerConfig, TransformerStack};
use crate::signal::{ImuWindow, NUM_CHANNELS, WINDOW_LEN};
use crate::train::{self, OptimConfig, Progress, ProgressRecord, TrainLog};

pub const PREFIX: &str = "imu";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub context_length: usize,
    pub patch_length: usize,
    pub stride: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            context_length: WINDOW_LEN,
            patch_length: 16,
            stride: 16,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_length == 0 || self.stride == 0 {
            return Err(Error::Config("patch_length and stride must be positive".into()));
        }
        if self.patch_length > self.context_length {
            return Err(Error::Config(format!(
                "patch_length {} exceeds context_length {}",
                self.patch_length, self.context_length
            )));
        }
        Ok(())
    }

    /// `N = floor((L - P) / S) + 2`.
    pub fn num_patches(&self) -> usize {
        (self.context_length - self.patch_length) / self.stride + 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub channels: usize,
    /// Standardize each channel of each window before patching.
    pub instance_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            num_layers: 3,
            num_heads: 4,
            ff_dim: 128,
            dropout: 0.1,
            channels: NUM_CHANNELS,
            instance_norm: false,
        }
    }
}

impl EncoderConfig {
    /// Reduced width and depth for fast synthetic experiments.
    pub fn small() -> Self {
        Self {
            model_dim: 32,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 64,
            ..Self::default()
        }
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

    pub fn validate(&self) -> Result<()> {
        if self.channels != NUM_CHANNELS {
            return Err(Error::Config(format!(
                "encoder supports {NUM_CHANNELS} channels, configured {}",
                self.channels
            )));
        }
        self.transformer().validate()
    }

    /// Length of the pooled window embedding, `M * D`.
    pub fn embedding_dim(&self) -> usize {
        self.channels * self.model_dim
    }
}

/// Splits one series into `N` patches, padding the end with `S` copies of the
/// last value.
pub fn patchify_series(series: &[f32], cfg: &PatchConfig) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    if series.len() != cfg.context_length {
        return Err(Error::Input(format!(
            "series has {} samples, context_length is {}",
            series.len(),
            cfg.context_length
        )));
    }
    let last = *series.last().expect("context_length >= patch_length >= 1");
    let mut padded = series.to_vec();
    padded.extend(std::iter::repeat_n(last, cfg.stride));
    Ok((0..cfg.num_patches())
        .map(|j| padded[j * cfg.stride..j * cfg.stride + cfg.patch_length].to_vec())
        .collect())
}

fn standardize(x: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in x {
        *v = ((*v as f64 - mean) / (std + 1e-8)) as f32;
    }
}

/// Patch tensor `[M, N, P]` for one window.
pub fn patchify(window: &ImuWindow, cfg: &PatchConfig) -> Result<Tensor<f32>> {
    patchify_batch(&[window], cfg, false)
}

/// Patch tensor `[B * M, N, P]`, window-major then channel.
pub fn patchify_batch<T: Real>(windows: &[&ImuWindow], cfg: &PatchConfig, instance_norm: bool) -> Result<Tensor<T>> {
    let (n, p) = (cfg.num_patches(), cfg.patch_length);
    let mut data = Vec::with_capacity(windows.len() * NUM_CHANNELS * n * p);
    for w in windows {
        for m in 0..NUM_CHANNELS {
            let mut series = w.channel(m);
            if instance_norm {
                standardize(&mut series);
            }
            for patch in patchify_series(&series, cfg)? {
                data.extend(patch.into_iter().map(|v| T::from_f64(v as f64)));
            }
        }
    }
    Ok(Tensor::new(vec![windows.len() * NUM_CHANNELS, n, p], data)?)
}

/// `ceil(ratio * n)` patches are masked per channel.
pub fn mask_count(num_patches: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask_ratio {ratio} outside (0, 1)")));
    }
    Ok(((ratio * num_patches as f64) - 1e-9).ceil() as usize)
}

/// Mask flags for `groups` channel sequences; each gets `ceil(ratio N)` masked
/// patches drawn uniformly without replacement.
pub fn sample_masks(groups: usize, num_patches: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let k = mask_count(num_patches, ratio)?;
    let mut mask = vec![false; groups * num_patches];
    for g in 0..groups {
        for i in index::sample(rng, num_patches, k) {
            mask[g * num_patches + i] = true;
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImuEncoder {
    pub patch: PatchConfig,
    pub config: EncoderConfig,
    patch_proj: Linear,
    pos: ParamId,
    cls: ParamId,
    mask_token: ParamId,
    recon: Linear,
    stack: TransformerStack,
}

impl ImuEncoder {
    /// Registers freshly initialized parameters under `imu.`. The
    /// reconstruction head starts at zero.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        patch: PatchConfig,
        config: EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        patch.validate()?;
        config.validate()?;
        let (n, p, d) = (patch.num_patches(), patch.patch_length, config.model_dim);
        let patch_proj = Linear::new(store, &format!("{PREFIX}.patch_proj"), p, d, rng)?;
        let pos = store.add(format!("{PREFIX}.pos"), nn::normal_tensor(rng, vec![n, d], nn::EMBED_INIT_STD))?;
        let cls = store.add(format!("{PREFIX}.cls"), nn::normal_tensor(rng, vec![d], nn::EMBED_INIT_STD))?;
        let mask_token = store.add(
            format!("{PREFIX}.mask_token"),
            nn::normal_tensor(rng, vec![d], nn::EMBED_INIT_STD),
        )?;
        let stack = TransformerStack::new(store, &format!("{PREFIX}.encoder"), &config.transformer(), rng)?;
        let recon = Linear::zeros(store, &format!("{PREFIX}.recon"), d, p)?;
        Ok(Self {
            patch,
            config,
            patch_proj,
            pos,
            cls,
            mask_token,
            recon,
            stack,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, patch: PatchConfig, config: EncoderConfig) -> Result<Self> {
        patch.validate()?;
        config.validate()?;
        let enc = Self {
            patch_proj: Linear::lookup(store, &format!("{PREFIX}.patch_proj"))?,
            pos: nn::lookup(store, &format!("{PREFIX}.pos"))?,
            cls: nn::lookup(store, &format!("{PREFIX}.cls"))?,
            mask_token: nn::lookup(store, &format!("{PREFIX}.mask_token"))?,
            recon: Linear::lookup(store, &format!("{PREFIX}.recon"))?,
            stack: TransformerStack::lookup(store, &format!("{PREFIX}.encoder"), &config.transformer())?,
            patch,
            config,
        };
        let want = [patch.num_patches(), enc.config.model_dim];
        if store.get(enc.pos).value().shape() != want || enc.patch_proj.in_dim != patch.patch_length {
            return Err(Error::Config("IMU encoder parameters disagree with the configuration".into()));
        }
        Ok(enc)
    }

    /// Linear patch projection, optional mask substitution, positional
    /// embedding, and a prepended CLS token: `[G, N, P]` to `[G, N + 1, D]`.
    pub fn embed_patches<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let groups = g.shape(patches)[0];
        let n = self.patch.num_patches();
        let d = self.config.model_dim;
        let mut e = self.patch_proj.forward(g, store, patches)?;
        if let Some(mask) = mask {
            if mask.len() != groups * n {
                return Err(Error::Input(format!(
                    "mask has {} flags for {groups}x{n} patches",
                    mask.len()
                )));
            }
            let expand = |on: bool| {
                Tensor::<T>::from_fn(vec![groups, n, d], |i| {
                    if mask[i / d] == on {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            };
            let keep = g.constant(expand(false));
            let masked = g.constant(expand(true));
            let token = g.param(store, self.mask_token);
            let kept = g.mul(e, keep)?;
            let filled = g.add_broadcast(masked, token)?;
            let filled = g.mul(filled, masked)?;
            e = g.add(kept, filled)?;
        }
        let pos = g.param(store, self.pos);
        let e = g.add_broadcast(e, pos)?;
        let zeros = g.constant(Tensor::zeros(vec![groups, 1, d]));
        let cls = g.param(store, self.cls);
        let cls = g.add_broadcast(zeros, cls)?;
        Ok(g.concat(&[cls, e], 1)?)
    }

    /// Token sequences `[G, N + 1, D]` after the transformer.
    pub fn encode_patches<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
        mask: Option<&[bool]>,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let tokens = self.embed_patches(g, store, patches, mask)?;
        self.stack.forward(g, store, tokens, dropout)
    }

    /// Pooled embeddings `[B, M * D]`: the per-channel CLS outputs, concatenated.
    pub fn window_embedding_var<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        windows: &[&ImuWindow],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let patches = patchify_batch::<T>(windows, &self.patch, self.config.instance_norm)?;
        let patches = g.constant(patches);
        let tokens = self.encode_patches(g, store, patches, None, dropout)?;
        let cls = g.narrow(tokens, 1, 0, 1)?;
        Ok(g.reshape(cls, vec![windows.len(), self.config.embedding_dim()])?)
    }

    /// Token sequence `[M, N + 1, D]` of one window, evaluation mode.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, window: &ImuWindow) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let patches = g.constant(patchify_batch::<T>(&[window], &self.patch, self.config.instance_norm)?);
        let out = self.encode_patches(&mut g, store, patches, None, None)?;
        Ok(g.value(out).clone())
    }

    /// Window embeddings in evaluation mode, computed in chunks.
    pub fn embed_windows<T: Real>(&self, store: &ParamStore<T>, windows: &[&ImuWindow]) -> Result<Vec<Vec<f32>>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(CHUNK) {
            let mut g = Graph::new();
            let e = self.window_embedding_var(&mut g, store, chunk, None)?;
            out.extend(g.value(e).rows().map(|r| r.iter().map(|v| v.as_f64() as f32).collect::<Vec<f32>>()));
        }
        Ok(out)
    }

    /// Mean squared reconstruction error over masked patches of `patches`
    /// (`[G, N, P]`). With no masked patch the loss is zero.
    pub fn masked_reconstruction_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: &Tensor<T>,
        mask: &[bool],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let masked = mask.iter().filter(|&&m| m).count();
        if masked == 0 {
            log::warn!("no masked patches; reconstruction loss is 0");
            return Ok(g.constant(Tensor::scalar(T::zero())));
        }
        let (groups, n, p) = match patches.shape() {
            &[a, b, c] => (a, b, c),
            s => return Err(Error::Input(format!("patch tensor must be rank 3, got {s:?}"))),
        };
        let input = g.constant(patches.clone());
        let tokens = self.encode_patches(g, store, input, Some(mask), dropout)?;
        let body = g.narrow(tokens, 1, 1, n)?;
        let recon = self.recon.forward(g, store, body)?;
        let diff = g.sub(recon, input)?;
        let sq = g.mul(diff, diff)?;
        let select = g.constant(Tensor::from_fn(vec![groups, n, p], |i| {
            if mask[i / p] {
                T::one()
            } else {
                T::zero()
            }
        }));
        let sq = g.mul(sq, select)?;
        let total = g.sum(sq);
        Ok(g.scale(total, 1.0 / (masked * p) as f64))
    }

    /// Parameter ids used for the pooled embedding (everything except the
    /// masking-only mask token and reconstruction head).
    pub fn embedding_params<T: Real>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        let exclude = [
            self.mask_token,
            self.recon.weight,
            self.recon.bias,
        ];
        store
            .ids_with_prefix(&format!("{PREFIX}."))
            .into_iter()
            .filter(|id| !exclude.contains(id))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskedPretrainConfig {
    pub optim: OptimConfig,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for MaskedPretrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                epochs: 100,
                lr: 1e-3,
                ..OptimConfig::default()
            },
            mask_ratio: 0.4,
            seed: 0,
        }
    }
}

/// Masked-patch reconstruction pretraining over every `imu.` parameter.
pub fn pretrain_masked(
    encoder: &ImuEncoder,
    store: &mut ParamStore<f32>,
    windows: &[&ImuWindow],
    cfg: &MaskedPretrainConfig,
    progress: Progress<'_>,
) -> Result<TrainLog> {
    cfg.optim.validate()?;
    mask_count(encoder.patch.num_patches(), cfg.mask_ratio)?;
    if windows.is_empty() {
        return Err(Error::Input("masked pretraining needs at least one window".into()));
    }
    train::warn_small_dataset(windows.len(), cfg.optim.batch_size);
    let params = store.ids_with_prefix(&format!("{PREFIX}."));
    let mut opt = AdamW::new(
        cfg.optim.adamw(),
        vec![kinalign_tensor::ParamGroup {
            name: "encoder".into(),
            lr: cfg.optim.lr,
            params,
        }],
        store,
    );
    let steps_per_epoch = train::num_batches(windows.len(), cfg.optim.batch_size);
    let schedule = cfg.optim.schedule(steps_per_epoch)?;
    let mut shuffle = train::stream(cfg.seed, train::STREAM_SHUFFLE);
    let mut mask_rng = train::stream(cfg.seed, train::STREAM_MASK);
    let mut drop_rng = train::stream(cfg.seed, train::STREAM_DROPOUT);
    let n = encoder.patch.num_patches();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.optim.epochs {
        let mut total = 0.0;
        let batches = train::epoch_batches(windows.len(), cfg.optim.batch_size, &mut shuffle);
        for batch in &batches {
            let items: Vec<&ImuWindow> = batch.iter().map(|&i| windows[i]).collect();
            let patches = patchify_batch::<f32>(&items, &encoder.patch, encoder.config.instance_norm)?;
            let mask = sample_masks(items.len() * NUM_CHANNELS, n, cfg.mask_ratio, &mut mask_rng)?;
            store.zero_grad();
            let mut g = Graph::new();
            let mut dropout = Dropout {
                rate: encoder.config.dropout,
                rng: &mut drop_rng,
            };
            let loss = encoder.masked_reconstruction_loss(&mut g, store, &patches, &mask, Some(&mut dropout))?;
            let value = g.value(loss).item() as f64;
            g.backward(loss)?.accumulate_into(store);
            let step = opt.step_count();
            let factor = train::lr_factor(&schedule, step);
            opt.step(store, factor)?;
            total += value;
            progress(&ProgressRecord {
                mode: "masked".into(),
                epoch,
                step: step + 1,
                loss: value,
                lr: cfg.optim.lr * factor,
                t: None,
                b: None,
            });
        }
        log.epoch_loss.push(total / batches.len() as f64);
    }
    Ok(log)
}

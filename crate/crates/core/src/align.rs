//! Projection heads, the sigmoid pairwise contrastive loss with learnable
//! temperature and bias, and the cross-modal pretraining loop.

use kinalign_tensor::{AdamW, Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu_encoder::ImuEncoder;
use crate::nn::{self, Dropout, Linear};
use crate::signal::ImuWindow;
use crate::train::{self, OptimConfig, Progress, ProgressRecord, TrainLog};
use crate::video_encoder::{ClipInput, VideoEncoder};

pub const IMU_HEAD: &str = "head.imu";
pub const VIDEO_HEAD: &str = "head.vid";
pub const TEMPERATURE: &str = "align.t_log";
pub const BIAS: &str = "align.b";

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Sigmoid,
    /// Symmetric softmax cross-entropy, for comparison runs only.
    Softmax,
}

/// How the learned bias enters the loss display.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasConvention {
    /// Logits `z (t s + b)`: the display evaluated at `-b`, so that `b = -10`
    /// makes negative pairs cheap at initialization.
    Reference,
    /// The display evaluated at `b` as written. With `b = -10` every
    /// negative pair starts near a loss of 10 and positives get no gradient.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub proj_dim: usize,
    /// Width of an optional hidden layer (with gelu) in both heads.
    pub head_hidden: Option<usize>,
    pub init_temperature: f64,
    pub init_bias: f64,
    pub loss: LossKind,
    pub bias_convention: BiasConvention,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            proj_dim: 64,
            head_hidden: None,
            init_temperature: 10.0,
            init_bias: -10.0,
            loss: LossKind::Sigmoid,
            bias_convention: BiasConvention::Reference,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proj_dim == 0 || self.head_hidden == Some(0) {
            return Err(Error::Config("projection dimensions must be positive".into()));
        }
        if !(self.init_temperature > 0.0) || !self.init_bias.is_finite() {
            return Err(Error::Config("initial temperature must be positive and bias finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    first: Linear,
    second: Option<Linear>,
}

impl ProjectionHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        cfg: &AlignConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match cfg.head_hidden {
            None => Self {
                first: Linear::new(store, &format!("{name}.proj"), in_dim, cfg.proj_dim, rng)?,
                second: None,
            },
            Some(h) => Self {
                first: Linear::new(store, &format!("{name}.hidden"), in_dim, h, rng)?,
                second: Some(Linear::new(store, &format!("{name}.proj"), h, cfg.proj_dim, rng)?),
            },
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str, cfg: &AlignConfig) -> Result<Self> {
        Ok(match cfg.head_hidden {
            None => Self {
                first: Linear::lookup(store, &format!("{name}.proj"))?,
                second: None,
            },
            Some(_) => Self {
                first: Linear::lookup(store, &format!("{name}.hidden"))?,
                second: Some(Linear::lookup(store, &format!("{name}.proj"))?),
            },
        })
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        match &self.second {
            None => Ok(h),
            Some(l) => {
                let h = g.gelu(h);
                l.forward(g, store, h)
            }
        }
    }

    /// Linear map followed by L2 normalization of each row.
    pub fn project_and_normalize<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.forward(g, store, x)?;
        Ok(g.l2_normalize(h, NORM_EPS)?)
    }
}

/// Learnable `t' = ln t` and `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentParams {
    pub t_log: ParamId,
    pub bias: ParamId,
}

impl AlignmentParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &AlignConfig) -> Result<Self> {
        Ok(Self {
            t_log: store.add(TEMPERATURE, Tensor::scalar(T::from_f64(cfg.init_temperature.ln())))?,
            bias: store.add(BIAS, Tensor::scalar(T::from_f64(cfg.init_bias)))?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        Ok(Self {
            t_log: nn::lookup(store, TEMPERATURE)?,
            bias: nn::lookup(store, BIAS)?,
        })
    }

    pub fn temperature<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        store.get(self.t_log).value().item().as_f64().exp()
    }

    pub fn bias_value<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        store.get(self.bias).value().item().as_f64()
    }
}

/// `(1/|B|) sum_ij softplus(z_ij (-t i_i.v_j + b))` with `z` = +1 on the
/// diagonal and -1 elsewhere; `t = exp(t_log)`. Rows of `imu` and `vid` are
/// expected to be unit vectors.
pub fn sigmoid_contrastive_loss<T: Real>(g: &mut Graph<T>, imu: Var, vid: Var, t_log: Var, bias: Var) -> Result<Var> {
    let n = check_pair_shapes(g, imu, vid)?;
    let sims = g.matmul_t(imu, vid)?;
    let t = g.exp(t_log);
    let ts = g.scalar_mul(sims, t)?;
    let neg = g.scale(ts, -1.0);
    let u = g.scalar_add(neg, bias)?;
    let z = g.constant(Tensor::from_fn(vec![n, n], |k| {
        if k / n == k % n {
            T::one()
        } else {
            -T::one()
        }
    }));
    let x = g.mul(u, z)?;
    let sp = g.softplus(x);
    // order-independent reduction keeps joint permutations bit-exact
    let total = g.sum_sorted(sp);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Symmetric cross-entropy over `t * similarity` logits in both directions.
pub fn softmax_contrastive_loss<T: Real>(g: &mut Graph<T>, imu: Var, vid: Var, t_log: Var) -> Result<Var> {
    let n = check_pair_shapes(g, imu, vid)?;
    let sims = g.matmul_t(imu, vid)?;
    let t = g.exp(t_log);
    let logits = g.scalar_mul(sims, t)?;
    let targets: Vec<usize> = (0..n).collect();
    let a = g.cross_entropy(logits, &targets)?;
    let lt = g.permute(logits, &[1, 0])?;
    let b = g.cross_entropy(lt, &targets)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

fn check_pair_shapes<T: Real>(g: &Graph<T>, imu: Var, vid: Var) -> Result<usize> {
    let (a, b) = (g.shape(imu), g.shape(vid));
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] || a[1] != b[1] || a[0] == 0 {
        return Err(Error::Usage(format!(
            "contrastive loss needs equal, non-empty [B, D] batches, got {a:?} and {b:?}"
        )));
    }
    Ok(a[0])
}

/// Mean diagonal similarity minus mean off-diagonal similarity of a square
/// similarity matrix (row-major). Zero for a single pair.
pub fn diagonal_dominance(sims: &[f64], n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                diag += sims[i * n + j];
            } else {
                off += sims[i * n + j];
            }
        }
    }
    diag / n as f64 - off / (n * (n - 1)) as f64
}

/// Both projection heads and the loss parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignHeads {
    pub config: AlignConfig,
    pub imu: ProjectionHead,
    pub video: ProjectionHead,
    pub params: AlignmentParams,
}

impl AlignHeads {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        imu_dim: usize,
        video_dim: usize,
        config: AlignConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            imu: ProjectionHead::new(store, IMU_HEAD, imu_dim, &config, rng)?,
            video: ProjectionHead::new(store, VIDEO_HEAD, video_dim, &config, rng)?,
            params: AlignmentParams::new(store, &config)?,
            config,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, config: AlignConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            imu: ProjectionHead::lookup(store, IMU_HEAD, &config)?,
            video: ProjectionHead::lookup(store, VIDEO_HEAD, &config)?,
            params: AlignmentParams::lookup(store)?,
            config,
        })
    }

    pub fn loss<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, imu: Var, vid: Var) -> Result<Var> {
        let t_log = g.param(store, self.params.t_log);
        match self.config.loss {
            LossKind::Sigmoid => {
                let mut b = g.param(store, self.params.bias);
                if self.config.bias_convention == BiasConvention::Reference {
                    b = g.scale(b, -1.0);
                }
                sigmoid_contrastive_loss(g, imu, vid, t_log, b)
            }
            LossKind::Softmax => softmax_contrastive_loss(g, imu, vid, t_log),
        }
    }
}

/// One training pair.
#[derive(Clone, Copy, Debug)]
pub struct Pair<'a> {
    pub window: &'a ImuWindow,
    pub clip: ClipInput<'a>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossModalConfig {
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

/// Encoders, heads, and the store they share.
pub struct CrossModalParts<'a> {
    pub imu: &'a ImuEncoder,
    pub video: &'a VideoEncoder,
    pub heads: &'a AlignHeads,
    pub store: &'a mut ParamStore<f32>,
}

/// Forward pass of one batch: unit IMU and video vectors `[B, D_proj]`.
pub fn project_batch<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    imu: &ImuEncoder,
    video: &VideoEncoder,
    heads: &AlignHeads,
    pairs: &[Pair<'_>],
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<(Var, Var)> {
    let windows: Vec<&ImuWindow> = pairs.iter().map(|p| p.window).collect();
    let clips: Vec<ClipInput<'_>> = pairs.iter().map(|p| p.clip).collect();
    let ie = imu.window_embedding_var(g, store, &windows, dropout.as_deref_mut())?;
    let ve = video.embed_var(g, store, &clips, dropout)?;
    let i = heads.imu.project_and_normalize(g, store, ie)?;
    let v = heads.video.project_and_normalize(g, store, ve)?;
    Ok((i, v))
}

/// Trains every parameter of both encoders, both heads, `t'` and `b` with a
/// single AdamW group and a cosine schedule over all steps.
pub fn pretrain_crossmodal(
    parts: CrossModalParts<'_>,
    pairs: &[Pair<'_>],
    cfg: &CrossModalConfig,
    progress: Progress<'_>,
) -> Result<TrainLog> {
    cfg.optim.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("cross-modal pretraining needs at least one pair".into()));
    }
    train::warn_small_dataset(pairs.len(), cfg.optim.batch_size);
    let CrossModalParts {
        imu,
        video,
        heads,
        store,
    } = parts;
    let params: Vec<ParamId> = store.ids().filter(|&id| !store.get(id).is_frozen()).collect();
    let mut opt = AdamW::new(
        cfg.optim.adamw(),
        vec![ParamGroup {
            name: "all".into(),
            lr: cfg.optim.lr,
            params,
        }],
        store,
    );
    let steps_per_epoch = train::num_batches(pairs.len(), cfg.optim.batch_size);
    let schedule = cfg.optim.schedule(steps_per_epoch)?;
    let mut shuffle = train::stream(cfg.seed, train::STREAM_SHUFFLE);
    let mut drop_rng = train::stream(cfg.seed, train::STREAM_DROPOUT);
    let rate = imu.config.dropout;
    let mut log = TrainLog::default();

    for epoch in 0..cfg.optim.epochs {
        let batches = train::epoch_batches(pairs.len(), cfg.optim.batch_size, &mut shuffle);
        let (mut loss_sum, mut dom_sum) = (0.0, 0.0);
        for batch in &batches {
            let items: Vec<Pair<'_>> = batch.iter().map(|&i| pairs[i]).collect();
            store.zero_grad();
            let mut g = Graph::new();
            let mut dropout = Dropout {
                rate,
                rng: &mut drop_rng,
            };
            let (i, v) = project_batch(&mut g, store, imu, video, heads, &items, Some(&mut dropout))?;
            let sims: Vec<f64> = {
                let iv = g.value(i);
                let vv = g.value(v);
                let d = iv.shape()[1];
                let n = items.len();
                (0..n * n)
                    .map(|k| {
                        let (a, b) = (k / n, k % n);
                        iv.data()[a * d..(a + 1) * d]
                            .iter()
                            .zip(&vv.data()[b * d..(b + 1) * d])
                            .map(|(x, y)| (*x as f64) * (*y as f64))
                            .sum()
                    })
                    .collect()
            };
            dom_sum += diagonal_dominance(&sims, items.len());
            let loss = heads.loss(&mut g, store, i, v)?;
            let value = g.value(loss).item() as f64;
            g.backward(loss)?.accumulate_into(store);
            let step = opt.step_count();
            let factor = train::lr_factor(&schedule, step);
            opt.step(store, factor)?;
            loss_sum += value;
            progress(&ProgressRecord {
                mode: "cross".into(),
                epoch,
                step: step + 1,
                loss: value,
                lr: cfg.optim.lr * factor,
                t: Some(heads.params.temperature(store)),
                b: Some(heads.params.bias_value(store)),
            });
        }
        log.epoch_loss.push(loss_sum / batches.len() as f64);
        log.epoch_dominance.push(dom_sum / batches.len() as f64);
        log::info!(
            "epoch {epoch}: loss {:.5} dominance {:.4}",
            log.epoch_loss[epoch],
            log.epoch_dominance[epoch]
        );
    }
    Ok(log)
}

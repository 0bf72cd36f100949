//! A complete model (IMU encoder plus whatever the pretraining mode adds)
//! and its checkpoint form.

use std::path::Path;

use kinalign_tensor::{Graph, ParamStore};
use serde::{Deserialize, Serialize};

use crate::align::{self, AlignConfig, AlignHeads};
use crate::dataio::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::imu_encoder::{EncoderConfig, ImuEncoder, PatchConfig};
use crate::nn::Linear;
use crate::signal::ImuWindow;
use crate::train;
use crate::video_encoder::{ClipEmbedderSpec, ClipInput, ToyVideoConfig, VideoEncoder};

/// Parameter prefix of the supervised classification layer.
pub const CLASSIFIER: &str = "classifier";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// IMU and video encoders with projection heads.
    Cross,
    /// IMU encoder with its reconstruction head.
    Masked,
    /// IMU encoder with a classification layer.
    Supervised,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Self::Cross),
            "masked" => Ok(Self::Masked),
            "supervised" => Ok(Self::Supervised),
            other => Err(Error::Usage(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub patch: PatchConfig,
    #[serde(default)]
    pub imu: EncoderConfig,
    #[serde(default)]
    pub video: Option<ClipEmbedderSpec>,
    #[serde(default)]
    pub align: Option<AlignConfig>,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl ModelConfig {
    /// Reduced widths used for desk-scale runs.
    pub fn small(kind: ModelKind) -> Self {
        let mut cfg = Self {
            kind,
            patch: PatchConfig::default(),
            imu: EncoderConfig::small(),
            video: None,
            align: None,
            num_classes: None,
        };
        if kind == ModelKind::Cross {
            cfg.video = Some(ClipEmbedderSpec::ToyTransformer(ToyVideoConfig::small()));
            cfg.align = Some(AlignConfig::default());
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.imu.validate()?;
        match self.kind {
            ModelKind::Cross => {
                if self.video.is_none() || self.align.is_none() {
                    return Err(Error::Config("a cross-modal model needs `video` and `align` sections".into()));
                }
            }
            ModelKind::Supervised => {
                if !matches!(self.num_classes, Some(c) if c > 0) {
                    return Err(Error::Config("a supervised model needs num_classes > 0".into()));
                }
            }
            ModelKind::Masked => {}
        }
        if let Some(a) = &self.align {
            a.validate()?;
        }
        Ok(())
    }
}

/// JSON stored in the checkpoint's config entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub classes: Vec<String>,
    /// Effective run configuration that produced the checkpoint.
    #[serde(default)]
    pub run: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub classes: Vec<String>,
    pub store: ParamStore<f32>,
    pub imu: ImuEncoder,
    pub video: Option<VideoEncoder>,
    pub heads: Option<AlignHeads>,
    pub classifier: Option<Linear>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = train::stream(seed, train::STREAM_INIT);
        let mut store = ParamStore::new();
        let imu = ImuEncoder::new(&mut store, config.patch, config.imu.clone(), &mut rng)?;
        let (mut video, mut heads, mut classifier) = (None, None, None);
        if let (ModelKind::Cross, Some(spec), Some(acfg)) = (config.kind, &config.video, &config.align) {
            let v = VideoEncoder::new(&mut store, spec, &mut rng)?;
            heads = Some(AlignHeads::new(
                &mut store,
                imu.config.embedding_dim(),
                v.output_dim(),
                acfg.clone(),
                &mut rng,
            )?);
            video = Some(v);
        }
        if let Some(c) = config.num_classes {
            classifier = Some(Linear::new(&mut store, CLASSIFIER, imu.config.embedding_dim(), c, &mut rng)?);
        }
        Ok(Self {
            config,
            classes: Vec::new(),
            store,
            imu,
            video,
            heads,
            classifier,
        })
    }

    pub fn meta(&self, run: Option<serde_json::Value>) -> CheckpointMeta {
        CheckpointMeta {
            model: self.config.clone(),
            classes: self.classes.clone(),
            run,
        }
    }

    pub fn to_checkpoint(&self, run: Option<serde_json::Value>) -> Result<Checkpoint> {
        let json = serde_json::to_string(&self.meta(run))
            .map_err(|e| Error::Config(format!("cannot serialize model config: {e}")))?;
        Ok(Checkpoint::from_store(&self.store, &json))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, source: &str) -> Result<Self> {
        let json = ckpt.config_json().ok_or_else(|| Error::Format {
            source_name: source.into(),
            offset: 0,
            reason: "checkpoint has no config entry".into(),
        })?;
        let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| Error::Format {
            source_name: source.into(),
            offset: 0,
            reason: format!("invalid config entry: {e}"),
        })?;
        let config = meta.model;
        config.validate()?;
        let store = ckpt.to_store()?;
        let imu = ImuEncoder::lookup(&store, config.patch, config.imu.clone())?;
        let (mut video, mut heads) = (None, None);
        if let (ModelKind::Cross, Some(spec), Some(acfg)) = (config.kind, &config.video, &config.align) {
            video = Some(VideoEncoder::lookup(&store, spec)?);
            heads = Some(AlignHeads::lookup(&store, acfg.clone())?);
        }
        let classifier = match config.num_classes {
            Some(_) => Some(Linear::lookup(&store, CLASSIFIER)?),
            None => None,
        };
        Ok(Self {
            config,
            classes: meta.classes,
            store,
            imu,
            video,
            heads,
            classifier,
        })
    }

    pub fn save(&self, path: &Path, run: Option<serde_json::Value>) -> Result<()> {
        dataio::save_checkpoint(&self.to_checkpoint(run)?, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = dataio::load_checkpoint(path)?;
        Self::from_checkpoint(&ckpt, &path.display().to_string())
    }

    fn require_heads(&self) -> Result<(&VideoEncoder, &AlignHeads)> {
        match (&self.video, &self.heads) {
            (Some(v), Some(h)) => Ok((v, h)),
            _ => Err(Error::Usage("this checkpoint has no cross-modal projection heads".into())),
        }
    }

    /// Pre-projection window embeddings `M * D`.
    pub fn window_embeddings(&self, windows: &[&ImuWindow]) -> Result<Vec<Vec<f32>>> {
        self.imu.embed_windows(&self.store, windows)
    }

    /// Unit vectors in the shared space, evaluation mode.
    pub fn project_windows(&self, windows: &[&ImuWindow]) -> Result<Vec<Vec<f32>>> {
        let (_, heads) = self.require_heads()?;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(64) {
            let mut g = Graph::new();
            let e = self.imu.window_embedding_var(&mut g, &self.store, chunk, None)?;
            let p = heads.imu.project_and_normalize(&mut g, &self.store, e)?;
            out.extend(g.value(p).rows().map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Projected unit clip vectors, evaluation mode.
    pub fn project_clips(&self, clips: &[ClipInput<'_>]) -> Result<Vec<Vec<f32>>> {
        let (video, heads) = self.require_heads()?;
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(64) {
            let mut g = Graph::new();
            let e = video.embed_var(&mut g, &self.store, chunk, None)?;
            let p = heads.video.project_and_normalize(&mut g, &self.store, e)?;
            out.extend(g.value(p).rows().map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Cross-modal pretraining of every parameter in the store.
    pub fn pretrain_crossmodal(
        &mut self,
        pairs: &[align::Pair<'_>],
        cfg: &align::CrossModalConfig,
        progress: train::Progress<'_>,
    ) -> Result<train::TrainLog> {
        let (video, heads) = match (&self.video, &self.heads) {
            (Some(v), Some(h)) => (v, h),
            _ => return Err(Error::Usage("cross-modal pretraining needs a cross model".into())),
        };
        align::pretrain_crossmodal(
            align::CrossModalParts {
                imu: &self.imu,
                video,
                heads,
                store: &mut self.store,
            },
            pairs,
            cfg,
            progress,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{ImuWindow, VideoClip, NUM_CHANNELS, WINDOW_LEN};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(seed: u64) -> ImuWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..WINDOW_LEN * NUM_CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect();
        ImuWindow::new(values, None, format!("w{seed}")).unwrap()
    }

    fn clip(seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..10 * 16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
        VideoClip::new(data, 16, 16, 1).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [ModelKind::Cross, ModelKind::Masked, ModelKind::Supervised] {
            let mut cfg = ModelConfig::small(kind);
            if kind == ModelKind::Supervised {
                cfg.num_classes = Some(4);
            }
            let mut model = Model::new(cfg, 9).unwrap();
            model.classes = vec!["a".into(), "b".into()];
            let path = dir.path().join(format!("{kind:?}.ckpt"));
            model.save(&path, Some(serde_json::json!({"seed": 9}))).unwrap();
            let loaded = Model::load(&path).unwrap();
            assert_eq!(loaded.classes, model.classes);
            assert!(loaded.store.values_bitwise_eq(&model.store));
            let ws = [window(1), window(2)];
            let refs: Vec<&ImuWindow> = ws.iter().collect();
            let a = model.window_embeddings(&refs).unwrap();
            let b = loaded.window_embeddings(&refs).unwrap();
            assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
            if kind == ModelKind::Cross {
                assert_eq!(model.project_windows(&refs).unwrap(), loaded.project_windows(&refs).unwrap());
                let c = clip(3);
                let inp = [ClipInput { id: "c", clip: Some(&c) }];
                assert_eq!(model.project_clips(&inp).unwrap(), loaded.project_clips(&inp).unwrap());
            } else {
                assert!(matches!(loaded.project_windows(&refs), Err(Error::Usage(_))));
            }
            // saving the loaded model reproduces the file
            let again = dir.path().join("again.ckpt");
            loaded.save(&again, Some(serde_json::json!({"seed": 9}))).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        }
    }

    #[test]
    fn same_seed_same_init() {
        let a = Model::new(ModelConfig::small(ModelKind::Cross), 4).unwrap();
        let b = Model::new(ModelConfig::small(ModelKind::Cross), 4).unwrap();
        let c = Model::new(ModelConfig::small(ModelKind::Cross), 5).unwrap();
        assert!(a.store.values_bitwise_eq(&b.store));
        assert!(!a.store.values_bitwise_eq(&c.store));
    }

    #[test]
    fn projected_vectors_are_unit() {
        let model = Model::new(ModelConfig::small(ModelKind::Cross), 0).unwrap();
        let ws = [window(7)];
        let v = model.project_windows(&[&ws[0]]).unwrap();
        let n: f32 = v[0].iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::small(ModelKind::Cross);
        cfg.video = None;
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
        let cfg = ModelConfig::small(ModelKind::Supervised);
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_leave_init_unchanged() {
        let mut model = Model::new(ModelConfig::small(ModelKind::Cross), 1).unwrap();
        let before = model.store.clone();
        let (w, c) = (window(1), clip(1));
        let pairs = [align::Pair {
            window: &w,
            clip: ClipInput { id: "c", clip: Some(&c) },
        }];
        let mut cfg = align::CrossModalConfig::default();
        cfg.optim.epochs = 0;
        let log = model.pretrain_crossmodal(&pairs, &cfg, &mut |_| {}).unwrap();
        assert!(log.epoch_loss.is_empty());
        assert!(model.store.values_bitwise_eq(&before));
    }

    #[test]
    fn short_training_is_deterministic_and_keeps_t_positive() {
        let ws: Vec<ImuWindow> = (0..6).map(window).collect();
        let cs: Vec<VideoClip> = (0..6).map(clip).collect();
        let ids: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
        let pairs: Vec<align::Pair<'_>> = (0..6)
            .map(|i| align::Pair {
                window: &ws[i],
                clip: ClipInput {
                    id: &ids[i],
                    clip: Some(&cs[i]),
                },
            })
            .collect();
        let mut cfg = align::CrossModalConfig::default();
        cfg.optim.epochs = 2;
        cfg.optim.batch_size = 4;
        cfg.optim.lr = 1e-2;
        let run = || {
            let mut model = Model::new(ModelConfig::small(ModelKind::Cross), 2).unwrap();
            let mut records = Vec::new();
            let log = model
                .pretrain_crossmodal(&pairs, &cfg, &mut |r| records.push(r.clone()))
                .unwrap();
            (model, log, records)
        };
        let (m1, l1, r1) = run();
        let (m2, l2, r2) = run();
        assert!(m1.store.values_bitwise_eq(&m2.store));
        assert_eq!(l1.epoch_loss, l2.epoch_loss);
        assert_eq!(r1, r2);
        assert_eq!(r1.len(), 4);
        assert!(r1.iter().all(|r| r.t.unwrap() > 0.0 && r.mode == "cross"));
    }
}

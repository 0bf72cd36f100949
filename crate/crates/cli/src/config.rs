//! TOML run configuration covering every module's knobs.

use std::fs;
use std::path::Path;

use anyhow::Context;
use kinalign_core::align::{AlignConfig, CrossModalConfig};
use kinalign_core::eval::FewShotSpec;
use kinalign_core::imu_encoder::{EncoderConfig, MaskedPretrainConfig, PatchConfig};
use kinalign_core::model::{ModelConfig, ModelKind};
use kinalign_core::synthdata::SynthConfig;
use kinalign_core::train::OptimConfig;
use kinalign_core::video_encoder::ClipEmbedderSpec;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model initialization, supervised shuffling and evaluation draws.
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub cross: CrossModalConfig,
    pub masked: MaskedPretrainConfig,
    pub supervised: OptimConfig,
    pub zeroshot: ZeroShotSection,
    pub fewshot: FewShotSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            model: ModelSection::default(),
            cross: CrossModalConfig::default(),
            masked: MaskedPretrainConfig::default(),
            supervised: OptimConfig {
                epochs: 50,
                batch_size: 32,
                lr: 1e-3,
                ..OptimConfig::default()
            },
            zeroshot: ZeroShotSection::default(),
            fewshot: FewShotSpec::default(),
        }
    }
}

/// Architecture shared by all model kinds; `video` and `align` only apply to
/// cross-modal models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub patch: PatchConfig,
    pub imu: EncoderConfig,
    pub video: ClipEmbedderSpec,
    pub align: AlignConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let small = ModelConfig::small(ModelKind::Cross);
        Self {
            patch: small.patch,
            imu: small.imu,
            video: small.video.expect("cross config has video"),
            align: small.align.expect("cross config has align"),
        }
    }
}

impl ModelSection {
    pub fn build(&self, kind: ModelKind, num_classes: Option<usize>) -> ModelConfig {
        let cross = kind == ModelKind::Cross;
        ModelConfig {
            kind,
            patch: self.patch,
            imu: self.imu.clone(),
            video: cross.then(|| self.video.clone()),
            align: cross.then(|| self.align.clone()),
            num_classes: if kind == ModelKind::Supervised { num_classes } else { None },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroShotSection {
    pub repeats: usize,
    pub frac: f64,
}

impl Default for ZeroShotSection {
    fn default() -> Self {
        Self { repeats: 5, frac: 0.8 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(UsageError::wrap)?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Values in `text` override the defaults table by table, so a partial
    /// nested section keeps the defaults of its parent rather than those of
    /// the section's own type.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let bad = |e: &dyn std::fmt::Display| UsageError::wrap(anyhow::anyhow!("{e}"));
        let file: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut merged, file);
        merged.try_into().map_err(|e| bad(&e))
    }

    /// `--seed` replaces every seed in the configuration.
    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = s;
            self.synth.seed = s;
            self.cross.seed = s;
            self.masked.seed = s;
        }
    }

    /// The effective configuration as TOML under a comment naming the
    /// command; passing the file back as `--config` reproduces the run.
    pub fn echo(&self, command: &str) -> anyhow::Result<String> {
        let body = toml::to_string(self).context("serializing effective config")?;
        Ok(format!("# effective configuration: {command}\n{body}"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serializable")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

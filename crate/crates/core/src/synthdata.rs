//! Deterministic paired IMU/video generator. Both modalities are driven by
//! one latent oscillation per instance, so class identity is recoverable
//! from either side.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Item, Split};
use crate::error::{Error, Result};
use crate::signal::{self, FrameSelection, ImuWindow, VideoClip, FRAMES_PER_CLIP, NUM_CHANNELS, TARGET_RATE_HZ, WINDOW_LEN};

/// Frames in the virtual source segment that clip frames are selected from.
const SEGMENT_FRAMES: usize = 125;
const DURATION_S: f64 = WINDOW_LEN as f64 / TARGET_RATE_HZ;
const SUBJECTS_PER_SPLIT: usize = 4;
/// Frequency range of IMU-only distractor oscillations, Hz.
const DISTRACTOR_BAND: (f64, f64) = (0.3, 4.0);

/// Per-class generative parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivitySpec {
    pub class: usize,
    pub freq_hz: f64,
    pub amplitudes: [f64; NUM_CHANNELS],
    pub phases: [f64; NUM_CHANNELS],
    /// Blob excursion along x and y as a fraction of the frame.
    pub gain_x: f64,
    pub gain_y: f64,
    /// Quarter-period phase offset of the y motion.
    pub offset: f64,
}

/// Shift applied to a held-out domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodConfig {
    pub amp_min: f64,
    pub amp_max: f64,
    pub permute_channels: bool,
    /// Largest absolute drift slope, units per second.
    pub max_drift: f64,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            amp_min: 0.5,
            amp_max: 1.5,
            permute_channels: true,
            max_drift: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// Paired windows per class, split into train and heldout.
    pub per_class: usize,
    pub heldout_frac: f64,
    /// IMU-only windows per class in the shifted domain.
    pub ood_per_class: usize,
    pub prototypes_per_class: usize,
    pub noise_std: f64,
    /// IMU-only oscillations per window at random frequencies, not visible
    /// in the clip.
    pub distractors: usize,
    /// Upper bound of each distractor's per-channel amplitude.
    pub distractor_amp: f64,
    pub height: usize,
    pub width: usize,
    pub blob_sigma_px: f64,
    /// How the ten clip frames are picked from the virtual segment.
    pub frame_selection: FrameSelection,
    pub seed: u64,
    pub ood: OodConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            per_class: 200,
            heldout_frac: 0.2,
            ood_per_class: 120,
            prototypes_per_class: 5,
            noise_std: 0.1,
            distractors: 2,
            distractor_amp: 0.3,
            height: 16,
            width: 16,
            blob_sigma_px: 1.5,
            frame_selection: FrameSelection::Deterministic,
            seed: 0,
            ood: OodConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if !(self.distractor_amp >= 0.0) {
            return Err(Error::Config("distractor_amp must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_frac) {
            return Err(Error::Config("heldout_frac must be in [0, 1)".into()));
        }
        if self.height == 0 || self.width == 0 || !(self.blob_sigma_px > 0.0) {
            return Err(Error::Config("frame size and blob sigma must be positive".into()));
        }
        if !(self.ood.amp_min > 0.0 && self.ood.amp_min <= self.ood.amp_max) || !(self.ood.max_drift >= 0.0) {
            return Err(Error::Config("invalid OOD distortion ranges".into()));
        }
        if self.class_freq(self.num_classes - 1) >= TARGET_RATE_HZ / 2.0 {
            return Err(Error::Config("too many classes: frequencies reach Nyquist".into()));
        }
        Ok(())
    }

    /// `f_c = 0.5 + 0.7 c` Hz.
    pub fn class_freq(&self, c: usize) -> f64 {
        0.5 + 0.7 * c as f64
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("activity{c}")).collect()
    }
}

/// Per-instance distortion of the IMU side.
#[derive(Clone, Debug, PartialEq)]
pub struct Distortion {
    pub amp_scale: [f64; NUM_CHANNELS],
    pub permutation: [usize; NUM_CHANNELS],
    pub drift: f64,
}

impl Distortion {
    pub fn sample(cfg: &OodConfig, rng: &mut impl Rng) -> Self {
        let amp_scale = std::array::from_fn(|_| rng.random_range(cfg.amp_min..=cfg.amp_max));
        let mut permutation: [usize; NUM_CHANNELS] = std::array::from_fn(|m| m);
        if cfg.permute_channels {
            permutation.shuffle(rng);
        }
        let drift = if cfg.max_drift > 0.0 {
            rng.random_range(-cfg.max_drift..=cfg.max_drift)
        } else {
            0.0
        };
        Self {
            amp_scale,
            permutation,
            drift,
        }
    }
}

/// Class specs; amplitudes and phases come from the config seed, motion
/// shapes cycle through line, vertical, diagonal, circle, anti-diagonal.
pub fn activity_specs(cfg: &SynthConfig) -> Vec<ActivitySpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5bec, 0, 0));
    (0..cfg.num_classes)
        .map(|c| {
            let amplitudes = std::array::from_fn(|_| rng.random_range(0.5..1.5));
            let phases = std::array::from_fn(|_| rng.random_range(0.0..TAU));
            let scale = 0.3 / (1 + c / 5) as f64;
            let (gain_x, gain_y, offset) = match c % 5 {
                0 => (scale, 0.0, 0.0),
                1 => (0.0, scale, 0.0),
                2 => (scale, scale, 0.0),
                3 => (scale, scale, 1.0),
                _ => (scale, -scale, 0.0),
            };
            ActivitySpec {
                class: c,
                freq_hz: cfg.class_freq(c),
                amplitudes,
                phases,
                gain_x,
                gain_y,
                offset,
            }
        })
        .collect()
}

/// One paired sample. The latent is `s(t) = sin(2 pi f t + phi)` with a
/// per-instance phase; IMU channel `m` is `a_m sin(2 pi f t + phi + phi_m)`
/// plus drift and noise, and the clip renders a Gaussian blob following the
/// same latent at ten selected frame times.
pub fn gen_pair(
    spec: &ActivitySpec,
    cfg: &SynthConfig,
    instance_seed: u64,
    distortion: Option<&Distortion>,
) -> Result<(ImuWindow, VideoClip, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    let phi = rng.random_range(0.0..TAU);
    let window = imu_window(spec, cfg, phi, distortion, &mut rng)?;
    let frame_seed = rng.random::<u64>();
    let clip = render_clip(spec, cfg, phi, frame_seed)?;
    Ok((window, clip, spec.class))
}

fn imu_window(
    spec: &ActivitySpec,
    cfg: &SynthConfig,
    phi: f64,
    distortion: Option<&Distortion>,
    rng: &mut ChaCha8Rng,
) -> Result<ImuWindow> {
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let distractors: Vec<(f64, [f64; NUM_CHANNELS], [f64; NUM_CHANNELS])> = (0..cfg.distractors)
        .map(|_| {
            let f = rng.random_range(DISTRACTOR_BAND.0..DISTRACTOR_BAND.1);
            let amp = std::array::from_fn(|_| rng.random_range(0.0..=cfg.distractor_amp));
            let ph = std::array::from_fn(|_| rng.random_range(0.0..TAU));
            (f, amp, ph)
        })
        .collect();
    let mut channels = vec![vec![0.0f32; WINDOW_LEN]; NUM_CHANNELS];
    for (m, ch) in channels.iter_mut().enumerate() {
        for (k, v) in ch.iter_mut().enumerate() {
            let t = k as f64 / TARGET_RATE_HZ;
            let mut x = spec.amplitudes[m] * (TAU * spec.freq_hz * t + phi + spec.phases[m]).sin();
            for (f, amp, ph) in &distractors {
                x += amp[m] * (TAU * f * t + ph[m]).sin();
            }
            if let Some(d) = distortion {
                x = x * d.amp_scale[m] + d.drift * t;
            }
            *v = (x + noise.sample(rng)) as f32;
        }
    }
    if let Some(d) = distortion {
        let orig = channels.clone();
        for (m, &src) in d.permutation.iter().enumerate() {
            channels[m] = orig[src].clone();
        }
    }
    ImuWindow::from_channels(&channels, Some(spec.class), "")
}

/// Blob centre in unit coordinates at time `t`.
pub fn blob_center(spec: &ActivitySpec, phi: f64, t: f64) -> (f64, f64) {
    let theta = TAU * spec.freq_hz * t + phi;
    (
        0.5 + spec.gain_x * theta.sin(),
        0.5 + spec.gain_y * (theta + spec.offset * PI / 2.0).sin(),
    )
}

fn render_clip(spec: &ActivitySpec, cfg: &SynthConfig, phi: f64, frame_seed: u64) -> Result<VideoClip> {
    let idx = signal::frame_indices(SEGMENT_FRAMES, cfg.frame_selection, frame_seed)?;
    let fps = SEGMENT_FRAMES as f64 / DURATION_S;
    let times: Vec<f64> = idx.iter().map(|&i| i as f64 / fps).collect();
    let mut data = Vec::with_capacity(FRAMES_PER_CLIP * cfg.height * cfg.width);
    for &t in &times {
        data.extend(render_frame(spec, cfg, phi, t));
    }
    let mut clip = VideoClip::new(data, cfg.height, cfg.width, 1)?;
    clip.frame_times = Some(times);
    Ok(clip)
}

/// One frame: an unnormalized Gaussian blob with peak 1.
fn render_frame(spec: &ActivitySpec, cfg: &SynthConfig, phi: f64, t: f64) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let inv = 1.0 / (2.0 * cfg.blob_sigma_px * cfg.blob_sigma_px);
    let (cx, cy) = blob_center(spec, phi, t);
    let (px, py) = (cx * w as f64, cy * h as f64);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let dx = c as f64 + 0.5 - px;
            let dy = r as f64 + 0.5 - py;
            out.push((-(dx * dx + dy * dy) * inv).exp() as f32);
        }
    }
    out
}

/// SplitMix64-style mixing of a seed with a tag, class and index.
fn mix(seed: u64, tag: u64, class: usize, k: usize) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (class as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (k as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_PAIR: u64 = 1;
const TAG_OOD: u64 = 2;
const TAG_PROTO: u64 = 3;
const TAG_SUBJECT: u64 = 4;

/// Train/heldout pairs (with clips) and the IMU-only OOD split. OOD windows
/// belong to held-out subjects, each with its own distortion draw.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let specs = activity_specs(cfg);
    let n_heldout = (cfg.per_class as f64 * cfg.heldout_frac).round() as usize;
    let n_train = cfg.per_class - n_heldout;
    let subjects: Vec<Distortion> = (0..SUBJECTS_PER_SPLIT)
        .map(|s| Distortion::sample(&cfg.ood, &mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, TAG_SUBJECT, 0, s))))
        .collect();
    let mut items = Vec::with_capacity(cfg.num_classes * (cfg.per_class + cfg.ood_per_class));
    for spec in &specs {
        let c = spec.class;
        for k in 0..cfg.per_class {
            let (mut window, clip, label) = gen_pair(spec, cfg, mix(cfg.seed, TAG_PAIR, c, k), None)?;
            let id = format!("c{c}_{k:04}");
            window.source_id = id.clone();
            items.push(Item {
                id,
                window,
                clip: Some(clip),
                label: Some(label),
                split: if k < n_train { Split::Train } else { Split::Heldout },
                subject: format!("s{}", k % SUBJECTS_PER_SPLIT),
            });
        }
        for k in 0..cfg.ood_per_class {
            let s = k % SUBJECTS_PER_SPLIT;
            let (mut window, _, label) = gen_pair(spec, cfg, mix(cfg.seed, TAG_OOD, c, k), Some(&subjects[s]))?;
            let id = format!("ood_c{c}_{k:04}");
            window.source_id = id.clone();
            items.push(Item {
                id,
                window,
                clip: None,
                label: Some(label),
                split: Split::Ood,
                subject: format!("ood{s}"),
            });
        }
    }
    Ok(Dataset {
        classes: cfg.class_names(),
        items,
    })
}

/// Prototype clips from instance seeds disjoint from every dataset item.
pub fn gen_prototypes(cfg: &SynthConfig, per_class: usize) -> Result<Vec<Item>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_classes * per_class);
    for spec in &activity_specs(cfg) {
        for k in 0..per_class {
            let (mut window, clip, label) = gen_pair(spec, cfg, mix(cfg.seed, TAG_PROTO, spec.class, k), None)?;
            let id = format!("proto_c{}_{k}", spec.class);
            window.source_id = id.clone();
            out.push(Item {
                id,
                window,
                clip: Some(clip),
                label: Some(label),
                split: Split::Prototype,
                subject: "proto".into(),
            });
        }
    }
    Ok(out)
}

/// Dataset plus prototypes, as written by `synth-gen`.
pub fn gen_all(cfg: &SynthConfig) -> Result<Dataset> {
    let mut ds = gen_dataset(cfg)?;
    ds.items.extend(gen_prototypes(cfg, cfg.prototypes_per_class)?);
    Ok(ds)
}

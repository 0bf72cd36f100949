//! IMU preprocessing (resample, median filter, z-score, windowing) and
//! chunked frame selection for video segments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TARGET_RATE_HZ: f64 = 50.0;
pub const WINDOW_LEN: usize = 250;
pub const NUM_CHANNELS: usize = 6;
pub const FRAMES_PER_CLIP: usize = 10;
pub const MEDIAN_KERNEL: usize = 5;

const ZSCORE_EPS: f64 = 1e-8;

/// Multichannel sensor stream. Units are carried as metadata and never converted.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub channels: Vec<Vec<f32>>,
    pub sample_rate_hz: f64,
    pub units: Option<String>,
    pub subject_id: Option<String>,
    pub label_track: Option<Vec<Option<usize>>>,
}

impl RawRecording {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate_hz: f64) -> Result<Self> {
        let rec = Self {
            channels,
            sample_rate_hz,
            units: None,
            subject_id: None,
            label_track: None,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn with_labels(mut self, labels: Vec<Option<usize>>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Input(format!(
                "label track has {} entries for {} samples",
                labels.len(),
                self.len()
            )));
        }
        self.label_track = Some(labels);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) || !self.sample_rate_hz.is_finite() {
            return Err(Error::Input(format!(
                "sample rate must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Input("recording has no channels".into()));
        }
        let n = self.channels[0].len();
        if let Some((i, c)) = self.channels.iter().enumerate().find(|(_, c)| c.len() != n) {
            return Err(Error::Input(format!(
                "channel {i} has {} samples, channel 0 has {n}",
                c.len()
            )));
        }
        Ok(())
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    fn map_channels(&self, f: impl Fn(&[f32]) -> Vec<f32>) -> Self {
        Self {
            channels: self.channels.iter().map(|c| f(c)).collect(),
            ..self.clone()
        }
    }
}

/// A preprocessed 250 x 6 window, stored time-major (`values[t * 6 + m]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImuWindow {
    values: Vec<f32>,
    pub label: Option<usize>,
    pub source_id: String,
}

impl ImuWindow {
    pub fn new(values: Vec<f32>, label: Option<usize>, source_id: impl Into<String>) -> Result<Self> {
        if values.len() != WINDOW_LEN * NUM_CHANNELS {
            return Err(Error::Input(format!(
                "window needs {}x{} values, got {}",
                WINDOW_LEN,
                NUM_CHANNELS,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite window value at index {i}")));
        }
        Ok(Self {
            values,
            label,
            source_id: source_id.into(),
        })
    }

    /// Builds a window from per-channel series of length 250.
    pub fn from_channels(channels: &[Vec<f32>], label: Option<usize>, source_id: impl Into<String>) -> Result<Self> {
        if channels.len() != NUM_CHANNELS || channels.iter().any(|c| c.len() != WINDOW_LEN) {
            return Err(Error::Input(format!(
                "window needs {NUM_CHANNELS} channels of {WINDOW_LEN} samples"
            )));
        }
        let mut values = vec![0.0; WINDOW_LEN * NUM_CHANNELS];
        for (m, c) in channels.iter().enumerate() {
            for (t, &v) in c.iter().enumerate() {
                values[t * NUM_CHANNELS + m] = v;
            }
        }
        Self::new(values, label, source_id)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, t: usize, m: usize) -> f32 {
        self.values[t * NUM_CHANNELS + m]
    }

    pub fn channel(&self, m: usize) -> Vec<f32> {
        (0..WINDOW_LEN).map(|t| self.get(t, m)).collect()
    }

    pub fn channels(&self) -> Vec<Vec<f32>> {
        (0..NUM_CHANNELS).map(|m| self.channel(m)).collect()
    }

    /// The window as a 50 Hz recording, for writing through the IMU file format.
    pub fn to_recording(&self) -> RawRecording {
        RawRecording {
            channels: self.channels(),
            sample_rate_hz: TARGET_RATE_HZ,
            units: None,
            subject_id: None,
            label_track: None,
        }
    }

    /// Accepts a recording that is already exactly one 50 Hz window.
    pub fn from_recording(rec: &RawRecording, label: Option<usize>, source_id: impl Into<String>) -> Result<Self> {
        if rec.num_channels() != NUM_CHANNELS {
            return Err(Error::Input(format!(
                "expected {NUM_CHANNELS} channels, got {}",
                rec.num_channels()
            )));
        }
        if (rec.sample_rate_hz - TARGET_RATE_HZ).abs() > 1e-6 || rec.len() != WINDOW_LEN {
            return Err(Error::Input(format!(
                "expected {WINDOW_LEN} samples at {TARGET_RATE_HZ} Hz, got {} at {} Hz",
                rec.len(),
                rec.sample_rate_hz
            )));
        }
        Self::from_channels(&rec.channels, label, source_id)
    }
}

/// Ten frames of shape `height x width x channels`, values in `[0, 1]`,
/// stored frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    data: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Source time of each selected frame in seconds, when known.
    pub frame_times: Option<Vec<f64>>,
}

impl VideoClip {
    pub fn new(data: Vec<f32>, height: usize, width: usize, channels: usize) -> Result<Self> {
        let expected = FRAMES_PER_CLIP * height * width * channels;
        if height == 0 || width == 0 || channels == 0 || data.len() != expected {
            return Err(Error::Input(format!(
                "clip {FRAMES_PER_CLIP}x{height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!(
                "clip value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            data,
            height,
            width,
            channels,
            frame_times: None,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Linear-interpolation resampling to 50 Hz; downsampling by more than 2x is
/// preceded by a 2-tap moving average.
pub fn resample_to_50hz(rec: &RawRecording) -> Result<RawRecording> {
    rec.validate()?;
    if rec.len() < 2 {
        return Err(Error::Input(format!(
            "resampling needs at least 2 samples, got {}",
            rec.len()
        )));
    }
    if (rec.sample_rate_hz - TARGET_RATE_HZ).abs() < 1e-9 {
        return Ok(rec.clone());
    }
    let rate = rec.sample_rate_hz;
    let n = rec.len();
    let duration = (n - 1) as f64 / rate;
    let out_len = (duration * TARGET_RATE_HZ + 1e-9).floor() as usize + 1;
    let smooth = rate / TARGET_RATE_HZ > 2.0;

    let resample = |x: &[f32]| -> Vec<f32> {
        let src: Vec<f64> = if smooth {
            (0..n)
                .map(|i| 0.5 * (x[i] as f64 + x[(i + 1).min(n - 1)] as f64))
                .collect()
        } else {
            x.iter().map(|&v| v as f64).collect()
        };
        (0..out_len)
            .map(|k| {
                let pos = k as f64 / TARGET_RATE_HZ * rate;
                let i = (pos.floor() as usize).min(n - 1);
                let frac = pos - i as f64;
                let v = if i + 1 < n {
                    src[i] + (src[i + 1] - src[i]) * frac
                } else {
                    src[i]
                };
                v as f32
            })
            .collect()
    };

    let mut out = rec.map_channels(resample);
    out.sample_rate_hz = TARGET_RATE_HZ;
    out.label_track = rec.label_track.as_ref().map(|labels| {
        (0..out_len)
            .map(|k| {
                let pos = (k as f64 / TARGET_RATE_HZ * rate).round() as usize;
                labels[pos.min(n - 1)]
            })
            .collect()
    });
    Ok(out)
}

/// Sliding median per channel with replicate padding at both ends.
pub fn median_filter(rec: &RawRecording, kernel: usize) -> Result<RawRecording> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Config(format!("median kernel must be odd, got {kernel}")));
    }
    let half = kernel / 2;
    Ok(rec.map_channels(|x| {
        let n = x.len();
        let mut buf = Vec::with_capacity(kernel);
        (0..n)
            .map(|i| {
                buf.clear();
                for j in 0..kernel {
                    let idx = (i + j).saturating_sub(half).min(n - 1);
                    buf.push(x[idx]);
                }
                buf.sort_by(f32::total_cmp);
                buf[half]
            })
            .collect()
    }))
}

/// Per-channel standardization over the whole recording with population std.
pub fn zscore(rec: &RawRecording) -> RawRecording {
    rec.map_channels(|x| {
        if x.is_empty() {
            return Vec::new();
        }
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        x.iter()
            .map(|&v| ((v as f64 - mean) / (std + ZSCORE_EPS)) as f32)
            .collect()
    })
}

/// Disjoint 250-sample windows; the trailing remainder is dropped.
pub fn windowize(rec: &RawRecording, source_id: &str) -> Result<Vec<ImuWindow>> {
    rec.validate()?;
    if rec.num_channels() != NUM_CHANNELS {
        return Err(Error::Input(format!(
            "windowing needs {NUM_CHANNELS} channels, got {}",
            rec.num_channels()
        )));
    }
    if (rec.sample_rate_hz - TARGET_RATE_HZ).abs() > 1e-6 {
        return Err(Error::Input(format!(
            "windowing needs {TARGET_RATE_HZ} Hz input, got {}",
            rec.sample_rate_hz
        )));
    }
    let count = rec.len() / WINDOW_LEN;
    if count == 0 {
        log::warn!(
            "{source_id}: {} samples is shorter than one window",
            rec.len()
        );
    }
    (0..count)
        .map(|w| {
            let range = w * WINDOW_LEN..(w + 1) * WINDOW_LEN;
            let channels: Vec<Vec<f32>> = rec.channels.iter().map(|c| c[range.clone()].to_vec()).collect();
            let label = rec
                .label_track
                .as_ref()
                .and_then(|labels| majority_label(&labels[range.clone()]));
            ImuWindow::from_channels(&channels, label, format!("{source_id}#{w}"))
        })
        .collect()
}

/// Most frequent label; ties go to the smallest class id.
fn majority_label(labels: &[Option<usize>]) -> Option<usize> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for l in labels.iter().flatten() {
        match counts.iter_mut().find(|(c, _)| c == l) {
            Some((_, n)) => *n += 1,
            None => counts.push((*l, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
}

/// resample, median filter, z-score, windowize.
pub fn preprocess(rec: &RawRecording, source_id: &str) -> Result<Vec<ImuWindow>> {
    let r = resample_to_50hz(rec)?;
    let r = median_filter(&r, MEDIAN_KERNEL)?;
    let r = zscore(&r);
    windowize(&r, source_id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSelection {
    /// One uniformly drawn frame per chunk.
    Random,
    /// The middle frame of each chunk.
    Deterministic,
}

/// Indices of the 10 selected frames of a segment with `num_frames` frames.
/// Chunk `i` spans `[floor(i F / 10), floor((i + 1) F / 10))`.
pub fn frame_indices(num_frames: usize, mode: FrameSelection, seed: u64) -> Result<Vec<usize>> {
    if num_frames < FRAMES_PER_CLIP {
        return Err(Error::Input(format!(
            "segment has {num_frames} frames, need at least {FRAMES_PER_CLIP}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..FRAMES_PER_CLIP)
        .map(|i| {
            let start = i * num_frames / FRAMES_PER_CLIP;
            let end = (i + 1) * num_frames / FRAMES_PER_CLIP;
            match mode {
                FrameSelection::Deterministic => start + (end - start) / 2,
                FrameSelection::Random => rng.random_range(start..end),
            }
        })
        .collect())
}

/// Picks 10 frames out of a segment whose frames are `height x width x channels`.
pub fn select_frames(
    segment: &[Vec<f32>],
    height: usize,
    width: usize,
    channels: usize,
    mode: FrameSelection,
    seed: u64,
) -> Result<VideoClip> {
    let idx = frame_indices(segment.len(), mode, seed)?;
    let frame_len = height * width * channels;
    let mut data = Vec::with_capacity(FRAMES_PER_CLIP * frame_len);
    for &i in &idx {
        let f = &segment[i];
        if f.len() != frame_len {
            return Err(Error::Input(format!(
                "frame {i} has {} values, expected {frame_len}",
                f.len()
            )));
        }
        data.extend_from_slice(f);
    }
    VideoClip::new(data, height, width, channels)
}

//! Verification suites runnable from the command line: finite-difference
//! gradient checks, metric oracles, and format fuzzing.

use kinalign_tensor::{grad_check_params, suite, GradCheckOptions, GradCheckReport, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{AlignConfig, AlignHeads};
use crate::dataio;
use crate::error::{Error, Result};
use crate::eval;
use crate::imu_encoder::{EncoderConfig, ImuEncoder, PatchConfig};
use crate::nn;
use crate::signal::{ImuWindow, VideoClip, FRAMES_PER_CLIP, NUM_CHANNELS, WINDOW_LEN};
use crate::video_encoder::{ToyVideoConfig, ToyVideoEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Metrics,
    Formats,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Metrics => "metrics",
            Suite::Formats => "formats",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from_report(suite: &'static str, name: impl Into<String>, report: &GradCheckReport) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: report.passed,
            detail: report.to_string(),
        }
    }
}

pub fn run(suite: Suite) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Gradcheck => gradcheck_suite(),
        Suite::Metrics => Ok(metrics_suite(1000, 0)),
        Suite::Formats => Ok(formats_suite(1000, 0)),
    }
}

/// Every tensor op on three shapes, then the three composite paths.
pub fn gradcheck_suite() -> Result<Vec<CheckResult>> {
    let mut out: Vec<CheckResult> = suite::op_suite()?
        .iter()
        .map(|c| CheckResult::from_report("gradcheck", format!("op {} {:?}", c.op, c.shapes), &c.report))
        .collect();
    out.extend(composite_gradchecks()?);
    Ok(out)
}

fn random_window(rng: &mut ChaCha8Rng) -> Result<ImuWindow> {
    let v = (0..WINDOW_LEN * NUM_CHANNELS).map(|_| rng.random_range(-2.0..2.0)).collect();
    ImuWindow::new(v, None, "gradcheck")
}

fn random_clip(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<VideoClip> {
    VideoClip::new((0..FRAMES_PER_CLIP * h * w).map(|_| rng.random_range(0.0..1.0)).collect(), h, w, 1)
}

/// Full IMU encoder (D=16, one layer), toy video encoder, and projection with
/// normalization into the sigmoid contrastive loss. All parameters checked.
pub fn composite_gradchecks() -> Result<Vec<CheckResult>> {
    let opts = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x51);
    let mut out = Vec::new();

    let mut store = ParamStore::<f64>::new();
    let cfg = EncoderConfig {
        model_dim: 16,
        num_layers: 1,
        num_heads: 2,
        ff_dim: 32,
        dropout: 0.0,
        ..EncoderConfig::default()
    };
    let dim = cfg.embedding_dim();
    let enc = ImuEncoder::new(&mut store, PatchConfig::default(), cfg, &mut rng)?;
    let windows = [random_window(&mut rng)?, random_window(&mut rng)?];
    let refs: Vec<&ImuWindow> = windows.iter().collect();
    let weights = nn::normal_tensor::<f64>(&mut rng, vec![2, dim], 1.0);
    let report = grad_check_params(
        |g, s| {
            let e = enc.window_embedding_var(g, s, &refs, None)?;
            let w = g.constant(weights.clone());
            let p = g.mul(e, w)?;
            Ok::<_, Error>(g.sum(p))
        },
        &store,
        opts,
    )?;
    out.push(CheckResult::from_report("gradcheck", "composite imu_encoder", &report));

    let mut store = ParamStore::<f64>::new();
    let vcfg = ToyVideoConfig {
        height: 8,
        width: 8,
        tubelet: [5, 4, 4],
        model_dim: 8,
        num_layers: 1,
        num_heads: 2,
        ff_dim: 12,
        dropout: 0.0,
        ..ToyVideoConfig::default()
    };
    let venc = ToyVideoEncoder::new(&mut store, vcfg, &mut rng)?;
    let clips = [random_clip(&mut rng, 8, 8)?, random_clip(&mut rng, 8, 8)?];
    let crefs: Vec<&VideoClip> = clips.iter().collect();
    let weights = nn::normal_tensor::<f64>(&mut rng, vec![2, 8], 1.0);
    let report = grad_check_params(
        |g, s| {
            let e = venc.embed_var(g, s, &crefs, None)?;
            let w = g.constant(weights.clone());
            let p = g.mul(e, w)?;
            Ok::<_, Error>(g.sum(p))
        },
        &store,
        opts,
    )?;
    out.push(CheckResult::from_report("gradcheck", "composite video_encoder", &report));

    let mut store = ParamStore::<f64>::new();
    let acfg = AlignConfig {
        proj_dim: 4,
        head_hidden: Some(5),
        ..AlignConfig::default()
    };
    let heads = AlignHeads::new(&mut store, 6, 3, acfg, &mut rng)?;
    store.set_value(heads.params.t_log, kinalign_tensor::Tensor::scalar(0.3))?;
    store.set_value(heads.params.bias, kinalign_tensor::Tensor::scalar(-0.5))?;
    let xi = nn::normal_tensor::<f64>(&mut rng, vec![3, 6], 1.0);
    let xv = nn::normal_tensor::<f64>(&mut rng, vec![3, 3], 1.0);
    let report = grad_check_params(
        |g, s| {
            let a = g.constant(xi.clone());
            let b = g.constant(xv.clone());
            let i = heads.imu.project_and_normalize(g, s, a)?;
            let v = heads.video.project_and_normalize(g, s, b)?;
            heads.loss(g, s, i, v)
        },
        &store,
        opts,
    )?;
    out.push(CheckResult::from_report("gradcheck", "composite projection+loss", &report));
    Ok(out)
}

// Reference metric implementations, written from the definitions over a
// confusion matrix and explicit rank counting.

fn confusion(preds: &[usize], labels: &[usize], c: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; c]; c];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

fn ref_balanced_accuracy(m: &[Vec<u64>]) -> f64 {
    let present: Vec<usize> = (0..m.len()).filter(|&k| m[k].iter().sum::<u64>() > 0).collect();
    present.iter().map(|&k| m[k][k] as f64 / m[k].iter().sum::<u64>() as f64).sum::<f64>() / present.len() as f64
}

fn ref_macro_f1(m: &[Vec<u64>]) -> f64 {
    let c = m.len();
    let present: Vec<usize> = (0..c).filter(|&k| m[k].iter().sum::<u64>() > 0).collect();
    let f1 = |k: usize| {
        let tp = m[k][k] as f64;
        let fp = (0..c).map(|r| m[r][k]).sum::<u64>() as f64 - tp;
        let fn_ = m[k].iter().sum::<u64>() as f64 - tp;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    };
    present.iter().map(|&k| f1(k)).sum::<f64>() / present.len() as f64
}

fn ref_rank(scores: &[f64], label: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[label] || (scores[j] == scores[label] && j < label))
        .count()
}

/// `cases` random instances with C in [2, 10] and N in [5, 200]; every metric
/// must match its reference to 1e-12.
pub fn metrics_suite(cases: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..cases {
        let c = rng.random_range(2..=10);
        let n = rng.random_range(5..=200);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| rng.random_range(0..6) as f64).collect())
            .collect();
        let rankings: Vec<Vec<usize>> = scores.iter().map(|s| eval::rank_classes(s)).collect();
        let preds: Vec<usize> = rankings.iter().map(|r| r[0]).collect();
        let ranks: Vec<usize> = scores.iter().zip(&labels).map(|(s, &l)| ref_rank(s, l)).collect();
        let m = confusion(&preds, &labels, c);
        let nf = n as f64;
        let want = [
            ref_balanced_accuracy(&m),
            ref_macro_f1(&m),
            ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / nf,
            ranks.iter().filter(|&&r| r <= 1).count() as f64 / nf,
            ranks.iter().filter(|&&r| r <= 3).count() as f64 / nf,
        ];
        let got = eval::metric_values(&rankings, &labels);
        for k in 0..5 {
            worst[k] = worst[k].max((got[k] - want[k]).abs());
        }
    }
    eval::METRIC_NAMES
        .iter()
        .zip(worst)
        .map(|(name, err)| CheckResult {
            suite: "metrics",
            name: format!("{name} vs brute force"),
            passed: err <= 1e-12,
            detail: format!("{cases} cases, max abs error {err:e}"),
        })
        .collect()
}

pub fn formats_suite(cases: usize, seed: u64) -> Vec<CheckResult> {
    let r = dataio::fuzz_formats(cases, seed);
    vec![CheckResult {
        suite: "formats",
        name: "fuzzed decoders".into(),
        passed: r.passed(),
        detail: format!(
            "{} cases: {} accepted, {} rejected, {} crashes, {} unlocated errors, {} size mismatches accepted",
            r.cases,
            r.accepted,
            r.rejected,
            r.crashes.len(),
            r.unlocated.len(),
            r.size_mismatch_accepted.len()
        ),
    }]
}

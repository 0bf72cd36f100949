//! Metrics, zero-shot prototype classification, few-shot probing and
//! finetuning, and the repeat/bootstrap protocols around them.

use kinalign_tensor::{AdamW, Graph, ParamGroup, ParamId, ParamStore, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu_encoder::ImuEncoder;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::nn::Linear;
use crate::signal::ImuWindow;
use crate::train::{self, OptimConfig, Progress, ProgressRecord, TrainLog};

// ------------------------------------------------------------------ metrics

/// Classes ordered by descending score; equal scores keep the lower index first.
pub fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn present_classes(labels: &[usize]) -> Vec<usize> {
    let mut c: Vec<usize> = labels.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len());
    let classes = present_classes(labels);
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes.iter().map(|&c| per_class_recall(preds, labels, c)).sum();
    total / classes.len() as f64
}

fn per_class_recall(preds: &[usize], labels: &[usize], c: usize) -> f64 {
    let (mut tp, mut n) = (0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        if l == c {
            n += 1;
            tp += usize::from(p == c);
        }
    }
    tp as f64 / n as f64
}

/// Unweighted mean of per-class F1 over the classes present in `labels`.
pub fn macro_f1(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len());
    let classes = present_classes(labels);
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp > 0 {
            let prec = tp as f64 / (tp + fp) as f64;
            let rec = tp as f64 / (tp + fn_) as f64;
            total += 2.0 * prec * rec / (prec + rec);
        }
    }
    total / classes.len() as f64
}

/// 1-based position of `label` in `ranking`; one past the end when absent.
pub fn rank_of(ranking: &[usize], label: usize) -> usize {
    ranking.iter().position(|&c| c == label).map_or(ranking.len() + 1, |p| p + 1)
}

/// Fraction of queries whose true class is within the top `k`; `k` is
/// clamped to the number of ranked classes.
pub fn recall_at_k(rankings: &[Vec<usize>], labels: &[usize], k: usize) -> f64 {
    assert_eq!(rankings.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, &l)| rank_of(r, l) <= k.min(r.len()))
        .count();
    hits as f64 / labels.len() as f64
}

pub fn mrr(rankings: &[Vec<usize>], labels: &[usize]) -> f64 {
    assert_eq!(rankings.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = rankings.iter().zip(labels).map(|(r, &l)| 1.0 / rank_of(r, l) as f64).sum();
    total / labels.len() as f64
}

pub const METRIC_NAMES: [&str; 5] = ["balanced_accuracy", "macro_f1", "mrr", "recall_at_1", "recall_at_3"];

/// The five reported metrics of one evaluation, in [`METRIC_NAMES`] order.
pub fn metric_values(rankings: &[Vec<usize>], labels: &[usize]) -> [f64; 5] {
    let preds: Vec<usize> = rankings.iter().map(|r| r[0]).collect();
    [
        balanced_accuracy(&preds, labels),
        macro_f1(&preds, labels),
        mrr(rankings, labels),
        recall_at_k(rankings, labels, 1),
        recall_at_k(rankings, labels, 3),
    ]
}

/// Arithmetic mean, kept inside `[min, max]` against rounding.
pub fn mean_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    (values.iter().sum::<f64>() / values.len() as f64).clamp(lo, hi)
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 || values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let mean = mean_of(values);
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn new(metric: &str, values: Vec<f64>) -> Self {
        Self {
            metric: metric.into(),
            mean: mean_of(&values),
            std: sample_std(&values),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub classes: Vec<String>,
    pub metrics: Vec<MetricSummary>,
    /// Mean recall per class over repeats; `None` for classes never evaluated.
    pub per_class_recall: Vec<Option<f64>>,
    /// Summed over repeats, `confusion[true][pred]`.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    fn from_repeats(protocol: &str, classes: &[String], repeats: &[(Vec<Vec<usize>>, Vec<usize>)]) -> Self {
        let c = classes.len();
        let per_repeat: Vec<[f64; 5]> = repeats.iter().map(|(r, l)| metric_values(r, l)).collect();
        let metrics = METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| MetricSummary::new(name, per_repeat.iter().map(|m| m[i]).collect()))
            .collect();
        let mut confusion = vec![vec![0u64; c]; c];
        let mut recall_sum = vec![(0.0, 0usize); c];
        for (rankings, labels) in repeats {
            let preds: Vec<usize> = rankings.iter().map(|r| r[0]).collect();
            for (&p, &l) in preds.iter().zip(labels) {
                if l < c && p < c {
                    confusion[l][p] += 1;
                }
            }
            for cls in present_classes(labels) {
                if cls < c {
                    recall_sum[cls].0 += per_class_recall(&preds, labels, cls);
                    recall_sum[cls].1 += 1;
                }
            }
        }
        Self {
            protocol: protocol.into(),
            classes: classes.to_vec(),
            metrics,
            per_class_recall: recall_sum
                .into_iter()
                .map(|(s, n)| (n > 0).then(|| s / n as f64))
                .collect(),
            confusion,
        }
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    /// One JSON record per metric.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for m in &self.metrics {
            let rec = serde_json::json!({
                "protocol": self.protocol,
                "metric": m.metric,
                "mean": m.mean,
                "std": m.std,
                "values": m.values,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    /// `protocol,metric,mean,std` rows with a header.
    pub fn to_csv(&self, header: bool) -> String {
        let mut out = String::new();
        if header {
            out.push_str("protocol,metric,mean,std\n");
        }
        for m in &self.metrics {
            out.push_str(&format!("{},{},{},{}\n", self.protocol, m.metric, m.mean, m.std));
        }
        out
    }
}

// ---------------------------------------------------------------- zero-shot

/// Projected unit prototype vectors with their class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub classes: Vec<String>,
    pub vectors: Vec<(usize, Vec<f32>)>,
}

impl PrototypeSet {
    pub fn new(classes: Vec<String>, vectors: Vec<(usize, Vec<f32>)>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Usage("prototype set is empty".into()));
        }
        for (c, v) in &vectors {
            if *c >= classes.len() {
                return Err(Error::Input(format!("prototype class {c} outside {} classes", classes.len())));
            }
            let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::Input(format!("prototype vector has norm {n}, expected 1")));
            }
        }
        Ok(Self { classes, vectors })
    }

    pub fn has_class(&self, c: usize) -> bool {
        self.vectors.iter().any(|(k, _)| *k == c)
    }
}

/// Zero-shot prediction of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotPrediction {
    pub class: usize,
    /// Classes with prototypes, best first.
    pub ranking: Vec<usize>,
    /// Best prototype similarity per class (`-inf` without prototypes).
    pub scores: Vec<f64>,
}

/// Nearest-prototype classification of unit query vectors by dot product.
/// A class scores its best prototype; ties go to the lowest class id.
pub fn zeroshot_classify(queries: &[Vec<f32>], protos: &PrototypeSet) -> Result<Vec<ZeroShotPrediction>> {
    if protos.vectors.is_empty() {
        return Err(Error::Usage("prototype set is empty".into()));
    }
    let c = protos.classes.len();
    queries
        .iter()
        .map(|q| {
            let mut scores = vec![f64::NEG_INFINITY; c];
            for (cls, v) in &protos.vectors {
                if v.len() != q.len() {
                    return Err(Error::Input(format!(
                        "prototype dimension {} differs from query dimension {}",
                        v.len(),
                        q.len()
                    )));
                }
                let s: f64 = q.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum();
                scores[*cls] = scores[*cls].max(s);
            }
            let ranking: Vec<usize> = rank_classes(&scores)
                .into_iter()
                .filter(|&k| protos.has_class(k))
                .collect();
            Ok(ZeroShotPrediction {
                class: ranking[0],
                ranking,
                scores,
            })
        })
        .collect()
}

/// Counts drawn per repeat and class, for protocol verification.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DrawLog {
    /// `train[r][c]`: training windows drawn in repeat `r` for class `c`.
    pub train: Vec<Vec<usize>>,
    pub heldout: Vec<Vec<usize>>,
    /// Whether every repeat's train and heldout index sets were disjoint.
    pub disjoint: bool,
}

pub struct BootstrapOutcome {
    pub report: MetricsReport,
    pub draws: DrawLog,
}

/// Indices of each class in `labels`, for classes `0..num_classes`.
fn by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l < num_classes {
            out[l].push(i);
        }
    }
    out
}

fn repeat_seed(seed: u64, repeat: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (repeat as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Resamples `floor(frac * n_c)` windows per class without replacement in
/// each repeat and scores the fixed zero-shot predictions on the sample.
pub fn bootstrap_zeroshot(
    predictions: &[ZeroShotPrediction],
    labels: &[usize],
    classes: &[String],
    repeats: usize,
    frac: f64,
    seed: u64,
) -> Result<BootstrapOutcome> {
    if predictions.len() != labels.len() {
        return Err(Error::Usage("predictions and labels differ in length".into()));
    }
    if repeats == 0 || !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Config("bootstrap needs repeats >= 1 and frac in (0, 1]".into()));
    }
    let groups = by_class(labels, classes.len());
    for (c, g) in groups.iter().enumerate() {
        if !g.is_empty() && g.len() < 2 {
            return Err(Error::InsufficientSamples {
                class: classes[c].clone(),
                needed: 2,
                available: g.len(),
            });
        }
    }
    let mut draws = DrawLog {
        disjoint: true,
        ..DrawLog::default()
    };
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = train::stream(repeat_seed(seed, r), train::STREAM_SHUFFLE);
        let mut counts = vec![0; classes.len()];
        let (mut rk, mut lb) = (Vec::new(), Vec::new());
        for g in &groups {
            let k = (frac * g.len() as f64 + 1e-9).floor() as usize;
            for &i in g.choose_multiple(&mut rng, k) {
                rk.push(predictions[i].ranking.clone());
                lb.push(labels[i]);
                counts[labels[i]] += 1;
            }
        }
        draws.heldout.push(counts);
        runs.push((rk, lb));
    }
    Ok(BootstrapOutcome {
        report: MetricsReport::from_repeats("zeroshot", classes, &runs),
        draws,
    })
}

// ----------------------------------------------------------------- few-shot

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewShotMode {
    /// Frozen encoder, linear layer only.
    Probe,
    /// Encoder and linear layer with separate learning rates.
    Finetune,
    /// Freshly initialized encoder trained with the labels only.
    Scratch,
}

impl std::str::FromStr for FewShotMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" => Ok(Self::Probe),
            "finetune" => Ok(Self::Finetune),
            "scratch" => Ok(Self::Scratch),
            o => Err(Error::Usage(format!("unknown few-shot mode `{o}`"))),
        }
    }
}

pub const LABEL_COUNTS: [usize; 4] = [10, 20, 50, 100];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotSpec {
    pub labels_per_class: usize,
    pub repeats: usize,
    pub heldout_per_class: usize,
    pub mode: FewShotMode,
    /// Classification layer optimizer (lr applies to the layer).
    pub optim: OptimConfig,
    /// Encoder learning rate in finetune mode.
    pub encoder_lr: f64,
    /// Encoder learning rate in scratch mode. Defaults to the finetune recipe.
    pub scratch_lr: f64,
    /// Probe the projected vector instead of the pooled window embedding.
    pub use_projection: bool,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self {
            labels_per_class: 10,
            repeats: 5,
            heldout_per_class: 20,
            mode: FewShotMode::Probe,
            optim: OptimConfig {
                epochs: 25,
                batch_size: 16,
                lr: 1e-3,
                ..OptimConfig::default()
            },
            encoder_lr: 1e-6,
            scratch_lr: 1e-6,
            use_projection: false,
        }
    }
}

/// A trained linear classification layer in its own store.
pub struct Classifier {
    pub store: ParamStore<f32>,
    pub layer: Linear,
}

impl Classifier {
    fn new(in_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let layer = new_head(&mut store, in_dim, num_classes, seed)?;
        Ok(Self { store, layer })
    }

    pub fn logits(&self, features: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.constant(features_tensor(features)?);
        let y = self.layer.forward(&mut g, &self.store, x)?;
        Ok(g.value(y).rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect())
    }
}

const HEAD_NAME: &str = "fewshot.head";

fn new_head(store: &mut ParamStore<f32>, in_dim: usize, num_classes: usize, seed: u64) -> Result<Linear> {
    let mut rng = train::stream(seed, train::STREAM_INIT);
    Linear::new(store, HEAD_NAME, in_dim, num_classes, &mut rng)
}

fn features_tensor(features: &[Vec<f32>]) -> Result<Tensor<f32>> {
    let d = features.first().map_or(0, Vec::len);
    Ok(Tensor::new(vec![features.len(), d], features.concat())?)
}

/// Trains a linear layer on fixed features with cross-entropy.
pub fn train_probe(
    features: &[Vec<f32>],
    labels: &[usize],
    num_classes: usize,
    optim: &OptimConfig,
    seed: u64,
    progress: Progress<'_>,
) -> Result<(Classifier, TrainLog)> {
    optim.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Input("probe needs equally many features and labels".into()));
    }
    let mut clf = Classifier::new(features[0].len(), num_classes, seed)?;
    let mut opt = AdamW::single_group(optim.adamw(), &clf.store, optim.lr);
    let schedule = optim.schedule(train::num_batches(features.len(), optim.batch_size))?;
    let mut shuffle = train::stream(seed, train::STREAM_SHUFFLE);
    let mut log = TrainLog::default();
    for epoch in 0..optim.epochs {
        let batches = train::epoch_batches(features.len(), optim.batch_size, &mut shuffle);
        let mut total = 0.0;
        for batch in &batches {
            let x: Vec<Vec<f32>> = batch.iter().map(|&i| features[i].clone()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            clf.store.zero_grad();
            let mut g = Graph::new();
            let xv = g.constant(features_tensor(&x)?);
            let logits = clf.layer.forward(&mut g, &clf.store, xv)?;
            let loss = g.cross_entropy(logits, &y)?;
            let value = g.value(loss).item() as f64;
            g.backward(loss)?.accumulate_into(&mut clf.store);
            let step = opt.step_count();
            let factor = train::lr_factor(&schedule, step);
            opt.step(&mut clf.store, factor)?;
            total += value;
            progress(&ProgressRecord {
                mode: "probe".into(),
                epoch,
                step: step + 1,
                loss: value,
                lr: optim.lr * factor,
                t: None,
                b: None,
            });
        }
        log.epoch_loss.push(total / batches.len() as f64);
    }
    Ok((clf, log))
}

/// Trains the IMU encoder and a classification layer jointly: parameter
/// group "encoder" at `encoder_lr`, group "head" at `optim.lr`. The layer
/// must live in `store`. No dropout.
#[allow(clippy::too_many_arguments)]
pub fn train_end_to_end(
    imu: &ImuEncoder,
    head: &Linear,
    store: &mut ParamStore<f32>,
    windows: &[&ImuWindow],
    labels: &[usize],
    optim: &OptimConfig,
    encoder_lr: f64,
    seed: u64,
    mode: &str,
    progress: Progress<'_>,
) -> Result<(AdamW<f32>, TrainLog)> {
    optim.validate()?;
    if !(encoder_lr >= 0.0) {
        return Err(Error::Config("encoder lr must be nonnegative".into()));
    }
    if windows.is_empty() || windows.len() != labels.len() {
        return Err(Error::Input("training needs equally many windows and labels".into()));
    }
    let groups = vec![
        ParamGroup {
            name: "encoder".into(),
            lr: encoder_lr,
            params: imu.embedding_params(store),
        },
        ParamGroup {
            name: "head".into(),
            lr: optim.lr,
            params: vec![head.weight, head.bias],
        },
    ];
    let mut opt = AdamW::new(optim.adamw(), groups, store);
    let schedule = optim.schedule(train::num_batches(windows.len(), optim.batch_size))?;
    let mut shuffle = train::stream(seed, train::STREAM_SHUFFLE);
    let mut log = TrainLog::default();
    for epoch in 0..optim.epochs {
        let batches = train::epoch_batches(windows.len(), optim.batch_size, &mut shuffle);
        let mut total = 0.0;
        for batch in &batches {
            let x: Vec<&ImuWindow> = batch.iter().map(|&i| windows[i]).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            store.zero_grad();
            let mut g = Graph::new();
            let e = imu.window_embedding_var(&mut g, store, &x, None)?;
            let logits = head.forward(&mut g, store, e)?;
            let loss = g.cross_entropy(logits, &y)?;
            let value = g.value(loss).item() as f64;
            g.backward(loss)?.accumulate_into(store);
            let step = opt.step_count();
            let factor = train::lr_factor(&schedule, step);
            opt.step(store, factor)?;
            total += value;
            progress(&ProgressRecord {
                mode: mode.into(),
                epoch,
                step: step + 1,
                loss: value,
                lr: optim.lr * factor,
                t: None,
                b: None,
            });
        }
        log.epoch_loss.push(total / batches.len() as f64);
    }
    Ok((opt, log))
}

/// Class logits of windows through an encoder and layer sharing `store`.
pub fn end_to_end_logits(
    imu: &ImuEncoder,
    head: &Linear,
    store: &ParamStore<f32>,
    windows: &[&ImuWindow],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(64) {
        let mut g = Graph::new();
        let e = imu.window_embedding_var(&mut g, store, chunk, None)?;
        let y = head.forward(&mut g, store, e)?;
        out.extend(g.value(y).rows().map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }
    Ok(out)
}

pub struct FewShotOutcome {
    pub report: MetricsReport,
    pub draws: DrawLog,
    /// Balanced accuracy per repeat.
    pub balanced_accuracy: Vec<f64>,
}

/// Per repeat: draws `n` training and `heldout_per_class` disjoint heldout
/// windows per class, trains according to `spec.mode`, and scores the
/// heldout windows.
pub fn fewshot_protocol(
    model: &Model,
    windows: &[&ImuWindow],
    labels: &[usize],
    classes: &[String],
    spec: &FewShotSpec,
    seed: u64,
) -> Result<FewShotOutcome> {
    let c = classes.len();
    if windows.len() != labels.len() {
        return Err(Error::Usage("windows and labels differ in length".into()));
    }
    if spec.repeats == 0 || spec.labels_per_class == 0 {
        return Err(Error::Config("few-shot needs repeats >= 1 and labels_per_class >= 1".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} outside {c} classes")));
    }
    let groups = by_class(labels, c);
    let need = spec.labels_per_class + spec.heldout_per_class;
    for (k, g) in groups.iter().enumerate() {
        if g.len() < need {
            return Err(Error::InsufficientSamples {
                class: classes[k].clone(),
                needed: need,
                available: g.len(),
            });
        }
    }
    // frozen features are computed once for probing
    let features = match spec.mode {
        FewShotMode::Probe if spec.use_projection => Some(model.project_windows(windows)?),
        FewShotMode::Probe => Some(model.window_embeddings(windows)?),
        _ => None,
    };
    let mut draws = DrawLog {
        disjoint: true,
        ..DrawLog::default()
    };
    let mut runs = Vec::with_capacity(spec.repeats);
    for r in 0..spec.repeats {
        let rs = repeat_seed(seed, r);
        let mut rng = train::stream(rs, train::STREAM_SHUFFLE);
        let (mut tr, mut ho) = (Vec::new(), Vec::new());
        for g in &groups {
            let mut idx = g.clone();
            idx.shuffle(&mut rng);
            tr.extend_from_slice(&idx[..spec.labels_per_class]);
            ho.extend_from_slice(&idx[spec.labels_per_class..need]);
        }
        // counted from the drawn indices, not the requested sizes
        let (mut trc, mut hoc) = (vec![0; c], vec![0; c]);
        tr.iter().for_each(|&i| trc[labels[i]] += 1);
        ho.iter().for_each(|&i| hoc[labels[i]] += 1);
        draws.disjoint &= tr.iter().all(|i| !ho.contains(i));
        draws.train.push(trc);
        draws.heldout.push(hoc);
        let ytr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
        let logits = match spec.mode {
            FewShotMode::Probe => {
                let f = features.as_ref().expect("probe features");
                let xtr: Vec<Vec<f32>> = tr.iter().map(|&i| f[i].clone()).collect();
                let (clf, _) = train_probe(&xtr, &ytr, c, &spec.optim, rs, &mut |_| {})?;
                let xho: Vec<Vec<f32>> = ho.iter().map(|&i| f[i].clone()).collect();
                clf.logits(&xho)?
            }
            FewShotMode::Finetune | FewShotMode::Scratch => {
                let (mut store, imu, enc_lr) = if spec.mode == FewShotMode::Scratch {
                    let cfg = ModelConfig {
                        kind: ModelKind::Masked,
                        patch: model.config.patch,
                        imu: model.config.imu.clone(),
                        video: None,
                        align: None,
                        num_classes: None,
                    };
                    let fresh = Model::new(cfg, rs)?;
                    (fresh.store, fresh.imu, spec.scratch_lr)
                } else {
                    (model.store.clone(), model.imu.clone(), spec.encoder_lr)
                };
                let head = new_head(&mut store, imu.config.embedding_dim(), c, rs)?;
                let wtr: Vec<&ImuWindow> = tr.iter().map(|&i| windows[i]).collect();
                let mode = if spec.mode == FewShotMode::Scratch { "scratch" } else { "finetune" };
                train_end_to_end(&imu, &head, &mut store, &wtr, &ytr, &spec.optim, enc_lr, rs, mode, &mut |_| {})?;
                let who: Vec<&ImuWindow> = ho.iter().map(|&i| windows[i]).collect();
                end_to_end_logits(&imu, &head, &store, &who)?
            }
        };
        let rankings: Vec<Vec<usize>> = logits.iter().map(|l| rank_classes(l)).collect();
        let yho: Vec<usize> = ho.iter().map(|&i| labels[i]).collect();
        runs.push((rankings, yho));
    }
    let protocol = format!(
        "fewshot_{}_{}",
        match spec.mode {
            FewShotMode::Probe => "probe",
            FewShotMode::Finetune => "finetune",
            FewShotMode::Scratch => "scratch",
        },
        spec.labels_per_class
    );
    let report = MetricsReport::from_repeats(&protocol, classes, &runs);
    let balanced_accuracy = report.metric("balanced_accuracy").map(|m| m.values.clone()).unwrap_or_default();
    Ok(FewShotOutcome {
        report,
        draws,
        balanced_accuracy,
    })
}

/// Supervised training of a model's classification layer and IMU encoder
/// on every labeled window.
pub fn train_supervised(
    model: &mut Model,
    windows: &[&ImuWindow],
    labels: &[usize],
    optim: &OptimConfig,
    seed: u64,
    progress: Progress<'_>,
) -> Result<TrainLog> {
    let head = model
        .classifier
        .clone()
        .ok_or_else(|| Error::Usage("model has no classification layer".into()))?;
    let n = head.out_dim;
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Input(format!("label {bad} outside {n} classes")));
    }
    let (_, log) = train_end_to_end(
        &model.imu,
        &head,
        &mut model.store,
        windows,
        labels,
        optim,
        optim.lr,
        seed,
        "supervised",
        progress,
    )?;
    Ok(log)
}

/// Parameter ids of the encoder group; exposed for optimizer inspection.
pub fn encoder_group(imu: &ImuEncoder, store: &ParamStore<f32>) -> Vec<ParamId> {
    imu.embedding_params(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{NUM_CHANNELS, WINDOW_LEN};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2]), 1.0);
        let labels = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let preds = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0];
        assert!((balanced_accuracy(&preds, &labels) - 0.65).abs() < 1e-12);
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        assert!((balanced_accuracy(&[3; 50], &labels) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn recall_and_mrr_examples() {
        // true class 0 placed at ranks 1,2,4,5,3 among 5 classes
        let rankings: Vec<Vec<usize>> = [1usize, 2, 4, 5, 3]
            .iter()
            .map(|&r| {
                let mut v: Vec<usize> = (1..5).collect();
                v.insert(r - 1, 0);
                v
            })
            .collect();
        let labels = [0; 5];
        assert!((recall_at_k(&rankings, &labels, 3) - 0.6).abs() < 1e-12);
        assert_eq!(recall_at_k(&rankings, &labels, 5), 1.0);
        assert_eq!(recall_at_k(&rankings, &labels, 99), 1.0);
        let r3 = &rankings[..3];
        assert!((mrr(r3, &labels[..3]) - 1.75 / 3.0).abs() < 1e-12);
        let worst = vec![vec![1, 2, 0]; 4];
        assert!((mrr(&worst, &[0; 4]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_example() {
        // class A (0): TP 8, FN 2, FP 5; class B (1): TP 5, FN 5, FP 2
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut push = |p: usize, l: usize, n: usize| {
            for _ in 0..n {
                preds.push(p);
                labels.push(l);
            }
        };
        push(0, 0, 8);
        push(1, 0, 2);
        push(1, 1, 5);
        push(0, 1, 5);
        // FP of class B counts predictions of 1 on class-0 items: 2; FP of A: 5
        let f1 = macro_f1(&preds, &labels);
        assert!((f1 - (16.0 / 23.0 + 10.0 / 17.0) / 2.0).abs() < 1e-12, "{f1}");
        assert!((f1 - 0.6420).abs() < 1e-4);
        assert_eq!(macro_f1(&[2, 2], &[2, 2]), 1.0);
    }

    #[test]
    fn zeroshot_examples() {
        let protos = PrototypeSet::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, vec![0.0, 1.0, 0.0]), (1, vec![0.0, 0.0, 1.0]), (2, vec![0.5, 0.75f32.sqrt(), 0.0])],
        )
        .unwrap();
        let q = vec![vec![1.0f32, 0.0, 0.0]];
        let p = zeroshot_classify(&q, &protos).unwrap();
        assert_eq!(p[0].class, 2);
        assert_eq!(p[0].ranking, vec![2, 0, 1]);
        // exact prototype match wins
        let p = zeroshot_classify(&[vec![0.0, 0.0, 1.0]], &protos).unwrap();
        assert_eq!(p[0].class, 1);
        // tie goes to the lowest class id
        let tie = PrototypeSet::new(vec!["a".into(), "b".into()], vec![(1, vec![1.0, 0.0]), (0, vec![1.0, 0.0])]).unwrap();
        assert_eq!(zeroshot_classify(&[vec![0.6, 0.8]], &tie).unwrap()[0].class, 0);
        assert!(matches!(
            PrototypeSet::new(vec!["a".into()], vec![]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn bootstrap_counts_and_degenerate_std() {
        let labels: Vec<usize> = (0..23).map(|i| usize::from(i >= 10)).collect();
        let preds: Vec<ZeroShotPrediction> = labels
            .iter()
            .map(|_| ZeroShotPrediction {
                class: 0,
                ranking: vec![0, 1],
                scores: vec![1.0, 0.0],
            })
            .collect();
        let out = bootstrap_zeroshot(&preds, &labels, &["a".into(), "b".into()], 5, 0.8, 3).unwrap();
        assert_eq!(out.draws.heldout, vec![vec![8, 10]; 5]);
        for m in &out.report.metrics {
            assert_eq!(m.std, 0.0);
            assert_eq!(m.values.len(), 5);
        }
        let one = bootstrap_zeroshot(&preds, &labels, &["a".into(), "b".into()], 1, 0.8, 3).unwrap();
        assert_eq!(one.report.metrics[0].std, 0.0);
        let err = bootstrap_zeroshot(&preds[..11], &labels[..11], &["a".into(), "b".into()], 5, 0.8, 3);
        assert!(matches!(err, Err(Error::InsufficientSamples { ref class, .. }) if class == "b"));
    }

    fn toy_windows(n_per_class: usize, classes: usize, seed: u64) -> (Vec<ImuWindow>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ws = Vec::new();
        let mut ls = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per_class {
                let f = 0.5 + c as f64;
                let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let values = (0..WINDOW_LEN * NUM_CHANNELS)
                    .map(|k| {
                        let t = (k / NUM_CHANNELS) as f64 / 50.0;
                        ((std::f64::consts::TAU * f * t + ph).sin() + 0.1 * rng.random_range(-1.0..1.0)) as f32
                    })
                    .collect();
                ws.push(ImuWindow::new(values, Some(c), "").unwrap());
                ls.push(c);
            }
        }
        (ws, ls)
    }

    fn tiny_spec(mode: FewShotMode) -> FewShotSpec {
        FewShotSpec {
            labels_per_class: 3,
            repeats: 2,
            heldout_per_class: 2,
            mode,
            optim: OptimConfig {
                epochs: 2,
                batch_size: 4,
                lr: 1e-3,
                ..OptimConfig::default()
            },
            ..FewShotSpec::default()
        }
    }

    #[test]
    fn fewshot_draw_counts_and_exact_exhaustion() {
        let (ws, ls) = toy_windows(5, 3, 0);
        let refs: Vec<&ImuWindow> = ws.iter().collect();
        let classes: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
        let model = Model::new(ModelConfig::small(ModelKind::Masked), 0).unwrap();
        let out = fewshot_protocol(&model, &refs, &ls, &classes, &tiny_spec(FewShotMode::Probe), 1).unwrap();
        assert_eq!(out.draws.train, vec![vec![3; 3]; 2]);
        assert_eq!(out.draws.heldout, vec![vec![2; 3]; 2]);
        assert!(out.draws.disjoint);
        let again = fewshot_protocol(&model, &refs, &ls, &classes, &tiny_spec(FewShotMode::Probe), 1).unwrap();
        assert_eq!(out.report, again.report);
        let m = out.report.metric("balanced_accuracy").unwrap();
        let (lo, hi) = m.values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(m.mean >= lo && m.mean <= hi);

        let mut spec = tiny_spec(FewShotMode::Probe);
        spec.labels_per_class = 4;
        let err = fewshot_protocol(&model, &refs, &ls, &classes, &spec, 1);
        assert!(matches!(err, Err(Error::InsufficientSamples { needed: 6, available: 5, .. })));
    }

    #[test]
    fn probe_freezes_and_finetune_moves_encoder() {
        let (ws, ls) = toy_windows(5, 2, 1);
        let refs: Vec<&ImuWindow> = ws.iter().collect();
        let model = Model::new(ModelConfig::small(ModelKind::Masked), 3).unwrap();
        let before = model.store.clone();
        let classes = vec!["a".into(), "b".into()];
        fewshot_protocol(&model, &refs, &ls, &classes, &tiny_spec(FewShotMode::Probe), 0).unwrap();
        assert!(model.store.values_bitwise_eq(&before));

        let mut store = model.store.clone();
        let head = new_head(&mut store, model.imu.config.embedding_dim(), 2, 0).unwrap();
        let (opt, _) = train_end_to_end(
            &model.imu,
            &head,
            &mut store,
            &refs,
            &ls,
            &tiny_spec(FewShotMode::Finetune).optim,
            1e-6,
            0,
            "finetune",
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(opt.group_lr("encoder"), Some(1e-6));
        assert_eq!(opt.group_lr("head"), Some(1e-3));
        let enc = model.imu.embedding_params(&before);
        assert!(enc.iter().any(|&id| store.get(id).value() != before.get(id).value()));
    }

    #[test]
    fn finetune_with_zero_encoder_lr_matches_probe() {
        let (ws, ls) = toy_windows(4, 2, 2);
        let refs: Vec<&ImuWindow> = ws.iter().collect();
        let model = Model::new(ModelConfig::small(ModelKind::Masked), 4).unwrap();
        let spec = tiny_spec(FewShotMode::Probe);
        let feats = model.window_embeddings(&refs).unwrap();
        let mut probe_trace = Vec::new();
        let (clf, _) = train_probe(&feats, &ls, 2, &spec.optim, 9, &mut |r| probe_trace.push(r.loss)).unwrap();

        let mut store = model.store.clone();
        let head = new_head(&mut store, model.imu.config.embedding_dim(), 2, 9).unwrap();
        let mut ft_trace = Vec::new();
        train_end_to_end(
            &model.imu,
            &head,
            &mut store,
            &refs,
            &ls,
            &spec.optim,
            0.0,
            9,
            "finetune",
            &mut |r| ft_trace.push(r.loss),
        )
        .unwrap();
        assert_eq!(probe_trace.len(), ft_trace.len());
        for (a, b) in probe_trace.iter().zip(&ft_trace) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let enc = model.imu.embedding_params(&store);
        assert!(enc.iter().all(|&id| store.get(id).value() == model.store.get(id).value()));
        let w = store.get(head.weight).value();
        assert!(w.max_abs_diff(clf.store.get(clf.layer.weight).value()) < 1e-5);
    }

    #[test]
    fn scratch_and_finetune_modes_run() {
        let (ws, ls) = toy_windows(5, 2, 5);
        let refs: Vec<&ImuWindow> = ws.iter().collect();
        let model = Model::new(ModelConfig::small(ModelKind::Masked), 4).unwrap();
        let classes = vec!["a".into(), "b".into()];
        for mode in [FewShotMode::Finetune, FewShotMode::Scratch] {
            let out = fewshot_protocol(&model, &refs, &ls, &classes, &tiny_spec(mode), 0).unwrap();
            assert_eq!(out.balanced_accuracy.len(), 2);
            assert!(out.report.protocol.contains(if mode == FewShotMode::Scratch { "scratch" } else { "finetune" }));
        }
    }

    #[test]
    fn report_serializations() {
        let runs = vec![(vec![vec![0, 1], vec![0, 1]], vec![0, 1]); 2];
        let rep = MetricsReport::from_repeats("zeroshot", &["a".into(), "b".into()], &runs);
        assert_eq!(rep.to_json_lines().lines().count(), 5);
        assert_eq!(rep.to_csv(true).lines().count(), 6);
        assert_eq!(rep.confusion, vec![vec![2, 0], vec![2, 0]]);
        assert_eq!(rep.per_class_recall, vec![Some(1.0), Some(0.0)]);
    }
}

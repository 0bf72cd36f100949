//! Command implementations behind the `kinalign` binary.

pub mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kinalign_core::align::Pair;
use kinalign_core::dataio::{Dataset, Item, Split};
use kinalign_core::eval::{self, FewShotMode, PrototypeSet, LABEL_COUNTS};
use kinalign_core::imu_encoder::pretrain_masked;
use kinalign_core::model::{Model, ModelKind};
use kinalign_core::signal::ImuWindow;
use kinalign_core::synthdata;
use kinalign_core::train::{ProgressRecord, TrainLog};
use kinalign_core::verify::{self, Suite};
use kinalign_core::video_encoder::ClipInput;
use serde_json::json;

pub use config::RunConfig;

/// Marks an error as bad input or usage (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub anyhow::Error);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

impl UsageError {
    pub fn wrap(e: anyhow::Error) -> anyhow::Error {
        anyhow::Error::new(UsageError(e))
    }
}

fn usage(msg: impl fmt::Display) -> anyhow::Error {
    UsageError::wrap(anyhow!("{msg}"))
}

/// A verification or metric check failed (exit code 1).
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Parser, Debug)]
#[command(name = "kinalign", version, about = "Cross-modal IMU/video pretraining and evaluation")]
pub struct Cli {
    /// Force single-worker, bit-reproducible execution. Execution is always
    /// single-threaded, so this only records the guarantee.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic paired dataset and its manifest.
    SynthGen(SynthGenArgs),
    /// Pretrain an encoder (cross-modal, masked reconstruction, or supervised).
    Pretrain(PretrainArgs),
    /// Zero-shot classification against class prototypes with bootstrap repeats.
    EvalZeroshot(ZeroShotArgs),
    /// Few-shot linear probing or finetuning.
    EvalFewshot(FewShotArgs),
    /// Run verification suites; exits 1 on any failure.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for files and `manifest.tsv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PretrainMode {
    /// Sigmoid contrastive alignment of IMU windows with video clips.
    Cross,
    /// Masked patch reconstruction on IMU windows alone.
    Masked,
    /// Encoder and classification layer trained on labels.
    Supervised,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// `cross` needs clips or precomputed embeddings; `supervised` needs labels.
    #[arg(long, value_enum)]
    pub mode: PretrainMode,
    /// Dataset manifest; the train split is used.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path. The loss log and config echo are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the mode's `optim.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the mode's peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides the mode's batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrototypeSource {
    /// Projected video clips (the zero-shot setting).
    Video,
    /// Projected IMU windows.
    Imu,
}

#[derive(Args, Debug)]
pub struct ZeroShotArgs {
    /// Cross-modal checkpoint with projection heads.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest holding the query windows.
    #[arg(long)]
    pub data: PathBuf,
    /// Manifest holding prototypes; defaults to the prototype split of --data.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    /// Modality embedded as prototypes. Prototype items are the manifest's
    /// prototype split, or every labeled item when it has none.
    #[arg(long, value_enum, default_value = "video")]
    pub prototype_source: PrototypeSource,
    /// Split of --data to classify.
    #[arg(long, default_value = "heldout")]
    pub split: Split,
    /// Bootstrap repeats [config: zeroshot.repeats, 5].
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Fraction of each class drawn per repeat [config: zeroshot.frac, 0.8].
    #[arg(long)]
    pub frac: Option<f64>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for `metrics.jsonl`, `metrics.csv`, `report.json` and the config echo.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FewShotArgs {
    /// Pretrained checkpoint; its encoder is probed or finetuned.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Split supplying both the training draws and the held-out windows.
    #[arg(long, default_value = "ood")]
    pub split: Split,
    /// Training mode [config: fewshot.mode, probe].
    #[arg(long, value_enum)]
    pub mode: Option<FewShotModeArg>,
    /// Labels per class: 10, 20, 50, 100, or `all` for the sweep.
    #[arg(long, default_value = "10")]
    pub labels: LabelsArg,
    /// Repeats of the draw-train-score cycle [config: fewshot.repeats, 5].
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for `fewshot.jsonl`, `fewshot.csv`, `reports.json` and the config echo.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FewShotModeArg {
    /// Frozen encoder, linear layer only.
    Probe,
    /// Encoder and linear layer, separate learning rates.
    Finetune,
    /// Random-init encoder trained with the finetune recipe.
    Scratch,
}

impl From<FewShotModeArg> for FewShotMode {
    fn from(m: FewShotModeArg) -> Self {
        match m {
            FewShotModeArg::Probe => FewShotMode::Probe,
            FewShotModeArg::Finetune => FewShotMode::Finetune,
            FewShotModeArg::Scratch => FewShotMode::Scratch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelsArg(pub Vec<usize>);

impl std::str::FromStr for LabelsArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(Self(LABEL_COUNTS.to_vec()));
        }
        let n: usize = s.parse().map_err(|_| format!("`{s}` is not a label count"))?;
        if !LABEL_COUNTS.contains(&n) {
            return Err(format!("label count must be one of {LABEL_COUNTS:?} or `all`"));
        }
        Ok(Self(vec![n]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    /// Finite-difference checks of every op and three composite paths.
    Gradcheck,
    /// Metrics against brute-force references on 1000 random cases.
    Metrics,
    /// 1000 mutated files through every decoder.
    Formats,
    All,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
}

/// Markdown reference of every command's flags followed by the default
/// configuration file; `docs/cli.md` is this output.
pub fn reference_markdown() -> String {
    use clap::CommandFactory;
    let mut root = Cli::command().term_width(100);
    let mut out = String::from("# kinalign command reference\n\nGenerated from the argument definitions; do not edit by hand.\n\n");
    out.push_str(&format!("```\n{}\n```\n", root.render_long_help().to_string().trim_end()));
    root.build();
    for sub in root.get_subcommands_mut().filter(|c| c.get_name() != "help") {
        let name = sub.get_name().to_string();
        let help = sub.render_long_help().to_string();
        out.push_str(&format!("\n## kinalign {name}\n\n```\n{}\n```\n", help.trim_end()));
    }
    let defaults = toml::to_string(&RunConfig::default()).expect("defaults serialize");
    out.push_str(
        "\n## Configuration file\n\nEvery command takes `--config FILE`. Keys left out keep the defaults below; unknown keys are rejected.\n\n",
    );
    out.push_str(&format!("```toml\n{}\n```\n", defaults.trim_end()));
    out
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", json!({"level": "error", "message": format!("{e:#}"), "exit_code": code}));
            ExitCode::from(code)
        }
    }
}

/// 1 for failed checks and internal numeric errors, 2 for usage and input.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<kinalign_core::Error>() {
        Some(kinalign_core::Error::Tensor(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.deterministic {
        log::info!("deterministic mode: 1 worker");
    }
    match cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Pretrain(a) => pretrain(a),
        Command::EvalZeroshot(a) => eval_zeroshot(a),
        Command::EvalFewshot(a) => eval_fewshot(a),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn progress_line(r: &ProgressRecord) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{}", serde_json::to_string(r).expect("record serializes"));
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(UsageError::wrap)?;
    }
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(UsageError::wrap)
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn labeled<'a>(items: &[&'a Item]) -> anyhow::Result<(Vec<&'a ImuWindow>, Vec<usize>)> {
    let mut windows = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for it in items {
        let l = it.label.ok_or_else(|| usage(format!("item `{}` has no label", it.id)))?;
        windows.push(&it.window);
        labels.push(l);
    }
    Ok((windows, labels))
}

fn synth_gen(a: SynthGenArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.override_seed(a.seed);
    if a.out.is_file() {
        return Err(usage(format!("output path {} is a file", a.out.display())));
    }
    let ds = synthdata::gen_all(&cfg.synth)?;
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .map_err(UsageError::wrap)?;
    let manifest = ds.write(&a.out)?;
    write_text(&a.out.join("run_config.toml"), &cfg.echo("kinalign synth-gen")?)?;
    let count = |s: Split| manifest.items.iter().filter(|i| i.split == s).count();
    println!(
        "{}",
        json!({
            "manifest": a.out.join("manifest.tsv"),
            "classes": manifest.classes,
            "pairs": count(Split::Train) + count(Split::Heldout),
            "train": count(Split::Train),
            "heldout": count(Split::Heldout),
            "ood": count(Split::Ood),
            "prototype": count(Split::Prototype),
        })
    );
    Ok(())
}

/// Sibling file of a checkpoint: `run.ckpt` -> `run.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.override_seed(a.seed);
    let optim = match a.mode {
        PretrainMode::Cross => &mut cfg.cross.optim,
        PretrainMode::Masked => &mut cfg.masked.optim,
        PretrainMode::Supervised => &mut cfg.supervised,
    };
    if let Some(e) = a.epochs {
        optim.epochs = e;
    }
    if let Some(lr) = a.lr {
        optim.lr = lr;
    }
    if let Some(b) = a.batch_size {
        optim.batch_size = b;
    }
    if a.out.is_dir() {
        return Err(usage(format!("--out {} is a directory; give a checkpoint path", a.out.display())));
    }
    let ds = load_dataset(&a.data)?;
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(usage(format!("{} has no train split", a.data.display())));
    }
    let mut progress = |r: &ProgressRecord| progress_line(r);
    let (model, log): (Model, TrainLog) = match a.mode {
        PretrainMode::Cross => {
            if !ds.has_clips(Split::Train) {
                return Err(usage(format!(
                    "cross-modal pretraining needs a clip for every train item in {}",
                    a.data.display()
                )));
            }
            let mut model = Model::new(cfg.model.build(ModelKind::Cross, None), cfg.seed)?;
            let pairs: Vec<Pair> = train
                .iter()
                .map(|it| Pair {
                    window: &it.window,
                    clip: ClipInput {
                        id: &it.id,
                        clip: it.clip.as_ref(),
                    },
                })
                .collect();
            let log = model.pretrain_crossmodal(&pairs, &cfg.cross, &mut progress)?;
            (model, log)
        }
        PretrainMode::Masked => {
            let mut model = Model::new(cfg.model.build(ModelKind::Masked, None), cfg.seed)?;
            let windows: Vec<&ImuWindow> = train.iter().map(|it| &it.window).collect();
            let imu = model.imu.clone();
            let log = pretrain_masked(&imu, &mut model.store, &windows, &cfg.masked, &mut progress)?;
            (model, log)
        }
        PretrainMode::Supervised => {
            let mut model = Model::new(cfg.model.build(ModelKind::Supervised, Some(ds.classes.len())), cfg.seed)?;
            let (windows, labels) = labeled(&train)?;
            let log = eval::train_supervised(&mut model, &windows, &labels, &cfg.supervised, cfg.seed, &mut progress)?;
            (model, log)
        }
    };
    let mut model = model;
    model.classes = ds.classes.clone();
    model.save(&a.out, Some(json!({"config": cfg.to_json()})))?;
    let mut losses = String::new();
    for (epoch, loss) in log.epoch_loss.iter().enumerate() {
        let mut rec = json!({"epoch": epoch, "loss": loss});
        if let Some(d) = log.epoch_dominance.get(epoch) {
            rec["dominance"] = json!(d);
        }
        losses.push_str(&rec.to_string());
        losses.push('\n');
    }
    write_text(&sibling(&a.out, "losses.jsonl"), &losses)?;
    let mode = format!("{:?}", a.mode).to_lowercase();
    write_text(&sibling(&a.out, "config.toml"), &cfg.echo(&format!("kinalign pretrain --mode {mode}"))?)?;
    println!(
        "{}",
        json!({
            "checkpoint": a.out,
            "mode": mode,
            "epochs": log.epoch_loss.len(),
            "first_loss": log.epoch_loss.first(),
            "final_loss": log.epoch_loss.last(),
        })
    );
    Ok(())
}

fn prototype_items<'a>(ds: &'a Dataset) -> Vec<&'a Item> {
    let protos = ds.split(Split::Prototype);
    if protos.is_empty() {
        ds.items.iter().filter(|it| it.label.is_some()).collect()
    } else {
        protos
    }
}

fn eval_zeroshot(a: ZeroShotArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.override_seed(a.seed);
    if let Some(r) = a.repeats {
        cfg.zeroshot.repeats = r;
    }
    if let Some(f) = a.frac {
        cfg.zeroshot.frac = f;
    }
    let model = load_model(&a.ckpt)?;
    if model.heads.is_none() {
        return Err(usage(format!(
            "{} is a {:?} checkpoint; zero-shot needs a cross-modal model",
            a.ckpt.display(),
            model.config.kind
        )));
    }
    let ds = load_dataset(&a.data)?;
    let proto_ds = match &a.prototypes {
        Some(p) => load_dataset(p)?,
        None => ds.clone(),
    };
    let proto_items = prototype_items(&proto_ds);
    if proto_items.is_empty() {
        return Err(usage("no labeled prototype items"));
    }
    let mut proto_labels = Vec::with_capacity(proto_items.len());
    for it in &proto_items {
        let name = &proto_ds.classes[it.label.expect("filtered to labeled")];
        let c = ds
            .classes
            .iter()
            .position(|k| k == name)
            .ok_or_else(|| usage(format!("prototype class `{name}` is not a class of {}", a.data.display())))?;
        proto_labels.push(c);
    }
    let vectors = match a.prototype_source {
        PrototypeSource::Video => {
            if let Some(it) = proto_items.iter().find(|it| it.clip.is_none()) {
                return Err(usage(format!("prototype `{}` has no clip", it.id)));
            }
            let clips: Vec<ClipInput> = proto_items
                .iter()
                .map(|it| ClipInput {
                    id: &it.id,
                    clip: it.clip.as_ref(),
                })
                .collect();
            model.project_clips(&clips)?
        }
        PrototypeSource::Imu => {
            let windows: Vec<&ImuWindow> = proto_items.iter().map(|it| &it.window).collect();
            model.project_windows(&windows)?
        }
    };
    let set = PrototypeSet::new(ds.classes.clone(), proto_labels.into_iter().zip(vectors).collect())?;
    let queries = ds.split(a.split);
    if queries.is_empty() {
        return Err(usage(format!("{} has no {} split", a.data.display(), a.split)));
    }
    let (windows, labels) = labeled(&queries)?;
    let q = model.project_windows(&windows)?;
    let preds = eval::zeroshot_classify(&q, &set)?;
    let out = eval::bootstrap_zeroshot(&preds, &labels, &ds.classes, cfg.zeroshot.repeats, cfg.zeroshot.frac, cfg.seed)?;
    let report = out.report;
    print!("{}", report.to_json_lines());
    if let Some(dir) = &a.out {
        write_text(&dir.join("metrics.jsonl"), &report.to_json_lines())?;
        write_text(&dir.join("metrics.csv"), &report.to_csv(true))?;
        write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&dir.join("run_config.toml"), &cfg.echo("kinalign eval-zeroshot")?)?;
    }
    Ok(())
}

fn eval_fewshot(a: FewShotArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.override_seed(a.seed);
    if let Some(m) = a.mode {
        cfg.fewshot.mode = m.into();
    }
    if let Some(r) = a.repeats {
        cfg.fewshot.repeats = r;
    }
    let model = load_model(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let items = ds.split(a.split);
    if items.is_empty() {
        return Err(usage(format!("{} has no {} split", a.data.display(), a.split)));
    }
    let (windows, labels) = labeled(&items)?;
    let mut jsonl = String::new();
    let mut csv = String::from("protocol,metric,mean,std\n");
    let mut reports = Vec::new();
    for &n in &a.labels.0 {
        let spec = eval::FewShotSpec {
            labels_per_class: n,
            ..cfg.fewshot.clone()
        };
        let out = eval::fewshot_protocol(&model, &windows, &labels, &ds.classes, &spec, cfg.seed)?;
        let ba = out.report.metric("balanced_accuracy").expect("always reported");
        let row = json!({
            "protocol": out.report.protocol,
            "labels_per_class": n,
            "mode": format!("{:?}", spec.mode).to_lowercase(),
            "balanced_accuracy": {"mean": ba.mean, "std": ba.std, "values": ba.values},
            "metrics": out.report.metrics,
        });
        println!("{row}");
        jsonl.push_str(&row.to_string());
        jsonl.push('\n');
        csv.push_str(&out.report.to_csv(false));
        reports.push(out.report);
    }
    if let Some(dir) = &a.out {
        write_text(&dir.join("fewshot.jsonl"), &jsonl)?;
        write_text(&dir.join("fewshot.csv"), &csv)?;
        write_text(&dir.join("reports.json"), &serde_json::to_string_pretty(&reports)?)?;
        write_text(&dir.join("run_config.toml"), &cfg.echo("kinalign eval-fewshot")?)?;
    }
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> anyhow::Result<()> {
    let suites = match a.suite {
        SuiteArg::Gradcheck => vec![Suite::Gradcheck],
        SuiteArg::Metrics => vec![Suite::Metrics],
        SuiteArg::Formats => vec![Suite::Formats],
        SuiteArg::All => vec![Suite::Gradcheck, Suite::Metrics, Suite::Formats],
    };
    let mut failed = 0;
    let mut total = 0;
    for s in suites {
        for c in verify::run(s)? {
            total += 1;
            if !c.passed {
                failed += 1;
            }
            println!("{}", serde_json::to_string(&c)?);
        }
    }
    println!("{}", json!({"checks": total, "failed": failed}));
    if failed > 0 {
        bail!(CheckFailed(format!("{failed} of {total} checks failed")));
    }
    Ok(())
}

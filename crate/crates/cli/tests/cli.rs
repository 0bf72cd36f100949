use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kinalign_core::dataio::{Dataset, Split};
use kinalign_core::model::Model;

fn kinalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinalign"))
        .args(args)
        .env("KINALIGN_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A reduced synthetic set so training commands finish quickly.
const SMALL: &str = "
[synth]
per_class = 20
ood_per_class = 40
prototypes_per_class = 2
";

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    manifest: PathBuf,
}

fn small_env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    let o = kinalign(&["synth-gen", "--config", s(&config), "--out", s(&data), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    Env {
        _dir: dir,
        manifest: data.join("manifest.tsv"),
        root,
        config,
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_gen_defaults_give_1000_pairs_and_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = kinalign(&["synth-gen", "--out", s(&a), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["pairs"], 1000);
    assert!(a.join("run_config.toml").is_file());
    assert_eq!(code(&kinalign(&["synth-gen", "--out", s(&b), "--seed", "5"])), 0);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 1000);
    assert_eq!(ta.len(), tb.len());
    let differing: Vec<_> = ta.iter().zip(&tb).filter(|(x, y)| x != y).map(|(x, _)| x.0.clone()).collect();
    assert!(differing.is_empty(), "{differing:?}");
}

#[test]
fn synth_gen_into_a_file_path_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("taken");
    fs::write(&file, "x").unwrap();
    let o = kinalign(&["synth-gen", "--out", s(&file)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("is a file"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[synth]\nper_klass = 3\n").unwrap();
    let o = kinalign(&["synth-gen", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("per_klass"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_2() {
    assert_eq!(code(&kinalign(&["pretrain", "--mode", "sideways", "--data", "x", "--out", "y"])), 2);
    assert_eq!(code(&kinalign(&["eval-fewshot", "--ckpt", "a", "--data", "b", "--labels", "7"])), 2);
    assert_eq!(code(&kinalign(&["frobnicate"])), 2);
}

#[test]
fn missing_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = kinalign(&[
        "pretrain",
        "--mode",
        "masked",
        "--data",
        s(&dir.path().join("nope.tsv")),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn masked_pretrain_writes_decreasing_loss_log_and_progress() {
    let env = small_env();
    let ckpt = env.root.join("runs/masked.ckpt");
    let o = kinalign(&[
        "pretrain", "--mode", "masked", "--data", s(&env.manifest), "--config", s(&env.config),
        "--out", s(&ckpt), "--epochs", "6",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let losses: Vec<f64> = fs::read_to_string(env.root.join("runs/masked.losses.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 6);
    assert!(losses[5] < losses[0], "{losses:?}");
    assert!(env.root.join("runs/masked.config.toml").is_file());
    // Every stderr line is a JSON record.
    let records: Vec<serde_json::Value> = stderr(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.iter().any(|r| r["mode"] == "masked"));
}

#[test]
fn cross_with_zero_epochs_saves_the_initialization() {
    let env = small_env();
    let ckpt = env.root.join("init.ckpt");
    let o = kinalign(&[
        "pretrain", "--mode", "cross", "--data", s(&env.manifest), "--out", s(&ckpt), "--epochs", "0", "--seed", "4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let saved = Model::load(&ckpt).unwrap();
    let fresh = Model::new(saved.config.clone(), 4).unwrap();
    for ((_, a), (_, b)) in saved.store.iter().zip(fresh.store.iter()) {
        assert_eq!(a.name(), b.name());
        assert_eq!(a.value(), b.value(), "{}", a.name());
    }
}

#[test]
fn cross_on_clipless_manifest_exits_2() {
    let env = small_env();
    let mut ds = Dataset::load(&env.manifest).unwrap();
    ds.items.retain(|it| it.split == Split::Train);
    for it in &mut ds.items {
        it.clip = None;
    }
    let dir = env.root.join("noclips");
    ds.write(&dir).unwrap();
    let o = kinalign(&[
        "pretrain", "--mode", "cross", "--data", s(&dir.join("manifest.tsv")), "--out", s(&env.root.join("c.ckpt")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("clip"), "{}", stderr(&o));
}

#[test]
fn seeded_pretraining_is_bit_reproducible_and_the_echo_reruns_it() {
    let env = small_env();
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["--deterministic", "pretrain", "--mode", "cross", "--data", s(&env.manifest), "--out", s(out)];
        args.extend_from_slice(extra);
        let o = kinalign(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(out).unwrap()
    };
    let a = run(&env.root.join("a.ckpt"), &["--config", s(&env.config), "--epochs", "2", "--seed", "8"]);
    let b = run(&env.root.join("b.ckpt"), &["--config", s(&env.config), "--epochs", "2", "--seed", "8"]);
    assert_eq!(a, b);
    let echo = env.root.join("a.config.toml");
    let c = run(&env.root.join("c.ckpt"), &["--config", s(&echo)]);
    assert_eq!(a, c);
    let d = run(&env.root.join("d.ckpt"), &["--config", s(&env.config), "--epochs", "2", "--seed", "9"]);
    assert_ne!(a, d);
}

#[test]
fn zeroshot_reports_five_metrics_reproducibly() {
    let env = small_env();
    let ckpt = env.root.join("x.ckpt");
    let o = kinalign(&[
        "pretrain", "--mode", "cross", "--data", s(&env.manifest), "--config", s(&env.config),
        "--out", s(&ckpt), "--epochs", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out_dir = env.root.join("zs");
    let args = ["eval-zeroshot", "--ckpt", s(&ckpt), "--data", s(&env.manifest), "--seed", "2", "--out", s(&out_dir)];
    let first = kinalign(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let rows: Vec<serde_json::Value> = stdout(&first).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r["metric"].as_str().unwrap()).collect();
    assert_eq!(names, ["balanced_accuracy", "macro_f1", "mrr", "recall_at_1", "recall_at_3"]);
    for r in &rows {
        assert!(r["mean"].is_f64() && r["std"].is_f64());
        assert_eq!(r["values"].as_array().unwrap().len(), 5);
    }
    let second = kinalign(&args);
    assert_eq!(stdout(&first), stdout(&second));
    for f in ["metrics.jsonl", "metrics.csv", "report.json", "run_config.toml"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
}

#[test]
fn zeroshot_with_prototypes_equal_to_queries_is_perfect() {
    let env = small_env();
    let ckpt = env.root.join("x.ckpt");
    assert_eq!(
        code(&kinalign(&["pretrain", "--mode", "cross", "--data", s(&env.manifest), "--out", s(&ckpt), "--epochs", "0"])),
        0
    );
    let mut ds = Dataset::load(&env.manifest).unwrap();
    ds.items.retain(|it| it.split == Split::Heldout);
    let dir = env.root.join("heldout_only");
    ds.write(&dir).unwrap();
    let m = dir.join("manifest.tsv");
    let o = kinalign(&[
        "eval-zeroshot", "--ckpt", s(&ckpt), "--data", s(&m), "--prototypes", s(&m), "--prototype-source", "imu",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ba: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(ba["metric"], "balanced_accuracy");
    assert_eq!(ba["mean"], 1.0);
}

#[test]
fn zeroshot_rejects_non_cross_checkpoints() {
    let env = small_env();
    let ckpt = env.root.join("m.ckpt");
    kinalign(&["pretrain", "--mode", "masked", "--data", s(&env.manifest), "--out", s(&ckpt), "--epochs", "0"]);
    let o = kinalign(&["eval-zeroshot", "--ckpt", s(&ckpt), "--data", s(&env.manifest)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fewshot_sweep_rows_frozen_checkpoint_and_insufficient_class() {
    let env = small_env();
    let ckpt = env.root.join("m.ckpt");
    let o = kinalign(&["pretrain", "--mode", "masked", "--data", s(&env.manifest), "--out", s(&ckpt), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let before = fs::read(&ckpt).unwrap();

    // Train split: 16 per class, enough for 10 + 4 held out.
    let cfg = env.root.join("fs.toml");
    fs::write(&cfg, "[fewshot]\nheldout_per_class = 4\nrepeats = 2\n[fewshot.optim]\nepochs = 2\n").unwrap();
    let o = kinalign(&[
        "eval-fewshot", "--ckpt", s(&ckpt), "--data", s(&env.manifest), "--split", "train", "--labels", "10",
        "--config", s(&cfg),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1);
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    // 40 OOD windows per class cannot supply 50 + 4.
    let o = kinalign(&[
        "eval-fewshot", "--ckpt", s(&ckpt), "--data", s(&env.manifest), "--labels", "all", "--config", s(&cfg),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("class `activity0`"), "{}", stderr(&o));
}

#[test]
fn fewshot_all_gives_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "[synth]\nper_class = 10\nnum_classes = 2\nood_per_class = 104\nprototypes_per_class = 1\n\
         [fewshot]\nheldout_per_class = 4\nrepeats = 1\n[fewshot.optim]\nepochs = 1\n",
    )
    .unwrap();
    let data = dir.path().join("d");
    assert_eq!(code(&kinalign(&["synth-gen", "--config", s(&cfg), "--out", s(&data)])), 0);
    let m = data.join("manifest.tsv");
    let ckpt = dir.path().join("m.ckpt");
    assert_eq!(
        code(&kinalign(&["pretrain", "--mode", "masked", "--data", s(&m), "--out", s(&ckpt), "--epochs", "0"])),
        0
    );
    let out = dir.path().join("fs");
    let o = kinalign(&[
        "eval-fewshot", "--ckpt", s(&ckpt), "--data", s(&m), "--labels", "all", "--config", s(&cfg), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let counts: Vec<u64> = rows.iter().map(|r| r["labels_per_class"].as_u64().unwrap()).collect();
    assert_eq!(counts, [10, 20, 50, 100]);
    assert!(out.join("run_config.toml").is_file());
}

#[test]
fn supervised_pretraining_runs() {
    let env = small_env();
    let ckpt = env.root.join("sup.ckpt");
    let o = kinalign(&[
        "pretrain", "--mode", "supervised", "--data", s(&env.manifest), "--out", s(&ckpt), "--epochs", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = Model::load(&ckpt).unwrap();
    assert!(m.classifier.is_some());
    assert_eq!(m.classes.len(), 5);
}

#[test]
fn verify_suites_pass() {
    for suite in ["formats", "metrics", "gradcheck"] {
        let o = kinalign(&["verify", "--suite", suite]);
        assert_eq!(code(&o), if cfg!(feature = "corrupt-gradients") && suite == "gradcheck" { 1 } else { 0 }, "{}", stdout(&o));
        let last: serde_json::Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
        assert!(last["checks"].as_u64().unwrap() >= 1);
    }
}

/// Regenerate with `KINALIGN_BLESS=1 cargo test -p kinalign-cli --test cli reference`.
#[test]
fn cli_reference_doc_is_current() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/cli.md");
    let want = kinalign_cli::reference_markdown();
    if std::env::var_os("KINALIGN_BLESS").is_some() {
        fs::write(&path, &want).unwrap();
    }
    let have = fs::read_to_string(&path).unwrap_or_default();
    assert!(have == want, "docs/cli.md is stale; rerun with KINALIGN_BLESS=1");
}

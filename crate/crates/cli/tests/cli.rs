use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "corpus.families=4",
    "--set",
    "corpus.per_family=12",
    "--set",
    "model.d=16",
    "--set",
    "schedule.batch_size=8",
    "--set",
    "schedule.epochs_primary=1",
    "--set",
    "schedule.epochs_linear=1",
    "--set",
    "schedule.epochs_nonlinear=1",
    "--set",
    "schedule.checkpoint_every=2",
    "--set",
    "task.epochs=1",
];

fn run(workdir: &Path, args: &[&str]) -> Output {
    run_with(workdir, args, SMALL)
}

fn run_with(workdir: &Path, args: &[&str], overrides: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binalign"))
        .args(args)
        .arg("--workdir")
        .arg(workdir)
        .args(overrides)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = run(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn corpus_writes_splits_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["corpus"]);
    ok(b.path(), &["corpus"]);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"] {
        let pa = a.path().join("corpus").join(f);
        assert!(pa.exists(), "{f} missing");
        assert_eq!(read(&pa), read(b.path().join("corpus").join(f)), "{f} differs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(a.path().join("corpus/manifest.json"))).unwrap();
    assert_eq!(manifest.as_array().unwrap().len(), 3);
    assert!(a.path().join("corpus/config.toml").exists());
}

#[test]
fn invalid_configuration_exits_with_code_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["corpus", "--ratios", "0.5,0.5,0.5"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["corpus", "--set", "corpus.nonsense=1"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["pretrain", "--preset", "bogus"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["eval"]).status.code(), Some(2));
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[schedule]\nlr = \"fast\"\n").unwrap();
    assert_eq!(
        run(d.path(), &["corpus", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn preset_is_recorded_in_resolved_config() {
    let d = tempfile::tempdir().unwrap();
    let small_corpus = &SMALL[..8];
    let out = run_with(d.path(), &["pretrain", "--preset", "pcl", "--max-steps", "1"], small_corpus);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(d.path().join("pretrain/config.toml")).unwrap();
    let v: toml::Value = toml::from_str(&text).unwrap();
    let s = &v["schedule"];
    assert_eq!(s["epochs_primary"].as_integer(), Some(10));
    assert_eq!(s["epochs_linear"].as_integer(), Some(0));
    assert_eq!(s["epochs_nonlinear"].as_integer(), Some(0));

    // Explicit overrides win over the preset.
    let out = run_with(
        d.path(),
        &["pretrain", "--preset", "pcl", "--max-steps", "1", "--set", "schedule.epochs_primary=2"],
        small_corpus,
    );
    assert!(out.status.success());
    let v: toml::Value = toml::from_str(&fs::read_to_string(d.path().join("pretrain/config.toml")).unwrap()).unwrap();
    assert_eq!(v["schedule"]["epochs_primary"].as_integer(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(&cfg, "[corpus]\nfamilies = 3\nseed = 1\n").unwrap();
    ok(d.path(), &["corpus", "--config", cfg.to_str().unwrap(), "--seed", "5"]);
    let v: toml::Value = toml::from_str(&fs::read_to_string(d.path().join("corpus/config.toml")).unwrap()).unwrap();
    assert_eq!(v["corpus"]["seed"].as_integer(), Some(5));
    // `--set corpus.families=4` in SMALL comes after the file.
    assert_eq!(v["corpus"]["families"].as_integer(), Some(4));
}

#[test]
fn interrupted_pretraining_resumes_to_the_same_result() {
    let full = tempfile::tempdir().unwrap();
    let cut = tempfile::tempdir().unwrap();
    ok(full.path(), &["pretrain"]);
    let out = ok(cut.path(), &["pretrain", "--max-steps", "4"]);
    assert!(out.contains("stopped at step 4"));
    assert!(!cut.path().join("pretrain/final.ckpt").exists());
    ok(cut.path(), &["pretrain", "--resume"]);
    assert_eq!(
        read(full.path().join("pretrain/final.ckpt")),
        read(cut.path().join("pretrain/final.ckpt"))
    );
    assert_eq!(
        read(full.path().join("pretrain/trainlog.jsonl")),
        read(cut.path().join("pretrain/trainlog.jsonl"))
    );
    for stage in ["primary", "linear", "nonlinear"] {
        assert!(full.path().join(format!("pretrain/{stage}-end.ckpt")).exists());
    }
}

#[test]
fn resume_without_checkpoint_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["pretrain", "--resume"]).status.code(), Some(2));
}

#[test]
fn finetune_eval_embed_analyze_pipeline() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["pretrain"]);
    ok(d.path(), &["finetune"]);
    let table = ok(d.path(), &["eval"]);
    assert!(table.contains("precision") && table.contains("MAF1="), "{table}");
    let report: serde_json::Value =
        serde_json::from_slice(&read(d.path().join("eval/functionality-pretrained.report.json"))).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));
    assert!(report["confusion"].is_array());

    ok(d.path(), &["embed"]);
    let csv = fs::read_to_string(d.path().join("embed/pretrained.embeddings.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("id,label,v0,"));
    assert_eq!(header.split(',').count(), 2 + 16);
    let proj = fs::read_to_string(d.path().join("embed/pretrained.projection.csv")).unwrap();
    assert_eq!(proj.lines().next().unwrap(), "id,label,x,y");
    assert_eq!(proj.lines().count(), csv.lines().count());

    let ids: Vec<String> = csv.lines().skip(1).take(2).map(|l| l.split(',').next().unwrap().to_string()).collect();
    let out = ok(d.path(), &["analyze", "--pair", &ids[0], &ids[1]]);
    assert!(out.contains("percentile"));
    let pair: serde_json::Value = serde_json::from_slice(&read(d.path().join("analyze/pretrained.pair.json"))).unwrap();
    let p = pair["percentile"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&p));
    assert!(d.path().join("analyze/pretrained.clusters.json").exists());

    assert_eq!(run(d.path(), &["analyze", "--pair", "nope", &ids[1]]).status.code(), Some(2));
}

#[test]
fn scratch_init_needs_no_pretraining() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["finetune", "--init", "scratch"]);
    ok(d.path(), &["eval", "--init", "scratch"]);
    assert!(d.path().join("eval/functionality-scratch.report.json").exists());
    assert_eq!(run(d.path(), &["finetune", "--init", "pretrained"]).status.code(), Some(2));
}

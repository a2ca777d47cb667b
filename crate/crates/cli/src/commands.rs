use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use binalign::analyze::{cluster_stats, dump_embeddings, pair_distance_report, project_2d, EmbeddingDump};
use binalign::corpus::{
    generate_corpus, load_jsonl, save_jsonl, split_corpus, CorpusManifest, CorpusSplits, ProgramTriplet, SplitMode,
};
use binalign::encoder::EncoderParams;
use binalign::tasks::{evaluate, filter_name_labels, finetune, Classifier, TaskKind};
use binalign::textcodec::Vocab;
use binalign::trainer::{Checkpoint, Trainer};
use log::info;
use serde::Serialize;

use crate::config::{Init, RunConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn stage_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.paths.workdir.join(name);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes the resolved configuration next to a command's outputs.
fn persist_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(binalign::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn build_splits(cfg: &RunConfig) -> Result<CorpusSplits> {
    let c = &cfg.corpus;
    let triplets = match &c.jsonl_path {
        Some(p) => load_jsonl(p)?,
        None => generate_corpus(c.seed, c.families, c.per_family)?,
    };
    Ok(split_corpus(&triplets, c.ratios, c.seed, c.split)?)
}

pub fn corpus(cfg: &RunConfig) -> Result<()> {
    let splits = build_splits(cfg)?;
    let dir = stage_dir(cfg, "corpus")?;
    let mut manifests = Vec::new();
    for (name, part) in splits.named() {
        save_jsonl(part, &dir.join(format!("{name}.jsonl")))?;
        let m = CorpusManifest::build(name, part);
        println!(
            "{name}: {} triplets, {} families, {} names",
            m.triplet_count, m.family_count, m.name_count
        );
        manifests.push(m);
    }
    write_json(&dir.join("manifest.json"), &manifests)?;
    persist_config(cfg, &dir)?;
    Ok(())
}

/// Splits from `corpus/` when present, otherwise generated and written there.
fn splits(cfg: &RunConfig) -> Result<CorpusSplits> {
    let dir = cfg.paths.workdir.join("corpus");
    if !dir.join("manifest.json").exists() {
        corpus(cfg)?;
    }
    Ok(CorpusSplits {
        train: load_jsonl(&dir.join("train.jsonl"))?,
        dev: load_jsonl(&dir.join("dev.jsonl"))?,
        test: load_jsonl(&dir.join("test.jsonl"))?,
    })
}

/// Keeps the first `n` lines of a JSONL log.
fn truncate_log(path: &Path, n: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let lines: Vec<String> = BufReader::new(fs::File::open(path)?)
        .lines()
        .take(n as usize)
        .collect::<std::io::Result<_>>()?;
    let mut f = fs::File::create(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, resume: bool, max_steps: Option<u64>) -> Result<()> {
    let train = splits(cfg)?.train;
    let dir = stage_dir(cfg, "pretrain")?;
    let latest = dir.join("latest.ckpt");
    let log_path = dir.join("trainlog.jsonl");
    let mut trainer = if resume {
        if !latest.exists() {
            return Err(CliError::Config(format!("--resume given but {} does not exist", latest.display())));
        }
        let ck = Checkpoint::load_expecting(&latest, &cfg.train_config().model)?;
        info!("resuming from global step {}", ck.position.global_step);
        truncate_log(&log_path, ck.position.global_step)?;
        Trainer::from_checkpoint(ck, &train)?
    } else {
        let _ = fs::remove_file(&log_path);
        let vocab = Vocab::build(&train, cfg.model.max_vocab)?;
        Trainer::new(&cfg.train_config(), &train, vocab)?
    };
    trainer = trainer.with_output(&dir)?;
    persist_config(cfg, &dir)?;
    let total = trainer.total_steps();
    let every = cfg.schedule.checkpoint_every.max(1) as u64;
    let mut budget = max_steps.unwrap_or(u64::MAX);
    while budget > 0 {
        let Some(r) = trainer.step()? else { break };
        budget -= 1;
        let line = format!("{} {} loss {:.4}", r.stage, r.choice, r.loss);
        let step = trainer.position().global_step;
        if step % 10 == 0 || step == total {
            info!("step {step}/{total} {line}");
        }
        if step % every == 0 {
            trainer.save_checkpoint(&latest)?;
        }
    }
    trainer.save_checkpoint(&latest)?;
    if trainer.position().global_step < total {
        println!("stopped at step {} of {total}; continue with --resume", trainer.position().global_step);
        return Ok(());
    }
    trainer.save_checkpoint(&dir.join("final.ckpt"))?;
    let losses = trainer.log().losses();
    match (losses.first(), losses.last()) {
        (Some(a), Some(b)) => println!("pre-training finished: {} steps, loss {a:.4} -> {b:.4}", losses.len()),
        _ => println!("pre-training finished: schedule already complete"),
    }
    Ok(())
}

/// Binary encoder and vocabulary for the requested initialisation.
fn encoder_for(cfg: &RunConfig, init: Init) -> Result<(EncoderParams, Vocab)> {
    let path = cfg.paths.workdir.join("pretrain").join("final.ckpt");
    match init {
        Init::Pretrained => {
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "no pre-trained checkpoint at {}; run `pretrain` first or use --init scratch",
                    path.display()
                )));
            }
            let ck = Checkpoint::load_expecting(&path, &cfg.train_config().model)?;
            Ok((ck.model.binary, ck.vocab))
        }
        Init::Scratch => {
            let train = splits(cfg)?.train;
            let vocab = Vocab::build(&train, cfg.model.max_vocab)?;
            let enc_cfg = cfg.train_config().model.encoder_config(vocab.len());
            Ok((EncoderParams::init(cfg.schedule.seed, &enc_cfg)?, vocab))
        }
    }
}

/// Examples of the families not used for pre-training, divided by example
/// into a fine-tuning part and an evaluation part.
fn task_data(cfg: &RunConfig) -> Result<(Vec<ProgramTriplet>, Vec<ProgramTriplet>)> {
    let s = splits(cfg)?;
    let mut held: Vec<ProgramTriplet> = s.dev.into_iter().chain(s.test).collect();
    if cfg.task.name == TaskKind::NameRecovery {
        held = filter_name_labels(&held, cfg.task.min_label_count, &cfg.task.excluded_names);
    }
    let f = cfg.task.test_fraction;
    let parts = split_corpus(&held, [1.0 - f, 0.0, f], cfg.corpus.seed, SplitMode::ById)?;
    Ok((parts.train, parts.test))
}

fn classifier_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .workdir
        .join("finetune")
        .join(format!("{}-{}.ckpt", task_tag(cfg.task.name), cfg.task.init.tag()))
}

fn task_tag(t: TaskKind) -> &'static str {
    match t {
        TaskKind::Functionality => "functionality",
        TaskKind::NameRecovery => "name-recovery",
    }
}

pub fn finetune_cmd(cfg: &RunConfig) -> Result<()> {
    let (encoder, vocab) = encoder_for(cfg, cfg.task.init)?;
    let (train, _) = task_data(cfg)?;
    let (clf, log) = finetune(encoder, &vocab, &train, &cfg.task.finetune())?;
    let dir = stage_dir(cfg, "finetune")?;
    clf.save(&classifier_path(cfg))?;
    let stem = format!("{}-{}", task_tag(cfg.task.name), cfg.task.init.tag());
    write_json(&dir.join(format!("{stem}.log.json")), &log)?;
    persist_config(cfg, &dir)?;
    println!(
        "fine-tuned {} classes on {} examples; training accuracy by epoch {:?}",
        clf.labels.len(),
        train.len(),
        log.epoch_accuracy.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let path = classifier_path(cfg);
    if !path.exists() {
        return Err(CliError::Config(format!("no classifier at {}; run `finetune` first", path.display())));
    }
    let clf = Classifier::load(&path)?;
    let (_, test) = task_data(cfg)?;
    let report = evaluate(&clf, &test, cfg.task.eval_batch)?;
    print!("{}", report.table());
    let dir = stage_dir(cfg, "eval")?;
    let stem = format!("{}-{}", task_tag(cfg.task.name), cfg.task.init.tag());
    write_json(&dir.join(format!("{stem}.report.json")), &report)?;
    persist_config(cfg, &dir)?;
    Ok(())
}

fn held_out_dump(cfg: &RunConfig) -> Result<EmbeddingDump> {
    let (encoder, vocab) = encoder_for(cfg, cfg.task.init)?;
    let s = splits(cfg)?;
    let held: Vec<ProgramTriplet> = s.dev.into_iter().chain(s.test).collect();
    Ok(dump_embeddings(&encoder, &vocab, &held, cfg.task.init.tag(), "held-out")?)
}

pub fn embed(cfg: &RunConfig) -> Result<()> {
    let dump = held_out_dump(cfg)?;
    let dir = stage_dir(cfg, "embed")?;
    let tag = cfg.task.init.tag();
    dump.write_csv(&dir.join(format!("{tag}.embeddings.csv")))?;
    let proj = project_2d(&dump)?;
    proj.write_csv(&dir.join(format!("{tag}.projection.csv")))?;
    persist_config(cfg, &dir)?;
    println!(
        "{} embeddings of dimension {}; top-2 components keep {:.1}% of variance{}",
        dump.rows.len(),
        dump.dim(),
        100.0 * proj.retained_ratio(),
        if proj.degenerate { " (degenerate input)" } else { "" }
    );
    Ok(())
}

pub fn analyze(cfg: &RunConfig) -> Result<()> {
    let dump = held_out_dump(cfg)?;
    let dir = stage_dir(cfg, "analyze")?;
    let tag = cfg.task.init.tag();
    let stats = cluster_stats(&dump)?;
    println!(
        "within-family cosine {:.4}, across-family cosine {:.4}, silhouette {:.4}",
        stats.within_family_cosine, stats.across_family_cosine, stats.silhouette
    );
    write_json(&dir.join(format!("{tag}.clusters.json")), &stats)?;
    if let Some([a, b]) = &cfg.analyze.pair {
        let r = pair_distance_report(&dump, a, b).map_err(|e| CliError::Config(e.to_string()))?;
        println!(
            "pair {} / {}: cosine distance {:.6}, percentile {:.2}",
            r.id_a, r.id_b, r.cosine_distance, r.percentile
        );
        write_json(&dir.join(format!("{tag}.pair.json")), &r)?;
    }
    persist_config(cfg, &dir)?;
    Ok(())
}

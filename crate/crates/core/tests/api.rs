use binalign::analyze::{dump_embeddings, project_2d, EmbeddingDump};
use binalign::corpus::{corpus_digest, generate_corpus, load_jsonl, save_jsonl, split_corpus, SplitMode};
use binalign::encoder::Pooling;
use binalign::optim::{OptimConfig, Optimizer, OptimizerRegistry};
use binalign::tasks::{evaluate, finetune, Classifier, FinetuneConfig, TaskKind};
use binalign::textcodec::Vocab;
use binalign::trainer::{Checkpoint, ModelConfig, ObjectiveRegistry, StageSchedule, TrainConfig, Trainer};
use serde_json::Value;

fn tiny_config(epochs: (usize, usize, usize)) -> TrainConfig {
    TrainConfig {
        schedule: StageSchedule {
            batch_size: 8,
            lr: 1e-3,
            seed: 42,
            ..StageSchedule::new(epochs)
        },
        model: ModelConfig {
            d_model: 16,
            d: 8,
            layers: 1,
            heads: 2,
            block_size: 64,
            max_vocab: 256,
            pooling: Pooling::Mean,
        },
        optimizer: "adam".into(),
        ..TrainConfig::default()
    }
}

struct Frozen;

impl Optimizer for Frozen {
    fn name(&self) -> &str {
        "frozen"
    }
    fn set_lr(&mut self, _lr: f64) {}
    fn step(&mut self, _slot: &str, _params: &mut [&mut [f64]], _grads: &[&[f64]]) -> binalign::Result<()> {
        Ok(())
    }
    fn state(&self) -> Value {
        Value::Null
    }
    fn load_state(&mut self, _state: Value) -> binalign::Result<()> {
        Ok(())
    }
}

#[test]
fn registries_resolve_by_name() {
    let mut reg = OptimizerRegistry::default();
    assert!(reg.names().contains(&"adam") && reg.names().contains(&"sgd"));
    assert!(reg.create(&OptimConfig::new("lbfgs", 0.1)).is_err());
    reg.register("frozen", |_| Box::new(Frozen));
    let mut opt = reg.create(&OptimConfig::new("frozen", 0.1)).unwrap();
    let mut w = vec![1.0, 2.0];
    opt.step("w", &mut [w.as_mut_slice()], &[&[5.0, 5.0]]).unwrap();
    assert_eq!(w, vec![1.0, 2.0]);

    let objectives = ObjectiveRegistry::default();
    for name in ["primary", "linear-interp", "nonlinear-interp", "multi-objective"] {
        assert!(objectives.get(name).is_ok(), "{name}");
    }
    assert!(objectives.get("unknown").is_err());
}

#[test]
fn corpus_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(11, 5, 6).unwrap();
    let path = dir.path().join("c.jsonl");
    save_jsonl(&corpus, &path).unwrap();
    let back = load_jsonl(&path).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(corpus_digest(&back), corpus_digest(&generate_corpus(11, 5, 6).unwrap()));
}

#[test]
fn label_split_keeps_families_disjoint() {
    let corpus = generate_corpus(2, 8, 4).unwrap();
    let s = split_corpus(&corpus, [0.5, 0.25, 0.25], 2, SplitMode::ByLabel).unwrap();
    for t in &s.test {
        assert!(s.train.iter().all(|u| u.family_label != t.family_label));
    }
    assert_eq!(s.train.len() + s.dev.len() + s.test.len(), corpus.len());
}

#[test]
fn checkpoint_restores_an_identical_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(3, 4, 4).unwrap();
    let vocab = Vocab::build(&corpus, 256).unwrap();
    let mut a = Trainer::new(&tiny_config((1, 1, 1)), &corpus, vocab).unwrap();
    a.run_steps(3).unwrap();
    let path = dir.path().join("mid.ckpt");
    a.save_checkpoint(&path).unwrap();
    let mut b = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap(), &corpus).unwrap();
    a.run_steps(3).unwrap();
    b.run_steps(3).unwrap();
    assert_eq!(a.model(), b.model());
    assert_eq!(a.position(), b.position());
}

#[test]
fn finetuned_classifier_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(5, 3, 8).unwrap();
    let vocab = Vocab::build(&corpus, 256).unwrap();
    let trainer = Trainer::new(&tiny_config((1, 0, 0)), &corpus, vocab.clone()).unwrap();
    let cfg = FinetuneConfig {
        epochs: 2,
        block_size: 64,
        ..FinetuneConfig::desk(TaskKind::Functionality)
    };
    let (clf, log) = finetune(trainer.model().binary.clone(), &vocab, &corpus, &cfg).unwrap();
    assert_eq!(log.epoch_accuracy.len(), 2);
    let path = dir.path().join("clf.ckpt");
    clf.save(&path).unwrap();
    let back = Classifier::load(&path).unwrap();
    let r1 = evaluate(&clf, &corpus, 16).unwrap();
    let r2 = evaluate(&back, &corpus, 16).unwrap();
    assert_eq!(r1.confusion, r2.confusion);
    assert_eq!(r1.n, corpus.len());
}

#[test]
fn embedding_dump_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(9, 3, 4).unwrap();
    let vocab = Vocab::build(&corpus, 256).unwrap();
    let trainer = Trainer::new(&tiny_config((1, 0, 0)), &corpus, vocab.clone()).unwrap();
    let dump = dump_embeddings(&trainer.model().binary, &vocab, &corpus, "m", "c").unwrap();
    let path = dir.path().join("e.csv");
    dump.write_csv(&path).unwrap();
    let back = EmbeddingDump::read_csv(&path, "m", "c").unwrap();
    assert_eq!(back.rows.len(), dump.rows.len());
    for (x, y) in back.rows.iter().zip(&dump.rows) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.vector, y.vector);
    }
    let proj = project_2d(&back).unwrap();
    assert_eq!(proj.rows.len(), corpus.len());
    assert!(proj.retained_ratio() > 0.0 && proj.retained_ratio() <= 1.0 + 1e-12);
}

//! Supervised fine-tuning of a pre-trained binary encoder for classification
//! tasks, and the macro-averaged metric suite used to score it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::ProgramTriplet;
use crate::encoder::{EncoderParams, INIT_STD};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, log_softmax_rows, softmax_rows, Linear, Parameters};
use crate::optim::{OptimConfig, OptimizerRegistry};
use crate::textcodec::{Modality, TokenSequence, Vocab};
use crate::trainer::{embed_all, mix_seed};

pub const CLASSIFIER_KIND: &str = "classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Predict the algorithm family of a binary.
    Functionality,
    /// Predict the original name of a stripped function.
    NameRecovery,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "functionality" => Ok(Self::Functionality),
            "name-recovery" | "name_recovery" => Ok(Self::NameRecovery),
            other => Err(Error::Unknown {
                kind: "task",
                name: other.to_string(),
            }),
        }
    }

    pub fn label_of(self, t: &ProgramTriplet) -> Option<&str> {
        match self {
            Self::Functionality => t.family_label.as_deref(),
            Self::NameRecovery => t.func_name_label.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task: TaskKind,
    pub epochs: usize,
    pub block_size: usize,
    pub train_batch: usize,
    pub eval_batch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_min_label_count")]
    pub min_label_count: usize,
    #[serde(default = "default_excluded_names")]
    pub excluded_names: Vec<String>,
}

fn default_optimizer() -> String {
    "adam".into()
}

fn default_min_label_count() -> usize {
    2
}

fn default_excluded_names() -> Vec<String> {
    vec!["main".into(), "_".into(), "__list_add".into()]
}

impl FinetuneConfig {
    /// Settings reported for the full-scale experiments.
    pub fn reference(task: TaskKind) -> Self {
        let (epochs, block_size, train_batch, eval_batch) = match task {
            TaskKind::Functionality => (2, 400, 32, 8),
            TaskKind::NameRecovery => (5, 256, 8, 16),
        };
        Self {
            task,
            epochs,
            block_size,
            train_batch,
            eval_batch,
            lr: 2e-5,
            max_grad_norm: 1.0,
            seed: 123456,
            optimizer: default_optimizer(),
            hidden: None,
            min_label_count: default_min_label_count(),
            excluded_names: default_excluded_names(),
        }
    }

    /// Small-model settings that converge in minutes on a CPU.
    pub fn desk(task: TaskKind) -> Self {
        Self {
            epochs: 8,
            block_size: 128,
            train_batch: 16,
            eval_batch: 64,
            lr: 1e-3,
            ..Self::reference(task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.train_batch == 0 || self.eval_batch == 0 {
            return Err(Error::config("epochs and batch sizes must be positive"));
        }
        if self.block_size < 3 {
            return Err(Error::config("block_size must leave room for content tokens"));
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return Err(Error::config("max_grad_norm must be positive"));
        }
        OptimConfig::new(&self.optimizer, self.lr).validate()
    }
}

/// Sorted, deduplicated class names with their indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    labels: Vec<String>,
}

impl LabelMap {
    pub fn new(labels: impl IntoIterator<Item = String>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if labels.len() < 2 {
            return Err(Error::Validation(format!(
                "a classifier needs at least 2 classes, found {}",
                labels.len()
            )));
        }
        Ok(Self { labels })
    }

    pub fn from_triplets(task: TaskKind, triplets: &[ProgramTriplet]) -> Result<Self> {
        let labels = triplets
            .iter()
            .map(|t| {
                task.label_of(t)
                    .map(str::to_string)
                    .ok_or_else(|| Error::Validation(format!("triplet `{}` has no {task:?} label", t.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Class indices for `triplets`; a label outside the map is an error.
    pub fn encode(&self, task: TaskKind, triplets: &[ProgramTriplet]) -> Result<Vec<usize>> {
        triplets
            .iter()
            .map(|t| {
                let l = task
                    .label_of(t)
                    .ok_or_else(|| Error::Validation(format!("triplet `{}` has no {task:?} label", t.id)))?;
                self.index(l).ok_or_else(|| {
                    Error::Validation(format!("label `{l}` of `{}` is absent from the training split", t.id))
                })
            })
            .collect()
    }
}

/// Keeps name-recovery examples whose label is frequent enough and not generic.
pub fn filter_name_labels(
    triplets: &[ProgramTriplet],
    min_count: usize,
    excluded: &[String],
) -> Vec<ProgramTriplet> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in triplets {
        if let Some(n) = t.func_name_label.as_deref() {
            *counts.entry(n).or_default() += 1;
        }
    }
    triplets
        .iter()
        .filter(|t| match t.func_name_label.as_deref() {
            Some(n) => counts[n] >= min_count && !excluded.iter().any(|e| e == n),
            None => false,
        })
        .cloned()
        .collect()
}

/// Linear map to class logits, with an optional GELU hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub hidden: Option<Linear>,
    pub out: Linear,
}

pub struct HeadCache {
    input: Array2<f64>,
    pre: Option<Array2<f64>>,
    act: Option<Array2<f64>>,
}

impl Parameters for ClassifierHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        if let Some(h) = &self.hidden {
            h.visit(f);
        }
        self.out.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        if let Some(h) = &mut self.hidden {
            h.visit_mut(f);
        }
        self.out.visit_mut(f);
    }
}

impl ClassifierHead {
    pub fn new(seed: u64, d: usize, num_classes: usize, hidden: Option<usize>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config(format!("num_classes must be at least 2, got {num_classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = hidden.map(|h| Linear::new(&mut rng, d, h, INIT_STD));
        let fan_in = hidden.as_ref().map_or(d, Linear::fan_out);
        Ok(Self {
            hidden,
            out: Linear::zeros(fan_in, num_classes),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.out.fan_out()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        match &self.hidden {
            None => (
                self.out.forward(x),
                HeadCache {
                    input: x.clone(),
                    pre: None,
                    act: None,
                },
            ),
            Some(h) => {
                let pre = h.forward(x);
                let act = gelu(&pre);
                let logits = self.out.forward(&act);
                (
                    logits,
                    HeadCache {
                        input: x.clone(),
                        pre: Some(pre),
                        act: Some(act),
                    },
                )
            }
        }
    }

    /// Returns the parameter gradient and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &HeadCache, d_logits: &Array2<f64>) -> (Self, Array2<f64>) {
        let mut grad = self.zeros_like();
        match (&self.hidden, &cache.pre, &cache.act) {
            (Some(h), Some(pre), Some(act)) => {
                let d_act = self.out.backward(act, d_logits, &mut grad.out);
                let d_pre = gelu_backward(pre, &d_act);
                let g_hidden = grad.hidden.as_mut().expect("hidden gradient");
                let dx = h.backward(&cache.input, &d_pre, g_hidden);
                (grad, dx)
            }
            _ => {
                let dx = self.out.backward(&cache.input, d_logits, &mut grad.out);
                (grad, dx)
            }
        }
    }
}

/// A fine-tuned encoder with its head, label map and tokeniser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub task: TaskKind,
    pub block_size: usize,
    pub vocab: Vocab,
    pub labels: LabelMap,
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
}

impl Classifier {
    fn encode(&self, triplets: &[ProgramTriplet]) -> Vec<TokenSequence> {
        triplets
            .iter()
            .map(|t| self.vocab.encode(&t.binary_text, Modality::Binary, self.block_size))
            .collect()
    }

    pub fn logits(&self, triplets: &[ProgramTriplet], chunk: usize) -> Result<Array2<f64>> {
        let emb = embed_all(&self.encoder, &self.encode(triplets), chunk)?;
        Ok(self.head.forward(&emb).0)
    }

    pub fn predict(&self, triplets: &[ProgramTriplet], chunk: usize) -> Result<Vec<usize>> {
        Ok(self.logits(triplets, chunk)?.rows().into_iter().map(|r| argmax(r.iter())).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CLASSIFIER_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path, CLASSIFIER_KIND)
    }
}

fn argmax<'a>(it: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub losses: Vec<f64>,
    /// Training-batch accuracy per epoch, in percent.
    pub epoch_accuracy: Vec<f64>,
}

/// Full-model fine-tuning with cross-entropy over the classes of `train`.
pub fn finetune(
    encoder: EncoderParams,
    vocab: &Vocab,
    train: &[ProgramTriplet],
    config: &FinetuneConfig,
) -> Result<(Classifier, FinetuneLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::config("fine-tuning split is empty"));
    }
    if config.block_size > encoder.config.block_size {
        return Err(Error::config(format!(
            "fine-tuning block_size {} exceeds the encoder's block_size {}",
            config.block_size, encoder.config.block_size
        )));
    }
    let labels = LabelMap::from_triplets(config.task, train)?;
    let targets = labels.encode(config.task, train)?;
    let head = ClassifierHead::new(config.seed, encoder.config.d, labels.len(), config.hidden)?;
    let mut clf = Classifier {
        task: config.task,
        block_size: config.block_size,
        vocab: vocab.clone(),
        labels,
        encoder,
        head,
    };
    let seqs = clf.encode(train);
    let mut opt = OptimizerRegistry::default().create(&OptimConfig::new(&config.optimizer, config.lr))?;
    let mut log = FinetuneLog::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64])));
        let mut hits = 0usize;
        for idx in order.chunks(config.train_batch) {
            let batch: Vec<&TokenSequence> = idx.iter().map(|&i| &seqs[i]).collect();
            let (emb, cache) = clf.encoder.forward(&batch)?;
            let (logits, hcache) = clf.head.forward(&emb.matrix);
            let logp = log_softmax_rows(&logits);
            let n = idx.len() as f64;
            let mut loss = 0.0;
            let mut d_logits = softmax_rows(&logits);
            for (r, &i) in idx.iter().enumerate() {
                let y = targets[i];
                loss -= logp[[r, y]];
                d_logits[[r, y]] -= 1.0;
                if argmax(logits.row(r).iter()) == y {
                    hits += 1;
                }
            }
            loss /= n;
            d_logits /= n;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: log.losses.len() as u64,
                    last_checkpoint: None,
                });
            }
            log.losses.push(loss);
            let (mut g_head, d_emb) = clf.head.backward(&hcache, &d_logits);
            let mut g_enc = clf.encoder.backward(&cache, &d_emb)?;
            let norm = (g_head.sq_norm() + g_enc.sq_norm()).sqrt();
            if norm > config.max_grad_norm {
                let s = config.max_grad_norm / norm;
                g_head.scale(s);
                g_enc.scale(s);
            }
            opt.step("encoder", &mut clf.encoder.slices_mut(), &g_enc.slices())?;
            opt.step("head", &mut clf.head.slices_mut(), &g_head.slices())?;
        }
        log.epoch_accuracy.push(100.0 * hits as f64 / train.len() as f64);
    }
    Ok((clf, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

/// Accuracy is micro-averaged; MAP, MAR and MAF1 are macro-averaged over the
/// classes that occur in either the gold or the predicted labels. All values
/// are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub map: f64,
    pub mar: f64,
    pub maf1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[g][p]` over `labels`, gold rows and predicted columns.
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(gold: &[usize], pred: &[usize], labels: &[String]) -> Result<Self> {
        if gold.is_empty() {
            return Err(Error::config("cannot evaluate an empty split"));
        }
        if gold.len() != pred.len() {
            return Err(Error::shape(format!("{} gold labels but {} predictions", gold.len(), pred.len())));
        }
        let k = labels.len();
        if let Some(&bad) = gold.iter().chain(pred).find(|&&c| c >= k) {
            return Err(Error::shape(format!("class index {bad} outside {k} labels")));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for (&g, &p) in gold.iter().zip(pred) {
            confusion[g][p] += 1;
        }
        let present: BTreeSet<usize> = gold.iter().chain(pred).copied().collect();
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let per_class: Vec<ClassMetrics> = present
            .iter()
            .map(|&c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    label: labels[c].clone(),
                    precision: 100.0 * precision,
                    recall: 100.0 * recall,
                    f1: 100.0 * f1,
                    support,
                    predicted,
                }
            })
            .collect();
        let m = per_class.len() as f64;
        let correct = (0..k).map(|c| confusion[c][c]).sum::<usize>();
        Ok(Self {
            n: gold.len(),
            accuracy: 100.0 * correct as f64 / gold.len() as f64,
            map: per_class.iter().map(|c| c.precision).sum::<f64>() / m,
            mar: per_class.iter().map(|c| c.recall).sum::<f64>() / m,
            maf1: per_class.iter().map(|c| c.f1).sum::<f64>() / m,
            per_class,
            labels: labels.to_vec(),
            confusion,
        })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let w = self.per_class.iter().map(|c| c.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<w$}  {:>9}  {:>9}  {:>9}  {:>7}", "class", "precision", "recall", "f1", "support");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<w$}  {:>9.2}  {:>9.2}  {:>9.2}  {:>7}",
                c.label, c.precision, c.recall, c.f1, c.support
            );
        }
        let _ = writeln!(s, "n={} accuracy={:.2} MAP={:.2} MAR={:.2} MAF1={:.2}", self.n, self.accuracy, self.map, self.mar, self.maf1);
        s
    }
}

pub fn evaluate(clf: &Classifier, split: &[ProgramTriplet], chunk: usize) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let gold = clf.labels.encode(clf.task, split)?;
    let pred = clf.predict(split, chunk)?;
    EvalReport::from_predictions(&gold, &pred, clf.labels.labels())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub first: EvalReport,
    pub second: EvalReport,
    /// `first - second`, in points.
    pub delta_accuracy: f64,
    pub delta_maf1: f64,
}

/// Fine-tunes and evaluates two encoders under identical settings.
pub fn compare(
    first: &EncoderParams,
    second: &EncoderParams,
    vocab: &Vocab,
    train: &[ProgramTriplet],
    test: &[ProgramTriplet],
    config: &FinetuneConfig,
) -> Result<Comparison> {
    let run = |enc: &EncoderParams| -> Result<EvalReport> {
        let (clf, _) = finetune(enc.clone(), vocab, train, config)?;
        evaluate(&clf, test, config.eval_batch)
    };
    let a = run(first)?;
    let b = run(second)?;
    Ok(Comparison {
        delta_accuracy: a.accuracy - b.accuracy,
        delta_maf1: a.maf1 - b.maf1,
        first: a,
        second: b,
    })
}

/// `compare` against a freshly initialised encoder of the same shape.
pub fn compare_pretrained_vs_scratch(
    pretrained: &EncoderParams,
    scratch_seed: u64,
    vocab: &Vocab,
    train: &[ProgramTriplet],
    test: &[ProgramTriplet],
    config: &FinetuneConfig,
) -> Result<Comparison> {
    let scratch = EncoderParams::init(scratch_seed, &pretrained.config)?;
    compare(pretrained, &scratch, vocab, train, test, config)
}

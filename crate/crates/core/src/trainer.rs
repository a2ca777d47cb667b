//! Staged pre-training: primary contrastive alignment, then linear and
//! non-linear interpolation stages, with checkpointing and resumable,
//! deterministic batch order.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::contrastive::{interp_step, pair_loss, InterpMode, InterpNet};
use crate::corpus::{corpus_digest, ProgramTriplet};
use crate::encoder::{
    batch_key_of, freeze, trainable, EmbeddingBatch, EncoderConfig, EncoderHandle, EncoderParams, ForwardCache, Pooling,
};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::optim::{OptimConfig, Optimizer, OptimizerRegistry};
use crate::textcodec::{Modality, TokenSequence, Vocab};

pub const CHECKPOINT_KIND: &str = "pretrain";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs_primary: usize,
    pub epochs_linear: usize,
    pub epochs_nonlinear: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            epochs_primary: 10,
            epochs_linear: 10,
            epochs_nonlinear: 10,
            batch_size: 32,
            lr: 2e-5,
            seed: 42,
        }
    }
}

impl StageSchedule {
    pub fn new(epochs: (usize, usize, usize)) -> Self {
        Self {
            epochs_primary: epochs.0,
            epochs_linear: epochs.1,
            epochs_nonlinear: epochs.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_primary + self.epochs_linear + self.epochs_nonlinear == 0 {
            return Err(Error::config("schedule has no epochs in any stage"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for in-batch contrast"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub drop_comments: bool,
    pub unfreeze_anchor: bool,
    pub disable_interpolation: bool,
    pub multi_objective: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub block_size: usize,
    pub max_vocab: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d: 32,
            layers: 2,
            heads: 4,
            block_size: 256,
            max_vocab: 2048,
            pooling: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            block_size: self.block_size,
            d_model: self.d_model,
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            pooling: self.pooling,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to zero over the whole schedule.
    Cosine,
    /// Linear ramp from zero over the first quarter of the schedule, then constant.
    Warmup,
}

impl LrSchedule {
    pub fn at(self, lr: f64, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
            LrSchedule::Warmup => {
                let ramp = (total as f64 / 4.0).max(1.0);
                lr * ((step + 1) as f64 / ramp).min(1.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: StageSchedule,
    #[serde(default)]
    pub flags: AblationFlags,
    pub model: ModelConfig,
    pub tau: f64,
    #[serde(default)]
    pub learnable_tau: bool,
    #[serde(default)]
    pub renorm_interp: bool,
    /// One interpolation index per batch instead of per example in the linear stage.
    #[serde(default)]
    pub single_scalar_lambda: bool,
    /// One anchored network for both source and comments, or two identical copies.
    pub shared_anchor: bool,
    pub optimizer: String,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: StageSchedule::default(),
            flags: AblationFlags::default(),
            model: ModelConfig::default(),
            tau: 1.0,
            learnable_tau: false,
            renorm_interp: false,
            single_scalar_lambda: false,
            shared_anchor: true,
            optimizer: "sgd".into(),
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Resolves flag interactions and checks ranges.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        if c.flags.disable_interpolation {
            c.schedule.epochs_linear = 0;
            c.schedule.epochs_nonlinear = 0;
        }
        c.schedule.validate()?;
        c.model.encoder_config(8).validate()?;
        if !(c.tau.is_finite() && c.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", c.tau)));
        }
        OptimConfig::new(&c.optimizer, c.schedule.lr).validate()?;
        Ok(c)
    }

    pub fn stage_plan(&self) -> Vec<(Stage, usize)> {
        let s = &self.schedule;
        if self.flags.multi_objective {
            let total = s.epochs_primary + s.epochs_linear + s.epochs_nonlinear;
            return vec![(Stage::MultiObjective, total)];
        }
        [
            (Stage::Primary, s.epochs_primary),
            (Stage::Linear, s.epochs_linear),
            (Stage::Nonlinear, s.epochs_nonlinear),
        ]
        .into_iter()
        .filter(|(_, e)| *e > 0)
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Primary,
    Linear,
    Nonlinear,
    MultiObjective,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Primary => "primary",
            Stage::Linear => "linear",
            Stage::Nonlinear => "nonlinear",
            Stage::MultiObjective => "multi_objective",
        }
    }

    pub fn objective(self) -> &'static str {
        match self {
            Stage::Primary => "primary",
            Stage::Linear => "linear-interp",
            Stage::Nonlinear => "nonlinear-interp",
            Stage::MultiObjective => "multi-objective",
        }
    }
}

/// Parameter sets that may receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Binary,
    SourceAnchor,
    CommentAnchor,
    InterpLinear,
    InterpNonlinear,
    Tau,
}

impl Group {
    pub fn slot(self) -> &'static str {
        match self {
            Group::Binary => "binary",
            Group::SourceAnchor => "anchor_source",
            Group::CommentAnchor => "anchor_comment",
            Group::InterpLinear => "interp_linear",
            Group::InterpNonlinear => "interp_nonlinear",
            Group::Tau => "tau",
        }
    }
}

/// What a step contrasts.
#[derive(Debug, Clone, PartialEq)]
pub enum Choice {
    Pair { anchor: Modality, train: Modality },
    Triple { first: Modality, second: Modality, other: Modality },
    Average(Vec<(Modality, Modality)>),
}

impl Choice {
    pub fn modalities(&self) -> Vec<Modality> {
        let mut v = match self {
            Choice::Pair { anchor, train } => vec![*anchor, *train],
            Choice::Triple { first, second, other } => vec![*first, *second, *other],
            Choice::Average(pairs) => pairs.iter().flat_map(|(a, b)| [*a, *b]).collect(),
        };
        v.sort_by_key(|m| m.short());
        v.dedup();
        v
    }
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Pair { anchor, train } => write!(f, "{}-{}", anchor.short(), train.short()),
            Choice::Triple { first, second, other } => {
                write!(f, "{}+{}|{}", first.short(), second.short(), other.short())
            }
            Choice::Average(pairs) => {
                let parts: Vec<String> = pairs.iter().map(|(a, b)| format!("{}-{}", a.short(), b.short())).collect();
                write!(f, "avg({})", parts.join(","))
            }
        }
    }
}

pub struct StepContext<'a> {
    pub embeddings: &'a BTreeMap<&'static str, EmbeddingBatch>,
    pub interp_linear: &'a InterpNet,
    pub interp_nonlinear: &'a InterpNet,
    pub tau: f64,
    pub renorm: bool,
}

impl StepContext<'_> {
    fn emb(&self, m: Modality) -> Result<&EmbeddingBatch> {
        self.embeddings
            .get(m.short())
            .ok_or_else(|| Error::contract(format!("objective used modality {:?} it did not request", m)))
    }
}

pub struct StepOutput {
    pub loss: f64,
    pub diag_acc: f64,
    pub d_emb: Vec<(Modality, Array2<f64>)>,
    pub d_interp: Option<(Group, InterpNet)>,
    pub d_tau: f64,
}

/// One training objective per stage.
pub trait StageObjective: Send + Sync {
    fn name(&self) -> &'static str;
    /// Groups this objective may update under `flags`.
    fn licensed(&self, flags: &AblationFlags) -> Vec<Group>;
    fn choose(&self, rng: &mut ChaCha8Rng, flags: &AblationFlags) -> Choice;
    fn compute(&self, choice: &Choice, ctx: &StepContext) -> Result<StepOutput>;
}

fn anchor_groups(flags: &AblationFlags) -> Vec<Group> {
    if flags.unfreeze_anchor {
        vec![Group::SourceAnchor, Group::CommentAnchor]
    } else {
        Vec::new()
    }
}

pub struct PrimaryObjective;

impl StageObjective for PrimaryObjective {
    fn name(&self) -> &'static str {
        "primary"
    }

    fn licensed(&self, flags: &AblationFlags) -> Vec<Group> {
        let mut g = vec![Group::Binary, Group::Tau];
        g.extend(anchor_groups(flags));
        g
    }

    fn choose(&self, rng: &mut ChaCha8Rng, flags: &AblationFlags) -> Choice {
        let anchor = if flags.drop_comments || rng.random_bool(0.5) {
            Modality::Source
        } else {
            Modality::Comment
        };
        Choice::Pair {
            anchor,
            train: Modality::Binary,
        }
    }

    fn compute(&self, choice: &Choice, ctx: &StepContext) -> Result<StepOutput> {
        let Choice::Pair { anchor, train } = choice else {
            return Err(Error::contract("primary objective expects a pair"));
        };
        let out = pair_loss(&ctx.emb(*anchor)?.matrix, &ctx.emb(*train)?.matrix, ctx.tau)?;
        Ok(StepOutput {
            loss: out.loss,
            diag_acc: out.diagonal_accuracy(),
            d_tau: out.d_tau,
            d_emb: vec![(*anchor, out.d_anchor), (*train, out.d_train)],
            d_interp: None,
        })
    }
}

pub struct InterpObjective {
    pub nonlinear: bool,
}

impl InterpObjective {
    fn group(&self) -> Group {
        if self.nonlinear {
            Group::InterpNonlinear
        } else {
            Group::InterpLinear
        }
    }
}

impl StageObjective for InterpObjective {
    fn name(&self) -> &'static str {
        if self.nonlinear {
            "nonlinear-interp"
        } else {
            "linear-interp"
        }
    }

    fn licensed(&self, flags: &AblationFlags) -> Vec<Group> {
        let mut g = vec![Group::Binary, self.group(), Group::Tau];
        g.extend(anchor_groups(flags));
        g
    }

    fn choose(&self, rng: &mut ChaCha8Rng, flags: &AblationFlags) -> Choice {
        use Modality::*;
        if flags.drop_comments {
            return Choice::Triple {
                first: Source,
                second: Binary,
                other: Source,
            };
        }
        let options = [(Source, Comment, Binary), (Source, Binary, Comment), (Binary, Comment, Source)];
        let (first, second, other) = options[rng.random_range(0..options.len())];
        Choice::Triple { first, second, other }
    }

    fn compute(&self, choice: &Choice, ctx: &StepContext) -> Result<StepOutput> {
        let Choice::Triple { first, second, other } = choice else {
            return Err(Error::contract("interpolation objective expects a triple"));
        };
        let net = if self.nonlinear {
            ctx.interp_nonlinear
        } else {
            ctx.interp_linear
        };
        let st = interp_step(
            net,
            ctx.emb(*first)?,
            ctx.emb(*second)?,
            ctx.emb(*other)?,
            ctx.tau,
            ctx.renorm,
        )?;
        Ok(StepOutput {
            loss: st.loss.loss,
            diag_acc: st.loss.diagonal_accuracy(),
            d_tau: st.loss.d_tau,
            d_emb: vec![(*first, st.d_h1), (*second, st.d_h2), (*other, st.d_other)],
            d_interp: Some((self.group(), st.d_net)),
        })
    }
}

pub struct MultiObjective;

impl StageObjective for MultiObjective {
    fn name(&self) -> &'static str {
        "multi-objective"
    }

    fn licensed(&self, flags: &AblationFlags) -> Vec<Group> {
        let mut g = vec![Group::Binary, Group::Tau];
        g.extend(anchor_groups(flags));
        g
    }

    fn choose(&self, _rng: &mut ChaCha8Rng, flags: &AblationFlags) -> Choice {
        use Modality::*;
        if flags.drop_comments {
            Choice::Average(vec![(Source, Binary)])
        } else {
            Choice::Average(vec![(Comment, Binary), (Source, Binary), (Comment, Source)])
        }
    }

    fn compute(&self, choice: &Choice, ctx: &StepContext) -> Result<StepOutput> {
        let Choice::Average(pairs) = choice else {
            return Err(Error::contract("multi-objective expects a pair list"));
        };
        let k = pairs.len() as f64;
        let mut out = StepOutput {
            loss: 0.0,
            diag_acc: 0.0,
            d_emb: Vec::new(),
            d_interp: None,
            d_tau: 0.0,
        };
        for (a, b) in pairs {
            let p = pair_loss(&ctx.emb(*a)?.matrix, &ctx.emb(*b)?.matrix, ctx.tau)?;
            out.loss += p.loss / k;
            out.d_tau += p.d_tau / k;
            if *b == Modality::Binary {
                out.diag_acc = p.diagonal_accuracy();
            }
            out.d_emb.push((*a, p.d_anchor / k));
            out.d_emb.push((*b, p.d_train / k));
        }
        Ok(out)
    }
}

/// Name-to-objective table.
pub struct ObjectiveRegistry {
    objectives: BTreeMap<String, Box<dyn StageObjective>>,
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        let mut r = Self {
            objectives: BTreeMap::new(),
        };
        r.register(Box::new(PrimaryObjective));
        r.register(Box::new(InterpObjective { nonlinear: false }));
        r.register(Box::new(InterpObjective { nonlinear: true }));
        r.register(Box::new(MultiObjective));
        r
    }
}

impl ObjectiveRegistry {
    pub fn register(&mut self, objective: Box<dyn StageObjective>) {
        self.objectives.insert(objective.name().to_string(), objective);
    }

    pub fn get(&self, name: &str) -> Result<&dyn StageObjective> {
        self.objectives
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Unknown {
                kind: "objective",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.objectives.keys().map(String::as_str).collect()
    }
}

/// All learnable state of a pre-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub source_anchor: EncoderParams,
    pub comment_anchor: Option<EncoderParams>,
    pub binary: EncoderParams,
    pub interp_linear: InterpNet,
    pub interp_nonlinear: InterpNet,
    pub log_tau: f64,
}

impl Model {
    pub fn init(config: &TrainConfig, vocab_size: usize) -> Result<Self> {
        let enc = config.model.encoder_config(vocab_size);
        let seed = config.schedule.seed;
        let anchor = EncoderParams::init(seed, &enc)?;
        let linear_mode = if config.single_scalar_lambda {
            InterpMode::Scalar
        } else {
            InterpMode::Linear
        };
        Ok(Self {
            comment_anchor: (!config.shared_anchor).then(|| anchor.clone()),
            binary: anchor.clone(),
            source_anchor: anchor,
            interp_linear: InterpNet::new(seed.wrapping_add(1), linear_mode, enc.d),
            interp_nonlinear: InterpNet::new(seed.wrapping_add(2), InterpMode::Nonlinear, enc.d),
            log_tau: config.tau.ln(),
        })
    }

    /// Digest of every anchored parameter.
    pub fn anchor_checksum(&self) -> String {
        anchor_checksum(&self.source_anchor, self.comment_anchor.as_ref())
    }
}

fn anchor_checksum(source: &EncoderParams, comment: Option<&EncoderParams>) -> String {
    match comment {
        None => source.checksum(),
        Some(c) => {
            let joined = format!("{}{}", source.checksum(), c.checksum());
            hex::encode(<sha2::Sha256 as sha2::Digest>::digest(joined.as_bytes()))
        }
    }
}

/// Token sequences for every modality of a fixed, ordered corpus.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub ids: Vec<String>,
    pub source: Vec<TokenSequence>,
    pub binary: Vec<TokenSequence>,
    pub comment: Vec<TokenSequence>,
}

impl EncodedCorpus {
    pub fn new(triplets: &[ProgramTriplet], vocab: &Vocab, block_size: usize) -> Self {
        let enc = |m: Modality| -> Vec<TokenSequence> {
            triplets.iter().map(|t| vocab.encode(t.text(m), m, block_size)).collect()
        };
        Self {
            ids: triplets.iter().map(|t| t.id.clone()).collect(),
            source: enc(Modality::Source),
            binary: enc(Modality::Binary),
            comment: enc(Modality::Comment),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, m: Modality) -> &[TokenSequence] {
        match m {
            Modality::Source => &self.source,
            Modality::Binary => &self.binary,
            Modality::Comment => &self.comment,
        }
    }
}

/// Projects `idx` rows of one modality in chunks, without caches.
pub fn embed_all(params: &EncoderParams, seqs: &[TokenSequence], chunk: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((seqs.len(), params.config.d));
    for (c, block) in seqs.chunks(chunk.max(1)).enumerate() {
        let refs: Vec<&TokenSequence> = block.iter().collect();
        let e = params.project(&refs)?;
        out.slice_mut(ndarray::s![c * chunk..c * chunk + block.len(), ..])
            .assign(&e.matrix);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub stage_index: usize,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub choice: String,
    pub loss: f64,
    pub diag_acc: f64,
    pub tau: f64,
    pub anchor_checksum: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: Model,
    pub optimizer_state: serde_json::Value,
    pub position: Position,
    pub stage_tag: String,
    pub corpus_digest: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path, CHECKPOINT_KIND)
    }

    /// Loads and checks the encoder dimensions against `model`.
    pub fn load_expecting(path: &Path, model: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let m = &ck.config.model;
        if m.d != model.d || m.d_model != model.d_model {
            return Err(Error::Checkpoint(format!(
                "checkpoint has d={} d_model={}, expected d={} d_model={}",
                m.d, m.d_model, model.d, model.d_model
            )));
        }
        Ok(ck)
    }
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    h
}

pub struct Trainer {
    config: TrainConfig,
    vocab: Vocab,
    data: EncodedCorpus,
    digest: String,
    source_anchor: EncoderHandle,
    comment_anchor: Option<EncoderHandle>,
    binary: EncoderHandle,
    interp_linear: InterpNet,
    interp_nonlinear: InterpNet,
    log_tau: f64,
    optimizer: Box<dyn Optimizer>,
    objectives: ObjectiveRegistry,
    position: Position,
    anchor_cache: BTreeMap<&'static str, Array2<f64>>,
    perm: Vec<usize>,
    log: TrainLog,
    out_dir: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: &TrainConfig, corpus: &[ProgramTriplet], vocab: Vocab) -> Result<Self> {
        let config = config.resolved()?;
        let model = Model::init(&config, vocab.len())?;
        Self::assemble(config, corpus, vocab, model, serde_json::Value::Null, Position::default())
    }

    pub fn from_checkpoint(ck: Checkpoint, corpus: &[ProgramTriplet]) -> Result<Self> {
        let digest = corpus_digest(corpus);
        if digest != ck.corpus_digest {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different training corpus".into(),
            ));
        }
        Self::assemble(ck.config, corpus, ck.vocab, ck.model, ck.optimizer_state, ck.position)
    }

    fn assemble(
        config: TrainConfig,
        corpus: &[ProgramTriplet],
        vocab: Vocab,
        model: Model,
        optimizer_state: serde_json::Value,
        position: Position,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::config("pre-training corpus is empty"));
        }
        if corpus.len() < config.schedule.batch_size {
            return Err(Error::config(format!(
                "corpus of {} triplets is smaller than one batch of {}",
                corpus.len(),
                config.schedule.batch_size
            )));
        }
        let data = EncodedCorpus::new(corpus, &vocab, config.model.block_size);
        let mut optimizer =
            OptimizerRegistry::default().create(&OptimConfig::new(&config.optimizer, config.schedule.lr))?;
        if !optimizer_state.is_null() {
            optimizer.load_state(optimizer_state)?;
        }
        let wrap = |p: EncoderParams| {
            if config.flags.unfreeze_anchor {
                trainable(p)
            } else {
                freeze(p)
            }
        };
        let mut t = Self {
            digest: corpus_digest(corpus),
            source_anchor: wrap(model.source_anchor),
            comment_anchor: model.comment_anchor.map(wrap),
            binary: trainable(model.binary),
            interp_linear: model.interp_linear,
            interp_nonlinear: model.interp_nonlinear,
            log_tau: model.log_tau,
            optimizer,
            objectives: ObjectiveRegistry::default(),
            position,
            anchor_cache: BTreeMap::new(),
            perm: Vec::new(),
            log: TrainLog::default(),
            out_dir: None,
            last_checkpoint: None,
            data,
            vocab,
            config,
        };
        t.build_anchor_cache()?;
        t.refresh_perm();
        Ok(t)
    }

    /// Directory for stage checkpoints and the streamed TrainLog.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn register_objective(&mut self, objective: Box<dyn StageObjective>) {
        self.objectives.register(objective);
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn position(&self) -> Position {
        self.position
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn model(&self) -> Model {
        Model {
            source_anchor: self.source_anchor.params.clone(),
            comment_anchor: self.comment_anchor.as_ref().map(|h| h.params.clone()),
            binary: self.binary.params.clone(),
            interp_linear: self.interp_linear.clone(),
            interp_nonlinear: self.interp_nonlinear.clone(),
            log_tau: self.log_tau,
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let plan = self.config.stage_plan();
        let stage_tag = plan
            .get(self.position.stage_index)
            .map_or("done", |(s, _)| s.tag())
            .to_string();
        Ok(Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            model: self.model(),
            optimizer_state: self.optimizer.state(),
            position: self.position,
            stage_tag,
            corpus_digest: self.digest.clone(),
        })
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.position.stage_index >= self.config.stage_plan().len()
    }

    fn anchor_for(&self, m: Modality) -> &EncoderHandle {
        match (m, &self.comment_anchor) {
            (Modality::Comment, Some(c)) => c,
            _ => &self.source_anchor,
        }
    }

    fn group_for(&self, m: Modality) -> Group {
        match m {
            Modality::Binary => Group::Binary,
            Modality::Comment if self.comment_anchor.is_some() => Group::CommentAnchor,
            _ => Group::SourceAnchor,
        }
    }

    fn build_anchor_cache(&mut self) -> Result<()> {
        self.anchor_cache.clear();
        if self.config.flags.unfreeze_anchor {
            return Ok(());
        }
        let mut mods = vec![Modality::Source];
        if !self.config.flags.drop_comments {
            mods.push(Modality::Comment);
        }
        for m in mods {
            let e = embed_all(&self.anchor_for(m).params, self.data.get(m), 64)?;
            self.anchor_cache.insert(m.short(), e);
        }
        Ok(())
    }

    fn refresh_perm(&mut self) {
        let p = self.position;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            self.config.schedule.seed,
            p.stage_index as u64,
            p.epoch as u64,
        ]));
        self.perm = (0..self.data.len()).collect();
        self.perm.shuffle(&mut rng);
    }

    fn steps_per_epoch(&self) -> usize {
        self.data.len() / self.config.schedule.batch_size
    }

    fn embed(&self, m: Modality, idx: &[usize], key: u64) -> Result<(EmbeddingBatch, Option<ForwardCache>)> {
        if m != Modality::Binary {
            if let Some(cache) = self.anchor_cache.get(m.short()) {
                let rows = cache.select(ndarray::Axis(0), idx);
                return Ok((EmbeddingBatch::new(rows, m, false, key), None));
            }
        }
        let handle = if m == Modality::Binary {
            &self.binary
        } else {
            self.anchor_for(m)
        };
        let seqs = self.data.get(m);
        let batch: Vec<&TokenSequence> = idx.iter().map(|&i| &seqs[i]).collect();
        let (mut e, cache) = handle.params.forward(&batch)?;
        e.batch_key = key;
        e.modality = m;
        e.requires_grad = !handle.is_frozen();
        Ok((e, (!handle.is_frozen()).then_some(cache)))
    }

    /// Runs one optimiser step; returns `None` once the schedule is complete.
    pub fn step(&mut self) -> Result<Option<&StepRecord>> {
        let plan = self.config.stage_plan();
        let Some(&(stage, _)) = plan.get(self.position.stage_index) else {
            return Ok(None);
        };
        let bs = self.config.schedule.batch_size;
        let start = self.position.step_in_epoch * bs;
        let idx: Vec<usize> = self.perm[start..start + bs].to_vec();
        let key = batch_key_of(&idx.iter().map(|&i| self.data.ids[i].as_str()).collect::<Vec<_>>());

        let objective = self.objectives.get(stage.objective())?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.schedule.seed, u64::MAX, self.position.global_step]));
        let choice = objective.choose(&mut rng, &self.config.flags);
        let licensed = objective.licensed(&self.config.flags);

        let mut embeddings = BTreeMap::new();
        let mut caches = BTreeMap::new();
        for m in choice.modalities() {
            let (e, c) = self.embed(m, &idx, key)?;
            embeddings.insert(m.short(), e);
            if let Some(c) = c {
                caches.insert(m.short(), (m, c));
            }
        }
        let tau = self.tau();
        let ctx = StepContext {
            embeddings: &embeddings,
            interp_linear: &self.interp_linear,
            interp_nonlinear: &self.interp_nonlinear,
            tau,
            renorm: self.config.renorm_interp,
        };
        let out = objective.compute(&choice, &ctx)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.position.global_step,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }

        let mut d_by_mod: BTreeMap<&'static str, Array2<f64>> = BTreeMap::new();
        for (m, d) in out.d_emb {
            *d_by_mod
                .entry(m.short())
                .or_insert_with(|| Array2::zeros(d.raw_dim())) += &d;
        }
        let mut enc_grads: BTreeMap<Group, EncoderParams> = BTreeMap::new();
        for (short, (m, cache)) in &caches {
            let Some(d) = d_by_mod.get(short) else { continue };
            let handle = if *m == Modality::Binary {
                &self.binary
            } else {
                self.anchor_for(*m)
            };
            let g = handle.params.backward(cache, d)?;
            match enc_grads.get_mut(&self.group_for(*m)) {
                Some(acc) => acc.accumulate(&g),
                None => {
                    enc_grads.insert(self.group_for(*m), g);
                }
            }
        }

        let mut touched: Vec<Group> = enc_grads.keys().copied().collect();
        if let Some((g, _)) = &out.d_interp {
            touched.push(*g);
        }
        if self.config.learnable_tau {
            touched.push(Group::Tau);
        }
        if let Some(bad) = touched.iter().find(|g| !licensed.contains(g)) {
            return Err(Error::contract(format!(
                "stage `{}` produced gradients for unlicensed group `{}`",
                stage.tag(),
                bad.slot()
            )));
        }

        let lr = self
            .config
            .lr_schedule
            .at(self.config.schedule.lr, self.position.global_step, self.total_steps());
        self.optimizer.set_lr(lr);
        for (group, grad) in &enc_grads {
            let opt = self.optimizer.as_mut();
            match group {
                Group::Binary => self.binary.apply(opt, group.slot(), grad)?,
                Group::SourceAnchor => self.source_anchor.apply(opt, group.slot(), grad)?,
                Group::CommentAnchor => match &mut self.comment_anchor {
                    Some(h) => h.apply(opt, group.slot(), grad)?,
                    None => return Err(Error::contract("no separate comment anchor to update")),
                },
                _ => unreachable!("encoder groups only"),
            }
        }
        if let Some((group, grad)) = &out.d_interp {
            let net = match group {
                Group::InterpLinear => &mut self.interp_linear,
                _ => &mut self.interp_nonlinear,
            };
            self.optimizer.step(group.slot(), &mut net.slices_mut(), &grad.slices())?;
        }
        if self.config.learnable_tau {
            let g = [out.d_tau * tau];
            let mut p = [self.log_tau];
            self.optimizer.step(Group::Tau.slot(), &mut [&mut p[..]], &[&g[..]])?;
            self.log_tau = p[0];
        }

        let record = StepRecord {
            stage: stage.tag().to_string(),
            epoch: self.position.epoch,
            step: self.position.global_step,
            choice: choice.to_string(),
            loss: out.loss,
            diag_acc: out.diag_acc,
            tau,
            anchor_checksum: self.model_anchor_checksum(),
        };
        self.append_log(record)?;
        self.advance(&plan)?;
        Ok(self.log.records.last())
    }

    fn model_anchor_checksum(&self) -> String {
        anchor_checksum(&self.source_anchor.params, self.comment_anchor.as_ref().map(|h| &h.params))
    }

    fn append_log(&mut self, record: StepRecord) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("trainlog.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        self.log.records.push(record);
        Ok(())
    }

    fn advance(&mut self, plan: &[(Stage, usize)]) -> Result<()> {
        self.position.global_step += 1;
        self.position.step_in_epoch += 1;
        if self.position.step_in_epoch < self.steps_per_epoch() {
            return Ok(());
        }
        self.position.step_in_epoch = 0;
        self.position.epoch += 1;
        let (stage, epochs) = plan[self.position.stage_index];
        if self.position.epoch >= epochs {
            self.position.epoch = 0;
            self.position.stage_index += 1;
            if let Some(dir) = self.out_dir.clone() {
                self.save_checkpoint(&dir.join(format!("{}-end.ckpt", stage.tag())))?;
            }
        }
        self.refresh_perm();
        Ok(())
    }

    /// Runs up to `n` steps; returns how many ran.
    pub fn run_steps(&mut self, n: usize) -> Result<usize> {
        for k in 0..n {
            if self.step()?.is_none() {
                return Ok(k);
            }
        }
        Ok(n)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        if let Some(dir) = self.out_dir.clone() {
            self.save_checkpoint(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    /// In-batch diagonal retrieval of the current binary encoder against each
    /// anchored modality, over the batches of the current epoch order.
    pub fn retrieval_accuracy(&self) -> Result<BTreeMap<String, f64>> {
        let bs = self.config.schedule.batch_size;
        let mut mods = vec![Modality::Source];
        if !self.config.flags.drop_comments {
            mods.push(Modality::Comment);
        }
        let binary = embed_all(&self.binary.params, &self.data.binary, 64)?;
        let mut out = BTreeMap::new();
        for m in mods {
            let anchor = match self.anchor_cache.get(m.short()) {
                Some(a) => a.clone(),
                None => embed_all(&self.anchor_for(m).params, self.data.get(m), 64)?,
            };
            let mut hits = 0.0;
            let batches = self.steps_per_epoch();
            for b in 0..batches {
                let idx = &self.perm[b * bs..(b + 1) * bs];
                let a = anchor.select(ndarray::Axis(0), idx);
                let t = binary.select(ndarray::Axis(0), idx);
                hits += crate::contrastive::diagonal_accuracy(&a.dot(&t.t()));
            }
            out.insert(format!("{}-b", m.short()), hits / batches as f64);
        }
        Ok(out)
    }

    /// Total steps in the schedule for this corpus.
    pub fn total_steps(&self) -> u64 {
        let spe = self.steps_per_epoch() as u64;
        self.config.stage_plan().iter().map(|(_, e)| *e as u64 * spe).sum()
    }
}

/// Trains the full schedule and returns the final model and log.
pub fn pretrain(
    corpus: &[ProgramTriplet],
    config: &TrainConfig,
    vocab: Vocab,
    out_dir: Option<&Path>,
) -> Result<(Model, TrainLog)> {
    let mut t = Trainer::new(config, corpus, vocab)?;
    if let Some(dir) = out_dir {
        t = t.with_output(dir)?;
    }
    t.run()?;
    Ok((t.model(), t.log.clone()))
}

//! Run configuration: defaults, named presets, a TOML file and command-line
//! overrides, merged in that order.

use std::path::{Path, PathBuf};

use binalign::corpus::SplitMode;
use binalign::encoder::Pooling;
use binalign::tasks::{FinetuneConfig, TaskKind};
use binalign::trainer::{AblationFlags, LrSchedule, ModelConfig, StageSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub seed: u64,
    pub families: usize,
    pub per_family: usize,
    /// Load triplets from this file instead of generating them.
    pub jsonl_path: Option<PathBuf>,
    pub split: SplitMode,
    pub ratios: [f64; 3],
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            seed: 7,
            families: 8,
            per_family: 64,
            jsonl_path: None,
            split: SplitMode::ByLabel,
            ratios: [0.5, 0.25, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub block_size: usize,
    pub max_vocab: usize,
    pub pooling: Pooling,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            d: 128,
            layers: 1,
            heads: 4,
            block_size: 128,
            max_vocab: 2048,
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub epochs_primary: usize,
    pub epochs_linear: usize,
    pub epochs_nonlinear: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub tau: f64,
    pub learnable_tau: bool,
    pub optimizer: String,
    pub lr_schedule: LrSchedule,
    /// Steps between rolling `latest.ckpt` snapshots.
    pub checkpoint_every: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            epochs_primary: 10,
            epochs_linear: 10,
            epochs_nonlinear: 10,
            batch_size: 64,
            lr: 7e-4,
            seed: 42,
            tau: 0.03,
            learnable_tau: false,
            optimizer: "adam".into(),
            lr_schedule: LrSchedule::Warmup,
            checkpoint_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlagsSection {
    pub drop_comments: bool,
    pub unfreeze_anchor: bool,
    pub disable_interpolation: bool,
    pub multi_objective: bool,
    pub renorm_interp: bool,
    pub single_scalar_lambda: bool,
    pub shared_anchor: bool,
}

impl Default for FlagsSection {
    fn default() -> Self {
        Self {
            drop_comments: false,
            unfreeze_anchor: false,
            disable_interpolation: false,
            multi_objective: false,
            renorm_interp: false,
            single_scalar_lambda: false,
            shared_anchor: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Pretrained,
    Scratch,
}

impl Init {
    pub fn tag(self) -> &'static str {
        match self {
            Init::Pretrained => "pretrained",
            Init::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub name: TaskKind,
    pub init: Init,
    pub epochs: usize,
    pub block_size: usize,
    pub train_batch: usize,
    pub eval_batch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub optimizer: String,
    pub hidden: Option<usize>,
    pub min_label_count: usize,
    pub excluded_names: Vec<String>,
    /// Share of the held-out families' examples kept for evaluation.
    pub test_fraction: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self::from_finetune(&FinetuneConfig::desk(TaskKind::Functionality), Init::Pretrained)
    }
}

impl TaskSection {
    fn from_finetune(f: &FinetuneConfig, init: Init) -> Self {
        Self {
            name: f.task,
            init,
            epochs: f.epochs,
            block_size: f.block_size,
            train_batch: f.train_batch,
            eval_batch: f.eval_batch,
            lr: f.lr,
            max_grad_norm: f.max_grad_norm,
            seed: f.seed,
            optimizer: f.optimizer.clone(),
            hidden: f.hidden,
            min_label_count: f.min_label_count,
            excluded_names: f.excluded_names.clone(),
            test_fraction: 0.5,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            task: self.name,
            epochs: self.epochs,
            block_size: self.block_size,
            train_batch: self.train_batch,
            eval_batch: self.eval_batch,
            lr: self.lr,
            max_grad_norm: self.max_grad_norm,
            seed: self.seed,
            optimizer: self.optimizer.clone(),
            hidden: self.hidden,
            min_label_count: self.min_label_count,
            excluded_names: self.excluded_names.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    pub pair: Option<[String; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub flags: FlagsSection,
    pub task: TaskSection,
    pub analyze: AnalyzeSection,
    pub paths: PathsSection,
}

pub const PRESETS: [&str; 6] = [
    "pcl",
    "full-analysis",
    "full-comprehension",
    "ablation-no-comments",
    "ablation-unfrozen",
    "ablation-multiobjective",
];

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    /// Stage epochs and ablation flags of a named configuration.
    pub fn apply_preset(&mut self, name: &str) -> Result<(), CliError> {
        let epochs = match name {
            "pcl" => (10, 0, 0),
            "full-comprehension" => (10, 30, 30),
            "full-analysis" | "ablation-no-comments" | "ablation-unfrozen" | "ablation-multiobjective" => (10, 10, 10),
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset `{other}`; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        let s = &mut self.schedule;
        (s.epochs_primary, s.epochs_linear, s.epochs_nonlinear) = epochs;
        let f = &mut self.flags;
        f.drop_comments = name == "ablation-no-comments";
        f.unfreeze_anchor = name == "ablation-unfrozen";
        f.multi_objective = name == "ablation-multiobjective";
        Ok(())
    }

    /// Applies `section.key=value`, parsing the value as a TOML literal and
    /// falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut tree = toml::Value::try_from(&*self).expect("run config serialises");
        let mut node = &mut tree;
        let keys: Vec<&str> = path.trim().split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| CliError::Config(format!("`{path}` does not name a config key")))?;
            if i + 1 == keys.len() {
                table.insert(key.to_string(), value.clone());
                break;
            }
            node = table
                .get_mut(*key)
                .ok_or_else(|| CliError::Config(format!("unknown config section `{key}`")))?;
        }
        *self = tree
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let s = &self.schedule;
        let f = &self.flags;
        let m = &self.model;
        TrainConfig {
            schedule: StageSchedule {
                epochs_primary: s.epochs_primary,
                epochs_linear: s.epochs_linear,
                epochs_nonlinear: s.epochs_nonlinear,
                batch_size: s.batch_size,
                lr: s.lr,
                seed: s.seed,
            },
            flags: AblationFlags {
                drop_comments: f.drop_comments,
                unfreeze_anchor: f.unfreeze_anchor,
                disable_interpolation: f.disable_interpolation,
                multi_objective: f.multi_objective,
            },
            model: ModelConfig {
                d_model: m.d_model,
                d: m.d,
                layers: m.layers,
                heads: m.heads,
                block_size: m.block_size,
                max_vocab: m.max_vocab,
                pooling: m.pooling,
            },
            tau: s.tau,
            learnable_tau: s.learnable_tau,
            renorm_interp: f.renorm_interp,
            single_scalar_lambda: f.single_scalar_lambda,
            shared_anchor: f.shared_anchor,
            optimizer: s.optimizer.clone(),
            lr_schedule: s.lr_schedule,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.corpus.families == 0 || self.corpus.per_family == 0 {
            return Err(CliError::Config("corpus families and per_family must be positive".into()));
        }
        if !(self.task.test_fraction > 0.0 && self.task.test_fraction < 1.0) {
            return Err(CliError::Config("task.test_fraction must lie strictly between 0 and 1".into()));
        }
        self.train_config().resolved()?;
        self.task.finetune().validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_set_schedules() {
        let mut c = RunConfig::default();
        c.apply_preset("pcl").unwrap();
        assert_eq!(c.train_config().stage_plan().len(), 1);
        c.apply_preset("full-comprehension").unwrap();
        let s = &c.schedule;
        assert_eq!((s.epochs_primary, s.epochs_linear, s.epochs_nonlinear), (10, 30, 30));
        c.apply_preset("ablation-unfrozen").unwrap();
        assert!(c.flags.unfreeze_anchor);
        assert!(matches!(c.apply_preset("nope"), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_parse_types_and_reject_unknown_keys() {
        let mut c = RunConfig::default();
        c.set("schedule.lr=0.01").unwrap();
        c.set("flags.drop_comments=true").unwrap();
        c.set("task.name=name-recovery").unwrap();
        assert_eq!(c.schedule.lr, 0.01);
        assert!(c.flags.drop_comments);
        assert_eq!(c.task.name, TaskKind::NameRecovery);
        assert!(matches!(c.set("schedule.nope=1"), Err(CliError::Config(_))));
        assert!(matches!(c.set("bogus.x=1"), Err(CliError::Config(_))));
        assert!(matches!(c.set("schedule.lr"), Err(CliError::Config(_))));
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = RunConfig::default();
        assert_eq!(toml::from_str::<RunConfig>(&c.to_toml()).unwrap(), c);
        assert!(toml::from_str::<RunConfig>("[schedule]\nepochs = 3\n").is_err());
        let partial: RunConfig = toml::from_str("[schedule]\nbatch_size = 8\n").unwrap();
        assert_eq!(partial.schedule.batch_size, 8);
        assert_eq!(partial.schedule.tau, 0.03);
    }
}

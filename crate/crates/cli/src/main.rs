mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Init, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<binalign::Error> for CliError {
    fn from(e: binalign::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string().trim_start_matches("configuration error: ").to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "binalign", version, about = "Contrastive pre-training and analysis of binary code embeddings")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Directory that receives every output of the command.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set schedule.lr=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) triplets and write the train/dev/test splits.
    Corpus {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        families: Option<usize>,
        #[arg(long)]
        per_family: Option<usize>,
        /// Comma-separated train,dev,test ratios.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Staged contrastive pre-training of the binary encoder.
    Pretrain {
        #[arg(long)]
        preset: Option<String>,
        /// Continue from the last rolling checkpoint in the workdir.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        unfreeze_anchor: bool,
        /// Stop after this many steps of the run; `--resume` continues it.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Fine-tune a classifier on the held-out families.
    Finetune(TaskArgs),
    /// Evaluate a fine-tuned classifier and print its report.
    Eval(TaskArgs),
    /// Export binary embeddings of the held-out families and their 2-D projection.
    Embed {
        #[arg(long, value_enum)]
        init: Option<Init>,
    },
    /// Cluster statistics and an optional pair-distance report.
    Analyze {
        #[arg(long, value_enum)]
        init: Option<Init>,
        #[arg(long, num_args = 2, value_names = ["ID_A", "ID_B"])]
        pair: Option<Vec<String>>,
    },
}

#[derive(Args)]
struct TaskArgs {
    /// `functionality` or `name-recovery`.
    #[arg(long)]
    task: Option<String>,
    #[arg(long, value_enum)]
    init: Option<Init>,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Command::Pretrain { preset: Some(p), .. } = &cli.command {
        cfg.apply_preset(p)?;
    }
    for s in &cli.common.sets {
        cfg.set(s)?;
    }
    match &cli.command {
        Command::Corpus {
            seed,
            families,
            per_family,
            ratios,
            jsonl,
        } => {
            if let Some(v) = seed {
                cfg.corpus.seed = *v;
            }
            if let Some(v) = families {
                cfg.corpus.families = *v;
            }
            if let Some(v) = per_family {
                cfg.corpus.per_family = *v;
            }
            if let Some(v) = ratios {
                let [a, b, c] = v[..] else {
                    return Err(CliError::Config(format!("--ratios needs 3 values, got {}", v.len())));
                };
                cfg.corpus.ratios = [a, b, c];
            }
            if let Some(v) = jsonl {
                cfg.corpus.jsonl_path = Some(v.clone());
            }
        }
        Command::Pretrain { unfreeze_anchor, .. } => {
            if *unfreeze_anchor {
                cfg.flags.unfreeze_anchor = true;
            }
        }
        Command::Finetune(t) | Command::Eval(t) => {
            if let Some(name) = &t.task {
                cfg.task.name = binalign::tasks::TaskKind::parse(name)?;
            }
            if let Some(i) = t.init {
                cfg.task.init = i;
            }
        }
        Command::Embed { init } => {
            if let Some(i) = init {
                cfg.task.init = *i;
            }
        }
        Command::Analyze { init, pair } => {
            if let Some(i) = init {
                cfg.task.init = *i;
            }
            if let Some(p) = pair {
                cfg.analyze.pair = Some([p[0].clone(), p[1].clone()]);
            }
        }
    }
    cfg.paths.workdir = cli.common.workdir.clone();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Corpus { .. } => commands::corpus(&cfg),
        Command::Pretrain { resume, max_steps, .. } => commands::pretrain(&cfg, *resume, *max_steps),
        Command::Finetune(_) => commands::finetune_cmd(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Embed { .. } => commands::embed(&cfg),
        Command::Analyze { .. } => commands::analyze(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}

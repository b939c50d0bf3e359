//! Command-line front end.
//!
//! Machine-readable results go to stdout as JSON lines; tables and progress
//! go to stderr. Exit status is 0 on success, 1 on configuration or data
//! errors and 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DecoderMode, RunConfig};
use crate::datagen::{self, generate_dataset, Dataset, InteractionRecord};
use crate::error::{ConnaError, Result};
use crate::eval::{self, BenchOptions};
use crate::numeric::checkpoint;
use crate::trainer;
use crate::types::{CandidateContext, TypeOrdering};

#[derive(Debug, Parser)]
#[command(
    name = "conna",
    version,
    about = "Non-autoregressive bundle creative generation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.d_model=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed override (data seed for `datagen`, training seed otherwise).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Generate creatives for users of the synthetic world.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated user ids.
        #[arg(long, value_delimiter = ',', required = true)]
        users: Vec<usize>,
    },
    /// Single-creative decode latency, non-autoregressive vs autoregressive.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Non-autoregressive checkpoint; fresh weights when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Autoregressive checkpoint; fresh weights when omitted.
        #[arg(long)]
        ar_checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Time the shared encoder as well.
        #[arg(long)]
        include_encoder: bool,
    },
    /// Objective or type-ordering comparison tables.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: AblationMode,
        /// Comma-separated training seeds (objective mode).
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationMode {
    Objective,
    Ordering,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Datagen { common }
            | Self::Train { common, .. }
            | Self::Eval { common, .. }
            | Self::Generate { common, .. }
            | Self::Bench { common, .. }
            | Self::Ablate { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Datagen { .. } => "datagen",
            Self::Train { .. } => "train",
            Self::Eval { .. } => "eval",
            Self::Generate { .. } => "generate",
            Self::Bench { .. } => "bench",
            Self::Ablate { .. } => "ablate",
        }
    }
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_config(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        match cmd {
            Command::Datagen { .. } => cfg.data.seed = seed,
            _ => cfg.train.seed = seed,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    data_seed: u64,
    train_seed: u64,
    versions: Versions,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct Versions {
    conna: &'static str,
    dataset_format: u32,
    checkpoint_format: u32,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ConnaError::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| ConnaError::io(path, e))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| ConnaError::Data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

/// Manifest plus the fully resolved config, so the run can be repeated from
/// the output directory alone.
fn write_manifest(out: &Path, cmd: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| ConnaError::io(out, e))?;
    let manifest = Manifest {
        command: cmd,
        config_hash: cfg.hash_hex(),
        data_seed: cfg.data.seed,
        train_seed: cfg.train.seed,
        versions: Versions {
            conna: env!("CARGO_PKG_VERSION"),
            dataset_format: datagen::FORMAT_VERSION,
            checkpoint_format: checkpoint::VERSION,
        },
        config: cfg,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let toml_path = out.join("config.toml");
    fs::write(&toml_path, cfg.to_toml()).map_err(|e| ConnaError::io(&toml_path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ConnaError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

fn read_data(dir: &Path) -> Result<Dataset> {
    for s in Dataset::SPLITS {
        require_file(&dir.join(format!("{s}.jsonl")))?;
    }
    Dataset::read_dir(dir)
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<crate::model::Model> {
    require_file(path)?;
    trainer::load_model(cfg, path).map(|(m, _)| m)
}

/// Contexts drawn from the synthetic world, one per requested user.
fn world_contexts(cfg: &RunConfig, users: &[usize]) -> Result<Vec<CandidateContext>> {
    let world = datagen::generate_world(&cfg.data)?;
    users
        .iter()
        .map(|&u| {
            cfg.data.vocab().check(crate::types::ObjectType::User, u)?;
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.data.seed ^ (u as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            Ok(world.context(u, &mut rng))
        })
        .collect()
}

pub fn run(cmd: &Command) -> Result<()> {
    let cfg = resolve_config(cmd)?;
    let out = &cmd.common().out;
    match cmd {
        Command::Datagen { .. } => {
            let (_, data) = generate_dataset(&cfg.data)?;
            data.write_dir(out)?;
            write_manifest(out, cmd.name(), &cfg)?;
            eprintln!(
                "train {}  dev {}  test {}",
                data.train.len(),
                data.dev.len(),
                data.test.len()
            );
            print_json(&serde_json::json!({
                "out": out,
                "train": data.train.len(),
                "dev": data.dev.len(),
                "test": data.test.len(),
            }))
        }
        Command::Train { data, .. } => {
            let data = read_data(data)?;
            write_manifest(out, cmd.name(), &cfg)?;
            let outcome = trainer::train_with(&cfg, &data, |e| {
                eprintln!(
                    "epoch {:>3}  loss {:>9.4}  dev_hit_ratio {:.4}",
                    e.epoch, e.mean_loss, e.dev_hit_ratio
                );
            })?;
            trainer::write_metrics_log(&outcome.steps, &out.join("metrics.jsonl"))?;
            write_json(&out.join("epochs.json"), &outcome.epochs)?;
            trainer::save_model(&outcome.model, &cfg, &out.join("model.ckpt"))?;
            if let Some(step) = outcome.diverged_at {
                eprintln!("non-finite loss at step {step}; kept the last finite parameters");
            }
            print_json(&serde_json::json!({
                "checkpoint": out.join("model.ckpt"),
                "steps": outcome.steps.len(),
                "best_epoch": outcome.best_epoch,
                "best_dev_hit_ratio": outcome.best_dev_hit_ratio,
                "diverged_at": outcome.diverged_at,
            }))
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            ..
        } => {
            let model = load_checkpoint(&cfg, checkpoint)?;
            let data = read_data(data)?;
            let records: &[InteractionRecord] = data
                .split(split)
                .ok_or_else(|| ConnaError::config("split", format!("unknown split `{split}`")))?;
            write_manifest(out, cmd.name(), &cfg)?;
            let report = eval::evaluate(&model, records)?;
            write_json(&out.join("eval.json"), &report)?;
            eprintln!(
                "{:<10} {:>8} {:>10} {:>10}",
                "split", "records", "hit_ratio", "diversity"
            );
            eprintln!(
                "{:<10} {:>8} {:>10.4} {:>10.4}",
                split, report.records, report.hit_ratio, report.diversity
            );
            print_json(&serde_json::json!({
                "split": split,
                "records": report.records,
                "hit_ratio": report.hit_ratio,
                "diversity": report.diversity,
            }))
        }
        Command::Generate {
            checkpoint, users, ..
        } => {
            let model = load_checkpoint(&cfg, checkpoint)?;
            let contexts = world_contexts(&cfg, users)?;
            write_manifest(out, cmd.name(), &cfg)?;
            for ctx in &contexts {
                let g = model.generate(ctx)?;
                println!("{}\t{}", ctx.user, g.creative);
            }
            Ok(())
        }
        Command::Bench {
            checkpoint,
            ar_checkpoint,
            runs,
            warmup,
            include_encoder,
            ..
        } => {
            let mut nar_cfg = cfg.clone();
            nar_cfg.model.decoder = DecoderMode::Nar;
            let mut ar_cfg = cfg.clone();
            ar_cfg.model.decoder = DecoderMode::ArBaseline;
            let nar = match checkpoint {
                Some(p) => load_checkpoint(&nar_cfg, p)?,
                None => trainer::init_model(&nar_cfg)?,
            };
            let ar = match ar_checkpoint {
                Some(p) => load_checkpoint(&ar_cfg, p)?,
                None => trainer::init_model(&ar_cfg)?,
            };
            let users: Vec<usize> = (0..cfg.data.n_users.min(16)).collect();
            let contexts = world_contexts(&cfg, &users)?;
            write_manifest(out, cmd.name(), &cfg)?;
            let opts = BenchOptions {
                warmup: *warmup,
                runs: *runs,
                include_encoder: *include_encoder,
            };
            let report = eval::bench_decode(&nar, &ar, &contexts, opts)?;
            write_json(&out.join("bench.json"), &report)?;
            eprintln!("{report}");
            print_json(&report)
        }
        Command::Ablate {
            data, mode, seeds, ..
        } => {
            let data = read_data(data)?;
            write_manifest(out, cmd.name(), &cfg)?;
            let table = match mode {
                AblationMode::Objective => trainer::ablate_objective(&cfg, &data, seeds)?,
                AblationMode::Ordering => {
                    let orderings = [
                        TypeOrdering::ITEMS_SLOGANS_TEMPLATE,
                        "slogans-items-template".parse()?,
                        "template-slogans-items".parse()?,
                    ];
                    trainer::ablate_ordering(&cfg, &data, &orderings)?
                }
            };
            let name = match mode {
                AblationMode::Objective => "ablation_objective.json",
                AblationMode::Ordering => "ablation_ordering.json",
            };
            write_json(&out.join(name), &table)?;
            eprintln!("{table}");
            for row in &table.rows {
                print_json(row)?;
            }
            Ok(())
        }
    }
}

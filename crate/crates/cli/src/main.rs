//! `goalscan`: corpus splitting, embedding indexes, evaluation, instruction
//! tuning and the full experiment matrix from one config file.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use goalscan::tuner::TuningDemos;

use crate::config::{ChatKind, EmbedKind, InstructionSource, PolicyKind, RunConfig};
use crate::failure::{Failure, Kind};

#[derive(Parser, Debug)]
#[command(name = "goalscan", version, about = "Prompt optimization for emission-goal passage classification")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a corpus by report into train/test JSONL plus class statistics.
    Split,
    /// Class statistics for the configured corpus files.
    Stats,
    /// Embed the training corpus into an index file.
    Index,
    /// Evaluate one instruction and policy on the test corpus.
    Eval,
    /// Tune an instruction on the training corpus.
    Tune,
    /// Run every configured instruction × strategy cell, with tuned variants.
    Matrix,
    /// Re-render tables from a matrix result JSON.
    Render {
        input: PathBuf,
        /// Which table to print.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        table: u8,
        #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
        format: TableFormat,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum TableFormat {
    Markdown,
    Csv,
}

/// Each flag overrides the config key of the same dotted name.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    repeats: Option<usize>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// corpus.path
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// corpus.train
    #[arg(long, global = true)]
    train: Option<PathBuf>,
    /// corpus.test
    #[arg(long, global = true)]
    test: Option<PathBuf>,
    /// corpus.test_reports, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    test_reports: Option<Vec<String>>,
    /// corpus.test_report_count
    #[arg(long, global = true)]
    test_report_count: Option<usize>,
    /// backend.kind
    #[arg(long, global = true, value_enum)]
    backend: Option<ChatKind>,
    /// backend.base_url
    #[arg(long, global = true)]
    base_url: Option<String>,
    /// backend.credential_env_var
    #[arg(long, global = true)]
    credential_env_var: Option<String>,
    /// backend.scenario_path
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// backend.cache_dir
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// embedding.kind
    #[arg(long, global = true, value_enum)]
    embedding: Option<EmbedKind>,
    /// instruction.source
    #[arg(long, global = true, value_enum)]
    instruction: Option<InstructionSource>,
    /// instruction.path
    #[arg(long, global = true)]
    instruction_path: Option<PathBuf>,
    /// policy.kind
    #[arg(long, global = true, value_enum)]
    policy: Option<PolicyKind>,
    /// policy.k
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    index: Option<PathBuf>,
    /// tuner.epsilon
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// tuner.seed
    #[arg(long, global = true)]
    tuner_seed: Option<u64>,
    /// tuner.max_epochs
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    /// tuner.demos_during_tuning
    #[arg(long, global = true, value_enum)]
    tuning_demos: Option<TuningDemosArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum TuningDemosArg {
    ZeroShot,
    Static,
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        fn set_opt<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        set(&mut c.seed, &self.seed);
        set(&mut c.output_dir, &self.output_dir);
        set(&mut c.repeats, &self.repeats);
        set(&mut c.parallelism, &self.parallelism);
        set(&mut c.model, &self.model);
        set(&mut c.temperature, &self.temperature);
        set_opt(&mut c.corpus.path, &self.corpus);
        set_opt(&mut c.corpus.train, &self.train);
        set_opt(&mut c.corpus.test, &self.test);
        set(&mut c.corpus.test_reports, &self.test_reports);
        set_opt(&mut c.corpus.test_report_count, &self.test_report_count);
        set(&mut c.backend.kind, &self.backend);
        set(&mut c.backend.base_url, &self.base_url);
        set(&mut c.backend.credential_env_var, &self.credential_env_var);
        set_opt(&mut c.backend.scenario_path, &self.scenario);
        set_opt(&mut c.backend.cache_dir, &self.cache_dir);
        set(&mut c.embedding.kind, &self.embedding);
        set(&mut c.instruction.source, &self.instruction);
        set_opt(&mut c.instruction.path, &self.instruction_path);
        set(&mut c.policy.kind, &self.policy);
        set(&mut c.policy.k, &self.k);
        set_opt(&mut c.index, &self.index);
        set(&mut c.tuner.epsilon, &self.epsilon);
        set(&mut c.tuner.seed, &self.tuner_seed);
        set(&mut c.tuner.max_epochs, &self.max_epochs);
        if let Some(d) = self.tuning_demos {
            c.tuner.demos_during_tuning = match d {
                TuningDemosArg::ZeroShot => TuningDemos::ZeroShot,
                TuningDemosArg::Static => TuningDemos::Static,
            };
        }
    }
}

fn resolve_config(overrides: &Overrides) -> Result<RunConfig, Failure> {
    let mut config = match &overrides.config {
        Some(path) => RunConfig::from_file(path).map_err(Failure::config)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut config);
    config.validate().map_err(Failure::config)?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Render { input, table, format } = &cli.command {
        return commands::render(input, *table, *format == TableFormat::Csv);
    }
    let config = resolve_config(&cli.overrides)?;
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| Failure::new(Kind::Other, anyhow::Error::new(e).context("creating output dir")))?;
    match cli.command {
        Command::Split => commands::split(&config),
        Command::Stats => commands::stats(&config),
        Command::Index => commands::index(&config),
        Command::Eval => commands::eval(&config),
        Command::Tune => commands::tune(&config),
        Command::Matrix => commands::matrix(&config),
        Command::Render { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind.code())
        }
    }
}

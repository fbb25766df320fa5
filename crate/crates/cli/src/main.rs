//! `voxelcast`: synthetic data, training, the all-for-one recipe,
//! parcellation, evaluation and decoding from the command line.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use voxelcast_core::afo::RecipePlan;
use voxelcast_core::encoder::ModelSpec;
use voxelcast_core::trainer::TrainConfig;

#[derive(Parser, Debug)]
#[command(
    name = "voxelcast",
    version,
    about = "Voxel-wise brain encoding models trained from scratch"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed replacing the seed of every config the command reads
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-ROI jobs [default: available cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log more (-v info, -vv debug)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
}

impl Global {
    pub fn threads(&self) -> usize {
        self.threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic bundle with planted ground truth
    Synth(commands::SynthArgs),
    /// Train one encoder on every voxel, or on one ROI
    Train(commands::TrainArgs),
    /// All-for-one recipe
    #[command(subcommand)]
    Afo(AfoCommand),
    /// Parcellate voxels by clustering trained head weights
    Veroi(commands::VeroiArgs),
    /// Score a trained model on one split
    Eval(commands::EvalArgs),
    /// Linear probe of raw or learned features (PCA + ridge)
    Probe(commands::ProbeArgs),
    /// Retrieve images by correlating predictions with responses
    Decode(commands::DecodeArgs),
    /// Scores, retina map and layer-selector table for a model
    Report(commands::ReportArgs),
    /// Finite-difference check of every differentiable kernel
    Gradcheck(commands::GradcheckArgs),
}

#[derive(Subcommand, Debug)]
enum AfoCommand {
    /// Run stage 1, stage 2 and stage 3 (or a variant)
    Run(commands::AfoRunArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(voxelcast_core::Error),
}

impl From<voxelcast_core::Error> for CliError {
    fn from(e: voxelcast_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn json_defaults(title: &str, value: &impl serde::Serialize) -> String {
    format!(
        "{title}:\n{}",
        serde_json::to_string_pretty(value).expect("defaults serialize")
    )
}

/// The clap command with every JSON config's defaults in its long help.
fn command() -> clap::Command {
    let train = format!(
        "{}\n\n{}",
        json_defaults("--model defaults", &ModelSpec::default()),
        json_defaults("--config defaults", &TrainConfig::default())
    );
    Cli::command()
        .mut_subcommand("synth", |c| {
            c.after_long_help(json_defaults(
                "spec used without --spec",
                &commands::default_synth_spec(),
            ))
        })
        .mut_subcommand("train", |c| c.after_long_help(train))
        .mut_subcommand("afo", |c| {
            c.mut_subcommand("run", |c| {
                c.after_long_help(json_defaults("--plan defaults", &RecipePlan::default()))
            })
        })
}

fn main() -> ExitCode {
    let cli = match command()
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let g = &cli.global;
    let result = match cli.command {
        Command::Synth(a) => commands::synth(g, &a),
        Command::Train(a) => commands::train(g, &a),
        Command::Afo(AfoCommand::Run(a)) => commands::afo_run(g, &a),
        Command::Veroi(a) => commands::veroi(g, &a),
        Command::Eval(a) => commands::eval(g, &a),
        Command::Probe(a) => commands::probe(g, &a),
        Command::Decode(a) => commands::decode(g, &a),
        Command::Report(a) => commands::report(g, &a),
        Command::Gradcheck(a) => commands::gradcheck(g, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("voxelcast: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub(crate) fn out_string(p: &PathBuf) -> String {
    p.display().to_string()
}

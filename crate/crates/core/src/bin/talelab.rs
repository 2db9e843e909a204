// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use talelab::harness::{run_experiment, verbs_for_figure, ExperimentConfig, FigureId, Profile, Verb};

#[derive(Parser)]
#[command(name = "talelab", version, about = "Layer elimination experiments on in-context regression transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML) or a previous run's manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and loss curve.
    Train,
    /// Greedy layer elimination on each configured validation set.
    Prune,
    /// Layerwise distance profiles and discrepancies, base and pruned.
    Profile,
    /// Per-layer linear surrogates and their spectra.
    Surrogate,
    /// Inverse-surrogate and control maps injected after a pruned layer.
    Intervene,
    /// Residual α-sweep and per-function threshold sweep.
    Sweep,
    /// Multi-seed ε_σ for base and pruned models.
    Eval,
    /// Produce the CSVs and figure spec behind one figure.
    ReproduceFigure {
        #[arg(value_parser = ["profile", "threshold", "spectrum", "alpha"])]
        id: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> talelab::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| talelab::LabError::Config(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(match cli.profile {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }),
    };
    if let Some(seed) = cli.seed_override {
        cfg.override_seed(seed);
    }
    let verbs = match cli.command {
        Command::Train => vec![Verb::Train],
        Command::Prune => vec![Verb::Prune],
        Command::Profile => vec![Verb::Profile],
        Command::Surrogate => vec![Verb::Surrogate],
        Command::Intervene => vec![Verb::Intervene],
        Command::Sweep => vec![Verb::Sweep],
        Command::Eval => vec![Verb::Eval],
        Command::ReproduceFigure { id } => verbs_for_figure(id.parse::<FigureId>()?),
    };
    let summary = run_experiment(&cfg, &verbs, &cli.out, &mut |line| eprintln!("{line}"))?;
    println!("{}", summary.dir.display());
    Ok(())
}

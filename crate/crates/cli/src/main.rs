//! `ices`: train, evaluate, sweep, gradient-check and plot.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 numeric abort.

mod commands;
mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::Overrides;

#[derive(Parser)]
#[command(name = "ices", version, about = "Intrinsic exploration scaffolds for cooperative MARL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct RunArgs {
    /// Experiment config document; built-in corridor defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// One of ices, global_con, int_ext, no_s, no_maxent, no_cvae, two_cvaes, qmix_baseline.
    #[arg(long)]
    variant: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, out: self.out.clone(), variant: self.variant.clone() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics.csv, manifest.toml and checkpoint.bin.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Greedy evaluation of a saved checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `<out_dir>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// One child run per value of alpha or beta, plus summary.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds shared by every value; the config seed when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Plot test_win_rate against step for one or more metrics files.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "winrate.svg")]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { commands::EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match cli.command {
        Command::Train { run, force } => commands::cmd_train(run.config.as_deref(), &run.overrides(), force),
        Command::Eval { run, checkpoint, episodes } => {
            commands::cmd_eval(run.config.as_deref(), &run.overrides(), checkpoint.as_deref(), episodes)
        }
        Command::Sweep { run, param, values, seeds, force } => {
            commands::cmd_sweep(run.config.as_deref(), &run.overrides(), &param, &values, &seeds, force)
        }
        Command::Gradcheck { seed, inject_fault } => commands::cmd_gradcheck(seed, inject_fault.as_deref()),
        Command::Plot { inputs, out } => commands::cmd_plot(&inputs, &out),
    };
    std::process::exit(code);
}

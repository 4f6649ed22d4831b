//! `chanprune`: cluster feature dumps into a preliminary structure, refine it
//! with the swarm search, report compression, or run the toy pipeline.
//!
//! Exit codes are listed in [`error`].

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use chanprune_core::cluster::Metric;
use chanprune_core::structmodel::Totals;
use clap::{Args, Parser, Subcommand};

use crate::commands::{ReportArgs, ReportInput};
use crate::config::{EvaluatorChoice, Overrides, RunConfig};
use crate::error::{code, CliError};

#[derive(Parser)]
#[command(
    name = "chanprune",
    version,
    about = "Automatic channel pruning by clustering and swarm search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Architecture id, e.g. vgg16-cifar or toynet-3w8.
    #[arg(long)]
    arch: Option<String>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Neighbourhood radius.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long = "min-pts")]
    min_pts: Option<usize>,
    #[arg(long)]
    metric: Option<Metric>,
}

#[derive(Args)]
struct SwarmArgs {
    /// Search cycles T.
    #[arg(long)]
    cycles: Option<usize>,
    /// Swarm size N.
    #[arg(long)]
    pop: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// surrogate, toynet or external:CMD (CMD split on whitespace).
    #[arg(long)]
    evaluator: Option<EvaluatorChoice>,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster feature dumps into a preliminary structure.
    Cluster {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        clustering: ClusterArgs,
        /// ACPF dump file; repeatable. Replaces paths.dumps.
        #[arg(long = "dumps", value_name = "PATH")]
        dumps: Vec<PathBuf>,
        /// Where to write the structure file.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Print a table over these eps values instead of writing a structure.
        #[arg(long, value_delimiter = ',', value_name = "EPS,...")]
        sweep: Option<Vec<f64>>,
    },
    /// Refine a preliminary structure with the swarm search.
    Search {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        swarm: SwarmArgs,
        /// Preliminary structure file.
        #[arg(long, value_name = "PATH")]
        structure: Option<PathBuf>,
        /// Where to write the searched structure.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Per-cycle history log (JSON lines).
        #[arg(long, value_name = "PATH")]
        history: Option<PathBuf>,
    },
    /// Parameter and FLOP drops of a structure.
    Report {
        #[command(flatten)]
        config: ConfigArg,
        /// Structure file to report on.
        #[arg(required_unless_present = "pruned_totals", conflicts_with = "pruned_totals")]
        structure: Option<PathBuf>,
        /// Reference structure; the unpruned network by default.
        #[arg(long, value_name = "PATH")]
        baseline: Option<PathBuf>,
        /// Report on raw totals instead of a structure.
        #[arg(long, value_name = "PARAMS,FLOPS", value_parser = parse_totals)]
        pruned_totals: Option<Totals>,
        /// Baseline for --pruned-totals; the architecture's own totals by default.
        #[arg(long, value_name = "PARAMS,FLOPS", value_parser = parse_totals)]
        baseline_totals: Option<Totals>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report here.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train, cluster, search and retrain a toy network on synthetic data.
    Toy {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        clustering: ClusterArgs,
        #[command(flatten)]
        swarm: SwarmArgs,
        /// Directory for dumps, structures and the history log.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn parse_totals(s: &str) -> Result<Totals, String> {
    let (p, f) = s.split_once(',').ok_or("expected PARAMS,FLOPS")?;
    let num = |x: &str| x.trim().parse::<u64>().map_err(|e| format!("`{x}`: {e}"));
    Ok(Totals {
        params: num(p)?,
        flops: num(f)?,
    })
}

fn load(config: &ConfigArg, o: Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load_or_default(config.config.as_deref())?;
    cfg.apply(&Overrides {
        arch: config.arch.clone(),
        ..o
    });
    Ok(cfg)
}

fn clustering_overrides(c: &ClusterArgs) -> Overrides {
    Overrides {
        eps: c.eps,
        min_pts: c.min_pts,
        metric: c.metric,
        ..Overrides::default()
    }
}

fn swarm_overrides(s: &SwarmArgs, base: Overrides) -> Overrides {
    Overrides {
        cycles: s.cycles,
        pop: s.pop,
        seed: s.seed,
        ..base
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Cluster {
            config,
            clustering,
            dumps,
            out,
            sweep,
        } => {
            let mut cfg = load(&config, clustering_overrides(&clustering))?;
            if !dumps.is_empty() {
                cfg.paths.dumps = dumps;
            }
            commands::cmd_cluster(&cfg, out, sweep.as_deref())
        }
        Command::Search {
            config,
            swarm,
            structure,
            out,
            history,
        } => {
            let cfg = load(&config, swarm_overrides(&swarm, Overrides::default()))?;
            commands::cmd_search(&cfg, swarm.evaluator.as_ref(), structure, out, history)
        }
        Command::Report {
            config,
            structure,
            baseline,
            pruned_totals,
            baseline_totals,
            json,
            out,
        } => {
            let cfg = load(&config, Overrides::default())?;
            let input = match (structure, pruned_totals) {
                (_, Some(t)) => ReportInput::Totals(t),
                (Some(p), None) => ReportInput::Structure(p),
                (None, None) => unreachable!("clap requires one of them"),
            };
            commands::cmd_report(
                &cfg,
                ReportArgs {
                    input,
                    baseline,
                    baseline_totals,
                    json,
                    out,
                },
            )
        }
        Command::Toy {
            config,
            clustering,
            swarm,
            out,
        } => {
            let cfg = load(&config, swarm_overrides(&swarm, clustering_overrides(&clustering)))?;
            commands::cmd_toy(&cfg, swarm.evaluator.as_ref(), out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { code::USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

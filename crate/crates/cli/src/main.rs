//! Command-line driver for the benchmark experiments and the LP oracle.

use std::path::PathBuf;
use std::process::ExitCode;

use almcmdp::envs::EnvId;
use almcmdp::harness::{self, ExperimentConfig};
use almcmdp::lp;
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

/// Exit status when some algorithm has no run within the selection tolerance.
const NO_QUALIFYING: u8 = 2;

#[derive(Parser)]
#[command(name = "almcmdp", version, about = "Augmented Lagrangian solvers for tabular constrained MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a grid-search experiment and write CSV traces, a summary and SVG plots.
    Run {
        /// Experiment config, TOML or JSON (by extension).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Print the LP optimum, optimal multipliers and Slater margins of an environment.
    Oracle {
        #[arg(long)]
        env: EnvId,
    },
    /// Write an environment's model JSON and ASCII map.
    ExportEnv {
        env: EnvId,
        #[arg(long, default_value = "docs")]
        out: PathBuf,
    },
}

fn run(config: PathBuf, out: PathBuf) -> Result<ExitCode> {
    let config = ExperimentConfig::load(&config)?;
    let result = harness::run_experiment(&config)?;
    let written = harness::emit_outputs(&result, &out)?;
    print!("{}", result.report());
    println!("wrote {} files under {}", written.len(), out.display());
    Ok(if result.all_qualify() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(NO_QUALIFYING)
    })
}

fn oracle(env: EnvId) -> Result<ExitCode> {
    let (cmdp, _) = env.build();
    let sol = lp::solve_occupancy_lp(&cmdp)?;
    let margins = lp::slater_margins(&cmdp)?;
    println!("environment {env}");
    println!("V* = {}", sol.v_star);
    println!("duality gap = {:e}", sol.duality_gap);
    for (i, (lambda, zeta)) in sol.lambda_star.iter().zip(&margins).enumerate() {
        println!(
            "constraint {i}: lambda* = {lambda}, slater margin = {zeta}, multiplier bound = {}",
            lp::multiplier_bound(*zeta, cmdp.gamma())
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn export_env(env: EnvId, out: PathBuf) -> Result<ExitCode> {
    let (cmdp, geometry) = env.build();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let model = out.join(format!("{env}.json"));
    cmdp.save(&model).with_context(|| format!("writing {}", model.display()))?;
    let map = out.join(format!("{env}.txt"));
    std::fs::write(&map, geometry.ascii_map()).with_context(|| format!("writing {}", map.display()))?;
    println!("wrote {} and {}", model.display(), map.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out } => run(config, out),
        Command::Oracle { env } => oracle(env),
        Command::ExportEnv { env, out } => export_env(env, out),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fbsde_lab::builtins;
use fbsde_lab::report::{emit_results, Format};
use fbsde_lab::run::run_scenario;
use fbsde_lab::scenario::{parse_problem, Overrides, Scenario};

#[derive(Parser)]
#[command(name = "fbsde-lab", version, about = "Run infinite-horizon FBSDE and game scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        file: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run one of the shipped scenarios.
    Builtin {
        name: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// List the shipped scenarios.
    List,
}

#[derive(Args)]
struct RunOpts {
    /// Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Grid steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Horizon length measured from t0.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn execute(scenario: Scenario, opts: &RunOpts) -> Result<bool> {
    let o = Overrides { paths: opts.paths, steps: opts.steps, horizon: opts.horizon, seed: opts.seed };
    let scenario = scenario.with_overrides(&o)?;
    let report = run_scenario(&scenario)?;
    let files = emit_results(&report, opts.format, &opts.out)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    for (name, ok) in &report.checks {
        println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
    }
    println!(
        "{}: {} in {:.2}s",
        report.name,
        if report.passed() { "passed" } else { "FAILED" },
        report.wall_time.as_secs_f64()
    );
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::List => {
            for name in builtins::names() {
                let desc = builtins::load(name).ok().and_then(|s| s.description).unwrap_or_default();
                println!("{name:<22} {desc}");
            }
            Ok(true)
        }
        Command::Run { file, opts } => parse_problem(&file).and_then(|s| execute(s, &opts)),
        Command::Builtin { name, opts } => builtins::load(&name).and_then(|s| execute(s, &opts)),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

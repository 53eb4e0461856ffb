use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geobeam::harness::{self, RunReport, Scenario, Stage, VerifySummary};
use geobeam::GeoError;

/// Tube covers, looping partitions and eigenfunction average bounds.
#[derive(Parser, Debug)]
#[command(name = "geobeam", version)]
struct Cli {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the scenario's `output_dir`, then `./out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the tube cover and write `cover.toml`.
    Cover,
    /// Classify tubes as looping or not over the window.
    Loops,
    /// Partition the cover into bad tubes and good families.
    Partition,
    /// Evaluate the averaged bound over the `h` grid.
    Bound,
    /// Average explicit eigenfunctions over the submanifold.
    Spectrum,
    /// Run a built-in verification suite (`all` runs every suite).
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Run every configured stage.
    Run,
}

fn load(cli: &Cli) -> Result<(Scenario, PathBuf), GeoError> {
    let path = cli.config.as_ref().ok_or_else(|| GeoError::Config("--config is required".into()))?;
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((scenario, out))
}

fn print_report(r: &RunReport) {
    println!("scenario {} ({})", r.scenario, r.scenario_hash);
    for t in &r.stages {
        println!("stage {:<9} {:>9.3}s", t.stage, t.seconds);
    }
    for (k, v) in &r.summary {
        println!("{k} = {v}");
    }
    for c in &r.invariants {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    for a in &r.artifacts {
        println!("wrote {}", a.display());
    }
}

fn print_verify(s: &VerifySummary) {
    for c in &s.checks {
        println!("{} {}/{}: {}", if c.passed { "ok  " } else { "FAIL" }, s.suite, c.name, c.detail);
    }
}

fn execute(cli: &Cli) -> Result<bool, GeoError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(GeoError::Config("--threads must be positive".into()));
        }
        harness::configure_threads(n)?;
    }
    let stage = match &cli.command {
        Command::Verify { suite } => {
            let seed = cli.seed.unwrap_or(0);
            let suites: Vec<&str> = if suite == "all" { harness::SUITES.to_vec() } else { vec![suite.as_str()] };
            let mut passed = true;
            for s in suites {
                let summary = harness::verify(s, seed)?;
                print_verify(&summary);
                passed &= summary.passed();
            }
            return Ok(passed);
        }
        Command::Run => None,
        Command::Cover => Some(Stage::Cover),
        Command::Loops => Some(Stage::Loops),
        Command::Partition => Some(Stage::Partition),
        Command::Bound => Some(Stage::Bound),
        Command::Spectrum => Some(Stage::Spectrum),
    };
    let (scenario, out) = load(cli)?;
    let report = match stage {
        Some(s) => harness::run_stages(&scenario, &s.through(), &out)?,
        None => harness::run(&scenario, &out)?,
    };
    print_report(&report);
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fpklab_cli::config::{ExperimentKind, Scenario};
use fpklab_cli::runner::{replay, run_file};
use fpklab_cli::{HarnessError, EXIT_FAIL};

/// Particle and grid laboratory for dissipative-drift measure flows with
/// exact bounded-cost transport functionals.
#[derive(Parser)]
#[command(name = "fpklab", version, about)]
struct Cli {
    /// Size of the global thread pool (defaults to the machine).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    scenario: PathBuf,

    /// Output directory for results and the run manifest.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,

    /// Override the scenario's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a linear problem and store the measure flow.
    Simulate(RunArgs),
    /// Exact transport cost between two clouds; prints cost,gap,runtime_ms.
    Distance(RunArgs),
    /// Check the transport-cost stability bound on paired flows.
    VerifyBound(RunArgs),
    /// Fixed-point iteration for measure-dependent drifts.
    FixedPoint(RunArgs),
    /// Distance-vs-envelope experiment for two initial conditions.
    Stability(RunArgs),
    /// Re-run a manifest's scenario and compare outputs bit-for-bit.
    Replay {
        /// Path to a manifest.json from a previous run.
        manifest: PathBuf,
        /// Working directory for the re-run (default: replay_check next to
        /// the manifest).
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Reshape a run's outputs into one tidy CSV for plotting.
    PlotData {
        /// Path to a manifest.json from a previous run.
        manifest: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, HarnessError> {
    match command {
        Command::Simulate(args) => run_kind(args, ExperimentKind::Simulate),
        Command::Distance(args) => run_kind(args, ExperimentKind::Distance),
        Command::VerifyBound(args) => run_kind(args, ExperimentKind::VerifyBound),
        Command::FixedPoint(args) => run_kind(args, ExperimentKind::FixedPoint),
        Command::Stability(args) => run_kind(args, ExperimentKind::Stability),
        Command::Replay { manifest, work_dir } => {
            let work = work_dir.unwrap_or_else(|| {
                manifest
                    .parent()
                    .unwrap_or(std::path::Path::new("."))
                    .join("replay_check")
            });
            let outcome = replay(&manifest, &work)?;
            if outcome.identical {
                println!("replay: {} outputs identical", outcome.compared);
                Ok(ExitCode::SUCCESS)
            } else {
                println!(
                    "replay: {} of {} outputs differ: {}",
                    outcome.mismatches.len(),
                    outcome.compared,
                    outcome.mismatches.join(", ")
                );
                Ok(ExitCode::from(EXIT_FAIL as u8))
            }
        }
        Command::PlotData { manifest } => {
            let path = fpklab_cli::plotdata::emit_plotdata(&manifest)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_kind(args: RunArgs, expected: ExperimentKind) -> Result<ExitCode, HarnessError> {
    // Validate the kind up front so `fpklab simulate` refuses a
    // verify-bound scenario instead of silently running it.
    let text = std::fs::read_to_string(&args.scenario)?;
    let mut scenario = Scenario::from_toml(&text)?;
    if scenario.kind != expected {
        return Err(HarnessError::Config(format!(
            "/kind: scenario is `{}` but the subcommand expects `{}`",
            scenario.kind.as_str(),
            expected.as_str()
        )));
    }
    let manifest = if let Some(seed) = args.seed {
        scenario.seeds = vec![seed];
        let adjusted = scenario.to_toml()?;
        let dir = args.scenario.parent().unwrap_or(std::path::Path::new("."));
        fpklab_cli::runner::run_scenario(&scenario, &adjusted, dir, &args.out_dir)?
    } else {
        run_file(&args.scenario, &args.out_dir)?
    };
    if expected == ExperimentKind::Distance {
        // the transport interface prints cost,gap,runtime_ms as CSV
        if let Some(cases) = manifest.summary.as_object() {
            println!("cost,gap,runtime_ms");
            for (_, v) in cases {
                let get = |k: &str| v.get(k).and_then(|x| x.as_f64()).unwrap_or(f64::NAN);
                println!("{:e},{:e},{:.3}", get("cost"), get("gap"), get("runtime_ms"));
            }
        }
    } else {
        println!(
            "{}: {} ({} seeds, {} ms)",
            manifest.scenario_name,
            if manifest.pass { "pass" } else { "FAIL" },
            manifest.seeds.len(),
            manifest.wall_clock_ms
        );
    }
    if manifest.pass {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_FAIL as u8))
    }
}

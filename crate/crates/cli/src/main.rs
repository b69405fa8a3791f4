//! Command-line front end for the conferencing simulator.
//!
//! Four verbs cover the workflows the library supports:
//!
//! * `run` — simulate a scenario with the surrogate overlay and write the
//!   CSV metric files;
//! * `compare-unicast` — run the overlay and the direct-unicast baseline
//!   over the same scenario and seed, write both metric sets, and print a
//!   comparison;
//! * `oracle-gap` — on a small scenario, run the distributed heuristic to
//!   quiescence and the exhaustive optimizer on the same instance, and
//!   report the objective gap;
//! * `validate` — parse and cross-check a scenario file, then verify a
//!   feasible bootstrap exists.
//!
//! Exit codes: 0 on success, 1 for unusable input (unreadable, unparsable,
//! or inconsistent scenarios), 2 for a well-formed scenario whose session
//! is infeasible — no tree assignment can meet the delay bounds.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relay_mesh::model::SurrogateId;
use relay_mesh::oracle::{heuristic_gap, OracleError};
use relay_mesh::routing::{RoutingError, RoutingState};
use relay_mesh::sim::{
    compare_unicast, run_scenario, sample_std, RunOutput, Scenario, SimError,
};

const EXIT_SCENARIO_ERROR: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "relay-mesh",
    version,
    about = "Surrogate-overlay conferencing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario with the overlay scheme and write CSV metrics.
    Run(RunArgs),
    /// Run overlay and unicast over the same scenario and compare them.
    CompareUnicast(RunArgs),
    /// Compare the distributed heuristic against the exact optimizer.
    OracleGap(OracleArgs),
    /// Parse, cross-check, and feasibility-check a scenario file.
    Validate(ScenarioArg),
}

#[derive(Args)]
struct ScenarioArg {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Override the scenario's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the CSV metric files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the scenario's duration, in seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Override the scenario's random seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::CompareUnicast(args) => cmd_compare(args),
        Command::OracleGap(args) => cmd_oracle_gap(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, String)>;

fn load(path: &PathBuf) -> Result<Scenario, (u8, String)> {
    Scenario::load(path).map_err(|e| (EXIT_SCENARIO_ERROR, e.to_string()))
}

fn sim_exit(e: SimError) -> (u8, String) {
    let code = match e {
        SimError::Infeasible(_) => EXIT_INFEASIBLE,
        _ => EXIT_SCENARIO_ERROR,
    };
    (code, e.to_string())
}

fn io_exit(e: std::io::Error) -> (u8, String) {
    (EXIT_SCENARIO_ERROR, format!("cannot write output: {e}"))
}

fn cmd_run(args: RunArgs) -> CmdResult {
    let scenario = load(&args.scenario.scenario)?;
    let out = run_scenario(&scenario, args.seed, args.duration).map_err(sim_exit)?;
    out.write_csvs(&args.out).map_err(io_exit)?;
    print_summary("overlay", &out);
    println!("metrics written to {}", args.out.display());
    Ok(())
}

fn cmd_compare(args: RunArgs) -> CmdResult {
    let scenario = load(&args.scenario.scenario)?;
    let (overlay, unicast) =
        compare_unicast(&scenario, args.seed, args.duration).map_err(sim_exit)?;
    overlay
        .write_csvs(&args.out.join("overlay"))
        .map_err(io_exit)?;
    unicast
        .write_csvs(&args.out.join("unicast"))
        .map_err(io_exit)?;
    print_summary("overlay", &overlay);
    print_summary("unicast", &unicast);
    let (o_std, u_std) = (latency_spread(&overlay), latency_spread(&unicast));
    println!(
        "latency spread: overlay {:.2} ms vs unicast {:.2} ms; timeouts: overlay {} vs unicast {}",
        o_std,
        u_std,
        overlay.log.timeouts.len(),
        unicast.log.timeouts.len()
    );
    println!("metrics written to {}", args.out.display());
    Ok(())
}

/// Standard deviation of per-tick mean delivery latencies, pooled over all
/// (flow, receiver) pairs.
fn latency_spread(out: &RunOutput) -> f64 {
    let values: Vec<f64> = out.log.latencies.iter().map(|l| l.mean_ms).collect();
    sample_std(&values)
}

fn print_summary(scheme: &str, out: &RunOutput) {
    let dispatched: u64 = out.log.frames.iter().map(|f| f.dispatched).sum();
    let on_time: u64 = out.log.frames.iter().map(|f| f.on_time).sum();
    let concealed: u64 = out.log.frames.iter().map(|f| f.concealed).sum();
    let missed: u64 = out.log.frames.iter().map(|f| f.missed).sum();
    println!(
        "{scheme}: {} events, {} switches, frames {}/{} on time ({} concealed, {} missed), {} late fragments",
        out.events_processed,
        out.log.switches.len(),
        on_time,
        dispatched,
        concealed,
        missed,
        out.log.timeouts.len()
    );
}

fn cmd_oracle_gap(args: OracleArgs) -> CmdResult {
    let scenario = load(&args.scenario.scenario)?;
    let built = scenario
        .build()
        .map_err(|e| (EXIT_SCENARIO_ERROR, e.to_string()))?;
    // The optimizer sees the conference as founded: late joiners excluded.
    let members: BTreeSet<SurrogateId> = built
        .join_at_ms
        .iter()
        .filter(|(_, &at)| at == 0.0)
        .map(|(&id, _)| id)
        .collect();
    let seed = args.seed.unwrap_or(scenario.seed);
    let report = heuristic_gap(
        &built.topo,
        &built.transcode,
        &built.ladder,
        &built.bounds,
        &members,
        seed,
    )
    .map_err(|e| match e {
        OracleError::Bootstrap(RoutingError::Infeasible { .. }) => {
            (EXIT_INFEASIBLE, e.to_string())
        }
        other => (EXIT_SCENARIO_ERROR, other.to_string()),
    })?;
    println!(
        "exact objective {:.6}, heuristic objective {:.6}, gap {:.6} ({})",
        report.exact_objective,
        report.engine_objective,
        report.gap,
        if report.matched() {
            "heuristic optimal"
        } else {
            "heuristic suboptimal"
        }
    );
    if !report.engine_quiescent {
        println!("note: heuristic had not fully quiesced when compared");
    }
    Ok(())
}

fn cmd_validate(args: ScenarioArg) -> CmdResult {
    let scenario = load(&args.scenario)?;
    let built = scenario
        .build()
        .map_err(|e| (EXIT_SCENARIO_ERROR, e.to_string()))?;
    let founders: BTreeSet<SurrogateId> = built
        .join_at_ms
        .iter()
        .filter(|(_, &at)| at == 0.0)
        .map(|(&id, _)| id)
        .collect();
    RoutingState::bootstrap(
        built.topo.clone(),
        built.transcode.clone(),
        built.ladder.clone(),
        built.bounds.clone(),
        &founders,
    )
    .map_err(|e| match e {
        RoutingError::Infeasible { .. } => (EXIT_INFEASIBLE, e.to_string()),
        other => (EXIT_SCENARIO_ERROR, other.to_string()),
    })?;
    let links = built.topo.links().count();
    println!(
        "scenario valid: {} participants ({} founding), {} links, {} scripted events, duration {:.1}s",
        built.join_at_ms.len(),
        founders.len(),
        links,
        built.events.len(),
        scenario.duration_s
    );
    Ok(())
}

//! `pegsim`: runs scenarios and adversarial game harnesses.
//!
//! Exit codes: 0 pass, 1 config or usage error, 2 invariant breach during a
//! run, 3 game bound not met.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pegsim_core::group::Ristretto;
use pegsim_core::market_ops::manipulation_harness;
use pegsim_core::scenario::{ScenarioConfig, ScenarioError, Simulation};
use pegsim_core::swap_engine::atomicity_harness;
use pegsim_core::vault::{solvency_harness, SolvencyGameConfig};
use serde_json::json;

const EXIT_CONFIG: u8 = 1;
const EXIT_BREACH: u8 = 2;
const EXIT_BOUND: u8 = 3;

#[derive(Parser)]
#[command(name = "pegsim", version, about = "Multi-chain stablecoin peg simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded scenario and write trace.csv, summary.json and events.jsonl.
    Run {
        /// Scenario file; the bundled baseline when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        blocks: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run N seeded adversarial games and check the Violation bound.
    Game {
        #[arg(long, value_enum)]
        game: GameName,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1_000)]
        runs: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the report here as report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GameName {
    Atomicity,
    Solvency,
    Manipulation,
}

fn load(path: Option<&Path>, fallback: fn() -> ScenarioConfig) -> Result<ScenarioConfig, ScenarioError> {
    match path {
        Some(p) => ScenarioConfig::from_path(p),
        None => Ok(fallback()),
    }
}

fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

fn run(scenario: Option<PathBuf>, seed: Option<u64>, blocks: Option<u64>, out: PathBuf) -> Result<u8, String> {
    let mut cfg = load(scenario.as_deref(), ScenarioConfig::baseline).map_err(|e| format!("config error: {e}"))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(b) = blocks {
        cfg.blocks = b;
    }
    let mut sim = Simulation::new(cfg).map_err(|e| format!("config error: {e}"))?;
    let result = sim.run();
    let trace = result.trace.to_csv().map_err(|e| e.to_string())?;
    let summary = serde_json::to_vec_pretty(&result.summary).map_err(|e| e.to_string())?;
    write_outputs(
        &out,
        &[("trace.csv", trace), ("summary.json", summary), ("events.jsonl", result.events_jsonl().into_bytes())],
    )
    .map_err(|e| format!("cannot write outputs: {e}"))?;
    let s = &result.summary;
    println!(
        "{}: {} blocks, max |dev| {:.5}, recovered {}, breaches {}",
        s.scenario,
        s.blocks_run,
        s.peg.max_abs_deviation,
        s.recovered,
        s.breaches.len()
    );
    if let Some(b) = result.breaches.first() {
        eprintln!("invariant breach at block {}: {} ({})", b.block, b.invariant, b.detail);
        return Ok(EXIT_BREACH);
    }
    Ok(0)
}

fn game(name: GameName, scenario: Option<PathBuf>, runs: u64, seed: u64, out: Option<PathBuf>) -> Result<u8, String> {
    let (report, pass) = match name {
        GameName::Atomicity => {
            let r = atomicity_harness::<Ristretto>(runs, seed);
            (json!({ "game": "atomicity", "report": r }), r.violations == 0)
        }
        GameName::Solvency => {
            let base = load(scenario.as_deref(), ScenarioConfig::baseline).map_err(|e| format!("config error: {e}"))?;
            let cfg = SolvencyGameConfig { params: base.vault.params, chains: base.chains.count, ..Default::default() };
            let r = solvency_harness(runs, 0.0, seed, &cfg);
            (json!({ "game": "solvency", "oracle_error_rate": 0.0, "report": r }), r.violations == 0)
        }
        GameName::Manipulation => {
            let base =
                load(scenario.as_deref(), ScenarioConfig::manipulation).map_err(|e| format!("config error: {e}"))?;
            let capital = if base.adversary.capital > 0.0 {
                base.adversary.capital
            } else {
                base.agents.capital * base.agents.count as f64
            };
            let r = manipulation_harness(&base, runs, capital, seed).map_err(|e| format!("config error: {e}"))?;
            let pass = r.violations_with_precondition == 0;
            (json!({ "game": "manipulation", "adversary_capital": capital, "report": r }), pass)
        }
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
    println!("{text}");
    if let Some(dir) = out {
        write_outputs(&dir, &[("report.json", text.into_bytes())]).map_err(|e| format!("cannot write report: {e}"))?;
    }
    Ok(if pass { 0 } else { EXIT_BOUND })
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run { scenario, seed, blocks, out } => run(scenario, seed, blocks, out),
        Command::Game { game: name, scenario, runs, seed, out } => game(name, scenario, runs, seed, out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

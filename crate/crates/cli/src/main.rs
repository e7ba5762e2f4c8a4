use std::fs;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use dora::embedding::PolicyKind;
use dora::harness::{
    csv_string, load_scenario, run_experiment, sweep, RunOptions, Scenario, ScenarioError, SweepSpec,
};
use dora::oracle::{solve_exact, DEFAULT_BUDGET};
use dora::protocol::ElectionMode;
use dora::simnet::SimMode;

#[derive(Parser)]
#[command(name = "dora", version, about = "Distributed orchestration-resource assignment simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a scenario file and list every defect.
    Check { scenario: PathBuf },
    /// Simulate one scenario and emit its metrics row as CSV.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// sync or async; defaults to the scenario's mode.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SimMode>,
        /// greedy, pe or peN; defaults to the scenario's election.
        #[arg(long, value_parser = parse_election)]
        election: Option<ElectionMode>,
        /// Also solve the exact program and report the utility ratio.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u64,
        /// CSV output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-iteration trace as NDJSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Solve the centralized assignment problem exactly.
    Oracle {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u64,
    },
    /// Sweep orchestrator counts, policies and seeds of a workload scenario.
    Sweep {
        scenario: PathBuf,
        /// Inclusive range such as 2..12, or a single count.
        #[arg(long, value_parser = parse_range, default_value = "2..12")]
        orchestrators: RangeInclusive<usize>,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',', value_parser = parse_policy, default_value = "single-node-preferred,spread-preferred")]
        policies: Vec<PolicyKind>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SimMode>,
        #[arg(long, value_parser = parse_election)]
        election: Option<ElectionMode>,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<SimMode, String> {
    SimMode::parse(s).ok_or_else(|| format!("unknown mode \"{s}\" (sync, async)"))
}

fn parse_election(s: &str) -> Result<ElectionMode, String> {
    ElectionMode::parse(s).ok_or_else(|| format!("unknown election \"{s}\" (greedy, pe, peN)"))
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    PolicyKind::parse(s).ok_or_else(|| {
        format!("unknown policy \"{s}\" (neutral, single-node-preferred, spread-preferred)")
    })
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("\"{t}\": {e}"));
    let (lo, hi) = match s.split_once("..") {
        Some((lo, hi)) => (num(lo)?, num(hi.trim_start_matches('='))?),
        None => {
            let n = num(s)?;
            (n, n)
        }
    };
    if lo == 0 || lo > hi {
        return Err(format!("empty or zero range \"{s}\""));
    }
    Ok(lo..=hi)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn check(path: &Path) -> Result<ExitCode> {
    match load_scenario(path) {
        Ok(scn) => {
            let workload = if scn.workload.is_some() { ", workload present" } else { "" };
            println!(
                "{}: ok ({} nodes, {} functions, {} orchestrators{workload})",
                path.display(),
                scn.nodes.len(),
                scn.functions.len(),
                scn.orchestrators.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ ScenarioError::Invalid { .. }) => {
            eprintln!("{e}");
            Ok(ExitCode::FAILURE)
        }
        Err(e) => Err(e.into()),
    }
}

fn oracle(path: &Path, seed: u64, budget: u64) -> Result<()> {
    let scn: Scenario = load_scenario(path)?.materialize(seed);
    let inst = scn.instance();
    let res = solve_exact(&inst, budget);
    println!("best_value: {}", res.best_value);
    println!("complete: {}", res.complete);
    println!("nodes_explored: {}", res.nodes_explored);
    if !res.complete {
        eprintln!("warning: budget exhausted; the allocation is only the best found");
    }
    for (i, o) in scn.orchestrators.iter().enumerate() {
        let placed: Vec<String> = res
            .best_allocation
            .placements(i)
            .into_iter()
            .map(|(j, n)| format!("{}@{}", scn.functions[j].id, scn.nodes[n].id))
            .collect();
        if placed.is_empty() {
            println!("{}: inactive", o.id);
        } else {
            println!("{}: {}", o.id, placed.join(" "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Check { scenario } => return check(&scenario),
        Command::Run {
            scenario,
            seed,
            mode,
            election,
            oracle,
            budget,
            out,
            trace,
        } => {
            let scn = load_scenario(&scenario)?;
            let opts = RunOptions {
                seed,
                mode,
                election,
                oracle,
                oracle_budget: budget,
                record_trace: trace.is_some(),
                wallclock: false,
            };
            let res = run_experiment(&scn, &opts)?;
            if let Some(t) = &trace {
                write_output(Some(t), &res.trace.to_ndjson())?;
            }
            if let Err(v) = &res.consensus {
                eprintln!("warning: views disagree at quiescence: {v}");
            }
            write_output(out.as_deref(), &csv_string(&[res.record]))?;
        }
        Command::Oracle {
            scenario,
            seed,
            budget,
        } => oracle(&scenario, seed, budget)?,
        Command::Sweep {
            scenario,
            orchestrators,
            policies,
            seeds,
            mode,
            election,
            oracle,
            out,
        } => {
            if seeds == 0 {
                bail!("--seeds must be positive");
            }
            let scn = load_scenario(&scenario)?;
            if scn.workload.is_none() {
                return Err(anyhow!("{}: sweeping needs a workload section", scenario.display()));
            }
            let spec = SweepSpec {
                orchestrators,
                policies,
                seeds,
                options: RunOptions {
                    mode,
                    election,
                    oracle,
                    ..RunOptions::default()
                },
            };
            let rows = sweep(&scn, &spec, &out)?;
            eprintln!("{} rows written to {}", rows.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

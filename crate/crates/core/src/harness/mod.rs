//! Scenario loading, experiment runs, metrics and parameter sweeps.

mod generate;
mod scenario;

pub use generate::{random_scenario, RandomSpec};
pub use scenario::{
    load_scenario, parse_scenario, CrashSpec, Diagnostic, FunctionSpec, NodeSpec,
    OrchestratorSpec, PolicySpec, Scenario, ScenarioError, TopologySpec, UtilitySpec, WorkloadSpec,
};

use std::io::Write;
use std::ops::RangeInclusive;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::embedding::{EmbeddingPolicy, PolicyKind};
use crate::model::{check_feasibility, global_utility, Allocation, FeasibilityReport, ProblemInstance};
use crate::oracle::{solve_exact, OracleResult, DEFAULT_BUDGET};
use crate::protocol::{CapAudit, ConsensusViolation, ElectionMode, OrchestratorAgent, ProtocolConfig};
use crate::simnet::{self, graph_metrics, GraphMetrics, SimConfig, SimError, SimMode, SimTrace};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid scenario: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("final allocation is infeasible: {0:?}")]
    Infeasible(FeasibilityReport),
    #[error("sweep template has no workload section")]
    NoWorkload,
    #[error("cannot write {path}")]
    Output {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One CSV row; field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub n_orchestrators: usize,
    pub n_nodes: usize,
    pub policy: String,
    pub mode: String,
    pub converged: bool,
    pub iterations: u64,
    pub messages_raw: u64,
    pub messages_mst: u64,
    pub allocation_ratio: f64,
    pub dora_utility: f64,
    pub oracle_utility: Option<f64>,
    pub utility_ratio: Option<f64>,
    pub wallclock_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    /// Overrides the scenario's mode.
    pub mode: Option<SimMode>,
    pub election: Option<ElectionMode>,
    pub oracle: bool,
    pub oracle_budget: u64,
    pub record_trace: bool,
    /// Fill `wallclock_ms`; off keeps output reproducible byte for byte.
    pub wallclock: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: None,
            election: None,
            oracle: false,
            oracle_budget: DEFAULT_BUDGET,
            record_trace: false,
            wallclock: false,
        }
    }
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub record: MetricsRecord,
    pub instance: ProblemInstance,
    pub allocation: Allocation,
    pub trace: SimTrace,
    pub graph: GraphMetrics,
    pub consensus: Result<(), ConsensusViolation>,
    pub cap_audit: CapAudit,
    pub oracle: Option<OracleResult>,
    pub survivors: Vec<bool>,
    /// Re-vote densities per agent and node, oldest first.
    pub revote_densities: Vec<Vec<Vec<f64>>>,
}

impl ExperimentResult {
    /// `N_o · N_v · D`.
    pub fn iteration_bound(&self) -> u64 {
        (self.instance.n_orchestrators * self.instance.n_nodes * self.graph.diameter) as u64
    }

    /// `N_msp · N_o · N_v · D`.
    pub fn message_bound(&self) -> u64 {
        self.graph.mst_edges as u64 * self.iteration_bound()
    }
}

/// Fraction of orchestrators whose whole bundle is placed.
pub fn allocation_ratio(inst: &ProblemInstance, alloc: &Allocation) -> f64 {
    if inst.n_orchestrators == 0 {
        return 0.0;
    }
    let placed = (0..inst.n_orchestrators)
        .filter(|&i| alloc.bundle_complete(inst, i))
        .count();
    placed as f64 / inst.n_orchestrators as f64
}

/// Simulates the scenario and measures the outcome. An infeasible final
/// allocation is an error, never a data point.
pub fn run_experiment(scn: &Scenario, opts: &RunOptions) -> Result<ExperimentResult, HarnessError> {
    let scn = scn.materialize(opts.seed);
    let diagnostics = scn.validate();
    if !diagnostics.is_empty() {
        return Err(HarnessError::Invalid(diagnostics));
    }
    let inst = scn.instance();
    let topo = scn.topology_for(opts.seed)?;
    let graph = graph_metrics(&topo)?;
    let policies = scn.policies();
    let agents: Vec<OrchestratorAgent> = (0..inst.n_orchestrators)
        .map(|i| OrchestratorAgent::new(&inst, i, policies[i], topo.neighbors(i).clone()))
        .collect();
    let cfg = SimConfig {
        mode: opts.mode.unwrap_or(scn.mode),
        channel: scn.channel,
        failures: scn.failure_plan(),
        max_iterations: scn.max_iterations.unwrap_or(SimConfig::default().max_iterations),
        seed: opts.seed,
        protocol: ProtocolConfig {
            election: opts.election.unwrap_or_else(|| scn.election_mode()),
        },
        record_trace: opts.record_trace,
    };
    let started = Instant::now();
    let out = simnet::run(&inst, agents, &topo, &cfg)?;
    let elapsed = started.elapsed().as_millis() as u64;
    let allocation = out.allocation(&inst, &cfg.protocol);
    let report = check_feasibility(&inst, &allocation).expect("allocation sized from instance");
    if !report.is_feasible() {
        return Err(HarnessError::Infeasible(report));
    }
    let dora_utility = global_utility(&inst, &allocation).expect("allocation sized from instance");
    let oracle = opts.oracle.then(|| solve_exact(&inst, opts.oracle_budget));
    let oracle_utility = oracle.as_ref().filter(|o| o.complete).map(|o| o.best_value);
    let utility_ratio = oracle_utility.filter(|&o| o > 0.0).map(|o| dora_utility / o);
    let record = MetricsRecord {
        seed: opts.seed,
        n_orchestrators: inst.n_orchestrators,
        n_nodes: inst.n_nodes,
        policy: scn.policy_label(),
        mode: cfg.mode.as_str().into(),
        converged: out.trace.converged,
        iterations: out.trace.iterations,
        messages_raw: out.trace.messages_raw,
        messages_mst: out.trace.messages_mst,
        allocation_ratio: allocation_ratio(&inst, &allocation),
        dora_utility,
        oracle_utility,
        utility_ratio,
        wallclock_ms: opts.wallclock.then_some(elapsed),
    };
    Ok(ExperimentResult {
        record,
        allocation,
        graph,
        consensus: out.consensus(&inst, &cfg.protocol),
        cap_audit: out.cap_audit(),
        oracle,
        survivors: out.alive.clone(),
        revote_densities: out
            .agents
            .iter()
            .map(|a| a.lost_memory.iter().map(|m| m.revote_densities.clone()).collect())
            .collect(),
        trace: out.trace,
        instance: inst,
    })
}

pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(records: &[MetricsRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub orchestrators: RangeInclusive<usize>,
    pub policies: Vec<PolicyKind>,
    pub seeds: u64,
    pub options: RunOptions,
}

/// Runs every (orchestrator count, policy, seed) cell; rows come back in
/// that nested order whatever the thread scheduling.
pub fn sweep_records(template: &Scenario, spec: &SweepSpec) -> Result<Vec<MetricsRecord>, HarnessError> {
    if template.workload.is_none() {
        return Err(HarnessError::NoWorkload);
    }
    let cells: Vec<(usize, PolicyKind, u64)> = spec
        .orchestrators
        .clone()
        .flat_map(|n| {
            spec.policies
                .iter()
                .flat_map(move |&p| (0..spec.seeds).map(move |s| (n, p, s)))
        })
        .collect();
    cells
        .par_iter()
        .map(|&(n, policy, seed)| {
            let scn = template
                .with_generated(n, Some(EmbeddingPolicy::new(policy)), seed)
                .expect("workload checked");
            let opts = RunOptions {
                seed,
                record_trace: false,
                ..spec.options.clone()
            };
            run_experiment(&scn, &opts).map(|r| r.record)
        })
        .collect()
}

/// [`sweep_records`] written to `out`; the path is opened before any run.
pub fn sweep(template: &Scenario, spec: &SweepSpec, out: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let file = std::fs::File::create(out).map_err(|source| HarnessError::Output {
        path: out.display().to_string(),
        source,
    })?;
    let records = sweep_records(template, spec)?;
    write_csv(&records, std::io::BufWriter::new(file))?;
    Ok(records)
}

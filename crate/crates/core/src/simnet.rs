//! Deterministic simulation of the orchestrator network.
//!
//! Sync mode runs lockstep rounds over ideal channels. Async mode is an event
//! queue with delays, jitter, drops with retransmission and crash-stop
//! failures. Both are fully determined by the seed.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Allocation, OrchId, ProblemInstance};
use crate::protocol::{
    election_consensus, merge_state, CapAudit, ConsensusViolation, OrchestratorAgent,
    ProtocolConfig, VoteState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("topology is disconnected")]
    Disconnected,
    #[error("self-loop on vertex {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) names a vertex outside the graph")]
    UnknownVertex(usize, usize),
    #[error("no connected random graph found for n={n}, p={p}")]
    RandomGraphExhausted { n: usize, p: f64 },
    #[error("{agents} agents for a topology of {vertices} vertices")]
    SizeMismatch { agents: usize, vertices: usize },
    #[error("agent at position {position} has id {id}")]
    AgentOrder { position: usize, id: OrchId },
    #[error("drop probability {0} outside [0, 1)")]
    DropProbability(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    Line,
    Ring,
    Star,
    Complete,
    RandomConnected,
    Custom,
}

impl TopologyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::Line => "line",
            TopologyKind::Ring => "ring",
            TopologyKind::Star => "star",
            TopologyKind::Complete => "complete",
            TopologyKind::RandomConnected => "random-connected",
            TopologyKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "line" => TopologyKind::Line,
            "ring" => TopologyKind::Ring,
            "star" => TopologyKind::Star,
            "complete" => TopologyKind::Complete,
            "random-connected" | "random" => TopologyKind::RandomConnected,
            "custom" => TopologyKind::Custom,
            _ => return None,
        })
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Undirected communication graph over orchestrator ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub kind: TopologyKind,
    pub seed: Option<u64>,
    adjacency: Vec<BTreeSet<usize>>,
}

impl Topology {
    fn from_adjacency(kind: TopologyKind, seed: Option<u64>, adjacency: Vec<BTreeSet<usize>>) -> Self {
        Self {
            kind,
            seed,
            adjacency,
        }
    }

    fn with_edges(n: usize, kind: TopologyKind, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adjacency = vec![BTreeSet::new(); n];
        for (a, b) in edges {
            adjacency[a].insert(b);
            adjacency[b].insert(a);
        }
        Self::from_adjacency(kind, None, adjacency)
    }

    pub fn line(n: usize) -> Self {
        Self::with_edges(n, TopologyKind::Line, (1..n).map(|i| (i - 1, i)))
    }

    pub fn ring(n: usize) -> Self {
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        if n > 2 {
            edges.push((n - 1, 0));
        }
        Self::with_edges(n, TopologyKind::Ring, edges)
    }

    pub fn star(n: usize) -> Self {
        Self::with_edges(n, TopologyKind::Star, (1..n).map(|i| (0, i)))
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b)));
        Self::with_edges(n, TopologyKind::Complete, edges)
    }

    /// Erdős-Rényi `G(n, p)`, redrawn until connected.
    pub fn random_connected(n: usize, p: f64, seed: u64) -> Result<Self, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            let mut edges = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    if rng.gen_bool(p.clamp(0.0, 1.0)) {
                        edges.push((a, b));
                    }
                }
            }
            let mut t = Self::with_edges(n, TopologyKind::RandomConnected, edges);
            t.seed = Some(seed);
            if t.is_connected() {
                return Ok(t);
            }
        }
        Err(SimError::RandomGraphExhausted { n, p })
    }

    pub fn custom(n: usize, edges: &[(usize, usize)]) -> Result<Self, SimError> {
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(SimError::UnknownVertex(a, b));
            }
            if a == b {
                return Err(SimError::SelfLoop(a));
            }
        }
        Ok(Self::with_edges(n, TopologyKind::Custom, edges.iter().copied()))
    }

    pub fn build(kind: TopologyKind, n: usize, p: f64, seed: u64) -> Result<Self, SimError> {
        match kind {
            TopologyKind::Line => Ok(Self::line(n)),
            TopologyKind::Ring => Ok(Self::ring(n)),
            TopologyKind::Star => Ok(Self::star(n)),
            TopologyKind::Complete | TopologyKind::Custom => Ok(Self::complete(n)),
            TopologyKind::RandomConnected => Self::random_connected(n, p, seed),
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, i: usize) -> &BTreeSet<usize> {
        &self.adjacency[i]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect()
    }

    fn bfs(&self, from: usize, skip: Option<usize>) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_vertices()];
        let mut queue = VecDeque::new();
        dist[from] = Some(0);
        queue.push_back(from);
        while let Some(u) = queue.pop_front() {
            for &w in &self.adjacency[u] {
                if Some(w) != skip && dist[w].is_none() {
                    dist[w] = Some(dist[u].unwrap() + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.n_vertices() == 0 || self.bfs(0, None).iter().all(Option::is_some)
    }

    /// Whether the graph stays connected after deleting vertex `v`.
    pub fn connected_without(&self, v: usize) -> bool {
        let n = self.n_vertices();
        if n <= 2 {
            return true;
        }
        let start = if v == 0 { 1 } else { 0 };
        self.bfs(start, Some(v))
            .iter()
            .enumerate()
            .all(|(u, d)| u == v || d.is_some())
    }

    /// Edges of the BFS spanning tree rooted at vertex 0, as `(min, max)` pairs.
    pub fn spanning_tree(&self) -> BTreeSet<(usize, usize)> {
        let mut tree = BTreeSet::new();
        let mut seen = vec![false; self.n_vertices()];
        let mut queue = VecDeque::new();
        if self.n_vertices() > 0 {
            seen[0] = true;
            queue.push_back(0);
        }
        while let Some(u) = queue.pop_front() {
            for &w in &self.adjacency[u] {
                if !seen[w] {
                    seen[w] = true;
                    tree.insert((u.min(w), u.max(w)));
                    queue.push_back(w);
                }
            }
        }
        tree
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GraphMetrics {
    pub diameter: usize,
    pub mst_edges: usize,
}

pub fn graph_metrics(topo: &Topology) -> Result<GraphMetrics, SimError> {
    if !topo.is_connected() {
        return Err(SimError::Disconnected);
    }
    let mut diameter = 0;
    for v in 0..topo.n_vertices() {
        for d in topo.bfs(v, None).into_iter().flatten() {
            diameter = diameter.max(d);
        }
    }
    Ok(GraphMetrics {
        diameter,
        mst_edges: topo.n_vertices().saturating_sub(1),
    })
}

/// Delay model of async links, in event-time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelModel {
    pub base_delay: u64,
    pub jitter: u64,
    pub drop_probability: f64,
    pub retransmit_timeout: u64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            base_delay: 1,
            jitter: 0,
            drop_probability: 0.0,
            retransmit_timeout: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crash {
    pub orchestrator: OrchId,
    pub time: u64,
}

/// Crash-stop failures: event time in async mode, round number in sync mode.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailurePlan {
    #[serde(default)]
    pub crashes: Vec<Crash>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    #[default]
    Sync,
    Async,
}

impl SimMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SimMode::Sync => "sync",
            SimMode::Async => "async",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sync" => Some(SimMode::Sync),
            "async" => Some(SimMode::Async),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub mode: SimMode,
    pub channel: ChannelModel,
    pub failures: FailurePlan,
    /// Rounds (sync) or per-agent activations (async) before giving up.
    pub max_iterations: u64,
    pub seed: u64,
    pub protocol: ProtocolConfig,
    pub record_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: SimMode::Sync,
            channel: ChannelModel::default(),
            failures: FailurePlan::default(),
            max_iterations: 10_000,
            seed: 0,
            protocol: ProtocolConfig::default(),
            record_trace: false,
        }
    }
}

/// One trace line. Counts are cumulative.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iteration: u64,
    pub time: u64,
    /// Digest of each agent's view; `None` once crashed.
    pub digests: Vec<Option<u64>>,
    pub messages_sent: u64,
    pub messages_mst: u64,
    pub messages_delivered: u64,
    pub quiescent: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimTrace {
    pub records: Vec<TraceRecord>,
    pub converged: bool,
    pub iterations: u64,
    pub messages_raw: u64,
    /// Spanning-tree link traversals. In sync mode an exchange over a link
    /// within one round counts once.
    pub messages_mst: u64,
    pub messages_delivered: u64,
    /// Link transmissions including retransmits of dropped messages.
    pub transmissions: u64,
    pub end_time: u64,
}

impl SimTrace {
    /// Newline-delimited JSON, one record per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug)]
pub struct SimOutcome {
    pub trace: SimTrace,
    pub agents: Vec<OrchestratorAgent>,
    pub alive: Vec<bool>,
}

impl SimOutcome {
    pub fn survivors(&self) -> impl Iterator<Item = &OrchestratorAgent> {
        self.agents.iter().filter(|a| self.alive[a.id])
    }

    /// Assignments of surviving agents that win every node they vote on.
    pub fn allocation(&self, inst: &ProblemInstance, cfg: &ProtocolConfig) -> Allocation {
        let mut alloc = Allocation::empty(inst);
        for a in self.survivors() {
            if a.holds_allocation(cfg, inst) {
                a.write_allocation(&mut alloc);
            }
        }
        alloc
    }

    /// Same winners in every surviving view, and only winners vote.
    pub fn consensus(
        &self,
        inst: &ProblemInstance,
        cfg: &ProtocolConfig,
    ) -> Result<(), ConsensusViolation> {
        let views: Vec<(OrchId, &VoteState)> = self.survivors().map(|a| (a.id, &a.state)).collect();
        election_consensus(&views, &inst.capacity, cfg.election)
    }

    pub fn cap_audit(&self) -> CapAudit {
        self.agents.iter().fold(CapAudit::default(), |acc, a| CapAudit {
            checks: acc.checks + a.audit.checks,
            violations: acc.violations + a.audit.violations,
            max_excess: acc.max_excess.max(a.audit.max_excess),
        })
    }
}

struct Network<'a> {
    topo: &'a Topology,
    tree: BTreeSet<(usize, usize)>,
    /// known[i][j]: what `i` can be sure `j` already holds.
    known: Vec<Vec<VoteState>>,
    /// Tree links already crossed this round; sync mode only.
    round_links: Option<BTreeSet<(usize, usize)>>,
    trace: SimTrace,
    record: bool,
}

impl<'a> Network<'a> {
    fn new(inst: &ProblemInstance, topo: &'a Topology, record: bool) -> Self {
        let empty = VoteState::new(inst.n_orchestrators, inst.n_nodes, inst.n_resources);
        Self {
            topo,
            tree: topo.spanning_tree(),
            known: vec![vec![empty; inst.n_orchestrators]; inst.n_orchestrators],
            round_links: None,
            trace: SimTrace::default(),
            record,
        }
    }

    /// Snapshots `from` owes its neighbours; updates the sent bookkeeping.
    fn outgoing(&mut self, from: &OrchestratorAgent) -> Vec<(usize, VoteState)> {
        let mut out = Vec::new();
        for &to in self.topo.neighbors(from.id) {
            if from.state.has_newer_than(&self.known[from.id][to]) {
                merge_state(&mut self.known[from.id][to], &from.state);
                self.trace.messages_raw += 1;
                let link = (from.id.min(to), from.id.max(to));
                if self.tree.contains(&link) {
                    let fresh = self.round_links.as_mut().is_none_or(|used| used.insert(link));
                    if fresh {
                        self.trace.messages_mst += 1;
                    }
                }
                out.push((to, from.state.clone()));
            }
        }
        out
    }

    fn delivered(&mut self, from: usize, to: usize, snapshot: &VoteState) {
        merge_state(&mut self.known[to][from], snapshot);
        self.trace.messages_delivered += 1;
    }

    fn push_record(&mut self, iteration: u64, time: u64, agents: &[OrchestratorAgent], alive: &[bool], quiescent: bool) {
        if !self.record {
            return;
        }
        self.trace.records.push(TraceRecord {
            iteration,
            time,
            digests: agents
                .iter()
                .map(|a| alive[a.id].then(|| a.state.digest()))
                .collect(),
            messages_sent: self.trace.messages_raw,
            messages_mst: self.trace.messages_mst,
            messages_delivered: self.trace.messages_delivered,
            quiescent,
        });
    }
}

fn check_agents(agents: &[OrchestratorAgent], topo: &Topology) -> Result<(), SimError> {
    if agents.len() != topo.n_vertices() {
        return Err(SimError::SizeMismatch {
            agents: agents.len(),
            vertices: topo.n_vertices(),
        });
    }
    if let Some((position, a)) = agents.iter().enumerate().find(|(p, a)| a.id != *p) {
        return Err(SimError::AgentOrder { position, id: a.id });
    }
    Ok(())
}

/// Runs the protocol to quiescence or until `cfg.max_iterations`.
pub fn run(
    inst: &ProblemInstance,
    agents: Vec<OrchestratorAgent>,
    topo: &Topology,
    cfg: &SimConfig,
) -> Result<SimOutcome, SimError> {
    check_agents(&agents, topo)?;
    if !topo.is_connected() {
        return Err(SimError::Disconnected);
    }
    if !(0.0..1.0).contains(&cfg.channel.drop_probability) {
        return Err(SimError::DropProbability(cfg.channel.drop_probability));
    }
    Ok(match cfg.mode {
        SimMode::Sync => run_sync(inst, agents, topo, cfg),
        SimMode::Async => run_async(inst, agents, topo, cfg),
    })
}

fn run_sync(
    inst: &ProblemInstance,
    mut agents: Vec<OrchestratorAgent>,
    topo: &Topology,
    cfg: &SimConfig,
) -> SimOutcome {
    let mut net = Network::new(inst, topo, cfg.record_trace);
    let mut alive = vec![true; agents.len()];
    let mut last_active = 0;
    for round in 1..=cfg.max_iterations {
        for c in &cfg.failures.crashes {
            if c.time <= round && c.orchestrator < alive.len() {
                alive[c.orchestrator] = false;
            }
        }
        let mut active = false;
        for a in agents.iter_mut().filter(|a| alive[a.id]) {
            active |= a.orchestrate(inst, &cfg.protocol);
        }
        net.round_links = Some(BTreeSet::new());
        let mut mail = Vec::new();
        for a in agents.iter().filter(|a| alive[a.id]) {
            for (to, snapshot) in net.outgoing(a) {
                mail.push((a.id, to, snapshot));
            }
        }
        active |= !mail.is_empty();
        for (from, to, snapshot) in mail {
            if alive[to] {
                merge_state(&mut agents[to].state, &snapshot);
                net.delivered(from, to, &snapshot);
            }
        }
        if active {
            last_active = round;
        }
        net.push_record(round, round, &agents, &alive, !active);
        if !active {
            net.trace.converged = true;
            break;
        }
    }
    net.trace.iterations = last_active;
    net.trace.end_time = last_active;
    SimOutcome {
        trace: net.trace,
        agents,
        alive,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Crash(usize),
    Start(usize),
    Transmit { message: usize },
}

#[derive(Debug)]
struct InFlight {
    from: usize,
    to: usize,
    snapshot: VoteState,
}

fn run_async(
    inst: &ProblemInstance,
    mut agents: Vec<OrchestratorAgent>,
    topo: &Topology,
    cfg: &SimConfig,
) -> SimOutcome {
    let mut net = Network::new(inst, topo, cfg.record_trace);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut alive = vec![true; agents.len()];
    let mut queue: BinaryHeap<Reverse<(u64, u64, EventKind)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |queue: &mut BinaryHeap<_>, time: u64, ev: EventKind| {
        queue.push(Reverse((time, seq, ev)));
        seq += 1;
    };
    for c in &cfg.failures.crashes {
        if c.orchestrator < agents.len() {
            push(&mut queue, c.time, EventKind::Crash(c.orchestrator));
        }
    }
    for i in 0..agents.len() {
        push(&mut queue, 0, EventKind::Start(i));
    }
    let mut messages: Vec<Option<InFlight>> = Vec::new();
    let mut pending = 0usize;
    let mut step = 0u64;
    let ch = cfg.channel;
    let schedule = |rng: &mut ChaCha8Rng, now: u64| -> (u64, bool) {
        if ch.drop_probability > 0.0 && rng.gen_bool(ch.drop_probability) {
            (now + ch.retransmit_timeout.max(1), false)
        } else {
            let jitter = if ch.jitter > 0 { rng.gen_range(0..=ch.jitter) } else { 0 };
            (now + ch.base_delay + jitter, true)
        }
    };
    // whether the current attempt of each message gets through
    let mut will_deliver: Vec<bool> = Vec::new();
    let mut converged = true;

    let mut starts_left = agents.len();
    while pending > 0 || starts_left > 0 {
        let Some(Reverse((now, _, ev))) = queue.pop() else {
            break;
        };
        net.trace.end_time = now;
        let woke = match ev {
            EventKind::Crash(i) => {
                alive[i] = false;
                None
            }
            EventKind::Start(i) => {
                starts_left -= 1;
                alive[i].then(|| {
                    agents[i].orchestrate(inst, &cfg.protocol);
                    i
                })
            }
            EventKind::Transmit { message } => {
                let Some(m) = messages[message].take() else {
                    continue;
                };
                if !alive[m.from] {
                    pending -= 1;
                    continue;
                }
                net.trace.transmissions += 1;
                if !will_deliver[message] {
                    let (at, ok) = schedule(&mut rng, now);
                    will_deliver[message] = ok;
                    messages[message] = Some(m);
                    push(&mut queue, at, EventKind::Transmit { message });
                    continue;
                }
                pending -= 1;
                if !alive[m.to] {
                    continue;
                }
                net.delivered(m.from, m.to, &m.snapshot);
                if merge_state(&mut agents[m.to].state, &m.snapshot) {
                    agents[m.to].orchestrate(inst, &cfg.protocol);
                    Some(m.to)
                } else {
                    None
                }
            }
        };
        if let Some(i) = woke {
            step += 1;
            for (to, snapshot) in net.outgoing(&agents[i]) {
                let id = messages.len();
                let (at, ok) = schedule(&mut rng, now);
                messages.push(Some(InFlight {
                    from: i,
                    to,
                    snapshot,
                }));
                will_deliver.push(ok);
                pending += 1;
                push(&mut queue, at, EventKind::Transmit { message: id });
            }
            net.push_record(step, now, &agents, &alive, false);
            if agents.iter().any(|a| a.activations > cfg.max_iterations) {
                converged = false;
                break;
            }
        }
    }
    net.trace.converged = converged && pending == 0;
    net.trace.iterations = agents.iter().map(|a| a.activations).max().unwrap_or(0);
    let end = net.trace.end_time;
    net.push_record(step, end, &agents, &alive, net.trace.converged);
    SimOutcome {
        trace: net.trace,
        agents,
        alive,
    }
}

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::embedding::{
    Assignment, EmbeddingContext, EmbeddingPolicy, EmbeddingRoutine, GreedyEmbedder,
};
use crate::model::{
    Allocation, Amount, FuncId, NodeId, OrchId, ProblemInstance, ServiceId, UtilityModifier,
    UTILITY_TOLERANCE,
};

use super::election::{run_election, ElectionMode};
use super::score::{density, normalized_demand, score, WinnerRef};
use super::{ElectionOutcome, Timestamp, VoteState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    pub election: ElectionMode,
}

impl Default for ProtocolConfig {
    /// Greedy elections: a capped re-vote then always ranks below every
    /// standing winner, so it can never displace one.
    fn default() -> Self {
        Self {
            election: ElectionMode::Greedy,
        }
    }
}

/// What an agent remembers about one node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeMemory {
    pub voted: bool,
    /// Lowest density the agent may vote with here after losing.
    pub lost_cap: Option<f64>,
    pub losses: u32,
    /// Last demand the agent lost with on this node.
    pub lost_demand: Option<Vec<Amount>>,
    /// Densities of the agent's re-votes here, oldest first.
    pub revote_densities: Vec<f64>,
}

/// Running check of the scoring cap at every re-vote.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CapAudit {
    pub checks: u64,
    pub violations: u64,
    pub max_excess: f64,
}

pub struct OrchestratorAgent {
    pub id: OrchId,
    pub bundle: Vec<ServiceId>,
    pub assignment: Assignment,
    pub state: VoteState,
    pub lost_memory: Vec<NodeMemory>,
    pub policy: EmbeddingPolicy,
    pub neighborhood: BTreeSet<OrchId>,
    pub conceded: bool,
    pub activations: u64,
    pub audit: CapAudit,
    embedder: Arc<dyn EmbeddingRoutine>,
    excluded_pairs: BTreeSet<(FuncId, NodeId)>,
    excluded_nodes: BTreeSet<NodeId>,
    attempted: BTreeSet<Assignment>,
    /// Residual capacity seen when conceding.
    conceded_residual: Option<Vec<Vec<Amount>>>,
    counter: u64,
    started: bool,
}

impl fmt::Debug for OrchestratorAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OrchestratorAgent")
            .field("id", &self.id)
            .field("assignment", &self.assignment)
            .field("conceded", &self.conceded)
            .field("counter", &self.counter)
            .finish_non_exhaustive()
    }
}

impl OrchestratorAgent {
    pub fn new(
        inst: &ProblemInstance,
        id: OrchId,
        policy: EmbeddingPolicy,
        neighborhood: BTreeSet<OrchId>,
    ) -> Self {
        Self::with_embedder(inst, id, policy, neighborhood, Arc::new(GreedyEmbedder))
    }

    pub fn with_embedder(
        inst: &ProblemInstance,
        id: OrchId,
        policy: EmbeddingPolicy,
        neighborhood: BTreeSet<OrchId>,
        embedder: Arc<dyn EmbeddingRoutine>,
    ) -> Self {
        Self {
            id,
            bundle: inst.bundle_services(id),
            assignment: Assignment::default(),
            state: VoteState::new(inst.n_orchestrators, inst.n_nodes, inst.n_resources),
            lost_memory: vec![NodeMemory::default(); inst.n_nodes],
            policy,
            neighborhood,
            conceded: false,
            activations: 0,
            audit: CapAudit::default(),
            embedder,
            excluded_pairs: BTreeSet::new(),
            excluded_nodes: BTreeSet::new(),
            attempted: BTreeSet::new(),
            conceded_residual: None,
            counter: 0,
            started: false,
        }
    }

    /// Own logical clock; bumped once per vote regeneration.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// `U_in(x_i)`: policy-adjusted utility of the placements on node `n`.
    pub fn node_utility(&self, inst: &ProblemInstance, x: &Assignment, n: NodeId) -> f64 {
        let pairs = x.pairs();
        pairs
            .iter()
            .enumerate()
            .filter(|&(_, &(_, node))| node == n)
            .map(|(idx, &(j, node))| {
                let others: Vec<_> = pairs
                    .iter()
                    .enumerate()
                    .filter(|&(o, _)| o != idx)
                    .map(|(_, &p)| p)
                    .collect();
                self.policy
                    .modify(self.id, &others, (j, node), inst.base_utility[self.id][j][node])
            })
            .sum()
    }

    fn winner_refs(&self, outcome: &ElectionOutcome, n: NodeId, cap: &[Amount]) -> Vec<WinnerRef> {
        outcome.winners_per_node[n]
            .iter()
            .filter(|&&w| w != self.id)
            .filter_map(|&w| {
                let norm = normalized_demand(&self.state.r[w][n], cap).ok()?;
                Some(WinnerRef {
                    id: w,
                    vote: self.state.v[w][n],
                    norm,
                })
            })
            .collect()
    }

    /// Scores `x` against the winners of `outcome` and writes the own entries.
    /// On failure returns the first node where no positive vote is possible
    /// and leaves the state untouched.
    pub fn vote(
        &mut self,
        inst: &ProblemInstance,
        x: &Assignment,
        outcome: &ElectionOutcome,
    ) -> Result<(), NodeId> {
        let mut row = vec![0.0; inst.n_nodes];
        let mut demand = vec![vec![0; inst.n_resources]; inst.n_nodes];
        let mut capped = Vec::new();
        for n in x.nodes() {
            let cap = &inst.capacity[n];
            let r = x.demand_on(inst, n);
            let norm = normalized_demand(&r, cap).map_err(|_| n)?;
            let mem = &self.lost_memory[n];
            let winners = self.winner_refs(outcome, n, cap);
            let s = score(
                self.id,
                self.node_utility(inst, x, n),
                norm,
                mem.voted,
                mem.lost_cap,
                &winners,
            );
            if s.vote <= UTILITY_TOLERANCE {
                return Err(n);
            }
            if let Some(c) = s.cap_density {
                capped.push((n, density(s.vote, norm), c));
            }
            row[n] = s.vote;
            demand[n] = r;
        }
        for (n, d, c) in capped {
            self.audit.checks += 1;
            if d > c + UTILITY_TOLERANCE {
                self.audit.violations += 1;
                self.audit.max_excess = self.audit.max_excess.max(d - c);
            }
            let mem = &mut self.lost_memory[n];
            if mem.losses > 0 {
                mem.revote_densities.push(d);
                mem.lost_cap = Some(mem.lost_cap.map_or(d, |c| c.min(d)));
            }
        }
        self.commit(row, demand);
        self.assignment = x.clone();
        Ok(())
    }

    /// Withdraws every own vote; peers learn it through fresh timestamps.
    pub fn concede(&mut self, inst: &ProblemInstance) {
        self.commit(
            vec![0.0; inst.n_nodes],
            vec![vec![0; inst.n_resources]; inst.n_nodes],
        );
        self.assignment = Assignment::default();
        self.conceded = true;
    }

    fn commit(&mut self, row: Vec<f64>, demand: Vec<Vec<Amount>>) {
        let me = self.id;
        let changed: Vec<NodeId> = (0..row.len())
            .filter(|&n| self.state.v[me][n] != row[n] || self.state.r[me][n] != demand[n])
            .collect();
        if changed.is_empty() {
            return;
        }
        self.counter += 1;
        let stamp = Timestamp {
            counter: self.counter,
            owner: me,
        };
        for n in changed {
            self.state.v[me][n] = row[n];
            self.state.r[me][n].clone_from(&demand[n]);
            self.state.t[me][n] = stamp;
        }
        for (n, &v) in row.iter().enumerate() {
            if v > 0.0 {
                self.lost_memory[n].voted = true;
            }
        }
    }

    /// Nodes on which the own current votes do not survive `outcome`.
    pub fn lost_nodes(&self, outcome: &ElectionOutcome) -> Vec<NodeId> {
        if let Some(lost) = outcome.false_winners.get(&self.id) {
            return lost.clone();
        }
        self.state.v[self.id]
            .iter()
            .enumerate()
            .filter(|&(n, &v)| v > UTILITY_TOLERANCE && !outcome.winners_per_node[n].contains(&self.id))
            .map(|(n, _)| n)
            .collect()
    }

    fn record_loss(&mut self, inst: &ProblemInstance, n: NodeId, outcome: &ElectionOutcome) {
        let cap = &inst.capacity[n];
        let own = normalized_demand(&self.state.r[self.id][n], cap)
            .map(|norm| density(self.state.v[self.id][n], norm))
            .ok()
            .filter(|d| d.is_finite());
        let beat_by = self
            .winner_refs(outcome, n, cap)
            .iter()
            .map(WinnerRef::density)
            .filter(|d| d.is_finite())
            .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))));
        let new_cap = match (own, beat_by) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        let mem = &mut self.lost_memory[n];
        if let Some(c) = new_cap {
            mem.lost_cap = Some(mem.lost_cap.map_or(c, |old| old.min(c)));
        }
        mem.losses += 1;
        mem.lost_demand = Some(self.state.r[self.id][n].clone());
        if mem.losses == 1 {
            for p in self.assignment.placements.iter().filter(|p| p.node == n) {
                self.excluded_pairs.insert((p.function, n));
            }
        } else {
            self.excluded_nodes.insert(n);
        }
    }

    /// Residual capacity per node after the winners of `outcome`.
    fn residuals(&self, inst: &ProblemInstance, outcome: &ElectionOutcome) -> Vec<Vec<Amount>> {
        (0..inst.n_nodes)
            .map(|n| {
                let mut res = inst.capacity[n].clone();
                for &w in outcome.winners_per_node[n].iter().filter(|&&w| w != self.id) {
                    for (c, &r) in res.iter_mut().zip(&self.state.r[w][n]) {
                        *c -= r;
                    }
                }
                res.iter_mut().for_each(|c| *c = (*c).max(0));
                res
            })
            .collect()
    }

    /// Drops all own votes, embeds again on what the others leave free and
    /// votes the result, or concedes when nothing admissible remains.
    fn replan(&mut self, inst: &ProblemInstance, cfg: &ProtocolConfig) {
        let mut view = self.state.clone();
        view.v[self.id].iter_mut().for_each(|v| *v = 0.0);
        let outcome = run_election(&view, &inst.capacity, cfg.election);
        loop {
            let ctx = EmbeddingContext {
                residual: self.residuals(inst, &outcome),
                excluded_pairs: self.excluded_pairs.clone(),
                excluded_nodes: self.excluded_nodes.clone(),
                lost_caps: self.lost_memory.iter().map(|m| m.lost_cap).collect(),
                attempted: self.attempted.clone(),
            };
            let Some(x) = self
                .embedder
                .embed(self.id, &self.bundle, inst, &ctx, &self.policy)
            else {
                self.concede(inst);
                self.conceded_residual = Some(ctx.residual);
                return;
            };
            self.attempted.insert(x.clone());
            match self.vote(inst, &x, &outcome) {
                Ok(()) => return,
                Err(n) => {
                    self.excluded_nodes.insert(n);
                }
            }
        }
    }

    /// Whether some residual grew since the agent conceded.
    fn capacity_freed(&self, inst: &ProblemInstance, cfg: &ProtocolConfig) -> bool {
        let Some(then) = &self.conceded_residual else {
            return false;
        };
        let outcome = run_election(&self.state, &inst.capacity, cfg.election);
        let now = self.residuals(inst, &outcome);
        now.iter()
            .zip(then)
            .any(|(a, b)| a.iter().zip(b).any(|(x, y)| x > y))
    }

    /// One activation: plans on first call, then re-plans until the own votes
    /// survive the local election. Returns whether any own entry changed.
    pub fn orchestrate(&mut self, inst: &ProblemInstance, cfg: &ProtocolConfig) -> bool {
        self.activations += 1;
        let before = self.counter;
        if self.conceded {
            if !self.capacity_freed(inst, cfg) {
                return false;
            }
            self.conceded = false;
            self.replan(inst, cfg);
        }
        if !self.started {
            self.started = true;
            self.replan(inst, cfg);
        }
        let limit = 4 * (inst.n_functions * inst.n_nodes + 2);
        for _ in 0..limit {
            if self.conceded {
                break;
            }
            let outcome = run_election(&self.state, &inst.capacity, cfg.election);
            let lost = self.lost_nodes(&outcome);
            if lost.is_empty() {
                break;
            }
            for &n in &lost {
                self.record_loss(inst, n, &outcome);
            }
            self.replan(inst, cfg);
        }
        self.counter != before
    }

    /// Whether the agent currently wins every node it votes on.
    pub fn holds_allocation(&self, cfg: &ProtocolConfig, inst: &ProblemInstance) -> bool {
        if self.assignment.is_empty() {
            return false;
        }
        let outcome = run_election(&self.state, &inst.capacity, cfg.election);
        self.lost_nodes(&outcome).is_empty()
            && self
                .assignment
                .nodes()
                .iter()
                .all(|n| outcome.winners_per_node[*n].contains(&self.id))
    }

    /// Writes the agent's assignment into `alloc`.
    pub fn write_allocation(&self, alloc: &mut Allocation) {
        for p in &self.assignment.placements {
            alloc.assign(self.id, p.function, p.node);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::t1;
    use crate::protocol::merge_state;

    fn cfg() -> ProtocolConfig {
        ProtocolConfig::default()
    }

    #[test]
    fn sole_orchestrator_wins() {
        let mut inst = t1();
        inst.n_orchestrators = 1;
        inst.bundle.truncate(1);
        inst.base_utility.truncate(1);
        let mut a = OrchestratorAgent::new(&inst, 0, EmbeddingPolicy::neutral(), BTreeSet::new());
        assert!(a.orchestrate(&inst, &cfg()));
        assert_eq!(a.state.v[0][0], 8.0);
        assert_eq!(a.state.r[0][0], vec![4]);
        assert!(a.holds_allocation(&cfg(), &inst));
        assert!(!a.orchestrate(&inst, &cfg()));
    }

    #[test]
    fn outvoted_agent_concedes() {
        // two agents, capacity 10 fits only one: demands 8 (u 16) and 8 (u 8)
        let mut inst = t1();
        inst.n_orchestrators = 2;
        inst.bundle.truncate(2);
        inst.base_utility.truncate(2);
        inst.cost = vec![vec![8], vec![8], vec![3]];
        inst.base_utility[0][0][0] = 16.0;
        let p = EmbeddingPolicy::neutral();
        let mut a = OrchestratorAgent::new(&inst, 0, p, [1].into_iter().collect());
        let mut b = OrchestratorAgent::new(&inst, 1, p, [0].into_iter().collect());
        a.orchestrate(&inst, &cfg());
        b.orchestrate(&inst, &cfg());
        assert!(!b.conceded);
        merge_state(&mut b.state, &a.state);
        b.orchestrate(&inst, &cfg());
        assert!(b.conceded);
        assert!(b.state.v[1].iter().all(|&v| v == 0.0));
        merge_state(&mut a.state, &b.state);
        assert!(!a.orchestrate(&inst, &cfg()));
        assert!(a.holds_allocation(&cfg(), &inst));
    }

    #[test]
    fn loss_on_one_node_resets_all() {
        // agent 1 needs two services; its n1 placement loses to agent 0
        let inst = ProblemInstance {
            n_orchestrators: 2,
            n_services: 2,
            n_functions: 2,
            n_nodes: 2,
            n_resources: 1,
            cost: vec![vec![6], vec![6]],
            capacity: vec![vec![10], vec![10]],
            implements: vec![vec![true, false], vec![false, true]],
            bundle: vec![vec![false, true], vec![true, true]],
            base_utility: vec![
                vec![vec![0.0, 0.0], vec![1.0, 50.0]],
                vec![vec![9.0, 1.0], vec![1.0, 5.0]],
            ],
        };
        let p = EmbeddingPolicy::neutral();
        let mut a = OrchestratorAgent::new(&inst, 0, p, [1].into_iter().collect());
        let mut b = OrchestratorAgent::new(&inst, 1, p, [0].into_iter().collect());
        a.orchestrate(&inst, &cfg());
        b.orchestrate(&inst, &cfg());
        assert!(b.state.v[1][1] > 0.0 && b.state.v[1][0] > 0.0);
        merge_state(&mut b.state, &a.state);
        b.orchestrate(&inst, &cfg());
        // only one function per service, so no alternative exists on n1
        assert!(b.conceded);
        assert_eq!(b.state.v[1], vec![0.0, 0.0]);
        assert!(b.state.t[1][0].counter >= 2 && b.state.t[1][1].counter >= 2);
    }
}

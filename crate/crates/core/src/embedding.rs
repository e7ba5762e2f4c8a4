//! Private embedding routines and system-policy utility modifiers.
//!
//! An embedding turns an orchestrator's bundle into a concrete assignment:
//! one distinct function per service, each placed on a node. The protocol
//! only sees the result, so any [`EmbeddingRoutine`] can be plugged in.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{
    assignment_utility, Amount, FuncId, NodeId, OrchId, ProblemInstance, ServiceId, UtilityModifier,
    UTILITY_TOLERANCE,
};

/// Default modifier weight for the non-neutral policies.
pub const DEFAULT_POLICY_WEIGHT: f64 = 0.5;

/// Search nodes the embedder may visit before giving up.
const EMBED_SEARCH_LIMIT: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Neutral,
    SingleNodePreferred,
    SpreadPreferred,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Neutral => "neutral",
            Self::SingleNodePreferred => "single-node-preferred",
            Self::SpreadPreferred => "spread-preferred",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "neutral" => Some(Self::Neutral),
            "single-node-preferred" | "single-node" => Some(Self::SingleNodePreferred),
            "spread-preferred" | "spread" => Some(Self::SpreadPreferred),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPolicy {
    pub kind: PolicyKind,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    DEFAULT_POLICY_WEIGHT
}

impl Default for EmbeddingPolicy {
    fn default() -> Self {
        Self::neutral()
    }
}

impl EmbeddingPolicy {
    pub fn neutral() -> Self {
        Self {
            kind: PolicyKind::Neutral,
            weight: DEFAULT_POLICY_WEIGHT,
        }
    }

    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            weight: DEFAULT_POLICY_WEIGHT,
        }
    }
}

/// Policy-modified utility of placing a function on `candidate.1` given the
/// placements made so far.
///
/// Single-node preference scales by `1 + w * (share of placements already on
/// the node)`; spread preference by `1 + w * (share on other nodes)`.
pub fn policy_modifier(
    policy: &EmbeddingPolicy,
    so_far: &[(FuncId, NodeId)],
    candidate: (FuncId, NodeId),
    base_utility: f64,
) -> f64 {
    if so_far.is_empty() {
        return base_utility;
    }
    let on_node = so_far.iter().filter(|&&(_, n)| n == candidate.1).count() as f64;
    let share_same = on_node / so_far.len() as f64;
    let w = policy.weight.max(0.0);
    match policy.kind {
        PolicyKind::Neutral => base_utility,
        PolicyKind::SingleNodePreferred => base_utility * (1.0 + w * share_same),
        PolicyKind::SpreadPreferred => base_utility * (1.0 + w * (1.0 - share_same)),
    }
}

impl UtilityModifier for EmbeddingPolicy {
    fn modify(
        &self,
        _orchestrator: OrchId,
        others: &[(FuncId, NodeId)],
        candidate: (FuncId, NodeId),
        base: f64,
    ) -> f64 {
        policy_modifier(self, others, candidate, base)
    }
}

/// One service of the bundle realised by a function on a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub service: ServiceId,
    pub function: FuncId,
    pub node: NodeId,
}

/// An assignment vector `x_i`, kept as placements sorted by service.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Assignment {
    pub placements: Vec<Placement>,
}

impl Assignment {
    pub fn new(mut placements: Vec<Placement>) -> Self {
        placements.sort();
        Self { placements }
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn pairs(&self) -> Vec<(FuncId, NodeId)> {
        self.placements.iter().map(|p| (p.function, p.node)).collect()
    }

    /// Nodes touched by the assignment, ascending.
    pub fn nodes(&self) -> BTreeSet<NodeId> {
        self.placements.iter().map(|p| p.node).collect()
    }

    /// Resource demand on node `n`.
    pub fn demand_on(&self, inst: &ProblemInstance, n: NodeId) -> Vec<Amount> {
        let mut demand = vec![0; inst.n_resources];
        for p in self.placements.iter().filter(|p| p.node == n) {
            for (d, &c) in demand.iter_mut().zip(&inst.cost[p.function]) {
                *d += c;
            }
        }
        demand
    }
}

/// What the agent knows locally when building its next assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingContext {
    /// residual[n][k], never above the true capacity.
    pub residual: Vec<Vec<Amount>>,
    pub excluded_pairs: BTreeSet<(FuncId, NodeId)>,
    pub excluded_nodes: BTreeSet<NodeId>,
    /// Lowest density cap per node, shared with the agent's loss memory.
    pub lost_caps: Vec<Option<f64>>,
    /// Assignments already tried; never returned again.
    pub attempted: BTreeSet<Assignment>,
}

impl EmbeddingContext {
    /// Context with the full capacities and nothing excluded.
    pub fn unconstrained(inst: &ProblemInstance) -> Self {
        Self {
            residual: inst.capacity.clone(),
            excluded_pairs: BTreeSet::new(),
            excluded_nodes: BTreeSet::new(),
            lost_caps: vec![None; inst.n_nodes],
            attempted: BTreeSet::new(),
        }
    }
}

/// A private routine producing the next assignment vector, or `None` when no
/// complete embedding is left under the context.
pub trait EmbeddingRoutine: Send + Sync {
    fn embed(
        &self,
        orchestrator: OrchId,
        bundle: &[ServiceId],
        inst: &ProblemInstance,
        ctx: &EmbeddingContext,
        policy: &EmbeddingPolicy,
    ) -> Option<Assignment>;
}

/// Greedy builder: services in decreasing best-utility order, each given the
/// admissible `(function, node)` of highest policy-modified marginal utility.
/// When the greedy choice dead-ends the search backtracks to the next-best
/// choices, so `None` means no admissible complete embedding was found.
#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyEmbedder;

/// Which nodes the next placement may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NodeRule {
    Any,
    Only(NodeId),
    /// Only nodes the partial assignment does not use yet.
    Fresh,
}

struct EmbedSearch<'a> {
    orchestrator: OrchId,
    rule: NodeRule,
    order: &'a [ServiceId],
    inst: &'a ProblemInstance,
    ctx: &'a EmbeddingContext,
    policy: &'a EmbeddingPolicy,
    visited: usize,
}

impl EmbedSearch<'_> {
    fn candidates(
        &self,
        service: ServiceId,
        placed: &[Placement],
        residual: &[Vec<Amount>],
    ) -> Vec<(f64, FuncId, NodeId)> {
        let so_far: Vec<(FuncId, NodeId)> = placed.iter().map(|p| (p.function, p.node)).collect();
        let mut out = Vec::new();
        for j in self.inst.implementers(service) {
            if placed.iter().any(|p| p.function == j) {
                continue;
            }
            for n in 0..self.inst.n_nodes {
                if self.ctx.excluded_nodes.contains(&n) || self.ctx.excluded_pairs.contains(&(j, n)) {
                    continue;
                }
                let allowed = match self.rule {
                    NodeRule::Any => true,
                    NodeRule::Only(only) => n == only,
                    NodeRule::Fresh => placed.iter().all(|p| p.node != n),
                };
                if !allowed {
                    continue;
                }
                let fits = self.inst.cost[j]
                    .iter()
                    .zip(&residual[n])
                    .all(|(&c, &r)| c <= r);
                if !fits {
                    continue;
                }
                let base = self.inst.base_utility[self.orchestrator][j][n];
                out.push((policy_modifier(self.policy, &so_far, (j, n), base), j, n));
            }
        }
        // highest utility first; ties to the lower node, then lower function
        out.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.2.cmp(&b.2))
                .then(a.1.cmp(&b.1))
        });
        out
    }

    fn dfs(&mut self, depth: usize, placed: &mut Vec<Placement>, residual: &mut Vec<Vec<Amount>>) -> Option<Assignment> {
        self.visited += 1;
        if self.visited > EMBED_SEARCH_LIMIT {
            return None;
        }
        if depth == self.order.len() {
            let assignment = Assignment::new(placed.clone());
            return (!self.ctx.attempted.contains(&assignment)).then_some(assignment);
        }
        let service = self.order[depth];
        for (_, j, n) in self.candidates(service, placed, residual) {
            for (r, &c) in residual[n].iter_mut().zip(&self.inst.cost[j]) {
                *r -= c;
            }
            placed.push(Placement {
                service,
                function: j,
                node: n,
            });
            let found = self.dfs(depth + 1, placed, residual);
            placed.pop();
            for (r, &c) in residual[n].iter_mut().zip(&self.inst.cost[j]) {
                *r += c;
            }
            if found.is_some() {
                return found;
            }
            if self.visited > EMBED_SEARCH_LIMIT {
                return None;
            }
        }
        None
    }
}

impl EmbeddingRoutine for GreedyEmbedder {
    fn embed(
        &self,
        orchestrator: OrchId,
        bundle: &[ServiceId],
        inst: &ProblemInstance,
        ctx: &EmbeddingContext,
        policy: &EmbeddingPolicy,
    ) -> Option<Assignment> {
        if bundle.is_empty() {
            return None;
        }
        let best_utility = |m: ServiceId| -> Option<f64> {
            inst.implementers(m)
                .into_iter()
                .flat_map(|j| (0..inst.n_nodes).map(move |n| inst.base_utility[orchestrator][j][n]))
                .fold(None, |acc: Option<f64>, u| Some(acc.map_or(u, |a| a.max(u))))
        };
        let mut order: Vec<(f64, ServiceId)> = Vec::with_capacity(bundle.len());
        for &m in bundle {
            order.push((best_utility(m)?, m));
        }
        order.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let order: Vec<ServiceId> = order.into_iter().map(|(_, m)| m).collect();
        let run = |rule: NodeRule| {
            let mut search = EmbedSearch {
                orchestrator,
                rule,
                order: &order,
                inst,
                ctx,
                policy,
                visited: 0,
            };
            search.dfs(0, &mut Vec::new(), &mut ctx.residual.clone())
        };
        match policy.kind {
            PolicyKind::Neutral => run(NodeRule::Any),
            PolicyKind::SingleNodePreferred => {
                let mut best: Option<(f64, Assignment)> = None;
                for n in (0..inst.n_nodes).filter(|n| !ctx.excluded_nodes.contains(n)) {
                    if let Some(x) = run(NodeRule::Only(n)) {
                        let u = assignment_utility(inst, orchestrator, &x.pairs(), policy);
                        if best.as_ref().is_none_or(|(b, _)| u > *b + UTILITY_TOLERANCE) {
                            best = Some((u, x));
                        }
                    }
                }
                best.map(|(_, x)| x).or_else(|| run(NodeRule::Any))
            }
            PolicyKind::SpreadPreferred => run(NodeRule::Fresh).or_else(|| run(NodeRule::Any)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node_instance() -> ProblemInstance {
        // s0 <- f0, f1 ; s1 <- f2
        ProblemInstance {
            n_orchestrators: 1,
            n_services: 2,
            n_functions: 3,
            n_nodes: 2,
            n_resources: 1,
            cost: vec![vec![2], vec![2], vec![2]],
            capacity: vec![vec![10], vec![10]],
            implements: vec![vec![true, true, false], vec![false, false, true]],
            bundle: vec![vec![true, false]],
            base_utility: vec![vec![vec![7.0, 1.0], vec![2.0, 3.0], vec![4.0, 4.0]]],
        }
    }

    #[test]
    fn modifier_examples() {
        let neutral = EmbeddingPolicy::neutral();
        assert_eq!(policy_modifier(&neutral, &[(0, 0), (1, 1)], (2, 0), 8.0), 8.0);
        let single = EmbeddingPolicy::new(PolicyKind::SingleNodePreferred);
        assert_eq!(policy_modifier(&single, &[], (2, 0), 8.0), 8.0);
        assert_eq!(policy_modifier(&single, &[(0, 0), (1, 0)], (2, 0), 8.0), 12.0);
        let spread = EmbeddingPolicy::new(PolicyKind::SpreadPreferred);
        assert_eq!(policy_modifier(&spread, &[(0, 0), (1, 0)], (2, 1), 8.0), 12.0);
        assert_eq!(policy_modifier(&spread, &[(0, 0), (1, 0)], (2, 0), 8.0), 8.0);
    }

    #[test]
    fn single_service_forced_choice() {
        let inst = two_node_instance();
        let ctx = EmbeddingContext::unconstrained(&inst);
        let x = GreedyEmbedder
            .embed(0, &[1], &inst, &ctx, &EmbeddingPolicy::neutral())
            .unwrap();
        // f2 has equal utility on both nodes: lower node wins the tie
        assert_eq!(
            x.placements,
            vec![Placement {
                service: 1,
                function: 2,
                node: 0
            }]
        );
    }

    #[test]
    fn argmax_choice() {
        let inst = two_node_instance();
        let ctx = EmbeddingContext::unconstrained(&inst);
        let x = GreedyEmbedder
            .embed(0, &[0], &inst, &ctx, &EmbeddingPolicy::neutral())
            .unwrap();
        assert_eq!(x.pairs(), vec![(0, 0)]);
    }

    #[test]
    fn single_node_policy_colocates() {
        // two services with equal utilities everywhere
        let inst = ProblemInstance {
            n_orchestrators: 1,
            n_services: 2,
            n_functions: 2,
            n_nodes: 2,
            n_resources: 1,
            cost: vec![vec![1], vec![1]],
            capacity: vec![vec![10], vec![10]],
            implements: vec![vec![true, false], vec![false, true]],
            bundle: vec![vec![true, true]],
            base_utility: vec![vec![vec![5.0, 5.0], vec![5.0, 5.0]]],
        };
        let ctx = EmbeddingContext::unconstrained(&inst);
        let single = GreedyEmbedder
            .embed(0, &[0, 1], &inst, &ctx, &EmbeddingPolicy::new(PolicyKind::SingleNodePreferred))
            .unwrap();
        assert_eq!(single.nodes().len(), 1);
        let spread = GreedyEmbedder
            .embed(0, &[0, 1], &inst, &ctx, &EmbeddingPolicy::new(PolicyKind::SpreadPreferred))
            .unwrap();
        assert_eq!(spread.nodes().len(), 2);
    }

    #[test]
    fn respects_exclusions_and_residuals() {
        let inst = two_node_instance();
        let mut ctx = EmbeddingContext::unconstrained(&inst);
        ctx.excluded_pairs.insert((0, 0));
        let x = GreedyEmbedder
            .embed(0, &[0], &inst, &ctx, &EmbeddingPolicy::neutral())
            .unwrap();
        assert_eq!(x.pairs(), vec![(1, 1)]);
        ctx.excluded_nodes.insert(1);
        let x = GreedyEmbedder
            .embed(0, &[0], &inst, &ctx, &EmbeddingPolicy::neutral())
            .unwrap();
        assert_eq!(x.pairs(), vec![(1, 0)]);
        ctx.residual[0][0] = 1;
        assert!(GreedyEmbedder
            .embed(0, &[0], &inst, &ctx, &EmbeddingPolicy::neutral())
            .is_none());
    }

    #[test]
    fn never_repeats_an_attempt() {
        let inst = two_node_instance();
        let mut ctx = EmbeddingContext::unconstrained(&inst);
        let mut seen = BTreeSet::new();
        while let Some(x) = GreedyEmbedder.embed(0, &[0], &inst, &ctx, &EmbeddingPolicy::neutral()) {
            assert!(seen.insert(x.clone()));
            ctx.attempted.insert(x);
        }
        // s0 has two implementers on two nodes
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn unimplementable_service_is_exhausted() {
        let mut inst = two_node_instance();
        inst.implements[1] = vec![false; 3];
        let ctx = EmbeddingContext::unconstrained(&inst);
        assert!(GreedyEmbedder
            .embed(0, &[1], &inst, &ctx, &EmbeddingPolicy::neutral())
            .is_none());
    }

    #[test]
    fn backtracks_when_greedy_dead_ends() {
        // s0 best on f0, but f0 is also the only implementer of s1
        let inst = ProblemInstance {
            n_orchestrators: 1,
            n_services: 2,
            n_functions: 2,
            n_nodes: 1,
            n_resources: 1,
            cost: vec![vec![1], vec![1]],
            capacity: vec![vec![10]],
            implements: vec![vec![true, true], vec![true, false]],
            bundle: vec![vec![true, true]],
            base_utility: vec![vec![vec![9.0], vec![1.0]]],
        };
        let ctx = EmbeddingContext::unconstrained(&inst);
        let x = GreedyEmbedder
            .embed(0, &[0, 1], &inst, &ctx, &EmbeddingPolicy::neutral())
            .unwrap();
        assert_eq!(
            x.placements,
            vec![
                Placement {
                    service: 0,
                    function: 1,
                    node: 0
                },
                Placement {
                    service: 1,
                    function: 0,
                    node: 0
                }
            ]
        );
    }
}

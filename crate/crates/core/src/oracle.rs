//! Exact reference solvers.
//!
//! [`solve_exact`] solves the centralized assignment program by depth-first
//! branch and bound over per-orchestrator bundle embeddings. It is exponential
//! and meant for desk-scale instances only. [`max_weight_winner_set`] is the
//! exhaustive single-node knapsack used to bound the election.

use std::cmp::Ordering;

use crate::model::{Allocation, Amount, FuncId, NodeId, OrchId, ProblemInstance, UTILITY_TOLERANCE};

/// Default node-exploration budget for [`solve_exact`].
pub const DEFAULT_BUDGET: u64 = 20_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best_allocation: Allocation,
    pub best_value: f64,
    pub nodes_explored: u64,
    /// False when the budget ran out; the allocation is then only best-so-far.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinnerSetOracleResult {
    pub winners: Vec<OrchId>,
    pub value: f64,
}

/// One complete embedding of an orchestrator's bundle.
#[derive(Debug, Clone)]
struct BundleOption {
    placements: Vec<(FuncId, NodeId)>,
    utility: f64,
    /// demand[n][k]
    demand: Vec<Vec<Amount>>,
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for x in start..n {
            if n - x < k - cur.len() {
                break;
            }
            cur.push(x);
            rec(x + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Every placement satisfying the bundle constraints for orchestrator `i`
/// that fits the empty infrastructure, sorted by decreasing utility.
fn bundle_options(inst: &ProblemInstance, i: OrchId) -> Vec<BundleOption> {
    let services = inst.bundle_services(i);
    let k = services.len();
    let mut options = Vec::new();
    if k == 0 || k > inst.n_functions {
        return options;
    }
    for funcs in combinations(inst.n_functions, k) {
        let covers = services
            .iter()
            .all(|&m| funcs.iter().any(|&j| inst.implements[m][j]));
        if !covers {
            continue;
        }
        // every node assignment of the chosen functions
        let mut nodes = vec![0usize; k];
        loop {
            let mut demand = vec![vec![0; inst.n_resources]; inst.n_nodes];
            for (&j, &n) in funcs.iter().zip(&nodes) {
                for (d, &c) in demand[n].iter_mut().zip(&inst.cost[j]) {
                    *d += c;
                }
            }
            let fits = demand
                .iter()
                .zip(&inst.capacity)
                .all(|(d, cap)| d.iter().zip(cap).all(|(a, b)| a <= b));
            if fits {
                let placements: Vec<_> = funcs.iter().copied().zip(nodes.iter().copied()).collect();
                let utility = placements
                    .iter()
                    .map(|&(j, n)| inst.base_utility[i][j][n])
                    .sum();
                options.push(BundleOption {
                    placements,
                    utility,
                    demand,
                });
            }
            // odometer increment
            let mut pos = 0;
            loop {
                if pos == k {
                    break;
                }
                nodes[pos] += 1;
                if nodes[pos] < inst.n_nodes {
                    break;
                }
                nodes[pos] = 0;
                pos += 1;
            }
            if pos == k {
                break;
            }
        }
    }
    options.sort_by(|a, b| b.utility.partial_cmp(&a.utility).unwrap_or(Ordering::Equal));
    options
}

struct Search<'a> {
    options: &'a [Vec<BundleOption>],
    suffix_best: Vec<f64>,
    budget: u64,
    explored: u64,
    exhausted: bool,
    best_value: f64,
    best_choice: Vec<Option<usize>>,
    choice: Vec<Option<usize>>,
}

impl Search<'_> {
    fn dfs(&mut self, i: usize, residual: &mut Vec<Vec<Amount>>, value: f64) {
        if self.exhausted {
            return;
        }
        self.explored += 1;
        if self.explored > self.budget {
            self.exhausted = true;
            return;
        }
        if i == self.options.len() {
            if value > self.best_value + UTILITY_TOLERANCE {
                self.best_value = value;
                self.best_choice = self.choice.clone();
            }
            return;
        }
        if value + self.suffix_best[i] <= self.best_value + UTILITY_TOLERANCE {
            return;
        }
        let options = self.options;
        for (idx, opt) in options[i].iter().enumerate() {
            if value + opt.utility + self.suffix_best[i + 1] <= self.best_value + UTILITY_TOLERANCE {
                break;
            }
            let fits = opt
                .demand
                .iter()
                .zip(residual.iter())
                .all(|(d, r)| d.iter().zip(r).all(|(a, b)| a <= b));
            if !fits {
                continue;
            }
            for (r, d) in residual.iter_mut().zip(&opt.demand) {
                for (a, b) in r.iter_mut().zip(d) {
                    *a -= b;
                }
            }
            self.choice[i] = Some(idx);
            self.dfs(i + 1, residual, value + opt.utility);
            self.choice[i] = None;
            for (r, d) in residual.iter_mut().zip(&opt.demand) {
                for (a, b) in r.iter_mut().zip(d) {
                    *a += b;
                }
            }
            if self.exhausted {
                return;
            }
        }
        self.dfs(i + 1, residual, value);
    }
}

/// Exact optimum of the assignment program under the neutral utility.
///
/// When `budget` search nodes are exhausted the best allocation found so far
/// is returned with `complete == false`.
pub fn solve_exact(inst: &ProblemInstance, budget: u64) -> OracleResult {
    let options: Vec<Vec<BundleOption>> = (0..inst.n_orchestrators)
        .map(|i| bundle_options(inst, i))
        .collect();
    let mut suffix_best = vec![0.0; inst.n_orchestrators + 1];
    for i in (0..inst.n_orchestrators).rev() {
        let best = options[i].first().map_or(0.0, |o| o.utility.max(0.0));
        suffix_best[i] = suffix_best[i + 1] + best;
    }
    let mut search = Search {
        options: &options,
        suffix_best,
        budget,
        explored: 0,
        exhausted: false,
        best_value: 0.0,
        best_choice: vec![None; inst.n_orchestrators],
        choice: vec![None; inst.n_orchestrators],
    };
    let mut residual = inst.capacity.clone();
    search.dfs(0, &mut residual, 0.0);

    let mut alloc = Allocation::empty(inst);
    for (i, choice) in search.best_choice.iter().enumerate() {
        if let Some(idx) = choice {
            for &(j, n) in &options[i][*idx].placements {
                alloc.assign(i, j, n);
            }
        }
    }
    OracleResult {
        best_allocation: alloc,
        best_value: search.best_value,
        nodes_explored: search.explored,
        complete: !search.exhausted,
    }
}

/// Maximum-vote capacity-feasible subset of the candidates, by exhaustive
/// enumeration. Orchestrators with a zero vote are not candidates. Ties go to
/// the lexicographically smallest id set.
pub fn max_weight_winner_set(
    votes: &[f64],
    demands: &[Vec<Amount>],
    capacity: &[Amount],
) -> WinnerSetOracleResult {
    let candidates: Vec<OrchId> = (0..votes.len())
        .filter(|&i| votes[i] > UTILITY_TOLERANCE)
        .collect();
    assert!(candidates.len() <= 24, "winner-set oracle is exhaustive; too many candidates");
    let mut best = WinnerSetOracleResult {
        winners: Vec::new(),
        value: 0.0,
    };
    for mask in 1u32..(1u32 << candidates.len()) {
        let members: Vec<OrchId> = candidates
            .iter()
            .enumerate()
            .filter(|&(b, _)| mask & (1 << b) != 0)
            .map(|(_, &i)| i)
            .collect();
        let fits = (0..capacity.len()).all(|k| {
            members.iter().map(|&i| demands[i][k]).sum::<Amount>() <= capacity[k]
        });
        if !fits {
            continue;
        }
        let value: f64 = members.iter().map(|&i| votes[i]).sum();
        let better = value > best.value + UTILITY_TOLERANCE
            || ((value - best.value).abs() <= UTILITY_TOLERANCE && members < best.winners);
        if better {
            best = WinnerSetOracleResult {
                winners: members,
                value,
            };
        }
    }
    best
}

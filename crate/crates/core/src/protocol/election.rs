//! Per-node elections, false-winner recount and the agreement check.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Amount, NodeId, OrchId, UTILITY_TOLERANCE};

use super::score::{density, normalized_demand};
use super::{ElectionOutcome, VoteState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElectionMode {
    Greedy,
    PartialEnumeration { depth: usize },
}

impl Default for ElectionMode {
    fn default() -> Self {
        ElectionMode::PartialEnumeration { depth: 3 }
    }
}

impl fmt::Display for ElectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElectionMode::Greedy => write!(f, "greedy"),
            ElectionMode::PartialEnumeration { depth } => write!(f, "pe{depth}"),
        }
    }
}

impl ElectionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "greedy" => Some(ElectionMode::Greedy),
            "pe" | "partial-enumeration" => Some(ElectionMode::default()),
            _ => s
                .strip_prefix("pe")
                .and_then(|d| d.parse().ok())
                .map(|depth| ElectionMode::PartialEnumeration { depth }),
        }
    }
}

/// Votes and demands of every orchestrator on a single node.
#[derive(Debug, Clone, Copy)]
pub struct NodeBallot<'a> {
    pub votes: &'a [f64],
    pub demands: &'a [Vec<Amount>],
    pub capacity: &'a [Amount],
}

struct Candidate {
    id: OrchId,
    vote: f64,
    density: f64,
}

fn fits(residual: &[Amount], demand: &[Amount]) -> bool {
    residual.iter().zip(demand).all(|(&c, &r)| r <= c)
}

fn take(residual: &mut [Amount], demand: &[Amount]) {
    for (c, &r) in residual.iter_mut().zip(demand) {
        *c -= r;
    }
}

fn candidates(ballot: &NodeBallot) -> Vec<Candidate> {
    ballot
        .votes
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > UTILITY_TOLERANCE)
        .filter(|&(i, _)| fits(ballot.capacity, &ballot.demands[i]))
        .filter_map(|(i, &v)| {
            let norm = normalized_demand(&ballot.demands[i], ballot.capacity).ok()?;
            Some(Candidate {
                id: i,
                vote: v,
                density: density(v, norm),
            })
        })
        .collect()
}

/// Greedy fill by density from `residual`, considering only `pool` (indices
/// into `cands`). Ties within tolerance go to the smaller id.
fn greedy_fill(
    ballot: &NodeBallot,
    cands: &[Candidate],
    pool: &[usize],
    residual: &mut [Amount],
    chosen: &mut Vec<usize>,
) {
    let mut left: Vec<usize> = pool.to_vec();
    loop {
        left.retain(|&c| fits(residual, &ballot.demands[cands[c].id]));
        let mut best: Option<usize> = None;
        for (pos, &c) in left.iter().enumerate() {
            let better = match best {
                None => true,
                Some(b) => {
                    let (db, dc) = (cands[left[b]].density, cands[c].density);
                    let tie = db == dc || (db - dc).abs() <= UTILITY_TOLERANCE;
                    !tie && dc > db
                }
            };
            if better {
                best = Some(pos);
            }
        }
        let Some(pos) = best else { break };
        let c = left.remove(pos);
        take(residual, &ballot.demands[cands[c].id]);
        chosen.push(c);
    }
}

fn set_value(cands: &[Candidate], set: &[usize]) -> f64 {
    set.iter().map(|&c| cands[c].vote).sum()
}

fn ids(cands: &[Candidate], set: &[usize]) -> Vec<OrchId> {
    let mut v: Vec<OrchId> = set.iter().map(|&c| cands[c].id).collect();
    v.sort_unstable();
    v
}

fn subsets_upto(n: usize, max: usize, out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, from: usize) {
    out.push(cur.clone());
    if cur.len() == max {
        return;
    }
    for i in from..n {
        cur.push(i);
        subsets_upto(n, max, out, cur, i + 1);
        cur.pop();
    }
}

/// Winner set `W_n` of one node, sorted by id.
pub fn elect(ballot: &NodeBallot, mode: ElectionMode) -> Vec<OrchId> {
    let cands = candidates(ballot);
    // candidates() already orders by id, so the greedy scan breaks ties correctly
    let all: Vec<usize> = (0..cands.len()).collect();
    match mode {
        ElectionMode::Greedy => {
            let mut residual = ballot.capacity.to_vec();
            let mut chosen = Vec::new();
            greedy_fill(ballot, &cands, &all, &mut residual, &mut chosen);
            ids(&cands, &chosen)
        }
        ElectionMode::PartialEnumeration { depth } => {
            let mut sets = Vec::new();
            subsets_upto(cands.len(), depth, &mut sets, &mut Vec::new(), 0);
            let mut best: Option<(f64, Vec<OrchId>)> = None;
            for seed in sets {
                let mut residual = ballot.capacity.to_vec();
                let mut feasible = true;
                for &c in &seed {
                    let d = &ballot.demands[cands[c].id];
                    if !fits(&residual, d) {
                        feasible = false;
                        break;
                    }
                    take(&mut residual, d);
                }
                if !feasible {
                    continue;
                }
                let mut chosen = seed.clone();
                if seed.len() == depth {
                    let pool: Vec<usize> = all.iter().copied().filter(|c| !seed.contains(c)).collect();
                    greedy_fill(ballot, &cands, &pool, &mut residual, &mut chosen);
                }
                let value = set_value(&cands, &chosen);
                let members = ids(&cands, &chosen);
                let better = match &best {
                    None => true,
                    Some((bv, bm)) => {
                        value > bv + UTILITY_TOLERANCE
                            || ((value - bv).abs() <= UTILITY_TOLERANCE && members < *bm)
                    }
                };
                if better {
                    best = Some((value, members));
                }
            }
            best.map(|(_, m)| m).unwrap_or_default()
        }
    }
}

/// Zeroes the votes of everyone outside `winners`.
pub fn reset_non_winners(votes: &mut [f64], winners: &BTreeSet<OrchId>) {
    for (i, v) in votes.iter_mut().enumerate() {
        if !winners.contains(&i) {
            *v = 0.0;
        }
    }
}

fn lost_nodes(outcome: &ElectionOutcome, votes: &[Vec<f64>], who: OrchId) -> Vec<NodeId> {
    votes[who]
        .iter()
        .enumerate()
        .filter(|&(n, &v)| v > UTILITY_TOLERANCE && !outcome.winners_per_node[n].contains(&who))
        .map(|(n, _)| n)
        .collect()
}

/// False winners: orchestrators elected somewhere but beaten on a node they
/// need, unless capacity held by other false winners would cover them there.
pub fn recount(
    outcome: &ElectionOutcome,
    votes: &[Vec<f64>],
    demands: &[Vec<Vec<Amount>>],
    capacities: &[Vec<Amount>],
) -> BTreeSet<OrchId> {
    let residual: Vec<Vec<Amount>> = capacities
        .iter()
        .enumerate()
        .map(|(n, cap)| {
            let mut res = cap.clone();
            for &w in &outcome.winners_per_node[n] {
                take(&mut res, &demands[w][n]);
            }
            res
        })
        .collect();
    let mut f: BTreeSet<OrchId> = outcome
        .overall_winners
        .iter()
        .copied()
        .filter(|&w| !lost_nodes(outcome, votes, w).is_empty())
        .collect();
    loop {
        let removable: Vec<OrchId> = f
            .iter()
            .copied()
            .filter(|&w| {
                lost_nodes(outcome, votes, w).into_iter().all(|n| {
                    let mut pool = residual[n].clone();
                    for &o in f.iter().filter(|o| outcome.winners_per_node[n].contains(o)) {
                        for (p, &r) in pool.iter_mut().zip(&demands[o][n]) {
                            *p += r;
                        }
                    }
                    fits(&pool, &demands[w][n])
                })
            })
            .collect();
        if removable.is_empty() {
            return f;
        }
        for w in removable {
            f.remove(&w);
        }
    }
}

/// Elections on every node, repeated with false winners withdrawn until the
/// recount is clean. Works on a copy; `state` is untouched.
pub fn run_election(
    state: &VoteState,
    capacities: &[Vec<Amount>],
    mode: ElectionMode,
) -> ElectionOutcome {
    let n_o = state.n_orchestrators();
    let n_v = capacities.len();
    let mut votes = state.v.clone();
    let mut false_winners = BTreeMap::new();
    loop {
        let winners: Vec<BTreeSet<OrchId>> = (0..n_v)
            .map(|n| {
                let column: Vec<f64> = (0..n_o).map(|i| votes[i][n]).collect();
                let demands: Vec<Vec<Amount>> = (0..n_o).map(|i| state.r[i][n].clone()).collect();
                let ballot = NodeBallot {
                    votes: &column,
                    demands: &demands,
                    capacity: &capacities[n],
                };
                elect(&ballot, mode).into_iter().collect()
            })
            .collect();
        let mut outcome = ElectionOutcome::from_winners(winners);
        let f = recount(&outcome, &votes, &state.r, capacities);
        if f.is_empty() {
            outcome.false_winners = false_winners;
            return outcome;
        }
        for w in f {
            false_winners.insert(w, lost_nodes(&outcome, &votes, w));
            votes[w].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConsensusViolation {
    WinnersDiffer { node: NodeId, a: OrchId, b: OrchId },
    LoserHoldsVote { view: OrchId, orchestrator: OrchId, node: NodeId },
}

impl fmt::Display for ConsensusViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConsensusViolation::WinnersDiffer { node, a, b } => {
                write!(f, "views of {a} and {b} elect different winners on node {node}")
            }
            ConsensusViolation::LoserHoldsVote {
                view,
                orchestrator,
                node,
            } => write!(
                f,
                "view of {view}: orchestrator {orchestrator} holds a losing vote on node {node}"
            ),
        }
    }
}

/// Checks that all `views` elect the same winners on every node and that
/// only winners hold nonzero votes. Votes of orchestrators without a view
/// (crashed ones) are left as they were last gossiped and not checked.
pub fn election_consensus(
    views: &[(OrchId, &VoteState)],
    capacities: &[Vec<Amount>],
    mode: ElectionMode,
) -> Result<(), ConsensusViolation> {
    let live: BTreeSet<OrchId> = views.iter().map(|&(id, _)| id).collect();
    let mut reference: Option<(OrchId, ElectionOutcome)> = None;
    for &(id, state) in views {
        let outcome = run_election(state, capacities, mode);
        for (i, row) in state.v.iter().enumerate().filter(|(i, _)| live.contains(i)) {
            for (n, &v) in row.iter().enumerate() {
                if v > UTILITY_TOLERANCE && !outcome.winners_per_node[n].contains(&i) {
                    return Err(ConsensusViolation::LoserHoldsVote {
                        view: id,
                        orchestrator: i,
                        node: n,
                    });
                }
            }
        }
        match &reference {
            None => reference = Some((id, outcome)),
            Some((rid, r)) => {
                for n in 0..capacities.len() {
                    if r.winners_per_node[n] != outcome.winners_per_node[n] {
                        return Err(ConsensusViolation::WinnersDiffer {
                            node: n,
                            a: *rid,
                            b: id,
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ballot<'a>(votes: &'a [f64], demands: &'a [Vec<Amount>], cap: &'a [Amount]) -> NodeBallot<'a> {
        NodeBallot {
            votes,
            demands,
            capacity: cap,
        }
    }

    #[test]
    fn empty_election() {
        let d = vec![vec![1], vec![2]];
        let b = ballot(&[0.0, 0.0], &d, &[10]);
        assert!(elect(&b, ElectionMode::Greedy).is_empty());
        assert!(elect(&b, ElectionMode::default()).is_empty());
    }

    #[test]
    fn t1_greedy() {
        let d = vec![vec![4], vec![5], vec![3]];
        let b = ballot(&[8.0, 5.0, 3.0], &d, &[10]);
        assert_eq!(elect(&b, ElectionMode::Greedy), vec![0, 1]);
        assert_eq!(elect(&b, ElectionMode::default()), vec![0, 1]);
        let mut v = vec![8.0, 5.0, 3.0];
        reset_non_winners(&mut v, &[0, 1].into_iter().collect());
        assert_eq!(v, vec![8.0, 5.0, 0.0]);
    }

    #[test]
    fn knapsack_gap() {
        let d = vec![vec![10], vec![9]];
        let b = ballot(&[10.0, 9.0], &d, &[10]);
        assert_eq!(elect(&b, ElectionMode::Greedy), vec![0]);
        // densities 10, 18, 18: greedy already finds the pair
        let d = vec![vec![10], vec![5], vec![5]];
        let b = ballot(&[10.0, 9.0, 9.0], &d, &[10]);
        assert_eq!(elect(&b, ElectionMode::Greedy), vec![1, 2]);
        assert_eq!(elect(&b, ElectionMode::default()), vec![1, 2]);
        // a small dense item blocks the valuable one
        let d = vec![vec![1], vec![10]];
        let b = ballot(&[1.1, 10.0], &d, &[10]);
        assert_eq!(elect(&b, ElectionMode::Greedy), vec![0]);
        assert_eq!(elect(&b, ElectionMode::default()), vec![1]);
    }

    #[test]
    fn oversized_demand_is_not_a_candidate() {
        let d = vec![vec![11], vec![2]];
        let b = ballot(&[100.0, 1.0], &d, &[10]);
        assert_eq!(elect(&b, ElectionMode::Greedy), vec![1]);
    }

    fn state(votes: &[[f64; 2]], demands: &[[Amount; 2]]) -> VoteState {
        let mut s = VoteState::new(votes.len(), 2, 1);
        for (i, row) in votes.iter().enumerate() {
            for n in 0..2 {
                s.v[i][n] = row[n];
                s.r[i][n] = vec![demands[i][n]];
            }
        }
        s
    }

    #[test]
    fn recount_clean() {
        let s = state(&[[5.0, 5.0], [0.0, 4.0]], &[[3, 3], [0, 3]]);
        let caps = vec![vec![10], vec![10]];
        let out = run_election(&s, &caps, ElectionMode::Greedy);
        assert!(recount(&out, &s.v, &s.r, &caps).is_empty());
        assert!(out.false_winners.is_empty());
    }

    #[test]
    fn recount_definitive_loss() {
        // A (0) wins n0, loses n1 to B (1) who fills n1
        let s = state(&[[5.0, 2.0], [0.0, 9.0]], &[[3, 6], [0, 10]]);
        let caps = vec![vec![10], vec![10]];
        let winners = vec![[0].into_iter().collect(), [1].into_iter().collect()];
        let out = ElectionOutcome::from_winners(winners);
        assert_eq!(recount(&out, &s.v, &s.r, &caps), [0].into_iter().collect());
        let out = run_election(&s, &caps, ElectionMode::Greedy);
        assert_eq!(out.winners_per_node[0], BTreeSet::new());
        assert_eq!(out.false_winners.get(&0), Some(&vec![1]));
    }

    #[test]
    fn recount_cycle_is_cleared() {
        // A wins n0, loses n1 to B; B wins n1, loses n0 to A
        let s = state(&[[9.0, 1.0], [1.0, 9.0]], &[[6, 6], [6, 6]]);
        let caps = vec![vec![10], vec![10]];
        let winners = vec![[0].into_iter().collect(), [1].into_iter().collect()];
        let out = ElectionOutcome::from_winners(winners);
        assert!(recount(&out, &s.v, &s.r, &caps).is_empty());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(ElectionMode::parse("greedy"), Some(ElectionMode::Greedy));
        assert_eq!(ElectionMode::parse("pe"), Some(ElectionMode::default()));
        assert_eq!(
            ElectionMode::parse("pe2"),
            Some(ElectionMode::PartialEnumeration { depth: 2 })
        );
        assert_eq!(ElectionMode::parse("x"), None);
        assert_eq!(ElectionMode::default().to_string(), "pe3");
    }
}

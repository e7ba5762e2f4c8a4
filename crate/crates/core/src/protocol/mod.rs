//! The DORA orchestrator state machine.
//!
//! Each orchestrator keeps a local [`VoteState`] (votes, demanded resources
//! and vote timestamps for every orchestrator on every node), votes for the
//! resources its private embedding needs, elects winners greedily per node,
//! removes false winners by recount, and merges peer views by latest
//! timestamp.

mod agent;
mod agreement;
mod election;
mod score;

pub use agent::{CapAudit, NodeMemory, OrchestratorAgent, ProtocolConfig};
pub use agreement::{agree, merge_state};
pub use election::{
    elect, election_consensus, recount, reset_non_winners, run_election, ConsensusViolation,
    ElectionMode, NodeBallot,
};
pub use score::{density, normalized_demand, score, z_n, Score, ScoreProfile, WinnerRef};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Amount, NodeId, OrchId, ResourceId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("demand of {amount} on resource {resource} which has zero capacity")]
    ZeroCapacityDemand { resource: ResourceId, amount: Amount },
}

/// Logical time of a vote entry, ordered lexicographically by
/// `(counter, owner)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    pub counter: u64,
    pub owner: OrchId,
}

impl Timestamp {
    /// Stamp of an entry that was never voted.
    pub fn initial(owner: OrchId) -> Self {
        Self { counter: 0, owner }
    }
}

/// One orchestrator's view of every vote: `v[ι][n]`, `r[ι][n][k]`, `t[ι][n]`.
///
/// Entries are only ever written by their owner (with a fresh timestamp) or
/// adopted from a peer carrying a newer stamp. Election resets are applied to
/// working copies, never to the gossiped view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteState {
    pub v: Vec<Vec<f64>>,
    pub r: Vec<Vec<Vec<Amount>>>,
    pub t: Vec<Vec<Timestamp>>,
}

impl VoteState {
    pub fn new(n_orchestrators: usize, n_nodes: usize, n_resources: usize) -> Self {
        Self {
            v: vec![vec![0.0; n_nodes]; n_orchestrators],
            r: vec![vec![vec![0; n_resources]; n_nodes]; n_orchestrators],
            t: (0..n_orchestrators)
                .map(|i| vec![Timestamp::initial(i); n_nodes])
                .collect(),
        }
    }

    pub fn n_orchestrators(&self) -> usize {
        self.v.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.v.first().map_or(0, Vec::len)
    }

    /// Whether some entry of `self` is strictly newer than the same entry of `other`.
    pub fn has_newer_than(&self, other: &VoteState) -> bool {
        self.t
            .iter()
            .zip(&other.t)
            .any(|(a, b)| a.iter().zip(b).any(|(x, y)| x > y))
    }

    /// Stable 64-bit digest (FNV-1a) of the full view, for traces.
    pub fn digest(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for (i, row) in self.v.iter().enumerate() {
            for (n, &v) in row.iter().enumerate() {
                eat(v.to_bits());
                for &a in &self.r[i][n] {
                    eat(a as u64);
                }
                eat(self.t[i][n].counter);
                eat(self.t[i][n].owner as u64);
            }
        }
        h
    }
}

/// Full snapshot of a sender's view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: OrchId,
    pub snapshot: VoteState,
}

/// Result of the per-node elections followed by recount.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ElectionOutcome {
    /// `W_n`, indexed by node.
    pub winners_per_node: Vec<BTreeSet<OrchId>>,
    /// `W*`, the union of all `W_n`.
    pub overall_winners: BTreeSet<OrchId>,
    /// False winners removed by recount, with the nodes they had lost.
    pub false_winners: BTreeMap<OrchId, Vec<NodeId>>,
}

impl ElectionOutcome {
    pub fn from_winners(winners_per_node: Vec<BTreeSet<OrchId>>) -> Self {
        let overall_winners = winners_per_node.iter().flatten().copied().collect();
        Self {
            winners_per_node,
            overall_winners,
            false_winners: BTreeMap::new(),
        }
    }
}

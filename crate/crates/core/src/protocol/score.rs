//! Capacity-normalized demand and the capped scoring function.

use crate::model::{Amount, OrchId, UTILITY_TOLERANCE};

use super::ProtocolError;

/// Relative gap kept below a standing winner that would otherwise win the
/// id tie-break against the voter.
const TIE_MARGIN: f64 = 1e-6;

/// `Σ_k r_k / ρ_k`. Zero demands are zero; a positive demand on a
/// zero-capacity dimension is rejected.
pub fn normalized_demand(demand: &[Amount], capacity: &[Amount]) -> Result<f64, ProtocolError> {
    let mut norm = 0.0;
    for (k, (&r, &cap)) in demand.iter().zip(capacity).enumerate() {
        if r == 0 {
            continue;
        }
        if cap <= 0 {
            return Err(ProtocolError::ZeroCapacityDemand {
                resource: k,
                amount: r,
            });
        }
        norm += r as f64 / cap as f64;
    }
    Ok(norm)
}

/// Vote per unit of normalized demand; a vote with zero demand is infinitely dense.
pub fn density(vote: f64, norm: f64) -> f64 {
    if norm <= 0.0 {
        f64::INFINITY
    } else {
        vote / norm
    }
}

/// A standing winner as seen by a voter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinnerRef {
    pub id: OrchId,
    pub vote: f64,
    pub norm: f64,
}

impl WinnerRef {
    pub fn density(&self) -> f64 {
        density(self.vote, self.norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub vote: f64,
    /// Lowest density the vote was capped against, `None` for an uncapped vote.
    pub cap_density: Option<f64>,
}

/// Capped vote of `voter` on one node.
///
/// A first vote on the node is the plain node utility. Later votes are
/// limited so their density never exceeds that of any standing winner nor the
/// remembered cap from earlier losses. Against a winner with a larger id the
/// limit sits a hair below its density, since ties go to the smaller id.
pub fn score(
    voter: OrchId,
    node_utility: f64,
    demand_norm: f64,
    voted_before: bool,
    lost_cap: Option<f64>,
    winners: &[WinnerRef],
) -> Score {
    let utility = node_utility.max(0.0);
    if !voted_before || demand_norm <= 0.0 {
        return Score {
            vote: utility,
            cap_density: None,
        };
    }
    let mut limit = lost_cap;
    let mut cap = lost_cap;
    for w in winners.iter().filter(|w| w.id != voter) {
        let d = w.density();
        if !d.is_finite() {
            continue;
        }
        let bound = if w.id > voter {
            (d - (TIE_MARGIN * d).max(10.0 * UTILITY_TOLERANCE)).max(0.0)
        } else {
            d
        };
        limit = Some(limit.map_or(bound, |l: f64| l.min(bound)));
        cap = Some(cap.map_or(d, |c: f64| c.min(d)));
    }
    match limit {
        None => Score {
            vote: utility,
            cap_density: None,
        },
        Some(limit) => Score {
            vote: utility.min(demand_norm * limit.max(0.0)),
            cap_density: cap,
        },
    }
}

/// Per-orchestrator inputs of the scoring function on one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreProfile {
    pub id: OrchId,
    pub utility: f64,
    pub demand_norm: f64,
    pub voted_before: bool,
    pub lost_cap: Option<f64>,
}

/// `z_n` for voters joining the winner set in `arrival` order: each member is
/// scored against the members that joined before it, so appending `ι` adds
/// exactly its score against the current set.
pub fn z_n(profiles: &[ScoreProfile], arrival: &[OrchId]) -> f64 {
    let mut members: Vec<WinnerRef> = Vec::with_capacity(arrival.len());
    let mut total = 0.0;
    for &id in arrival {
        let p = profiles
            .iter()
            .find(|p| p.id == id)
            .expect("arrival names an unknown orchestrator");
        let s = score(p.id, p.utility, p.demand_norm, p.voted_before, p.lost_cap, &members);
        total += s.vote;
        members.push(WinnerRef {
            id,
            vote: s.vote,
            norm: p.demand_norm,
        });
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_demand_examples() {
        assert_eq!(normalized_demand(&[0, 0], &[10, 16]).unwrap(), 0.0);
        assert!((normalized_demand(&[4], &[10]).unwrap() - 0.4).abs() < 1e-12);
        assert!((normalized_demand(&[5, 8], &[10, 16]).unwrap() - 1.0).abs() < 1e-12);
        assert!(normalized_demand(&[1, 0], &[0, 5]).is_err());
        assert_eq!(normalized_demand(&[0, 3], &[0, 6]).unwrap(), 0.5);
    }

    #[test]
    fn first_vote_is_uncapped() {
        let w = [WinnerRef {
            id: 0,
            vote: 8.0,
            norm: 0.4,
        }];
        let s = score(1, 7.0, 0.3, false, None, &w);
        assert_eq!(s.vote, 7.0);
        assert_eq!(s.cap_density, None);
    }

    #[test]
    fn revote_is_capped_by_winner_density() {
        // winner density 8 / 0.4 = 20; cap 0.3 * 20 = 6
        let w = [WinnerRef {
            id: 0,
            vote: 8.0,
            norm: 0.4,
        }];
        let s = score(1, 7.0, 0.3, true, None, &w);
        assert!((s.vote - 6.0).abs() < 1e-12);
        assert!((s.cap_density.unwrap() - 20.0).abs() < 1e-12);
        let s = score(1, 5.0, 0.3, true, None, &w);
        assert_eq!(s.vote, 5.0);
    }

    #[test]
    fn larger_id_winner_keeps_the_tie() {
        let w = [WinnerRef {
            id: 3,
            vote: 8.0,
            norm: 0.4,
        }];
        let s = score(1, 7.0, 0.3, true, None, &w);
        assert!(s.vote < 6.0);
        assert!(density(s.vote, 0.3) < 20.0 - UTILITY_TOLERANCE);
        assert!(s.vote > 6.0 * (1.0 - 1e-5));
    }

    #[test]
    fn lost_memory_caps_when_no_winners() {
        let s = score(1, 7.0, 0.3, true, Some(10.0), &[]);
        assert!((s.vote - 3.0).abs() < 1e-12);
        let s = score(1, 7.0, 0.3, true, None, &[]);
        assert_eq!(s.vote, 7.0);
    }

    #[test]
    fn z_n_basics() {
        let profiles = [
            ScoreProfile {
                id: 0,
                utility: 8.0,
                demand_norm: 0.4,
                voted_before: false,
                lost_cap: None,
            },
            ScoreProfile {
                id: 1,
                utility: 7.0,
                demand_norm: 0.3,
                voted_before: true,
                lost_cap: None,
            },
        ];
        assert_eq!(z_n(&profiles, &[]), 0.0);
        assert_eq!(z_n(&profiles, &[0]), 8.0);
        assert!((z_n(&profiles, &[0, 1]) - 14.0).abs() < 1e-12);
    }
}

use super::{Message, VoteState};

/// Adopts every entry of `incoming` whose timestamp is strictly newer.
/// Returns whether anything changed.
pub fn merge_state(local: &mut VoteState, incoming: &VoteState) -> bool {
    let mut changed = false;
    for (i, row) in incoming.t.iter().enumerate() {
        for (n, &t) in row.iter().enumerate() {
            if t > local.t[i][n] {
                local.t[i][n] = t;
                local.v[i][n] = incoming.v[i][n];
                local.r[i][n].clone_from(&incoming.r[i][n]);
                changed = true;
            }
        }
    }
    changed
}

pub fn agree(local: &mut VoteState, incoming: &Message) -> bool {
    merge_state(local, &incoming.snapshot)
}

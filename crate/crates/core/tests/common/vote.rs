use proptest::prelude::*;

use varc::data::Grid;
use varc::infer::VoteEntry;

/// Pairwise-consistency ranking: a candidate's score is the number of
/// candidates equal to it; distinct grids are ordered by score, then by
/// first appearance.
pub fn oracle(cands: &[Grid]) -> Vec<VoteEntry> {
    let mut out: Vec<(usize, VoteEntry)> = Vec::new();
    for (i, a) in cands.iter().enumerate() {
        if cands[..i].contains(a) {
            continue;
        }
        let count = cands.iter().filter(|b| *b == a).count();
        out.push((i, VoteEntry { grid: a.clone(), count }));
    }
    let mut sorted = Vec::new();
    while !out.is_empty() {
        let mut best = 0;
        for j in 1..out.len() {
            let (fi, e) = &out[j];
            let (bi, b) = &out[best];
            if e.count > b.count || (e.count == b.count && fi < bi) {
                best = j;
            }
        }
        sorted.push(out.remove(best).1);
    }
    sorted
}

/// Few distinct small grids so collisions are common.
pub fn candidates() -> impl Strategy<Value = Vec<Grid>> {
    let grid = (1usize..=2, 1usize..=2, 0u8..3).prop_map(|(r, c, v)| {
        let cells = (0..r * c).map(|i| if i == 0 { v } else { 0 }).collect();
        Grid::new(r, c, cells).unwrap()
    });
    proptest::collection::vec(grid, 0..=50)
}

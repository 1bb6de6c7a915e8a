mod common;

use common::vote::{candidates, oracle};
use proptest::prelude::*;

use varc::data::Grid;
use varc::infer::{majority_vote, pass_at_k, PASS_AT_K};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn vote_matches_pairwise_oracle(cands in candidates()) {
        let tally = majority_vote(&cands);
        prop_assert_eq!(&tally.ranked, &oracle(&cands));
        prop_assert_eq!(tally.total_views, cands.len());
        prop_assert_eq!(tally.ranked.iter().map(|e| e.count).sum::<usize>(), cands.len());
    }

    #[test]
    fn pass_at_k_is_monotone(cands in candidates(), truth in (0u8..3).prop_map(|v| Grid::filled(1, 1, v))) {
        let tally = majority_vote(&cands);
        let mut prev = false;
        for k in 1..=PASS_AT_K[PASS_AT_K.len() - 1] {
            let now = pass_at_k(&tally, &truth, k);
            prop_assert!(now || !prev, "pass@{} dropped after pass@{}", k, k - 1);
            prev = now;
        }
        prop_assert_eq!(pass_at_k(&tally, &truth, 300), cands.contains(&truth));
    }
}

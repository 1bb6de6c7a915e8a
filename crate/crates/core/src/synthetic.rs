//! Generated micro-tasks with known rules, for smoke tests and desk-scale
//! end-to-end runs.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ExamplePair, Grid, InferPair, Split, Task, TaskSet, NUM_COLORS};
use crate::geometry::{apply_color_perm, apply_dihedral, ColorPerm, Dihedral};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicroRule {
    Identity,
    ColorSwap(u8, u8),
    /// A flip or rotation of the whole grid.
    Mirror(Dihedral),
}

impl MicroRule {
    pub fn apply(&self, g: &Grid) -> Grid {
        match *self {
            MicroRule::Identity => g.clone(),
            MicroRule::ColorSwap(a, b) => apply_color_perm(g, &ColorPerm::swap(a, b)),
            MicroRule::Mirror(d) => apply_dihedral(g, d),
        }
    }

    /// Colors drawn more often so the rule is visible in most grids.
    fn focus(&self) -> Vec<u8> {
        match *self {
            MicroRule::ColorSwap(a, b) => vec![a, b],
            _ => Vec::new(),
        }
    }
}

/// A random grid with sides in `1..=max_side`; half of the cells use the
/// focus colors when any are given.
pub fn random_grid<R: Rng + ?Sized>(rng: &mut R, max_side: usize, focus: &[u8]) -> Grid {
    let palette: Vec<u8> = (0..NUM_COLORS as u8).collect();
    grid_from(rng, 1, max_side, &palette, focus)
}

fn grid_from<R: Rng + ?Sized>(rng: &mut R, min_side: usize, max_side: usize, palette: &[u8], focus: &[u8]) -> Grid {
    let rows = rng.random_range(min_side..=max_side);
    let cols = rng.random_range(min_side..=max_side);
    let cells = (0..rows * cols)
        .map(|_| {
            if !focus.is_empty() && rng.random_bool(0.5) {
                focus[rng.random_range(0..focus.len())]
            } else {
                palette[rng.random_range(0..palette.len())]
            }
        })
        .collect();
    Grid::new(rows, cols, cells).expect("colors in range")
}

pub fn micro_task<R: Rng + ?Sized>(
    rng: &mut R,
    task_id: &str,
    rule: MicroRule,
    demos: usize,
    infers: usize,
    max_side: usize,
) -> Task {
    let focus = rule.focus();
    let mut pair = || {
        let x = random_grid(rng, max_side, &focus);
        let y = rule.apply(&x);
        (x, y)
    };
    let demo = (0..demos).map(|_| pair()).map(|(input, output)| ExamplePair { input, output }).collect();
    let infer = (0..infers).map(|_| pair()).map(|(input, output)| InferPair { input, output: Some(output) }).collect();
    Task::new(task_id, demo, infer).expect("non-empty task")
}

/// A few-shot task that the demonstrations pin down: grid sides are drawn
/// from `sides`, and inference inputs only use colors seen in some demo
/// input.
pub fn few_shot_task<R: Rng + ?Sized>(
    rng: &mut R,
    task_id: &str,
    rule: MicroRule,
    demos: usize,
    infers: usize,
    sides: RangeInclusive<usize>,
) -> Task {
    let focus = rule.focus();
    let all: Vec<u8> = (0..NUM_COLORS as u8).collect();
    let (lo, hi) = (*sides.start(), *sides.end());
    let demo: Vec<ExamplePair> = (0..demos)
        .map(|_| {
            let input = grid_from(rng, lo, hi, &all, &focus);
            ExamplePair { output: rule.apply(&input), input }
        })
        .collect();
    let mut seen: Vec<u8> = demo.iter().flat_map(|p| p.input.cells().iter().copied()).collect();
    seen.sort_unstable();
    seen.dedup();
    let infer = (0..infers)
        .map(|_| {
            let input = grid_from(rng, lo, hi, &seen, &[]);
            InferPair { output: Some(rule.apply(&input)), input }
        })
        .collect();
    Task::new(task_id, demo, infer).expect("non-empty task")
}

/// The three training families: identity, swapping colors 1 and 2, and a
/// left-right mirror.
pub const TRAIN_FAMILIES: [(&str, MicroRule); 3] = [
    ("identity", MicroRule::Identity),
    ("color_swap", MicroRule::ColorSwap(1, 2)),
    ("mirror", MicroRule::Mirror(Dihedral::FlipH)),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideRegime {
    /// Sides in `max_side - 2..=max_side`.
    Large,
    /// Sides in `2..=max_side - 2`.
    Small,
}

impl SideRegime {
    pub fn sides(self, max_side: usize) -> RangeInclusive<usize> {
        let mid = max_side.saturating_sub(2).max(1);
        match self {
            SideRegime::Large => mid..=max_side,
            SideRegime::Small => 2.min(max_side).min(mid)..=mid,
        }
    }
}

/// Held-out variants of the training rules: fresh tasks with few
/// demonstrations, on large and small grids.
pub const HELD_OUT: [(&str, MicroRule, SideRegime); 5] = [
    ("heldout_identity", MicroRule::Identity, SideRegime::Large),
    ("heldout_swap", MicroRule::ColorSwap(1, 2), SideRegime::Large),
    ("heldout_mirror", MicroRule::Mirror(Dihedral::FlipH), SideRegime::Large),
    ("heldout_swap_small", MicroRule::ColorSwap(1, 2), SideRegime::Small),
    ("heldout_mirror_small", MicroRule::Mirror(Dihedral::FlipH), SideRegime::Small),
];

/// Rules never seen in training: another color pair and a top-bottom mirror.
pub const NOVEL_RULES: [(&str, MicroRule, SideRegime); 2] = [
    ("novel_swap_3_6", MicroRule::ColorSwap(3, 6), SideRegime::Large),
    ("novel_mirror_v", MicroRule::Mirror(Dihedral::FlipV), SideRegime::Large),
];

/// One task per training family with `pairs` demonstrations and `val`
/// held-back inference pairs.
pub fn micro_training_set(seed: u64, pairs: usize, val: usize, max_side: usize) -> TaskSet {
    family_set(seed, &TRAIN_FAMILIES, pairs, val, max_side, Split::Train)
}

/// The [`HELD_OUT`] tasks, one inference pair each.
pub fn held_out_set(seed: u64, demos: usize, max_side: usize) -> TaskSet {
    few_shot_set(seed, &HELD_OUT, demos, max_side)
}

/// The [`NOVEL_RULES`] tasks, one inference pair each.
pub fn novel_rule_set(seed: u64, demos: usize, max_side: usize) -> TaskSet {
    few_shot_set(seed, &NOVEL_RULES, demos, max_side)
}

fn few_shot_set(seed: u64, specs: &[(&str, MicroRule, SideRegime)], demos: usize, max_side: usize) -> TaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = specs
        .iter()
        .map(|(id, rule, regime)| few_shot_task(&mut rng, id, *rule, demos, 1, regime.sides(max_side)))
        .collect();
    TaskSet::new(Split::Eval, tasks).expect("distinct ids")
}

pub fn family_set(seed: u64, families: &[(&str, MicroRule)], demos: usize, infers: usize, max_side: usize, split: Split) -> TaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = families.iter().map(|(id, rule)| micro_task(&mut rng, id, *rule, demos, infers, max_side)).collect();
    TaskSet::new(split, tasks).expect("distinct ids")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_hold_on_generated_pairs() {
        let set = micro_training_set(3, 20, 2, 5);
        assert_eq!(set.len(), 3);
        for (id, rule) in TRAIN_FAMILIES {
            let t = set.get(id).unwrap();
            assert_eq!(t.demo.len(), 20);
            for p in &t.demo {
                assert!(p.input.rows() <= 5 && p.input.cols() <= 5);
                assert_eq!(rule.apply(&p.input), p.output);
            }
        }
        assert_eq!(micro_training_set(3, 20, 2, 5), set);
    }

    #[test]
    fn held_out_inputs_use_demo_colors() {
        let mut set = held_out_set(5, 3, 5).tasks().to_vec();
        set.extend(novel_rule_set(5, 3, 5).tasks().iter().cloned());
        for (id, rule, regime) in HELD_OUT.iter().chain(&NOVEL_RULES) {
            let t = set.iter().find(|t| t.task_id == *id).unwrap();
            let seen: Vec<u8> = t.demo.iter().flat_map(|p| p.input.cells().to_vec()).collect();
            for p in t.demo.iter().map(|p| &p.input).chain([&t.infer[0].input]) {
                assert!(regime.sides(5).contains(&p.rows()) && regime.sides(5).contains(&p.cols()));
            }
            let q = &t.infer[0];
            assert!(q.input.cells().iter().all(|c| seen.contains(c)));
            assert_eq!(q.output.as_ref().unwrap(), &rule.apply(&q.input));
        }
    }

    #[test]
    fn side_regimes_stay_in_bounds() {
        assert_eq!(SideRegime::Large.sides(5), 3..=5);
        assert_eq!(SideRegime::Small.sides(5), 2..=3);
        assert_eq!(SideRegime::Small.sides(2), 1..=1);
        assert_eq!(SideRegime::Large.sides(1), 1..=1);
    }
}

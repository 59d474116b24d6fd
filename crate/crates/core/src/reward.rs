//! Shaped edit rewards and return-to-go bookkeeping.
//!
//! Every edit is scored as the change of a potential over the map's
//! structural statistics, so the total reward of a trajectory depends only
//! on its first and last map.

use serde::{Deserialize, Serialize};

use crate::env::{GoalSpec, MapStats};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub w_player: f64,
    pub w_box_target_balance: f64,
    pub w_region: f64,
    pub w_solution: f64,
    /// Inclusive range of box counts that carries no penalty.
    pub target_box_count_range: [usize; 2],
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_player: 3.0,
            w_box_target_balance: 2.0,
            w_region: 5.0,
            w_solution: 1.0,
            target_box_count_range: [1, 3],
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("reward weights must be non-negative with a non-empty box range: {0:?}")]
pub struct InvalidWeights(pub RewardWeights);

impl RewardWeights {
    pub fn validate(&self) -> Result<(), InvalidWeights> {
        let [lo, hi] = self.target_box_count_range;
        let weights = [
            self.w_player,
            self.w_box_target_balance,
            self.w_region,
            self.w_solution,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || lo > hi {
            return Err(InvalidWeights(*self));
        }
        Ok(())
    }
}

fn distance_to_range(n: usize, [lo, hi]: [usize; 2]) -> usize {
    if n < lo {
        lo - n
    } else {
        n.saturating_sub(hi)
    }
}

pub fn potential(stats: &MapStats, weights: &RewardWeights, goal: &GoalSpec) -> f64 {
    let players = stats.player_count.abs_diff(1) as f64;
    let balance = (stats.box_count.abs_diff(stats.target_count)
        + distance_to_range(stats.box_count, weights.target_box_count_range)) as f64;
    let fragments = stats.region_count.saturating_sub(1) as f64;
    let solved = stats.solution.solved_length().unwrap_or(0).min(goal.min_solution_length) as f64;
    -weights.w_player * players - weights.w_box_target_balance * balance - weights.w_region * fragments
        + weights.w_solution * solved
}

pub fn step_reward(prev: &MapStats, next: &MapStats, weights: &RewardWeights, goal: &GoalSpec) -> f64 {
    potential(next, weights, goal) - potential(prev, weights, goal)
}

/// Suffix sums: `rtg[t] = rewards[t] + rewards[t+1] + ...`.
pub fn compute_rtg(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (slot, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *slot = acc;
    }
    out
}

pub fn decrement_rtg(rtg: f64, reward: f64) -> f64 {
    rtg - reward
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{map_stats, LevelMap, Tile};
    use crate::solver::SolveResult;

    fn stats(players: usize, boxes: usize, targets: usize, regions: usize, solution: SolveResult) -> MapStats {
        MapStats {
            player_count: players,
            box_count: boxes,
            target_count: targets,
            region_count: regions,
            solution,
        }
    }

    #[test]
    fn potential_extremes() {
        let w = RewardWeights::default();
        let goal = GoalSpec::default();
        let best = stats(1, 2, 2, 1, SolveResult::Solved(18));
        assert_eq!(potential(&best, &w, &goal), 18.0);
        let longer = stats(1, 2, 2, 1, SolveResult::Solved(40));
        assert_eq!(potential(&longer, &w, &goal), 18.0);

        let walls = map_stats(&LevelMap::filled(5, 5, Tile::Wall), &goal);
        assert_eq!(potential(&walls, &w, &goal), -5.0);
    }

    #[test]
    fn potential_of_hand_counted_fixture() {
        // 2 players, 3 boxes, 1 target, two floor regions split by the wall column.
        let m = LevelMap::parse_ascii("@.#..\n$.#.$\n..#$.\n*.#..\n..#.@").unwrap();
        let goal = GoalSpec::default();
        let s = map_stats(&m, &goal);
        assert_eq!(
            (s.player_count, s.box_count, s.target_count, s.region_count),
            (2, 3, 1, 2)
        );
        // -3*1 - 2*(2 + 0) - 5*1 + 0
        assert_eq!(potential(&s, &RewardWeights::default(), &goal), -12.0);
    }

    #[test]
    fn step_rewards() {
        let w = RewardWeights::default();
        let goal = GoalSpec::default();
        let a = stats(1, 1, 1, 2, SolveResult::NotAttempted);
        assert_eq!(step_reward(&a, &a, &w, &goal), 0.0);
        let merged = stats(1, 1, 1, 1, SolveResult::NotAttempted);
        assert_eq!(step_reward(&a, &merged, &w, &goal), 5.0);
    }

    #[test]
    fn rtg_examples() {
        assert!(compute_rtg(&[]).is_empty());
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert_eq!(decrement_rtg(10.0, 3.0), 7.0);
        assert_eq!(decrement_rtg(4.5, 0.0), 4.5);
    }

    #[test]
    fn weights_validation() {
        assert!(RewardWeights::default().validate().is_ok());
        let bad = RewardWeights {
            w_region: -1.0,
            ..RewardWeights::default()
        };
        assert!(bad.validate().is_err());
        let empty_range = RewardWeights {
            target_box_count_range: [3, 1],
            ..RewardWeights::default()
        };
        assert!(empty_range.validate().is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rtg_recurrence(rewards in proptest::collection::vec(-20.0f64..20.0, 1..100)) {
                let rtg = compute_rtg(&rewards);
                prop_assert_eq!(rtg.len(), rewards.len());
                for t in 0..rewards.len() - 1 {
                    prop_assert!((rtg[t] - rtg[t + 1] - rewards[t]).abs() < 1e-9);
                }
                let mut running = rtg[0];
                for (t, r) in rewards.iter().enumerate() {
                    prop_assert!((running - rtg[t]).abs() < 1e-9);
                    running = decrement_rtg(running, *r);
                }
                prop_assert!(running.abs() < 1e-9);
            }
        }
    }
}

//! Offline trajectories: a noisy greedy repair policy edits random maps, the
//! resulting `(rtg, state, action, reward)` sequences are stored as JSON
//! Lines, and fixed-length padded windows are sampled from them for training.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{is_goal, map_stats, EditAction, EnvError, GoalSpec, LevelMap, MapStats, Tile, TileProbs};
use crate::reward::{compute_rtg, step_reward, RewardWeights};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("dataset has no trajectories with at least one step")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub state: LevelMap,
    pub action: EditAction,
    pub reward: f64,
    pub rtg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub terminal_state: LevelMap,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn initial_state(&self) -> &LevelMap {
        self.steps.first().map(|s| &s.state).unwrap_or(&self.terminal_state)
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Checks the return-to-go recurrence (within `tol`) and that each state
    /// is the previous state with the previous action applied.
    pub fn check_invariants(&self, tol: f64) -> Result<(), String> {
        for (t, step) in self.steps.iter().enumerate() {
            let next_rtg = self.steps.get(t + 1).map_or(0.0, |s| s.rtg);
            if (step.rtg - step.reward - next_rtg).abs() > tol {
                return Err(format!(
                    "rtg recurrence broken at step {t}: {} != {} + {next_rtg}",
                    step.rtg, step.reward
                ));
            }
            let (next, _) = step.state.apply_edit(step.action).map_err(|e| e.to_string())?;
            let expected = self.steps.get(t + 1).map_or(&self.terminal_state, |s| &s.state);
            if &next != expected {
                return Err(format!("state transition broken at step {t}"));
            }
        }
        Ok(())
    }
}

/// Scores every single-tile edit of `map` by its one-step reward and returns
/// the best strictly improving one; ties go to the lowest `(y, x, item)`.
///
/// When no single edit improves, the first edit of the best improving pair
/// from [`plateau_pairs`] is returned instead, and failing that a no-op at
/// the origin. The result is a pure function of its arguments.
pub fn greedy_action(map: &LevelMap, stats: &MapStats, goal: &GoalSpec, weights: &RewardWeights) -> EditAction {
    let mut best: Option<(f64, EditAction)> = None;
    for y in 0..map.height() {
        for x in 0..map.width() {
            let current = map.tiles()[map.index(x, y)];
            for item in Tile::ALL {
                if item == current {
                    continue;
                }
                let action = EditAction::new(item, x, y);
                let (next, _) = map.apply_edit(action).expect("candidate is in bounds");
                let delta = step_reward(stats, &map_stats(&next, goal), weights, goal);
                if delta > 0.0 && best.is_none_or(|(b, _)| delta > b) {
                    best = Some((delta, action));
                }
            }
        }
    }
    if let Some((_, action)) = best {
        return action;
    }
    if !is_goal(stats, goal) {
        for (first, second) in plateau_pairs(map) {
            let (mid, _) = map.apply_edit(first).expect("pair is in bounds");
            let (next, _) = mid.apply_edit(second).expect("pair is in bounds");
            let delta = step_reward(stats, &map_stats(&next, goal), weights, goal);
            if delta > 0.0 && best.is_none_or(|(b, _)| delta > b) {
                best = Some((delta, first));
            }
        }
    }
    best.map(|(_, a)| a)
        .unwrap_or_else(|| EditAction::new(map.tiles()[0], 0, 0))
}

/// Two-edit moves that cross reward plateaus no single edit can leave:
/// relocating a non-empty tile onto an empty cell, removing a box together
/// with a target, and adding a box together with a target.
pub fn plateau_pairs(map: &LevelMap) -> Vec<(EditAction, EditAction)> {
    let w = map.width();
    let at = |i: usize| (i % w, i / w);
    let cells_of = |tile: Tile| -> Vec<usize> {
        (0..map.len()).filter(|i| map.tiles()[*i] == tile).collect()
    };
    let empty = cells_of(Tile::Empty);
    let mut pairs = Vec::new();
    for (from, tile) in map.tiles().iter().enumerate() {
        if *tile == Tile::Empty {
            continue;
        }
        let (fx, fy) = at(from);
        for to in &empty {
            let (tx, ty) = at(*to);
            pairs.push((EditAction::new(Tile::Empty, fx, fy), EditAction::new(*tile, tx, ty)));
        }
    }
    for b in cells_of(Tile::Box) {
        for t in cells_of(Tile::Target) {
            let ((bx, by), (tx, ty)) = (at(b), at(t));
            pairs.push((EditAction::new(Tile::Empty, bx, by), EditAction::new(Tile::Empty, tx, ty)));
        }
    }
    for b in &empty {
        for t in &empty {
            if b != t {
                let ((bx, by), (tx, ty)) = (at(*b), at(*t));
                pairs.push((EditAction::new(Tile::Box, bx, by), EditAction::new(Tile::Target, tx, ty)));
            }
        }
    }
    pairs
}

pub fn random_action<R: Rng>(width: usize, height: usize, rng: &mut R) -> EditAction {
    let item = Tile::ALL[rng.gen_range(0..Tile::COUNT)];
    let x = rng.gen_range(0..width);
    let y = rng.gen_range(0..height);
    EditAction::new(item, x, y)
}

/// Epsilon-greedy behavior policy used to collect the offline data.
pub fn behavior_policy_propose<R: Rng>(
    map: &LevelMap,
    stats: &MapStats,
    goal: &GoalSpec,
    weights: &RewardWeights,
    rng: &mut R,
    epsilon: f64,
) -> EditAction {
    // Always draw, so the random stream advances identically for any epsilon.
    let explore = rng.gen::<f64>() < epsilon;
    if explore {
        random_action(map.width(), map.height(), rng)
    } else {
        greedy_action(map, stats, goal, weights)
    }
}

/// Remembers the greedy choice for the last map seen; a stalled policy keeps
/// proposing the same no-op on an unchanged map.
#[derive(Default)]
pub struct GreedyCache {
    last: Option<(LevelMap, EditAction)>,
}

impl GreedyCache {
    pub fn action(&mut self, map: &LevelMap, stats: &MapStats, goal: &GoalSpec, weights: &RewardWeights) -> EditAction {
        if let Some((cached, action)) = &self.last {
            if cached == map {
                return *action;
            }
        }
        let action = greedy_action(map, stats, goal, weights);
        self.last = Some((map.clone(), action));
        action
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_maps: usize,
    pub epsilons: Vec<f64>,
    pub max_steps: usize,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_maps: 3000,
            epsilons: vec![0.1, 0.3, 0.5],
            max_steps: 50,
            master_seed: 0,
        }
    }
}

/// Everything needed to roll out a trajectory.
#[derive(Clone, Debug)]
pub struct RolloutSpec<'a> {
    pub width: usize,
    pub height: usize,
    pub tile_probs: &'a TileProbs,
    pub goal: &'a GoalSpec,
    pub weights: &'a RewardWeights,
}

pub fn generate_trajectory(
    spec: &RolloutSpec<'_>,
    seed: u64,
    epsilon: f64,
    max_steps: usize,
) -> Result<Trajectory, EnvError> {
    let mut map = LevelMap::random(spec.width, spec.height, seed, spec.tile_probs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut stats = map_stats(&map, spec.goal);
    let mut steps = Vec::new();
    let mut rewards = Vec::new();
    let mut greedy = GreedyCache::default();
    while steps.len() < max_steps && !is_goal(&stats, spec.goal) {
        let explore = rng.gen::<f64>() < epsilon;
        let action = if explore {
            random_action(map.width(), map.height(), &mut rng)
        } else {
            greedy.action(&map, &stats, spec.goal, spec.weights)
        };
        let (next, _) = map.apply_edit(action)?;
        let next_stats = map_stats(&next, spec.goal);
        let reward = step_reward(&stats, &next_stats, spec.weights, spec.goal);
        rewards.push(reward);
        steps.push(TrajectoryStep {
            state: map,
            action,
            reward,
            rtg: 0.0,
        });
        map = next;
        stats = next_stats;
    }
    for (step, rtg) in steps.iter_mut().zip(compute_rtg(&rewards)) {
        step.rtg = rtg;
    }
    Ok(Trajectory {
        steps,
        success: is_goal(&stats, spec.goal),
        terminal_state: map,
    })
}

/// Per-trajectory seed derived from the master seed (SplitMix64 finalizer).
pub fn trajectory_seed(master_seed: u64, index: u64) -> u64 {
    let mut z = master_seed
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rolls out `config.n_maps` trajectories, cycling through the epsilons.
/// Output order is by trajectory index regardless of thread count.
pub fn generate_trajectories(spec: &RolloutSpec<'_>, config: &DatasetConfig) -> Result<Vec<Trajectory>, EnvError> {
    (0..config.n_maps)
        .into_par_iter()
        .map(|i| {
            let eps = config.epsilons[i % config.epsilons.len()];
            generate_trajectory(spec, trajectory_seed(config.master_seed, i as u64), eps, config.max_steps)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub kind: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub n_trajectories: usize,
    pub n_success: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    state: Vec<i64>,
    item: i64,
    x: usize,
    y: usize,
    reward: f64,
    rtg: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    version: u32,
    width: usize,
    height: usize,
    steps: Vec<StepRecord>,
    success: bool,
    terminal: Vec<i64>,
}

fn codes(map: &LevelMap) -> Vec<i64> {
    map.encode_int_grid().into_iter().map(i64::from).collect()
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

pub fn trajectory_to_json(traj: &Trajectory) -> String {
    let record = TrajectoryRecord {
        version: FORMAT_VERSION,
        width: traj.terminal_state.width(),
        height: traj.terminal_state.height(),
        steps: traj
            .steps
            .iter()
            .map(|s| StepRecord {
                state: codes(&s.state),
                item: i64::from(s.action.item.code()),
                x: s.action.x,
                y: s.action.y,
                reward: s.reward,
                rtg: s.rtg,
            })
            .collect(),
        success: traj.success,
        terminal: codes(&traj.terminal_state),
    };
    serde_json::to_string(&record).expect("trajectory serializes")
}

pub fn trajectory_from_json(line: &str, line_no: usize) -> Result<Trajectory, DatasetError> {
    let record: TrajectoryRecord =
        serde_json::from_str(line).map_err(|source| DatasetError::Json { line: line_no, source })?;
    if record.version != FORMAT_VERSION {
        return Err(DatasetError::Invalid {
            line: line_no,
            message: format!("unsupported version {}", record.version),
        });
    }
    let (w, h) = (record.width, record.height);
    let steps = record
        .steps
        .into_iter()
        .map(|s| {
            let action = EditAction::new(Tile::from_code(s.item)?, s.x, s.y);
            if s.x >= w || s.y >= h {
                return Err(EnvError::OutOfBounds {
                    x: s.x,
                    y: s.y,
                    width: w,
                    height: h,
                });
            }
            Ok(TrajectoryStep {
                state: LevelMap::decode_int_grid(&s.state, w, h)?,
                action,
                reward: s.reward,
                rtg: s.rtg,
            })
        })
        .collect::<Result<Vec<_>, EnvError>>()?;
    Ok(Trajectory {
        steps,
        terminal_state: LevelMap::decode_int_grid(&record.terminal, w, h)?,
        success: record.success,
    })
}

pub fn write_dataset<W: Write>(
    mut out: W,
    trajectories: &[Trajectory],
    config_hash: &str,
    master_seed: u64,
) -> Result<(), DatasetError> {
    let (width, height) = trajectories
        .first()
        .map(|t| (t.terminal_state.width(), t.terminal_state.height()))
        .unwrap_or((0, 0));
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        kind: "metadata".into(),
        config_hash: config_hash.into(),
        master_seed,
        n_trajectories: trajectories.len(),
        n_success: trajectories.iter().filter(|t| t.success).count(),
        width,
        height,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for t in trajectories {
        writeln!(out, "{}", trajectory_to_json(t))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<(DatasetHeader, Vec<Trajectory>), DatasetError> {
    let mut lines = input.lines();
    let first = lines.next().ok_or(DatasetError::Invalid {
        line: 1,
        message: "missing metadata line".into(),
    })??;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|source| DatasetError::Json { line: 1, source })?;
    let mut trajectories = Vec::with_capacity(header.n_trajectories);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        trajectories.push(trajectory_from_json(&line, i + 2)?);
    }
    if trajectories.len() != header.n_trajectories {
        return Err(DatasetError::Invalid {
            line: 1,
            message: format!(
                "metadata announces {} trajectories, file holds {}",
                header.n_trajectories,
                trajectories.len()
            ),
        });
    }
    Ok((header, trajectories))
}

/// A fixed-length slice of a trajectory. Slots at or after `real_length`
/// repeat the last real step and carry `mask == false`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingWindow {
    pub rtg: Vec<f64>,
    pub states: Vec<Vec<u8>>,
    pub actions: Vec<EditAction>,
    pub real_length: usize,
    pub mask: Vec<bool>,
}

impl TrainingWindow {
    pub fn len(&self) -> usize {
        self.rtg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtg.is_empty()
    }
}

pub fn sample_window(traj: &Trajectory, start: usize, k: usize) -> TrainingWindow {
    assert!(start < traj.len(), "window start {start} beyond trajectory of {}", traj.len());
    let end = (start + k).min(traj.len());
    let real = &traj.steps[start..end];
    let last = real.last().expect("non-empty window");
    let slot = |i: usize| real.get(i).unwrap_or(last);
    TrainingWindow {
        rtg: (0..k).map(|i| slot(i).rtg).collect(),
        states: (0..k).map(|i| slot(i).state.encode_int_grid()).collect(),
        actions: (0..k).map(|i| slot(i).action).collect(),
        real_length: real.len(),
        mask: (0..k).map(|i| i < real.len()).collect(),
    }
}

/// Uniform `(trajectory, start)` pairs over trajectories with at least one step.
pub fn sample_batch<R: Rng>(
    dataset: &[Trajectory],
    batch_size: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<TrainingWindow>, DatasetError> {
    let usable: Vec<&Trajectory> = dataset.iter().filter(|t| !t.is_empty()).collect();
    if usable.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok((0..batch_size)
        .map(|_| {
            let traj = usable[rng.gen_range(0..usable.len())];
            let start = rng.gen_range(0..traj.len());
            sample_window(traj, start, k)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_parts() -> (TileProbs, GoalSpec, RewardWeights) {
        (TileProbs::default(), GoalSpec::default(), RewardWeights::default())
    }

    fn traj(len: usize) -> Trajectory {
        let mut map = LevelMap::filled(5, 5, Tile::Empty);
        let mut steps = Vec::new();
        let rewards: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let rtg = compute_rtg(&rewards);
        for i in 0..len {
            let action = EditAction::new(Tile::Wall, i % 5, i / 5);
            let (next, _) = map.apply_edit(action).unwrap();
            steps.push(TrajectoryStep {
                state: map,
                action,
                reward: rewards[i],
                rtg: rtg[i],
            });
            map = next;
        }
        Trajectory {
            steps,
            terminal_state: map,
            success: false,
        }
    }

    #[test]
    fn full_exploration_is_seeded() {
        let (probs, goal, weights) = spec_parts();
        let map = LevelMap::random(5, 5, 3, &probs).unwrap();
        let stats = map_stats(&map, &goal);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| behavior_policy_propose(&map, &stats, &goal, &weights, &mut rng, 1.0))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    /// Exhaustive argmax over every candidate, independent of `greedy_action`'s loop.
    fn brute_force_best(map: &LevelMap, goal: &GoalSpec, weights: &RewardWeights) -> (f64, Vec<EditAction>) {
        let base = map_stats(map, goal);
        let mut scored = Vec::new();
        for y in 0..5 {
            for x in 0..5 {
                for item in Tile::ALL {
                    let a = EditAction::new(item, x, y);
                    let next = map.apply_edit(a).unwrap().0;
                    scored.push((step_reward(&base, &map_stats(&next, goal), weights, goal), a));
                }
            }
        }
        let best = scored.iter().map(|(d, _)| *d).fold(f64::NEG_INFINITY, f64::max);
        (best, scored.into_iter().filter(|(d, _)| *d == best).map(|(_, a)| a).collect())
    }

    #[test]
    fn missing_player_is_added_first() {
        let (_, goal, weights) = spec_parts();
        let map = LevelMap::parse_ascii(".....\n.#...\n..$..\n...*.\n.....").unwrap();
        let stats = map_stats(&map, &goal);
        let action = greedy_action(&map, &stats, &goal, &weights);
        assert_eq!(action.item, Tile::Player);
        let (best, argmax) = brute_force_best(&map, &goal, &weights);
        assert!(best > 0.0);
        assert!(argmax.iter().all(|a| a.item == Tile::Player));
        assert_eq!(action, argmax[0]);
    }

    #[test]
    fn goal_map_gets_a_no_action() {
        let (probs, goal, weights) = spec_parts();
        let spec = RolloutSpec {
            width: 5,
            height: 5,
            tile_probs: &probs,
            goal: &goal,
            weights: &weights,
        };
        let done = (0..200u64)
            .map(|s| generate_trajectory(&spec, s, 0.0, 50).unwrap())
            .find(|t| t.success)
            .expect("some greedy rollout succeeds");
        let map = &done.terminal_state;
        let stats = map_stats(map, &goal);
        let (best, _) = brute_force_best(map, &goal, &weights);
        assert!(best <= 0.0);
        let action = greedy_action(map, &stats, &goal, &weights);
        assert!(!map.apply_edit(action).unwrap().1);
    }

    #[test]
    fn rollout_lengths_and_recurrence() {
        let (probs, goal, weights) = spec_parts();
        let spec = RolloutSpec {
            width: 5,
            height: 5,
            tile_probs: &probs,
            goal: &goal,
            weights: &weights,
        };
        assert_eq!(generate_trajectory(&spec, 9, 0.3, 1).unwrap().len(), 1);
        for seed in 0..50 {
            let t = generate_trajectory(&spec, seed, 0.3, 20).unwrap();
            t.check_invariants(1e-9).unwrap();
            let back = trajectory_from_json(&trajectory_to_json(&t), 1).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn windows_pad_with_last_step() {
        let t = traj(10);
        let w = sample_window(&t, 0, 4);
        assert_eq!(w.real_length, 4);
        assert!(w.mask.iter().all(|m| *m));

        let short = traj(2);
        let w = sample_window(&short, 0, 4);
        assert_eq!(w.real_length, 2);
        assert_eq!(w.mask, vec![true, true, false, false]);
        for slot in 2..4 {
            assert_eq!(w.rtg[slot], short.steps[1].rtg);
            assert_eq!(w.actions[slot], short.steps[1].action);
            assert_eq!(w.states[slot], short.steps[1].state.encode_int_grid());
        }

        let w = sample_window(&t, 7, 4);
        assert_eq!(w.rtg[..3], [t.steps[7].rtg, t.steps[8].rtg, t.steps[9].rtg]);
    }

    #[test]
    fn batches_are_seeded_and_fixed_width() {
        let data = vec![traj(3), traj(0), traj(12)];
        let a = sample_batch(&data, 32, 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_batch(&data, 32, 6, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|w| w.len() == 6 && w.mask.len() == 6));
        assert!(matches!(
            sample_batch(&[traj(0)], 4, 6, &mut ChaCha8Rng::seed_from_u64(5)),
            Err(DatasetError::Empty)
        ));
    }

    #[test]
    fn dataset_file_round_trip() {
        let (probs, goal, weights) = spec_parts();
        let spec = RolloutSpec {
            width: 5,
            height: 5,
            tile_probs: &probs,
            goal: &goal,
            weights: &weights,
        };
        let config = DatasetConfig {
            n_maps: 3,
            max_steps: 10,
            ..DatasetConfig::default()
        };
        let trajs = generate_trajectories(&spec, &config).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &trajs, &config_hash(&config), config.master_seed).unwrap();
        let (header, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(header.n_trajectories, 3);
        assert_eq!(back, trajs);

        let mut again = Vec::new();
        let regenerated = generate_trajectories(&spec, &config).unwrap();
        write_dataset(&mut again, &regenerated, &config_hash(&config), config.master_seed).unwrap();
        assert_eq!(buf, again);
    }
}

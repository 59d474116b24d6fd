//! Return-conditioned level generation.

use pcgpt_tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Trajectory, TrajectoryStep};
use crate::env::{is_goal, map_stats, EditAction, GoalSpec, LevelMap, MapStats, Tile};
use crate::model::{ModelError, ModelInput, Pcgpt};
use crate::reward::{decrement_rtg, step_reward, RewardWeights};

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("map is {map_w}x{map_h} but the model expects {model_w}x{model_h}")]
    Dimension {
        map_w: usize,
        map_h: usize,
        model_w: usize,
        model_h: usize,
    },
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("no successful trajectory in the dataset")]
    NoSuccess,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub target_rtg: f64,
    pub max_steps: usize,
    pub change_budget_fraction: f64,
    pub decode: DecodeMode,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerationError> {
        let err = |m: &str| Err(GenerationError::Config(m.to_string()));
        if self.max_steps == 0 {
            return err("max_steps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.change_budget_fraction) {
            return err("change_budget_fraction must lie in [0, 1]");
        }
        if !self.target_rtg.is_finite() {
            return err("target_rtg must be finite");
        }
        if let DecodeMode::Sample { temperature } = self.decode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return err("sampling temperature must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationResult {
    pub final_map: LevelMap,
    pub success: bool,
    pub steps_used: usize,
    pub changes_used: usize,
    pub total_reward: f64,
    pub solution_length: Option<usize>,
    /// Conditioning rtg after the last step.
    pub final_rtg: f64,
    #[serde(skip_serializing)]
    pub trajectory: Trajectory,
}

/// `floor(fraction * cells)`.
pub fn change_budget(fraction: f64, cells: usize) -> usize {
    (fraction * cells as f64 + 1e-9).floor() as usize
}

/// Edit loop state shared by every generator: applies the step and change
/// budgets, tracks reward and rtg, and stops at the goal.
#[derive(Clone, Debug)]
pub struct Episode<'a> {
    goal: &'a GoalSpec,
    weights: &'a RewardWeights,
    map: LevelMap,
    stats: MapStats,
    rtg: f64,
    max_steps: usize,
    budget: usize,
    changes: usize,
    steps: Vec<TrajectoryStep>,
}

impl<'a> Episode<'a> {
    pub fn new(
        initial: &LevelMap,
        goal: &'a GoalSpec,
        weights: &'a RewardWeights,
        max_steps: usize,
        change_fraction: f64,
        target_rtg: f64,
    ) -> Self {
        Episode {
            goal,
            weights,
            stats: map_stats(initial, goal),
            map: initial.clone(),
            rtg: target_rtg,
            max_steps,
            budget: change_budget(change_fraction, initial.len()),
            changes: 0,
            steps: Vec::new(),
        }
    }

    pub fn map(&self) -> &LevelMap {
        &self.map
    }

    pub fn stats(&self) -> &MapStats {
        &self.stats
    }

    pub fn rtg(&self) -> f64 {
        self.rtg
    }

    pub fn steps(&self) -> &[TrajectoryStep] {
        &self.steps
    }

    pub fn solved(&self) -> bool {
        is_goal(&self.stats, self.goal)
    }

    pub fn finished(&self) -> bool {
        self.solved() || self.steps.len() >= self.max_steps
    }

    /// Applies `action`, replaced by a no-op on the same cell when it would
    /// change a tile after the change budget is spent. Returns the action
    /// actually executed.
    pub fn apply(&mut self, action: EditAction) -> EditAction {
        assert!(!self.finished(), "episode already finished");
        let current = self.map.get(action.x, action.y).expect("action inside the map");
        let action = if current != action.item && self.changes >= self.budget {
            EditAction::new(current, action.x, action.y)
        } else {
            action
        };
        let (next, changed) = self.map.apply_edit(action).expect("action inside the map");
        let next_stats = if changed {
            map_stats(&next, self.goal)
        } else {
            self.stats
        };
        let reward = step_reward(&self.stats, &next_stats, self.weights, self.goal);
        self.steps.push(TrajectoryStep {
            state: std::mem::replace(&mut self.map, next),
            action,
            reward,
            rtg: self.rtg,
        });
        self.changes += usize::from(changed);
        self.rtg = decrement_rtg(self.rtg, reward);
        self.stats = next_stats;
        action
    }

    pub fn into_result(self) -> GenerationResult {
        let success = self.solved();
        GenerationResult {
            success,
            steps_used: self.steps.len(),
            changes_used: self.changes,
            total_reward: self.steps.iter().map(|s| s.reward).sum(),
            solution_length: if success { self.stats.solution_length() } else { None },
            final_rtg: self.rtg,
            trajectory: Trajectory {
                steps: self.steps,
                terminal_state: self.map.clone(),
                success,
            },
            final_map: self.map,
        }
    }
}

fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample_index<T: Scalar, R: Rng>(logits: &[T], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logits
        .iter()
        .map(|v| v.to_f64().expect("finite") / temperature)
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Turns per-head logits into an edit. Greedy picks each head's argmax with
/// the lowest index winning ties.
pub fn decode_action<T: Scalar, R: Rng>(
    item: &[T],
    x: &[T],
    y: &[T],
    mode: DecodeMode,
    rng: &mut R,
) -> Result<EditAction, GenerationError> {
    if item.iter().chain(x).chain(y).any(|v| !v.is_finite()) {
        return Err(GenerationError::NonFiniteLogits);
    }
    let pick = |l: &[T], rng: &mut R| match mode {
        DecodeMode::Greedy => argmax(l),
        DecodeMode::Sample { temperature } => sample_index(l, temperature, rng),
    };
    let i = pick(item, rng);
    let xi = pick(x, rng);
    let yi = pick(y, rng);
    Ok(EditAction::new(Tile::ALL[i], xi, yi))
}

/// Largest `rtg[0]` over successful trajectories.
pub fn default_target_rtg(data: &[Trajectory]) -> Result<f64, GenerationError> {
    data.iter()
        .filter(|t| t.success && !t.is_empty())
        .map(|t| t.steps[0].rtg)
        .fold(None, |best: Option<f64>, r| Some(best.map_or(r, |b| b.max(r))))
        .ok_or(GenerationError::NoSuccess)
}

fn check_dims<T: Scalar>(model: &Pcgpt<T>, map: &LevelMap) -> Result<(), GenerationError> {
    let c = &model.config;
    if map.width() != c.width || map.height() != c.height {
        return Err(GenerationError::Dimension {
            map_w: map.width(),
            map_h: map.height(),
            model_w: c.width,
            model_h: c.height,
        });
    }
    Ok(())
}

/// Generates from one initial map.
pub fn generate<T: Scalar>(
    model: &Pcgpt<T>,
    initial: &LevelMap,
    goal: &GoalSpec,
    weights: &RewardWeights,
    config: &GenerationConfig,
) -> Result<GenerationResult, GenerationError> {
    let mut out = generate_many(model, std::slice::from_ref(initial), goal, weights, std::slice::from_ref(config))?;
    Ok(out.pop().expect("one result per map"))
}

/// Runs one episode per `(map, config)` pair. Episodes advance in lockstep,
/// so all live contexts share a length and are decoded in one batched
/// forward pass; each keeps its own sampling stream.
pub fn generate_many<T: Scalar>(
    model: &Pcgpt<T>,
    initial: &[LevelMap],
    goal: &GoalSpec,
    weights: &RewardWeights,
    configs: &[GenerationConfig],
) -> Result<Vec<GenerationResult>, GenerationError> {
    assert_eq!(initial.len(), configs.len(), "one config per map");
    for (map, cfg) in initial.iter().zip(configs) {
        cfg.validate()?;
        check_dims(model, map)?;
    }
    let k = model.config.context_len;
    let mut episodes: Vec<Episode<'_>> = initial
        .iter()
        .zip(configs)
        .map(|(m, c)| Episode::new(m, goal, weights, c.max_steps, c.change_budget_fraction, c.target_rtg))
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = configs.iter().map(|c| ChaCha8Rng::seed_from_u64(c.seed)).collect();
    // Dropout is off at inference, so this stream is never drawn from.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    loop {
        let live: Vec<usize> = (0..episodes.len()).filter(|i| !episodes[*i].finished()).collect();
        if live.is_empty() {
            break;
        }
        let t = episodes[live[0]].steps().len();
        let len = (t + 1).min(k);
        let mut input = ModelInput {
            batch: live.len(),
            len,
            rtg: Vec::with_capacity(live.len() * len),
            states: Vec::new(),
            actions: Vec::with_capacity(live.len() * len),
        };
        for i in &live {
            let ep = &episodes[*i];
            debug_assert_eq!(ep.steps().len(), t);
            for s in &ep.steps()[t + 1 - len..] {
                input.rtg.push(s.rtg);
                input.states.extend(s.state.encode_int_grid());
                input.actions.push(s.action);
            }
            input.rtg.push(ep.rtg());
            input.states.extend(ep.map().encode_int_grid());
            // Placeholder; the prediction for this slot never sees it.
            input.actions.push(EditAction::new(Tile::Empty, 0, 0));
        }
        let logits = model.forward(&input, false, &mut unused)?;
        let c = &model.config;
        for (b, i) in live.iter().enumerate() {
            let pos = b * len + len - 1;
            let action = decode_action(
                &logits.item[pos * c.n_items..(pos + 1) * c.n_items],
                &logits.x[pos * c.width..(pos + 1) * c.width],
                &logits.y[pos * c.height..(pos + 1) * c.height],
                configs[*i].decode,
                &mut rngs[*i],
            )?;
            episodes[*i].apply(action);
        }
    }
    Ok(episodes.into_iter().map(Episode::into_result).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::reward::compute_rtg;

    fn tiny_model(seed: u64) -> Pcgpt<f32> {
        Pcgpt::new(ModelConfig {
            context_len: 4,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            dropout: 0.1,
            init_seed: seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn cfg(fraction: f64, decode: DecodeMode, seed: u64) -> GenerationConfig {
        GenerationConfig {
            target_rtg: 20.0,
            max_steps: 12,
            change_budget_fraction: fraction,
            decode,
            seed,
        }
    }

    #[test]
    fn greedy_decoding_picks_argmax_with_low_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = decode_action(
            &[0.0f32, 3.0, 1.0, 3.0, -1.0],
            &[5.0, 0.0, 0.0, 0.0, 0.0],
            &[0.0, 0.0, 0.0, 0.0, 0.5],
            DecodeMode::Greedy,
            &mut rng,
        )
        .unwrap();
        assert_eq!(a, EditAction::new(Tile::Wall, 0, 4));
        let bad = decode_action(&[f32::NAN; 5], &[0.0; 5], &[0.0; 5], DecodeMode::Greedy, &mut rng);
        assert!(matches!(bad, Err(GenerationError::NonFiniteLogits)));
    }

    #[test]
    fn cold_sampling_matches_greedy_and_is_seeded() {
        let item = [0.1f32, 0.9, 0.3, 0.2, 0.0];
        let xy = [0.3f32, 0.1, 0.0, 0.8, 0.2];
        let greedy = decode_action(&item, &xy, &xy, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cold = DecodeMode::Sample { temperature: 1e-4 };
        for s in 0..20 {
            let a = decode_action(&item, &xy, &xy, cold, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            assert_eq!(a, greedy);
        }
        let warm = DecodeMode::Sample { temperature: 2.0 };
        let draw = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            (0..10)
                .map(|_| decode_action(&item, &xy, &xy, warm, &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn target_rtg_is_max_over_successes() {
        let traj = |rtg: f64, success: bool| Trajectory {
            steps: vec![TrajectoryStep {
                state: LevelMap::filled(5, 5, Tile::Empty),
                action: EditAction::new(Tile::Empty, 0, 0),
                reward: rtg,
                rtg,
            }],
            terminal_state: LevelMap::filled(5, 5, Tile::Empty),
            success,
        };
        let mut data = vec![traj(10.0, true), traj(25.0, true), traj(17.0, true), traj(99.0, false)];
        assert_eq!(default_target_rtg(&data).unwrap(), 25.0);
        data.reverse();
        assert_eq!(default_target_rtg(&data).unwrap(), 25.0);
        assert!(matches!(
            default_target_rtg(&[traj(5.0, false)]),
            Err(GenerationError::NoSuccess)
        ));
    }

    #[test]
    fn solved_input_stops_before_any_edit() {
        let map = LevelMap::parse_ascii("@....\n.....\n.....\n.....\n.$..*").unwrap();
        let goal = GoalSpec {
            min_solution_length: 1,
            ..GoalSpec::default()
        };
        let r = generate(&tiny_model(0), &map, &goal, &RewardWeights::default(), &cfg(1.0, DecodeMode::Greedy, 0)).unwrap();
        assert!(r.success);
        assert_eq!(r.steps_used, 0);
        assert_eq!(r.final_map, map);
    }

    #[test]
    fn zero_budget_changes_nothing() {
        let goal = GoalSpec::default();
        let w = RewardWeights::default();
        for seed in 0..5 {
            let map = LevelMap::random(5, 5, seed, &crate::TileProbs::default()).unwrap();
            let c = cfg(0.0, DecodeMode::Sample { temperature: 1.0 }, seed);
            let r = generate(&tiny_model(seed), &map, &goal, &w, &c).unwrap();
            assert_eq!(r.changes_used, 0);
            assert_eq!(r.final_map, map);
        }
    }

    #[test]
    fn rtg_bookkeeping_and_budgets() {
        let goal = GoalSpec::default();
        let w = RewardWeights::default();
        let model = tiny_model(1);
        for seed in 0..8 {
            let map = LevelMap::random(5, 5, 100 + seed, &crate::TileProbs::default()).unwrap();
            let fraction = seed as f64 / 10.0;
            let c = cfg(fraction, DecodeMode::Sample { temperature: 1.5 }, seed);
            let r = generate(&model, &map, &goal, &w, &c).unwrap();
            assert!(r.steps_used <= c.max_steps);
            assert!(r.changes_used <= change_budget(fraction, 25));
            assert!(r.changes_used <= r.steps_used);
            assert!(!r.success || is_goal(&map_stats(&r.final_map, &goal), &goal));
            let rewards: Vec<f64> = r.trajectory.steps.iter().map(|s| s.reward).collect();
            let suffix = compute_rtg(&rewards);
            for (s, tail) in r.trajectory.steps.iter().zip(&suffix) {
                assert!((s.rtg - (tail + r.final_rtg)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batched_matches_single_runs() {
        let goal = GoalSpec::default();
        let w = RewardWeights::default();
        let model = tiny_model(2);
        let maps: Vec<LevelMap> = (0..6)
            .map(|s| LevelMap::random(5, 5, 200 + s, &crate::TileProbs::default()).unwrap())
            .collect();
        let configs: Vec<GenerationConfig> = (0..6)
            .map(|s| cfg(1.0, if s % 2 == 0 { DecodeMode::Greedy } else { DecodeMode::Sample { temperature: 1.0 } }, s))
            .collect();
        let batched = generate_many(&model, &maps, &goal, &w, &configs).unwrap();
        for ((m, c), b) in maps.iter().zip(&configs).zip(&batched) {
            let single = generate(&model, m, &goal, &w, c).unwrap();
            assert_eq!(&single, b);
            assert_eq!(single.trajectory, b.trajectory);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let map = LevelMap::filled(6, 5, Tile::Empty);
        let r = generate(&tiny_model(0), &map, &GoalSpec::default(), &RewardWeights::default(), &cfg(1.0, DecodeMode::Greedy, 0));
        assert!(matches!(r, Err(GenerationError::Dimension { .. })));
    }
}

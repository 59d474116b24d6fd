//! Seeded map pools, change-fraction sweeps, and CSV reports.

use std::fs::File;
use std::path::Path;

use pcgpt_tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{random_action, trajectory_seed, GreedyCache};
use crate::env::{EnvError, GoalSpec, LevelMap, TileProbs};
use crate::generation::{generate_many, DecodeMode, Episode, GenerationConfig, GenerationError, GenerationResult};
use crate::model::Pcgpt;
use crate::reward::RewardWeights;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{n_maps} maps cannot be split into {n_groups} equal groups")]
    Divisibility { n_maps: usize, n_groups: usize },
    #[error("change fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("no successful records to summarize")]
    Empty,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pool_size: usize,
    pub n_groups: usize,
    pub fractions: Vec<f64>,
    pub seed: u64,
    pub max_steps: usize,
    /// Exploration rate of the behavior-policy baseline.
    pub behavior_epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pool_size: 500,
            n_groups: 10,
            fractions: (0..=10).map(|i| i as f64 / 10.0).collect(),
            seed: 7919,
            max_steps: 50,
            behavior_epsilon: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolMap {
    pub map_id: usize,
    pub group_id: usize,
    pub map: LevelMap,
}

/// Seeded pool of random initial maps, split into equal consecutive groups.
pub fn build_eval_pool(
    n_maps: usize,
    n_groups: usize,
    seed: u64,
    width: usize,
    height: usize,
    probs: &TileProbs,
) -> Result<Vec<PoolMap>, EvalError> {
    if n_groups == 0 || !n_maps.is_multiple_of(n_groups) {
        return Err(EvalError::Divisibility { n_maps, n_groups });
    }
    let per_group = n_maps / n_groups;
    (0..n_maps)
        .map(|i| {
            Ok(PoolMap {
                map_id: i,
                group_id: i / per_group,
                map: LevelMap::random(width, height, trajectory_seed(seed, i as u64), probs)?,
            })
        })
        .collect()
}

pub enum Method<'a, T: Scalar> {
    Pcgpt {
        model: &'a Pcgpt<T>,
        target_rtg: f64,
        decode: DecodeMode,
    },
    RandomEdit,
    BehaviorPolicy {
        epsilon: f64,
    },
}

impl<T: Scalar> Method<'_, T> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Pcgpt { .. } => "pcgpt",
            Method::RandomEdit => "random_edit",
            Method::BehaviorPolicy { .. } => "behavior_policy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub map_id: usize,
    pub group_id: usize,
    pub change_fraction: f64,
    pub success: bool,
    pub solution_length: usize,
    pub total_reward: f64,
    pub steps: usize,
    pub changes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub group_id: usize,
    pub change_fraction: f64,
    pub n_maps: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub change_fraction: f64,
    pub success_rate_mean: f64,
    pub success_rate_std: f64,
    pub n_success: usize,
    pub solution_length: Option<f64>,
    pub total_reward: Option<f64>,
    pub steps: Option<f64>,
    pub changes: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub solution_length: f64,
    pub total_reward: f64,
    pub steps: f64,
    pub changes: f64,
}

/// Per-run seed for stochastic methods.
fn run_seed(eval_seed: u64, map_id: usize, fraction_index: usize) -> u64 {
    trajectory_seed(trajectory_seed(eval_seed, map_id as u64), fraction_index as u64)
}

pub fn baseline_random_edit(
    map: &LevelMap,
    goal: &GoalSpec,
    weights: &RewardWeights,
    max_steps: usize,
    change_fraction: f64,
    seed: u64,
) -> GenerationResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ep = Episode::new(map, goal, weights, max_steps, change_fraction, 0.0);
    while !ep.finished() {
        ep.apply(random_action(map.width(), map.height(), &mut rng));
    }
    ep.into_result()
}

/// The data-collecting epsilon-greedy policy run under evaluation budgets.
pub fn baseline_behavior_policy(
    map: &LevelMap,
    goal: &GoalSpec,
    weights: &RewardWeights,
    max_steps: usize,
    change_fraction: f64,
    epsilon: f64,
    seed: u64,
) -> GenerationResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = GreedyCache::default();
    let mut ep = Episode::new(map, goal, weights, max_steps, change_fraction, 0.0);
    while !ep.finished() {
        let explore = rng.gen::<f64>() < epsilon;
        let action = if explore {
            random_action(map.width(), map.height(), &mut rng)
        } else {
            cache.action(ep.map(), ep.stats(), goal, weights)
        };
        ep.apply(action);
    }
    ep.into_result()
}

fn to_record(method: &str, pm: &PoolMap, fraction: f64, r: &GenerationResult) -> EvalRecord {
    EvalRecord {
        method: method.to_string(),
        map_id: pm.map_id,
        group_id: pm.group_id,
        change_fraction: fraction,
        success: r.success,
        solution_length: r.solution_length.unwrap_or(0),
        total_reward: r.total_reward,
        steps: r.steps_used,
        changes: r.changes_used,
    }
}

/// Runs `method` on every pool map at every fraction. Records come back
/// ordered by `(group, map_id, fraction index)`.
pub fn run_method<T: Scalar>(
    method: &Method<'_, T>,
    pool: &[PoolMap],
    config: &EvalConfig,
    goal: &GoalSpec,
    weights: &RewardWeights,
) -> Result<Vec<EvalRecord>, EvalError> {
    if let Some(f) = config.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(EvalError::Fraction(*f));
    }
    let name = method.name();
    let mut by_fraction: Vec<Vec<EvalRecord>> = Vec::with_capacity(config.fractions.len());
    for (fi, &fraction) in config.fractions.iter().enumerate() {
        let results: Vec<GenerationResult> = match method {
            Method::Pcgpt {
                model,
                target_rtg,
                decode,
            } => {
                let maps: Vec<LevelMap> = pool.iter().map(|p| p.map.clone()).collect();
                let configs: Vec<GenerationConfig> = pool
                    .iter()
                    .map(|p| GenerationConfig {
                        target_rtg: *target_rtg,
                        max_steps: config.max_steps,
                        change_budget_fraction: fraction,
                        decode: *decode,
                        seed: run_seed(config.seed, p.map_id, fi),
                    })
                    .collect();
                generate_many(*model, &maps, goal, weights, &configs)?
            }
            Method::RandomEdit => pool
                .iter()
                .map(|p| {
                    let seed = run_seed(config.seed, p.map_id, fi);
                    baseline_random_edit(&p.map, goal, weights, config.max_steps, fraction, seed)
                })
                .collect(),
            Method::BehaviorPolicy { epsilon } => pool
                .iter()
                .map(|p| {
                    let seed = run_seed(config.seed, p.map_id, fi);
                    baseline_behavior_policy(&p.map, goal, weights, config.max_steps, fraction, *epsilon, seed)
                })
                .collect(),
        };
        by_fraction.push(
            pool.iter()
                .zip(&results)
                .map(|(p, r)| to_record(name, p, fraction, r))
                .collect(),
        );
    }
    let mut records = Vec::with_capacity(pool.len() * config.fractions.len());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by_key(|i| (pool[*i].group_id, pool[*i].map_id));
    for i in order {
        for per_fraction in &by_fraction {
            records.push(per_fraction[i].clone());
        }
    }
    Ok(records)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Means of the four table metrics over successful records.
pub fn summarize_table(records: &[EvalRecord]) -> Result<TableSummary, EvalError> {
    let ok: Vec<&EvalRecord> = records.iter().filter(|r| r.success).collect();
    if ok.is_empty() {
        return Err(EvalError::Empty);
    }
    let m = |f: &dyn Fn(&EvalRecord) -> f64| mean(ok.iter().map(|r| f(r))).expect("non-empty");
    Ok(TableSummary {
        solution_length: m(&|r| r.solution_length as f64),
        total_reward: m(&|r| r.total_reward),
        steps: m(&|r| r.steps as f64),
        changes: m(&|r| r.changes as f64),
    })
}

/// Success rate per `(method, group, fraction)`.
pub fn sweep_rows(records: &[EvalRecord]) -> Vec<SweepRow> {
    let mut keys: Vec<(String, usize, f64)> = Vec::new();
    for r in records {
        let k = (r.method.clone(), r.group_id, r.change_fraction);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, group_id, change_fraction)| {
            let sel: Vec<&EvalRecord> = records
                .iter()
                .filter(|r| r.method == method && r.group_id == group_id && r.change_fraction == change_fraction)
                .collect();
            let wins = sel.iter().filter(|r| r.success).count();
            SweepRow {
                method,
                group_id,
                change_fraction,
                n_maps: sel.len(),
                success_rate: wins as f64 / sel.len() as f64,
            }
        })
        .collect()
}

/// Per `(method, fraction)`: mean and population standard deviation of the
/// group success rates, plus table means over successful records.
pub fn summary_rows(records: &[EvalRecord], sweep: &[SweepRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for s in sweep {
        let k = (s.method.clone(), s.change_fraction);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    keys.into_iter()
        .map(|(method, fraction)| {
            let rates: Vec<f64> = sweep
                .iter()
                .filter(|s| s.method == method && s.change_fraction == fraction)
                .map(|s| s.success_rate)
                .collect();
            let mu = mean(rates.iter().copied()).unwrap_or(0.0);
            let sd = mean(rates.iter().map(|r| (r - mu) * (r - mu))).unwrap_or(0.0).sqrt();
            let sel: Vec<EvalRecord> = records
                .iter()
                .filter(|r| r.method == method && r.change_fraction == fraction)
                .cloned()
                .collect();
            let table = summarize_table(&sel).ok();
            SummaryRow {
                n_success: sel.iter().filter(|r| r.success).count(),
                method,
                change_fraction: fraction,
                success_rate_mean: mu,
                success_rate_std: sd,
                solution_length: table.map(|t| t.solution_length),
                total_reward: table.map(|t| t.total_reward),
                steps: table.map(|t| t.steps),
                changes: table.map(|t| t.changes),
            }
        })
        .collect()
}

/// Success rate of one method at one fraction over the whole pool.
pub fn success_rate(records: &[EvalRecord], method: &str, fraction: f64) -> Option<f64> {
    let sel: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.method == method && r.change_fraction == fraction)
        .collect();
    (!sel.is_empty()).then(|| sel.iter().filter(|r| r.success).count() as f64 / sel.len() as f64)
}

/// Mean steps of methods `a` and `b` over maps both solved at `fraction`.
pub fn paired_mean_steps(records: &[EvalRecord], a: &str, b: &str, fraction: f64) -> Option<(f64, f64, usize)> {
    let solved = |m: &str| -> Vec<(usize, usize)> {
        records
            .iter()
            .filter(|r| r.method == m && r.change_fraction == fraction && r.success)
            .map(|r| (r.map_id, r.steps))
            .collect()
    };
    let (sa, sb) = (solved(a), solved(b));
    let pairs: Vec<(usize, usize)> = sa
        .iter()
        .filter_map(|(id, s)| sb.iter().find(|(j, _)| j == id).map(|(_, t)| (*s, *t)))
        .collect();
    let n = pairs.len();
    Some((
        mean(pairs.iter().map(|p| p.0 as f64))?,
        mean(pairs.iter().map(|p| p.1 as f64))?,
        n,
    ))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

fn write_csv<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(File::create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const RECORD_COLUMNS: [&str; 9] = [
    "method",
    "map_id",
    "group_id",
    "change_fraction",
    "success",
    "solution_length",
    "total_reward",
    "steps",
    "changes",
];
pub const SWEEP_COLUMNS: [&str; 5] = ["method", "group_id", "change_fraction", "n_maps", "success_rate"];
pub const SUMMARY_COLUMNS: [&str; 9] = [
    "method",
    "change_fraction",
    "success_rate_mean",
    "success_rate_std",
    "n_success",
    "solution_length",
    "total_reward",
    "steps",
    "changes",
];

/// Writes `records.csv`, `sweep.csv` and `summary.csv` into `dir`.
pub fn write_reports(records: &[EvalRecord], dir: &Path) -> Result<(Vec<SweepRow>, Vec<SummaryRow>), EvalError> {
    std::fs::create_dir_all(dir)?;
    let sweep = sweep_rows(records);
    let summary = summary_rows(records, &sweep);
    write_csv(&dir.join("records.csv"), &RECORD_COLUMNS, records)?;
    write_csv(&dir.join("sweep.csv"), &SWEEP_COLUMNS, &sweep)?;
    write_csv(&dir.join("summary.csv"), &SUMMARY_COLUMNS, &summary)?;
    Ok((sweep, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{is_goal, map_stats};

    fn rec(method: &str, map_id: usize, fraction: f64, success: bool, steps: usize) -> EvalRecord {
        EvalRecord {
            method: method.into(),
            map_id,
            group_id: map_id % 2,
            change_fraction: fraction,
            success,
            solution_length: if success { 20 } else { 0 },
            total_reward: steps as f64 * 1.5,
            steps,
            changes: steps / 2,
        }
    }

    #[test]
    fn pool_shapes_and_determinism() {
        let p = TileProbs::default();
        let pool = build_eval_pool(500, 10, 3, 5, 5, &p).unwrap();
        assert_eq!(pool.len(), 500);
        assert_eq!(pool.iter().filter(|m| m.group_id == 9).count(), 50);
        assert_eq!(pool, build_eval_pool(500, 10, 3, 5, 5, &p).unwrap());
        assert_ne!(pool, build_eval_pool(500, 10, 4, 5, 5, &p).unwrap());
        assert!(matches!(build_eval_pool(501, 10, 3, 5, 5, &p), Err(EvalError::Divisibility { .. })));
    }

    #[test]
    fn fraction_zero_success_is_the_already_solved_share() {
        let goal = GoalSpec::default();
        let w = RewardWeights::default();
        let pool = build_eval_pool(60, 3, 11, 5, 5, &TileProbs::default()).unwrap();
        let solved = pool.iter().filter(|p| is_goal(&map_stats(&p.map, &goal), &goal)).count();
        let cfg = EvalConfig {
            pool_size: 60,
            n_groups: 3,
            fractions: vec![0.0, 0.5],
            max_steps: 10,
            ..EvalConfig::default()
        };
        for method in [Method::<f32>::RandomEdit, Method::BehaviorPolicy { epsilon: 0.3 }] {
            let records = run_method(&method, &pool, &cfg, &goal, &w).unwrap();
            assert_eq!(records.len(), 120);
            let rate = success_rate(&records, method.name(), 0.0).unwrap();
            assert_eq!(rate, solved as f64 / 60.0);
            assert!(records.iter().filter(|r| r.change_fraction == 0.0).all(|r| r.changes == 0));
            assert_eq!(sweep_rows(&records).len(), 3 * 2);
        }
    }

    #[test]
    fn baselines_obey_budgets() {
        let goal = GoalSpec::default();
        let w = RewardWeights::default();
        for seed in 0..10 {
            let map = LevelMap::random(5, 5, seed, &TileProbs::default()).unwrap();
            let f = seed as f64 / 10.0;
            for r in [
                baseline_random_edit(&map, &goal, &w, 30, f, seed),
                baseline_behavior_policy(&map, &goal, &w, 30, f, 0.5, seed),
            ] {
                assert!(r.steps_used <= 30);
                assert!(r.changes_used <= (f * 25.0).floor() as usize);
            }
            assert_eq!(baseline_random_edit(&map, &goal, &w, 30, 0.0, seed).final_map, map);
        }
    }

    #[test]
    fn summary_of_one_record_is_that_record() {
        let r = rec("m", 0, 1.0, true, 6);
        let s = summarize_table(std::slice::from_ref(&r)).unwrap();
        assert_eq!(
            s,
            TableSummary {
                solution_length: 20.0,
                total_reward: 9.0,
                steps: 6.0,
                changes: 3.0
            }
        );
        assert!(matches!(summarize_table(&[rec("m", 0, 1.0, false, 3)]), Err(EvalError::Empty)));
        let mut many = vec![rec("m", 0, 1.0, true, 6), rec("m", 1, 1.0, true, 9), rec("m", 2, 1.0, false, 1)];
        let a = summarize_table(&many).unwrap();
        many.reverse();
        assert_eq!(a, summarize_table(&many).unwrap());
    }

    #[test]
    fn spearman_cases() {
        let x: Vec<f64> = (0..11).map(|i| i as f64).collect();
        assert_eq!(spearman(&x, &x.iter().map(|v| v * v).collect::<Vec<_>>()), Some(1.0));
        assert_eq!(spearman(&x, &x.iter().map(|v| -v).collect::<Vec<_>>()), Some(-1.0));
        assert_eq!(spearman(&x, &[0.5; 11]), None);
        // Oracle from the textbook formula 1 - 6 sum d^2 / (n (n^2 - 1)) on untied data.
        let y = [2.0, 1.0, 4.0, 3.0, 5.0];
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let expected = 1.0 - 6.0 * 4.0 / (5.0 * 24.0);
        assert!((spearman(&xs, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn paired_steps_use_the_intersection() {
        let records = vec![
            rec("a", 0, 1.0, true, 4),
            rec("a", 1, 1.0, true, 10),
            rec("a", 2, 1.0, false, 50),
            rec("b", 0, 1.0, true, 8),
            rec("b", 1, 1.0, false, 50),
            rec("b", 2, 1.0, true, 12),
        ];
        assert_eq!(paired_mean_steps(&records, "a", "b", 1.0), Some((4.0, 8.0, 1)));
        assert_eq!(paired_mean_steps(&records, "a", "b", 0.5), None);
    }

    #[test]
    fn reports_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_reports(&[], dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
        assert_eq!(text, RECORD_COLUMNS.join(",") + "\n");

        let records = vec![rec("m", 0, 0.0, false, 5), rec("m", 1, 0.0, true, 7), rec("m", 0, 1.0, true, 3)];
        let (sweep, summary) = write_reports(&records, dir.path()).unwrap();
        let mut rd = csv::Reader::from_path(dir.path().join("records.csv")).unwrap();
        let back: Vec<EvalRecord> = rd.deserialize().map(Result::unwrap).collect();
        assert_eq!(back, records);
        let rd = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(rd.into_records().count(), sweep.len());
        let mut rd = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
        let back: Vec<SummaryRow> = rd.deserialize().map(Result::unwrap).collect();
        assert_eq!(back, summary);
        assert_eq!(summary.len(), 2);
    }
}

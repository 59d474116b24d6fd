//! The `pcgpt` command line.

pub mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use pcgpt_core::dataset::{config_hash, generate_trajectories, read_dataset, trajectory_to_json, write_dataset, DatasetError, RolloutSpec, Trajectory};
use pcgpt_core::eval::{
    build_eval_pool, paired_mean_steps, run_method, spearman, success_rate, write_reports, EvalError, EvalRecord, Method,
    SummaryRow,
};
use pcgpt_core::generation::{default_target_rtg, generate, GenerationConfig, GenerationError};
use pcgpt_core::model::{ModelError, Pcgpt};
use pcgpt_core::solver::{solve_astar, SolverError};
use pcgpt_core::training::{train, write_loss_log};
use pcgpt_core::env::EnvError;
use pcgpt_core::LevelMap;
use serde::{Deserialize, Serialize};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Dimension(_) => 4,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Config(m),
            ModelError::Dimension(m) => CliError::Dimension(m),
            ModelError::Io(_) | ModelError::Tensor(_) => CliError::Io(e.to_string()),
            ModelError::EmptyMask(_) => CliError::Failed(e.to_string()),
        }
    }
}

impl From<GenerationError> for CliError {
    fn from(e: GenerationError) -> Self {
        match e {
            GenerationError::Config(m) => CliError::Config(m),
            GenerationError::Dimension { .. } => CliError::Dimension(e.to_string()),
            GenerationError::Model(m) => m.into(),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Generation(g) => g.into(),
            EvalError::Io(_) | EvalError::Csv(_) => CliError::Io(e.to_string()),
            EvalError::Divisibility { .. } | EvalError::Fraction(_) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "pcgpt", version, about = "Return-conditioned Sokoban level generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Roll out the behavior policy and write the offline dataset.
    GenDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the dataset; writes a checkpoint and a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one level from a map file or a seeded random map.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        target_rtg: Option<f64>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the model and both baselines over the evaluation pool.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Exit nonzero when an acceptance threshold is missed.
        #[arg(long)]
        check: bool,
    },
    /// Print the solver verdict for a map file.
    Solve {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = 5000)]
        node_limit: usize,
    },
    /// Print a map file as ASCII.
    Render {
        #[arg(long)]
        map: PathBuf,
    },
    /// Print a checkpoint's JSON header.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// On-disk map: rows of integer tile codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapFile {
    pub grid: Vec<Vec<i64>>,
}

impl MapFile {
    pub fn from_map(map: &LevelMap) -> Self {
        MapFile {
            grid: map
                .encode_int_grid()
                .chunks(map.width())
                .map(|r| r.iter().map(|c| i64::from(*c)).collect())
                .collect(),
        }
    }

    pub fn to_map(&self) -> Result<LevelMap, EnvError> {
        let height = self.grid.len();
        let width = self.grid.first().map_or(0, Vec::len);
        if height == 0 || width == 0 {
            return Err(EnvError::EmptyMap);
        }
        if let Some((row, r)) = self.grid.iter().enumerate().find(|(_, r)| r.len() != width) {
            return Err(EnvError::RaggedRows {
                row,
                got: r.len(),
                expected: width,
            });
        }
        let codes: Vec<i64> = self.grid.concat();
        LevelMap::decode_int_grid(&codes, width, height)
    }
}

pub fn read_map(path: &Path) -> Result<LevelMap, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: MapFile = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    file.to_map().map_err(|e| io_err(path, e))
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    if config.runtime.workers > 0 {
        // Fails only when a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.runtime.workers)
            .build_global();
    }
    Ok(config)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

pub fn load_dataset(path: &Path, config: &RunConfig) -> Result<Vec<Trajectory>, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let (header, data) = read_dataset(BufReader::new(file)).map_err(|e| match e {
        DatasetError::Env(inner) => io_err(path, inner),
        other => io_err(path, other),
    })?;
    let env = &config.environment;
    if header.width != env.width || header.height != env.height {
        return Err(CliError::Dimension(format!(
            "dataset is {}x{} but the config is {}x{}",
            header.width, header.height, env.width, env.height
        )));
    }
    Ok(data)
}

pub fn load_model(path: &Path, config: &RunConfig) -> Result<Pcgpt<f32>, CliError> {
    let model = Pcgpt::<f32>::load(path).map_err(|e| match e {
        ModelError::Io(_) | ModelError::Tensor(_) => io_err(path, e),
        other => other.into(),
    })?;
    let env = &config.environment;
    if model.config.width != env.width || model.config.height != env.height {
        return Err(CliError::Dimension(format!(
            "checkpoint is {}x{} but the config is {}x{}",
            model.config.width, model.config.height, env.width, env.height
        )));
    }
    Ok(model)
}

fn target_rtg(config: &RunConfig, cli: Option<f64>, dataset: &Path) -> Result<f64, CliError> {
    if let Some(r) = cli.or(config.generation.target_rtg) {
        return Ok(r);
    }
    let data = load_dataset(dataset, config)?;
    Ok(default_target_rtg(&data)?)
}

pub fn cmd_gen_dataset(config: &RunConfig, out: &Path) -> Result<usize, CliError> {
    let spec = RolloutSpec {
        width: config.environment.width,
        height: config.environment.height,
        tile_probs: &config.environment.tile_probs,
        goal: &config.goal,
        weights: &config.reward,
    };
    let data = generate_trajectories(&spec, &config.dataset).map_err(|e| CliError::Config(e.to_string()))?;
    let mut w = create(out)?;
    let hash = config_hash(&(&config.environment, &config.goal, &config.reward, &config.dataset));
    write_dataset(&mut w, &data, &hash, config.dataset.master_seed).map_err(|e| io_err(out, e))?;
    w.flush().map_err(|e| io_err(out, e))?;
    Ok(data.iter().filter(|t| t.success).count())
}

pub fn cmd_train(config: &RunConfig, dataset: &Path, out: &Path, log_path: &Path) -> Result<f64, CliError> {
    let data = load_dataset(dataset, config)?;
    let mut model = Pcgpt::<f32>::new(config.model.clone())?;
    let total = config.training.total_steps();
    let every = config.training.steps_per_epoch.max(1);
    let log = train(&mut model, &data, &config.training, |r| {
        if (r.step + 1) % every == 0 {
            eprintln!("step {}/{total} loss {:.4} lr {:.2e}", r.step + 1, r.loss, r.lr);
        }
    })
    .map_err(|e| match e {
        pcgpt_core::training::TrainError::Model(m) => m.into(),
        pcgpt_core::training::TrainError::Config(m) => CliError::Config(m),
        other => CliError::Failed(other.to_string()),
    })?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    model.save(out).map_err(|e| io_err(out, e))?;
    let mut w = create(log_path)?;
    write_loss_log(&mut w, &log).map_err(|e| io_err(log_path, e))?;
    w.flush().map_err(|e| io_err(log_path, e))?;
    Ok(log.last().map_or(f64::NAN, |r| r.loss))
}

#[derive(Serialize)]
struct GenerateReport<'a> {
    initial_map: MapFile,
    final_map: MapFile,
    target_rtg: f64,
    change_budget_fraction: f64,
    #[serde(flatten)]
    result: &'a pcgpt_core::generation::GenerationResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub value: Option<f64>,
    pub threshold: f64,
    pub pass: bool,
}

/// Evaluates the end-to-end thresholds on a finished sweep.
pub fn acceptance_checks(records: &[EvalRecord], fractions: &[f64]) -> Vec<CheckOutcome> {
    let full = fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let model_rate = success_rate(records, "pcgpt", full);
    let random_rate = success_rate(records, "random_edit", full);
    let margin = model_rate.zip(random_rate).map(|(a, b)| a - b);
    let ratio = paired_mean_steps(records, "pcgpt", "behavior_policy", full)
        .filter(|(_, b, _)| *b > 0.0)
        .map(|(a, b, _)| a / b);
    let rates: Vec<f64> = fractions
        .iter()
        .map(|f| success_rate(records, "pcgpt", *f).unwrap_or(0.0))
        .collect();
    let rho = spearman(fractions, &rates);
    vec![
        CheckOutcome {
            name: "success_margin_over_random_edit",
            value: margin,
            threshold: 0.20,
            pass: margin.is_some_and(|m| m >= 0.20),
        },
        CheckOutcome {
            name: "paired_steps_ratio_vs_behavior_policy",
            value: ratio,
            threshold: 0.5,
            pass: ratio.is_some_and(|r| r < 0.5),
        },
        CheckOutcome {
            name: "spearman_fraction_vs_success",
            value: rho,
            threshold: 0.9,
            pass: rho.is_some_and(|r| r >= 0.9),
        },
    ]
}

pub struct EvalOutput {
    pub records: Vec<EvalRecord>,
    pub summary: Vec<SummaryRow>,
    pub checks: Vec<CheckOutcome>,
}

pub fn cmd_eval(config: &RunConfig, model: &Pcgpt<f32>, target_rtg: f64, out_dir: &Path) -> Result<EvalOutput, CliError> {
    let env = &config.environment;
    let e = &config.eval;
    let pool = build_eval_pool(e.pool_size, e.n_groups, e.seed, env.width, env.height, &env.tile_probs)?;
    let mut records = Vec::new();
    let methods = [
        Method::Pcgpt {
            model,
            target_rtg,
            decode: config.generation.decode,
        },
        Method::RandomEdit,
        Method::BehaviorPolicy {
            epsilon: e.behavior_epsilon,
        },
    ];
    for m in &methods {
        eprintln!("evaluating {}", m.name());
        records.extend(run_method(m, &pool, e, &config.goal, &config.reward)?);
    }
    let (_, summary) = write_reports(&records, out_dir)?;
    let checks = acceptance_checks(&records, &e.fractions);
    Ok(EvalOutput {
        records,
        summary,
        checks,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenDataset { common, out } => {
            let config = load_config(&common)?;
            let out = out.unwrap_or_else(|| config.paths.dataset.clone());
            let n_success = cmd_gen_dataset(&config, &out)?;
            eprintln!(
                "wrote {} trajectories ({n_success} successful) to {}",
                config.dataset.n_maps,
                out.display()
            );
        }
        Command::Train { common, dataset, out } => {
            let config = load_config(&common)?;
            let dataset = dataset.unwrap_or_else(|| config.paths.dataset.clone());
            let out = out.unwrap_or_else(|| config.paths.checkpoint.clone());
            let loss = cmd_train(&config, &dataset, &out, &config.paths.loss_log)?;
            eprintln!("final loss {loss:.4}; checkpoint {}", out.display());
        }
        Command::Generate {
            common,
            checkpoint,
            dataset,
            map,
            target_rtg: rtg,
            fraction,
            out,
        } => {
            let config = load_config(&common)?;
            let model = load_model(&checkpoint.unwrap_or_else(|| config.paths.checkpoint.clone()), &config)?;
            let dataset = dataset.unwrap_or_else(|| config.paths.dataset.clone());
            let target = target_rtg(&config, rtg, &dataset)?;
            let env = &config.environment;
            let initial = match map {
                Some(p) => read_map(&p)?,
                None => LevelMap::random(env.width, env.height, config.generation.seed, &env.tile_probs)
                    .map_err(|e| CliError::Config(e.to_string()))?,
            };
            if initial.width() != env.width || initial.height() != env.height {
                return Err(CliError::Dimension(format!(
                    "map is {}x{} but the config is {}x{}",
                    initial.width(),
                    initial.height(),
                    env.width,
                    env.height
                )));
            }
            let g = &config.generation;
            let gen_config = GenerationConfig {
                target_rtg: target,
                max_steps: g.max_steps,
                change_budget_fraction: fraction.unwrap_or(g.change_budget_fraction),
                decode: g.decode,
                seed: g.seed,
            };
            let result = generate(&model, &initial, &config.goal, &config.reward, &gen_config)?;
            let out = out.unwrap_or_else(|| config.paths.generation.clone());
            let report = GenerateReport {
                initial_map: MapFile::from_map(&initial),
                final_map: MapFile::from_map(&result.final_map),
                target_rtg: target,
                change_budget_fraction: gen_config.change_budget_fraction,
                result: &result,
            };
            let mut w = create(&out)?;
            serde_json::to_writer_pretty(&mut w, &report).map_err(|e| io_err(&out, e))?;
            writeln!(w).map_err(|e| io_err(&out, e))?;
            w.flush().map_err(|e| io_err(&out, e))?;
            let audit = out.with_extension("trajectory.jsonl");
            let mut w = create(&audit)?;
            writeln!(w, "{}", trajectory_to_json(&result.trajectory)).map_err(|e| io_err(&audit, e))?;
            w.flush().map_err(|e| io_err(&audit, e))?;
            println!("{}", result.final_map.render_ascii());
            eprintln!(
                "success={} steps={} changes={} total_reward={}",
                result.success, result.steps_used, result.changes_used, result.total_reward
            );
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            out_dir,
            check,
        } => {
            let config = load_config(&common)?;
            let model = load_model(&checkpoint.unwrap_or_else(|| config.paths.checkpoint.clone()), &config)?;
            let dataset = dataset.unwrap_or_else(|| config.paths.dataset.clone());
            let target = target_rtg(&config, None, &dataset)?;
            let out_dir = out_dir.unwrap_or_else(|| config.paths.eval_dir.clone());
            let out = cmd_eval(&config, &model, target, &out_dir)?;
            println!("method,change_fraction,success_rate,solution_length,total_reward,steps,changes");
            for s in &out.summary {
                println!(
                    "{},{},{:.3},{},{},{},{}",
                    s.method,
                    s.change_fraction,
                    s.success_rate_mean,
                    fmt_opt(s.solution_length),
                    fmt_opt(s.total_reward),
                    fmt_opt(s.steps),
                    fmt_opt(s.changes)
                );
            }
            let mut failed = Vec::new();
            for c in &out.checks {
                let verdict = if c.pass { "PASS" } else { "FAIL" };
                eprintln!("{verdict} {} = {} (threshold {})", c.name, fmt_opt(c.value), c.threshold);
                if !c.pass {
                    failed.push(c.name);
                }
            }
            if check && !failed.is_empty() {
                return Err(CliError::Failed(format!("thresholds missed: {}", failed.join(", "))));
            }
        }
        Command::Solve { map, node_limit } => {
            let map = read_map(&map)?;
            let out = solve_astar(&map, node_limit).map_err(|e| match e {
                SolverError::MapTooLarge(_) => CliError::Dimension(e.to_string()),
                other => CliError::Failed(other.to_string()),
            })?;
            println!("{}", out.result);
        }
        Command::Render { map } => {
            println!("{}", read_map(&map)?.render_ascii());
        }
        Command::InspectCheckpoint { checkpoint } => {
            let mut f = BufReader::new(File::open(&checkpoint).map_err(|e| io_err(&checkpoint, e))?);
            let header = pcgpt_tensor::read_header(&mut f).map_err(|e| io_err(&checkpoint, e))?;
            let text = serde_json::to_string_pretty(&header).expect("header serializes");
            println!("{text}");
        }
    }
    Ok(())
}

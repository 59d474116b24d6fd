use std::path::{Path, PathBuf};

use pcgpt_core::dataset::DatasetConfig;
use pcgpt_core::eval::EvalConfig;
use pcgpt_core::generation::DecodeMode;
use pcgpt_core::model::ModelConfig;
use pcgpt_core::training::TrainConfig;
use pcgpt_core::{GoalSpec, RewardWeights, TileProbs};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentConfig {
    pub width: usize,
    pub height: usize,
    pub tile_probs: TileProbs,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        EnvironmentConfig {
            width: 5,
            height: 5,
            tile_probs: TileProbs::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    /// Conditioning return; the dataset's best successful return when unset.
    pub target_rtg: Option<f64>,
    pub max_steps: usize,
    pub change_budget_fraction: f64,
    pub decode: DecodeMode,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            target_rtg: None,
            max_steps: 50,
            change_budget_fraction: 1.0,
            decode: DecodeMode::Greedy,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub generation: PathBuf,
    pub eval_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "out/dataset.jsonl".into(),
            checkpoint: "out/model.ckpt".into(),
            loss_log: "out/loss.csv".into(),
            generation: "out/generation.json".into(),
            eval_dir: "out/eval".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    /// Worker threads; 0 lets the runtime decide.
    pub workers: usize,
}

/// Whole-pipeline configuration. Relative paths resolve against the config
/// file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub environment: EnvironmentConfig,
    pub goal: GoalSpec,
    pub reward: RewardWeights,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub generation: GenerateConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
    pub runtime: RuntimeConfig,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = RunConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.paths.dataset,
            &mut config.paths.checkpoint,
            &mut config.paths.loss_log,
            &mut config.paths.generation,
            &mut config.paths.eval_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Replaces every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.master_seed = seed;
        self.model.init_seed = seed;
        self.training.seed = seed;
        self.generation.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let env = &self.environment;
        if env.width == 0 || env.height == 0 {
            return Err(invalid("environment dimensions must be positive"));
        }
        env.tile_probs.validate().map_err(|e| invalid(e.to_string()))?;
        self.reward.validate().map_err(|e| invalid(e.to_string()))?;
        if self.model.width != env.width || self.model.height != env.height {
            return Err(invalid(format!(
                "model vocabulary is {}x{} but the environment is {}x{}",
                self.model.width, self.model.height, env.width, env.height
            )));
        }
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        self.training.validate().map_err(invalid)?;
        let d = &self.dataset;
        if d.epsilons.is_empty() || d.epsilons.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(invalid("dataset epsilons must be a non-empty list in [0, 1]"));
        }
        if d.max_steps == 0 {
            return Err(invalid("dataset max_steps must be positive"));
        }
        let g = &self.generation;
        if g.max_steps == 0 || !(0.0..=1.0).contains(&g.change_budget_fraction) {
            return Err(invalid("generation needs max_steps >= 1 and a fraction in [0, 1]"));
        }
        if let DecodeMode::Sample { temperature } = g.decode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(invalid("sampling temperature must be positive"));
            }
        }
        if g.target_rtg.is_some_and(|r| !r.is_finite()) {
            return Err(invalid("target_rtg must be finite"));
        }
        let e = &self.eval;
        if e.n_groups == 0 || !e.pool_size.is_multiple_of(e.n_groups) {
            return Err(invalid("eval pool_size must be a positive multiple of n_groups"));
        }
        if e.fractions.is_empty() || e.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(invalid("eval fractions must be a non-empty list in [0, 1]"));
        }
        if e.max_steps == 0 || !(0.0..=1.0).contains(&e.behavior_epsilon) {
            return Err(invalid("eval needs max_steps >= 1 and behavior_epsilon in [0, 1]"));
        }
        Ok(())
    }
}

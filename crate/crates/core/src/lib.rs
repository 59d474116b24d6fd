//! Procedural Sokoban level generation with a return-conditioned transformer
//! trained on offline level-editing trajectories.

pub mod dataset;
pub mod env;
pub mod eval;
pub mod generation;
pub mod model;
pub mod reward;
pub mod solver;
pub mod training;

pub use env::{EditAction, GoalSpec, LevelMap, MapStats, Tile, TileProbs};
pub use reward::RewardWeights;
pub use solver::SolveResult;

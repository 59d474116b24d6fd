//! The level-editing environment: a grid of tiles that is modified one cell
//! at a time, plus the structural analysis used to score and gate levels.

use std::collections::VecDeque;
use std::fmt;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::solver::{self, SolveResult};

pub const DEFAULT_WIDTH: usize = 5;
pub const DEFAULT_HEIGHT: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("tile probabilities must be non-negative and sum to 1, got {0:?}")]
    InvalidProbabilities([f64; 5]),
    #[error("location ({x}, {y}) is outside a {width}x{height} map")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("tile code {0} is not in 0..5")]
    InvalidTileCode(i64),
    #[error("expected {expected} tiles, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unknown map glyph {0:?}")]
    InvalidGlyph(char),
    #[error("ragged ascii map: row {row} has {got} glyphs, expected {expected}")]
    RaggedRows {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("map dimensions must be positive")]
    EmptyMap,
}

/// One grid cell. The integer codes are shared by the dataset files, the
/// checkpoint vocabulary and the model heads, so they must never be reordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tile {
    Empty = 0,
    Wall = 1,
    Player = 2,
    Box = 3,
    Target = 4,
}

impl Tile {
    pub const COUNT: usize = 5;
    pub const ALL: [Tile; 5] = [Tile::Empty, Tile::Wall, Tile::Player, Tile::Box, Tile::Target];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Result<Tile, EnvError> {
        match code {
            0 => Ok(Tile::Empty),
            1 => Ok(Tile::Wall),
            2 => Ok(Tile::Player),
            3 => Ok(Tile::Box),
            4 => Ok(Tile::Target),
            other => Err(EnvError::InvalidTileCode(other)),
        }
    }

    pub fn glyph(self) -> char {
        match self {
            Tile::Empty => '.',
            Tile::Wall => '#',
            Tile::Player => '@',
            Tile::Box => '$',
            Tile::Target => '*',
        }
    }

    pub fn from_glyph(c: char) -> Result<Tile, EnvError> {
        match c {
            '.' => Ok(Tile::Empty),
            '#' => Ok(Tile::Wall),
            '@' => Ok(Tile::Player),
            '$' => Ok(Tile::Box),
            '*' => Ok(Tile::Target),
            other => Err(EnvError::InvalidGlyph(other)),
        }
    }
}

/// Probabilities for drawing each tile, indexed by tile code.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TileProbs(pub [f64; 5]);

impl Default for TileProbs {
    fn default() -> Self {
        TileProbs([0.55, 0.25, 0.05, 0.075, 0.075])
    }
}

impl TileProbs {
    pub fn validate(&self) -> Result<(), EnvError> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(EnvError::InvalidProbabilities(self.0));
        }
        Ok(())
    }
}

/// A single-tile edit: write `item` at column `x`, row `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditAction {
    pub item: Tile,
    pub x: usize,
    pub y: usize,
}

impl EditAction {
    pub fn new(item: Tile, x: usize, y: usize) -> Self {
        EditAction { item, x, y }
    }
}

/// Row-major tile grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LevelMap {
    width: usize,
    height: usize,
    tiles: Vec<Tile>,
}

impl LevelMap {
    pub fn filled(width: usize, height: usize, tile: Tile) -> Self {
        LevelMap {
            width,
            height,
            tiles: vec![tile; width * height],
        }
    }

    pub fn from_tiles(width: usize, height: usize, tiles: Vec<Tile>) -> Result<Self, EnvError> {
        if width == 0 || height == 0 {
            return Err(EnvError::EmptyMap);
        }
        if tiles.len() != width * height {
            return Err(EnvError::LengthMismatch {
                expected: width * height,
                got: tiles.len(),
            });
        }
        Ok(LevelMap {
            width,
            height,
            tiles,
        })
    }

    /// Draws every cell independently from `probs`. Pure in `(seed, probs)`.
    pub fn random(
        width: usize,
        height: usize,
        seed: u64,
        probs: &TileProbs,
    ) -> Result<Self, EnvError> {
        probs.validate()?;
        if width == 0 || height == 0 {
            return Err(EnvError::EmptyMap);
        }
        let dist = WeightedIndex::new(probs.0).map_err(|_| EnvError::InvalidProbabilities(probs.0))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tiles = (0..width * height)
            .map(|_| Tile::ALL[dist.sample(&mut rng)])
            .collect();
        Ok(LevelMap {
            width,
            height,
            tiles,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn in_bounds(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Option<Tile> {
        self.in_bounds(x, y).then(|| self.tiles[self.index(x, y)])
    }

    pub fn set(&mut self, x: usize, y: usize, tile: Tile) -> Result<(), EnvError> {
        self.check_bounds(x, y)?;
        let i = self.index(x, y);
        self.tiles[i] = tile;
        Ok(())
    }

    fn check_bounds(&self, x: usize, y: usize) -> Result<(), EnvError> {
        if !self.in_bounds(x, y) {
            return Err(EnvError::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Returns the edited copy and whether the cell actually changed. An edit
    /// writing the tile already present is a no-op (`changed == false`).
    pub fn apply_edit(&self, action: EditAction) -> Result<(LevelMap, bool), EnvError> {
        self.check_bounds(action.x, action.y)?;
        let i = self.index(action.x, action.y);
        let changed = self.tiles[i] != action.item;
        let mut next = self.clone();
        next.tiles[i] = action.item;
        Ok((next, changed))
    }

    pub fn count(&self, tile: Tile) -> usize {
        self.tiles.iter().filter(|t| **t == tile).count()
    }

    /// Number of 4-connected components of non-wall cells.
    pub fn region_count(&self) -> usize {
        let mut seen = vec![false; self.tiles.len()];
        let mut queue = VecDeque::new();
        let mut regions = 0;
        for start in 0..self.tiles.len() {
            if seen[start] || self.tiles[start] == Tile::Wall {
                continue;
            }
            regions += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(cell) = queue.pop_front() {
                let (x, y) = (cell % self.width, cell / self.width);
                for (nx, ny) in self.neighbours(x, y) {
                    let n = self.index(nx, ny);
                    if !seen[n] && self.tiles[n] != Tile::Wall {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        regions
    }

    fn neighbours(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let candidates = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        candidates
            .into_iter()
            .filter(move |(nx, ny)| self.in_bounds(*nx, *ny))
    }

    pub fn encode_int_grid(&self) -> Vec<u8> {
        self.tiles.iter().map(|t| t.code()).collect()
    }

    pub fn decode_int_grid(codes: &[i64], width: usize, height: usize) -> Result<Self, EnvError> {
        if codes.len() != width * height {
            return Err(EnvError::LengthMismatch {
                expected: width * height,
                got: codes.len(),
            });
        }
        let tiles = codes
            .iter()
            .map(|c| Tile::from_code(*c))
            .collect::<Result<Vec<_>, _>>()?;
        LevelMap::from_tiles(width, height, tiles)
    }

    pub fn render_ascii(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for (i, row) in self.tiles.chunks(self.width).enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.extend(row.iter().map(|t| t.glyph()));
        }
        out
    }

    pub fn parse_ascii(text: &str) -> Result<Self, EnvError> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let width = rows.first().map(|r| r.chars().count()).unwrap_or(0);
        let mut tiles = Vec::with_capacity(width * rows.len());
        for (row, line) in rows.iter().enumerate() {
            let got = line.chars().count();
            if got != width {
                return Err(EnvError::RaggedRows {
                    row,
                    got,
                    expected: width,
                });
            }
            for c in line.chars() {
                tiles.push(Tile::from_glyph(c)?);
            }
        }
        LevelMap::from_tiles(width, rows.len(), tiles)
    }
}

impl fmt::Display for LevelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_ascii())
    }
}

/// Stopping criteria for a finished level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalSpec {
    /// Minimum optimal solution length, in player moves.
    pub min_solution_length: usize,
    pub solver_node_limit: usize,
    pub require_single_region: bool,
}

impl Default for GoalSpec {
    fn default() -> Self {
        GoalSpec {
            min_solution_length: 18,
            solver_node_limit: 5000,
            require_single_region: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapStats {
    pub player_count: usize,
    pub box_count: usize,
    pub target_count: usize,
    pub region_count: usize,
    pub solution: SolveResult,
}

impl MapStats {
    /// Whether the solver is worth running: one player, balanced boxes and
    /// targets, and a single connected floor.
    pub fn solver_prerequisites(&self) -> bool {
        self.player_count == 1
            && self.box_count >= 1
            && self.box_count == self.target_count
            && self.region_count == 1
    }

    pub fn solution_length(&self) -> Option<usize> {
        self.solution.solved_length()
    }
}

/// Counts the structural features of `map`; the solver is only invoked when
/// [`MapStats::solver_prerequisites`] hold.
pub fn map_stats(map: &LevelMap, goal: &GoalSpec) -> MapStats {
    let mut counts = [0usize; Tile::COUNT];
    for t in map.tiles() {
        counts[t.code() as usize] += 1;
    }
    let mut stats = MapStats {
        player_count: counts[Tile::Player as usize],
        box_count: counts[Tile::Box as usize],
        target_count: counts[Tile::Target as usize],
        region_count: map.region_count(),
        solution: SolveResult::NotAttempted,
    };
    if stats.solver_prerequisites() {
        // Prerequisites guarantee exactly one player, so the only possible
        // error is a grid too large for the packed search state.
        stats.solution = solver::solve_astar(map, goal.solver_node_limit)
            .map(|s| s.result)
            .unwrap_or(SolveResult::NotAttempted);
    }
    stats
}

pub fn is_goal(stats: &MapStats, goal: &GoalSpec) -> bool {
    stats.player_count == 1
        && stats.box_count >= 1
        && stats.box_count == stats.target_count
        && (!goal.require_single_region || stats.region_count == 1)
        && matches!(stats.solution, SolveResult::Solved(n) if n >= goal.min_solution_length)
}

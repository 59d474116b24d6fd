//! Sokoban solvability under a node budget.
//!
//! Both searches count *expanded* (dequeued) states against the budget and
//! measure solution length in player moves, pushes included. Search states
//! pack the box set into a bitmask, so a board may hold at most 128 cells.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::env::{LevelMap, Tile};

pub const MAX_CELLS: usize = 128;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SolverError {
    #[error("a solvable map needs exactly one player, found {0}")]
    PlayerCount(usize),
    #[error("map has {0} cells, the solver supports at most {MAX_CELLS}")]
    MapTooLarge(usize),
    #[error("invalid play state: {0}")]
    InvalidState(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolveResult {
    Solved(usize),
    Unsolvable,
    BudgetExhausted,
    NotAttempted,
}

impl SolveResult {
    pub fn solved_length(&self) -> Option<usize> {
        match self {
            SolveResult::Solved(n) => Some(*n),
            _ => None,
        }
    }
}

impl std::fmt::Display for SolveResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveResult::Solved(n) => write!(f, "Solved({n})"),
            SolveResult::Unsolvable => f.write_str("Unsolvable"),
            SolveResult::BudgetExhausted => f.write_str("BudgetExhausted"),
            SolveResult::NotAttempted => f.write_str("NotAttempted"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
}

impl Move {
    /// Successor generation order.
    pub const ALL: [Move; 4] = [Move::Up, Move::Down, Move::Left, Move::Right];

    pub fn glyph(self) -> char {
        match self {
            Move::Up => 'U',
            Move::Down => 'D',
            Move::Left => 'L',
            Move::Right => 'R',
        }
    }

    pub fn from_glyph(c: char) -> Option<Move> {
        match c {
            'U' => Some(Move::Up),
            'D' => Some(Move::Down),
            'L' => Some(Move::Left),
            'R' => Some(Move::Right),
            _ => None,
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Move::Up => (0, -1),
            Move::Down => (0, 1),
            Move::Left => (-1, 0),
            Move::Right => (1, 0),
        }
    }
}

pub fn witness_string(moves: &[Move]) -> String {
    moves.iter().map(|m| m.glyph()).collect()
}

/// Player position plus the box set in canonical (row-major sorted) order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PlayState {
    pub player: (usize, usize),
    pub boxes: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Packed {
    player: u8,
    boxes: u128,
}

/// Static layout of a level: walls, targets and a neighbour table.
#[derive(Clone, Debug)]
pub struct Board {
    width: usize,
    height: usize,
    walls: u128,
    targets: u128,
    /// `neighbours[cell][move]`, `None` when leaving the grid or hitting a wall.
    neighbours: Vec<[Option<u8>; 4]>,
    /// Manhattan distance from each cell to its nearest target.
    target_distance: Vec<u32>,
}

impl Board {
    pub fn new(map: &LevelMap) -> Result<Self, SolverError> {
        let cells = map.len();
        if cells > MAX_CELLS {
            return Err(SolverError::MapTooLarge(cells));
        }
        let (width, height) = (map.width(), map.height());
        let mut walls = 0u128;
        let mut targets = 0u128;
        for (i, t) in map.tiles().iter().enumerate() {
            match t {
                Tile::Wall => walls |= 1 << i,
                Tile::Target => targets |= 1 << i,
                _ => {}
            }
        }
        let target_cells: Vec<(usize, usize)> = (0..cells)
            .filter(|i| targets >> i & 1 == 1)
            .map(|i| (i % width, i / width))
            .collect();
        let mut neighbours = Vec::with_capacity(cells);
        let mut target_distance = Vec::with_capacity(cells);
        for i in 0..cells {
            let (x, y) = (i % width, i / width);
            let mut row = [None; 4];
            for (slot, mv) in Move::ALL.iter().enumerate() {
                let (dx, dy) = mv.delta();
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                    let n = ny as usize * width + nx as usize;
                    if walls >> n & 1 == 0 {
                        row[slot] = Some(n as u8);
                    }
                }
            }
            neighbours.push(row);
            let d = target_cells
                .iter()
                .map(|(tx, ty)| (tx.abs_diff(x) + ty.abs_diff(y)) as u32)
                .min()
                .unwrap_or(0);
            target_distance.push(d);
        }
        Ok(Board {
            width,
            height,
            walls,
            targets,
            neighbours,
            target_distance,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn pack(&self, state: &PlayState) -> Result<Packed, SolverError> {
        let cell = |(x, y): (usize, usize)| -> Result<usize, SolverError> {
            if x >= self.width || y >= self.height {
                return Err(SolverError::InvalidState("position out of bounds"));
            }
            let i = y * self.width + x;
            if self.walls >> i & 1 == 1 {
                return Err(SolverError::InvalidState("position on a wall"));
            }
            Ok(i)
        };
        let player = cell(state.player)?;
        let mut boxes = 0u128;
        for b in &state.boxes {
            let i = cell(*b)?;
            if i == player || boxes >> i & 1 == 1 {
                return Err(SolverError::InvalidState("overlapping boxes or player"));
            }
            boxes |= 1 << i;
        }
        Ok(Packed {
            player: player as u8,
            boxes,
        })
    }

    fn unpack(&self, p: Packed) -> PlayState {
        let at = |i: usize| (i % self.width, i / self.width);
        PlayState {
            player: at(p.player as usize),
            boxes: (0..self.width * self.height)
                .filter(|i| p.boxes >> i & 1 == 1)
                .map(at)
                .collect(),
        }
    }

    fn is_goal(&self, p: Packed) -> bool {
        p.boxes & !self.targets == 0
    }

    fn heuristic(&self, p: Packed) -> u32 {
        let mut boxes = p.boxes;
        let mut h = 0;
        while boxes != 0 {
            let i = boxes.trailing_zeros() as usize;
            h += self.target_distance[i];
            boxes &= boxes - 1;
        }
        h
    }

    fn step(&self, p: Packed, slot: usize) -> Option<Packed> {
        let next = self.neighbours[p.player as usize][slot]?;
        let bit = 1u128 << next;
        if p.boxes & bit == 0 {
            return Some(Packed {
                player: next,
                boxes: p.boxes,
            });
        }
        let beyond = self.neighbours[next as usize][slot]?;
        let beyond_bit = 1u128 << beyond;
        if p.boxes & beyond_bit != 0 {
            return None;
        }
        Some(Packed {
            player: next,
            boxes: (p.boxes & !bit) | beyond_bit,
        })
    }

    /// Legal moves from `state` in U, D, L, R order.
    pub fn successors(&self, state: &PlayState) -> Result<Vec<(PlayState, Move)>, SolverError> {
        let p = self.pack(state)?;
        Ok(Move::ALL
            .iter()
            .enumerate()
            .filter_map(|(slot, mv)| self.step(p, slot).map(|n| (self.unpack(n), *mv)))
            .collect())
    }

    /// Plays `moves` from `start`; `None` if some move is illegal.
    pub fn replay(&self, start: &PlayState, moves: &[Move]) -> Result<Option<PlayState>, SolverError> {
        let mut p = self.pack(start)?;
        for mv in moves {
            let slot = Move::ALL.iter().position(|m| m == mv).unwrap_or(0);
            match self.step(p, slot) {
                Some(n) => p = n,
                None => return Ok(None),
            }
        }
        Ok(Some(self.unpack(p)))
    }

    pub fn is_solved(&self, state: &PlayState) -> Result<bool, SolverError> {
        Ok(self.is_goal(self.pack(state)?))
    }
}

/// Result of one search, with the move sequence when solved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SolveOutcome {
    pub result: SolveResult,
    pub witness: Option<Vec<Move>>,
    pub expanded: usize,
}

/// Extracts the player and boxes of a map.
pub fn initial_state(map: &LevelMap) -> Result<(PlayState, Vec<(usize, usize)>), SolverError> {
    let players = map.count(Tile::Player);
    if players != 1 {
        return Err(SolverError::PlayerCount(players));
    }
    let w = map.width();
    let mut player = (0, 0);
    let mut boxes = Vec::new();
    let mut targets = Vec::new();
    for (i, t) in map.tiles().iter().enumerate() {
        let pos = (i % w, i / w);
        match t {
            Tile::Player => player = pos,
            Tile::Box => boxes.push(pos),
            Tile::Target => targets.push(pos),
            _ => {}
        }
    }
    Ok((PlayState { player, boxes }, targets))
}

pub fn successors(state: &PlayState, map: &LevelMap) -> Result<Vec<(PlayState, Move)>, SolverError> {
    Board::new(map)?.successors(state)
}

pub fn solve_bfs(map: &LevelMap, node_limit: usize) -> Result<SolveOutcome, SolverError> {
    let (start, _) = initial_state(map)?;
    let board = Board::new(map)?;
    bfs_from(&board, &start, node_limit)
}

pub fn solve_astar(map: &LevelMap, node_limit: usize) -> Result<SolveOutcome, SolverError> {
    let (start, _) = initial_state(map)?;
    let board = Board::new(map)?;
    astar_from(&board, &start, node_limit)
}

struct Arena {
    nodes: Vec<(Packed, u32, Option<Move>)>,
}

impl Arena {
    fn push(&mut self, p: Packed, parent: u32, mv: Option<Move>) -> u32 {
        self.nodes.push((p, parent, mv));
        (self.nodes.len() - 1) as u32
    }

    fn witness(&self, mut id: u32) -> Vec<Move> {
        let mut moves = Vec::new();
        while let (_, parent, Some(mv)) = self.nodes[id as usize] {
            moves.push(mv);
            id = parent;
        }
        moves.reverse();
        moves
    }
}

pub fn bfs_from(board: &Board, start: &PlayState, node_limit: usize) -> Result<SolveOutcome, SolverError> {
    let root = board.pack(start)?;
    let mut arena = Arena { nodes: Vec::new() };
    let mut seen: FxHashMap<Packed, ()> = FxHashMap::default();
    let mut queue = VecDeque::new();
    let mut depth = vec![0u32];
    queue.push_back(arena.push(root, 0, None));
    seen.insert(root, ());
    let mut expanded = 0;
    while let Some(id) = queue.pop_front() {
        if expanded >= node_limit {
            return Ok(budget_exhausted(expanded));
        }
        expanded += 1;
        let p = arena.nodes[id as usize].0;
        if board.is_goal(p) {
            return Ok(SolveOutcome {
                result: SolveResult::Solved(depth[id as usize] as usize),
                witness: Some(arena.witness(id)),
                expanded,
            });
        }
        for (slot, mv) in Move::ALL.iter().enumerate() {
            if let Some(next) = board.step(p, slot) {
                if seen.insert(next, ()).is_none() {
                    let child = arena.push(next, id, Some(*mv));
                    depth.push(depth[id as usize] + 1);
                    queue.push_back(child);
                }
            }
        }
    }
    Ok(SolveOutcome {
        result: SolveResult::Unsolvable,
        witness: None,
        expanded,
    })
}

/// Best-first search on `g + h`; ties prefer lower `h`, then insertion order.
pub fn astar_from(board: &Board, start: &PlayState, node_limit: usize) -> Result<SolveOutcome, SolverError> {
    let root = board.pack(start)?;
    let mut arena = Arena { nodes: Vec::new() };
    let mut best_g: FxHashMap<Packed, u32> = FxHashMap::default();
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    let root_id = arena.push(root, 0, None);
    best_g.insert(root, 0);
    open.push(Reverse((board.heuristic(root), board.heuristic(root), seq, 0u32, root_id)));
    let mut expanded = 0;
    while let Some(Reverse((_, _, _, g, id))) = open.pop() {
        let p = arena.nodes[id as usize].0;
        if best_g.get(&p).is_some_and(|best| *best < g) {
            continue;
        }
        if expanded >= node_limit {
            return Ok(budget_exhausted(expanded));
        }
        expanded += 1;
        if board.is_goal(p) {
            return Ok(SolveOutcome {
                result: SolveResult::Solved(g as usize),
                witness: Some(arena.witness(id)),
                expanded,
            });
        }
        for (slot, mv) in Move::ALL.iter().enumerate() {
            let Some(next) = board.step(p, slot) else {
                continue;
            };
            let ng = g + 1;
            match best_g.get(&next) {
                Some(old) if *old <= ng => continue,
                _ => {}
            }
            best_g.insert(next, ng);
            let h = board.heuristic(next);
            seq += 1;
            let child = arena.push(next, id, Some(*mv));
            open.push(Reverse((ng + h, h, seq, ng, child)));
        }
    }
    Ok(SolveOutcome {
        result: SolveResult::Unsolvable,
        witness: None,
        expanded,
    })
}

fn budget_exhausted(expanded: usize) -> SolveOutcome {
    SolveOutcome {
        result: SolveResult::BudgetExhausted,
        witness: None,
        expanded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(text: &str) -> LevelMap {
        LevelMap::parse_ascii(text).unwrap()
    }

    fn push1() -> LevelMap {
        map(".....\n.....\n@$*..\n.....\n.....")
    }

    #[test]
    fn initial_state_extraction() {
        let m = map("@....\n.$...\n.....\n.....\n.....");
        let (s, targets) = initial_state(&m).unwrap();
        assert_eq!(
            s,
            PlayState {
                player: (0, 0),
                boxes: vec![(1, 1)]
            }
        );
        assert!(targets.is_empty());
        assert_eq!(
            initial_state(&map("@...@\n.....\n.....\n.....\n.....")),
            Err(SolverError::PlayerCount(2))
        );
        let (s, _) = initial_state(&map("@....\n.....\n.....\n.....\n.....")).unwrap();
        assert!(s.boxes.is_empty());
    }

    #[test]
    fn successor_rules() {
        let open = map(".....\n.....\n..@..\n.....\n.....");
        let (s, _) = initial_state(&open).unwrap();
        let succ = successors(&s, &open).unwrap();
        assert_eq!(
            succ.iter().map(|(_, m)| *m).collect::<Vec<_>>(),
            Move::ALL.to_vec()
        );

        let blocked = map(".....\n.....\n.@$#.\n.....\n.....");
        let (s, _) = initial_state(&blocked).unwrap();
        let moves: Vec<Move> = successors(&s, &blocked).unwrap().into_iter().map(|(_, m)| m).collect();
        assert!(!moves.contains(&Move::Right));
        assert_eq!(moves.len(), 3);

        let pushable = map(".....\n.....\n.@$..\n.....\n.....");
        let (s, _) = initial_state(&pushable).unwrap();
        let (pushed, _) = successors(&s, &pushable)
            .unwrap()
            .into_iter()
            .find(|(_, m)| *m == Move::Right)
            .unwrap();
        assert_eq!(pushed.player, (2, 2));
        assert_eq!(pushed.boxes, vec![(3, 2)]);
    }

    #[test]
    fn single_push() {
        assert_eq!(solve_bfs(&push1(), 5000).unwrap().result, SolveResult::Solved(1));
        let astar = solve_astar(&push1(), 5000).unwrap();
        assert_eq!(astar.result, SolveResult::Solved(1));
        assert_eq!(astar.witness, Some(vec![Move::Right]));
    }

    #[test]
    fn corner_deadlock_is_unsolvable() {
        let m = map("$....\n.....\n..@..\n.....\n....*");
        assert_eq!(solve_bfs(&m, 5000).unwrap().result, SolveResult::Unsolvable);
        assert_eq!(solve_astar(&m, 5000).unwrap().result, SolveResult::Unsolvable);
    }

    #[test]
    fn goal_at_root() {
        let m = map(".....\n.....\n@.*..\n.....\n.....");
        let board = Board::new(&m).unwrap();
        let start = PlayState {
            player: (0, 2),
            boxes: vec![(2, 2)],
        };
        let out = astar_from(&board, &start, 10).unwrap();
        assert_eq!(out.result, SolveResult::Solved(0));
        assert_eq!(out.witness, Some(vec![]));
        assert_eq!(bfs_from(&board, &start, 10).unwrap().result, SolveResult::Solved(0));
    }

    #[test]
    fn budget_is_respected() {
        let m = map("@....\n.....\n..$..\n.....\n....*");
        let full = solve_bfs(&m, 5000).unwrap();
        assert!(matches!(full.result, SolveResult::Solved(n) if n > 8));
        for limit in [1, 2, 5, 8] {
            for out in [solve_bfs(&m, limit).unwrap(), solve_astar(&m, limit).unwrap()] {
                assert!(out.expanded <= limit);
                assert_eq!(out.result, SolveResult::BudgetExhausted);
            }
        }
    }

    #[test]
    fn seeded_fixture_matches_between_searches() {
        // BFS supplies the oracle length for this fixture.
        let m = map("@.#..\n.$..#\n..#*.\n.$...\n*....");
        let bfs = solve_bfs(&m, 5000).unwrap();
        let astar = solve_astar(&m, 5000).unwrap();
        assert!(matches!(bfs.result, SolveResult::Solved(_)));
        assert_eq!(bfs.result, astar.result);
        let board = Board::new(&m).unwrap();
        let (start, _) = initial_state(&m).unwrap();
        for out in [bfs, astar] {
            let end = board.replay(&start, out.witness.as_ref().unwrap()).unwrap().unwrap();
            assert!(board.is_solved(&end).unwrap());
        }
    }

    #[test]
    fn determinism() {
        let m = map("@.#..\n.$..#\n..#*.\n.$...\n*....");
        assert_eq!(solve_astar(&m, 5000).unwrap(), solve_astar(&m, 5000).unwrap());
        assert_eq!(solve_bfs(&m, 5000).unwrap(), solve_bfs(&m, 5000).unwrap());
    }
}

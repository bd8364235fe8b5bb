//! Predator/prey chasing game on an `n x n` grid.
//!
//! Team `f` (predators) and team `g` (preys) each control `m` players. Every
//! player moves one cell per step (or stays); moves off the grid leave the
//! player in place and cells may hold several players. The predators receive
//! `-max_j min_i d(f_i, g_j)` with `d` the L1 distance. There is no capture.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::game::{Game, Side};

pub const MOVE_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChaseConfig {
    pub grid_n: usize,
    pub team_size: usize,
    pub discount: f64,
}

impl Default for ChaseConfig {
    fn default() -> Self {
        ChaseConfig { grid_n: 3, team_size: 1, discount: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Move {
    pub const ALL: [Move; MOVE_COUNT] = [Move::Up, Move::Down, Move::Left, Move::Right, Move::Stay];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Move> {
        Move::ALL.get(i).copied().ok_or_else(|| Error::Input(format!("move index {i} out of range")))
    }

    pub fn delta(self) -> (i64, i64) {
        match self {
            Move::Up => (0, 1),
            Move::Down => (0, -1),
            Move::Left => (-1, 0),
            Move::Right => (1, 0),
            Move::Stay => (0, 0),
        }
    }

    /// The two moves at +/-90 degrees; empty for `Stay`.
    pub fn perpendicular(self) -> [Move; 2] {
        match self {
            Move::Up | Move::Down => [Move::Left, Move::Right],
            Move::Left | Move::Right => [Move::Up, Move::Down],
            Move::Stay => [Move::Stay, Move::Stay],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub x: i64,
    pub y: i64,
}

impl Cell {
    pub fn new(x: i64, y: i64) -> Cell {
        Cell { x, y }
    }

    pub fn l1(self, other: Cell) -> i64 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

/// Positions of all players: `m` predators then `m` preys.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChaseState {
    pub predators: Vec<Cell>,
    pub preys: Vec<Cell>,
}

impl ChaseState {
    /// The raw coordinate vector `(x_f1, y_f1, .., x_g1, y_g1, ..)`.
    pub fn coordinates(&self) -> Vec<i64> {
        self.predators.iter().chain(&self.preys).flat_map(|c| [c.x, c.y]).collect()
    }

    pub fn from_coordinates(coords: &[i64]) -> Result<ChaseState> {
        if coords.is_empty() || !coords.len().is_multiple_of(4) {
            return input_err(format!("expected 4m coordinates, got {}", coords.len()));
        }
        let cells: Vec<Cell> = coords.chunks(2).map(|c| Cell::new(c[0], c[1])).collect();
        let m = cells.len() / 2;
        Ok(ChaseState { predators: cells[..m].to_vec(), preys: cells[m..].to_vec() })
    }
}

#[derive(Debug, Clone)]
pub struct ChaseGame {
    cfg: ChaseConfig,
    state_count: u64,
    action_count: usize,
    // weight of coordinate k in the flat index, most significant first
    weights: Vec<u64>,
}

impl ChaseGame {
    pub fn new(cfg: ChaseConfig) -> Result<ChaseGame> {
        if cfg.grid_n < 2 || cfg.team_size < 1 {
            return Err(Error::Config(format!("need grid_n >= 2 and team_size >= 1, got {cfg:?}")));
        }
        if !(0.0..1.0).contains(&cfg.discount) {
            return Err(Error::Config(format!("discount {} outside [0, 1)", cfg.discount)));
        }
        let coords = 4 * cfg.team_size;
        let n = cfg.grid_n as u64;
        let state_count = (0..coords)
            .try_fold(1u64, |acc, _| acc.checked_mul(n))
            .filter(|&c| c <= usize::MAX as u64)
            .ok_or_else(|| Error::Config("state space does not fit in an index".into()))?;
        let action_count = (0..cfg.team_size)
            .try_fold(1usize, |acc, _| acc.checked_mul(MOVE_COUNT))
            .ok_or_else(|| Error::Config("joint action space too large".into()))?;
        let mut weights = vec![1u64; coords];
        for k in (0..coords.saturating_sub(1)).rev() {
            weights[k] = weights[k + 1] * n;
        }
        Ok(ChaseGame { cfg, state_count, action_count, weights })
    }

    pub fn config(&self) -> &ChaseConfig {
        &self.cfg
    }

    pub fn team_size(&self) -> usize {
        self.cfg.team_size
    }

    pub fn grid_n(&self) -> usize {
        self.cfg.grid_n
    }

    fn check_state(&self, s: &ChaseState) -> Result<()> {
        let m = self.cfg.team_size;
        let n = self.cfg.grid_n as i64;
        if s.predators.len() != m || s.preys.len() != m {
            return input_err(format!("expected {m} players per team"));
        }
        if s.predators.iter().chain(&s.preys).any(|c| c.x < 0 || c.y < 0 || c.x >= n || c.y >= n) {
            return input_err("player outside the grid");
        }
        Ok(())
    }

    pub fn encode(&self, s: &ChaseState) -> Result<usize> {
        self.check_state(s)?;
        let idx = s
            .coordinates()
            .iter()
            .zip(&self.weights)
            .map(|(&c, &w)| c as u64 * w)
            .sum::<u64>();
        Ok(idx as usize)
    }

    pub fn decode(&self, index: usize) -> Result<ChaseState> {
        if index as u64 >= self.state_count {
            return input_err(format!("state {index} out of range 0..{}", self.state_count));
        }
        ChaseState::from_coordinates(&self.coordinate_digits(index))
    }

    fn coordinate_digits(&self, index: usize) -> Vec<i64> {
        let n = self.cfg.grid_n as u64;
        self.weights.iter().map(|&w| ((index as u64 / w) % n) as i64).collect()
    }

    pub fn joint_action(&self, moves: &[Move]) -> Result<usize> {
        if moves.len() != self.cfg.team_size {
            return input_err(format!("expected {} moves", self.cfg.team_size));
        }
        Ok(moves.iter().fold(0, |acc, m| acc * MOVE_COUNT + m.index()))
    }

    pub fn split_action(&self, action: usize) -> Result<Vec<Move>> {
        if action >= self.action_count {
            return input_err(format!("joint action {action} out of range 0..{}", self.action_count));
        }
        let m = self.cfg.team_size;
        let mut moves = vec![Move::Stay; m];
        let mut a = action;
        for slot in moves.iter_mut().rev() {
            *slot = Move::ALL[a % MOVE_COUNT];
            a /= MOVE_COUNT;
        }
        Ok(moves)
    }

    /// L1 distance between predator `i` and prey `j` (0-based).
    pub fn pair_distance(&self, s: &ChaseState, i: usize, j: usize) -> Result<i64> {
        match (s.predators.get(i), s.preys.get(j)) {
            (Some(f), Some(g)) => Ok(f.l1(*g)),
            _ => input_err(format!("pair ({i}, {j}) out of range for team size {}", s.predators.len())),
        }
    }

    /// `D(s) = max_j min_i d_ij`.
    pub fn max_min_distance(s: &ChaseState) -> i64 {
        s.preys
            .iter()
            .map(|g| s.predators.iter().map(|f| f.l1(*g)).min().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    /// `R(s) = -D(s)`.
    pub fn chase_reward(s: &ChaseState) -> f64 {
        -(Self::max_min_distance(s) as f64)
    }

    /// Average over all predator/prey pairs of their L1 distance.
    pub fn mean_distance(s: &ChaseState) -> f64 {
        let m = s.predators.len();
        let total: i64 = s.predators.iter().flat_map(|f| s.preys.iter().map(move |g| f.l1(*g))).sum();
        total as f64 / (m * m) as f64
    }

    pub fn step(&self, s: &ChaseState, action_f: usize, action_g: usize) -> Result<ChaseState> {
        self.check_state(s)?;
        let mf = self.split_action(action_f)?;
        let mg = self.split_action(action_g)?;
        let n = self.cfg.grid_n as i64;
        let shift = |c: &Cell, mv: &Move| {
            let (dx, dy) = mv.delta();
            let (x, y) = (c.x + dx, c.y + dy);
            if x < 0 || y < 0 || x >= n || y >= n {
                *c
            } else {
                Cell::new(x, y)
            }
        };
        Ok(ChaseState {
            predators: s.predators.iter().zip(&mf).map(|(c, m)| shift(c, m)).collect(),
            preys: s.preys.iter().zip(&mg).map(|(c, m)| shift(c, m)).collect(),
        })
    }

    /// Coordinates followed by `(x_fi - x_gj, y_fi - y_gj)` for every pair,
    /// predator-major. Length `4m + 2m^2`.
    pub fn featurize(s: &ChaseState) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::feature_len(s.predators.len()));
        out.extend(s.coordinates().into_iter().map(|c| c as f64));
        for f in &s.predators {
            for g in &s.preys {
                out.push((f.x - g.x) as f64);
                out.push((f.y - g.y) as f64);
            }
        }
        out
    }

    pub fn feature_len(team_size: usize) -> usize {
        4 * team_size + 2 * team_size * team_size
    }

    /// All state indices, refusing when the space exceeds `cap`.
    pub fn enumerate_states(&self, cap: u64) -> Result<impl Iterator<Item = usize>> {
        if self.state_count > cap {
            return Err(Error::EnumerationCap { states: self.state_count, cap });
        }
        Ok(0..self.state_count as usize)
    }

    /// Uniform random placement of every player.
    pub fn random_chase_state<R: RngCore + ?Sized>(&self, rng: &mut R) -> ChaseState {
        let n = self.cfg.grid_n as i64;
        let mut cell = || Cell::new(rng.gen_range(0..n), rng.gen_range(0..n));
        let m = self.cfg.team_size;
        let predators = (0..m).map(|_| cell()).collect();
        let preys = (0..m).map(|_| cell()).collect();
        ChaseState { predators, preys }
    }

    fn step_index(&self, index: usize, action_f: usize, action_g: usize) -> usize {
        let n = self.cfg.grid_n as u64;
        let m = self.cfg.team_size;
        let mut idx = index as u64;
        let mut apply = |player: usize, mv: usize| {
            let (dx, dy) = Move::ALL[mv].delta();
            for (k, d) in [(2 * player, dx), (2 * player + 1, dy)] {
                if d == 0 {
                    continue;
                }
                let w = self.weights[k];
                let digit = (idx / w) % n;
                if d > 0 && digit + 1 < n {
                    idx += w;
                } else if d < 0 && digit > 0 {
                    idx -= w;
                }
            }
        };
        let (mut af, mut ag) = (action_f, action_g);
        for p in (0..m).rev() {
            apply(p, af % MOVE_COUNT);
            apply(m + p, ag % MOVE_COUNT);
            af /= MOVE_COUNT;
            ag /= MOVE_COUNT;
        }
        idx as usize
    }
}

impl Game for ChaseGame {
    fn state_count(&self) -> u64 {
        self.state_count
    }

    fn action_count(&self, _side: Side) -> usize {
        self.action_count
    }

    fn discount(&self) -> f64 {
        self.cfg.discount
    }

    fn reward(&self, state: usize) -> f64 {
        let s = ChaseState::from_coordinates(&self.coordinate_digits(state)).expect("4m coordinates");
        Self::chase_reward(&s)
    }

    fn transitions(&self, state: usize, af: usize, ag: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        out.push((self.step_index(state, af, ag), 1.0));
    }

    fn sample_next(&self, state: usize, af: usize, ag: usize, _rng: &mut dyn RngCore) -> usize {
        self.step_index(state, af, ag)
    }

    fn feature_dim(&self) -> usize {
        Self::feature_len(self.cfg.team_size)
    }

    fn write_features(&self, state: usize, out: &mut [f64]) {
        let s = ChaseState::from_coordinates(&self.coordinate_digits(state)).expect("4m coordinates");
        out.copy_from_slice(&Self::featurize(&s));
    }

    fn random_state(&self, rng: &mut dyn RngCore) -> usize {
        let s = self.random_chase_state(rng);
        self.encode(&s).expect("random placement stays on the grid")
    }
}

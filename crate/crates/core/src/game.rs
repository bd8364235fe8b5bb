//! The zero-sum discounted stochastic game abstraction.
//!
//! States are opaque indices `0..state_count()`. Agent `f` maximizes the
//! discounted sum of `reward(s)`, agent `g` minimizes it. Every game also
//! exposes a feature encoder so the same definition feeds both the tabular
//! solvers and the neural models.

use ndarray::Array2;
use rand::{Rng, RngCore};

use crate::error::{input_err, Error, Result};
use crate::rng::sample_index;

/// Largest state space the tabular routines will enumerate.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Which agent a quantity belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// The maximizer (predators in the chasing game).
    F,
    /// The minimizer (preys).
    G,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::F => Side::G,
            Side::G => Side::F,
        }
    }

    /// `+1` for f, `-1` for g: the sign with which the side receives `R`.
    pub fn reward_sign(self) -> f64 {
        match self {
            Side::F => 1.0,
            Side::G => -1.0,
        }
    }
}

/// A discounted zero-sum stochastic game `<S, A^f, A^g, R, P, gamma>`.
pub trait Game: Sync {
    fn state_count(&self) -> u64;
    fn action_count(&self, side: Side) -> usize;
    fn discount(&self) -> f64;
    fn reward(&self, state: usize) -> f64;

    /// Push the successor distribution of `(state, af, ag)` onto `out`
    /// (cleared first) as `(next_state, probability)` pairs.
    fn transitions(&self, state: usize, af: usize, ag: usize, out: &mut Vec<(usize, f64)>);

    fn sample_next(&self, state: usize, af: usize, ag: usize, rng: &mut dyn RngCore) -> usize {
        let mut succ = Vec::new();
        self.transitions(state, af, ag, &mut succ);
        let probs: Vec<f64> = succ.iter().map(|&(_, p)| p).collect();
        succ[sample_index(&probs, rng)].0
    }

    fn feature_dim(&self) -> usize;
    fn write_features(&self, state: usize, out: &mut [f64]);

    /// Starting-state distribution: uniform over all states.
    fn random_state(&self, rng: &mut dyn RngCore) -> usize {
        rng.gen_range(0..self.state_count()) as usize
    }
}

pub(crate) fn check_state<G: Game + ?Sized>(game: &G, state: usize) -> Result<()> {
    if (state as u64) < game.state_count() {
        Ok(())
    } else {
        input_err(format!("state {state} out of range 0..{}", game.state_count()))
    }
}

/// Stack the feature vectors of `states` into a `states.len() x feature_dim` matrix.
pub fn feature_matrix<G: Game + ?Sized>(game: &G, states: &[usize]) -> Array2<f64> {
    let dim = game.feature_dim();
    let mut out = Array2::zeros((states.len(), dim));
    for (row, &s) in out.rows_mut().into_iter().zip(states) {
        let slice = row.into_slice().expect("rows of a standard-layout array are contiguous");
        game.write_features(s, slice);
    }
    out
}

/// A stationary Markov strategy.
pub trait Policy {
    fn action_count(&self) -> usize;
    /// Write `pi(. | state)` into `out` (length `action_count()`).
    fn write_probs(&self, state: usize, out: &mut [f64]);
}

/// A plain `T`-step rollout: `states` has `T+1` entries, actions `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions_f: Vec<usize>,
    pub actions_g: Vec<usize>,
    /// `rewards[t] == reward(states[t])`, `T+1` entries.
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions_f.len()
    }
}

/// Roll `f` against `g` from `s0` for `horizon` steps.
pub fn sample_trajectory<G: Game + ?Sized, R: RngCore>(
    game: &G,
    f: &dyn Policy,
    g: &dyn Policy,
    s0: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    check_state(game, s0)?;
    if f.action_count() != game.action_count(Side::F) || g.action_count() != game.action_count(Side::G) {
        return input_err("policy action counts do not match the game");
    }
    let mut pf = vec![0.0; f.action_count()];
    let mut pg = vec![0.0; g.action_count()];
    let mut traj = Trajectory {
        states: Vec::with_capacity(horizon + 1),
        actions_f: Vec::with_capacity(horizon),
        actions_g: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon + 1),
    };
    let mut s = s0;
    traj.states.push(s);
    traj.rewards.push(game.reward(s));
    for _ in 0..horizon {
        f.write_probs(s, &mut pf);
        g.write_probs(s, &mut pg);
        let af = sample_index(&pf, rng);
        let ag = sample_index(&pg, rng);
        s = game.sample_next(s, af, ag, rng);
        traj.actions_f.push(af);
        traj.actions_g.push(ag);
        traj.states.push(s);
        traj.rewards.push(game.reward(s));
    }
    Ok(traj)
}

/// `sum_{t=0..T} gamma^t R(s_t)`.
pub fn discounted_return(traj: &Trajectory, discount: f64) -> f64 {
    discounted_sum(&traj.rewards, discount)
}

pub fn discounted_sum(rewards: &[f64], discount: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + discount * acc)
}

/// Batch mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub count: usize,
}

impl ValueEstimate {
    pub fn from_samples(samples: &[f64]) -> ValueEstimate {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let standard_error = if n > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        ValueEstimate { mean, standard_error, count: n }
    }
}

/// Monte-Carlo estimate of `v^{f,g}(s0)` truncated at `horizon`.
pub fn estimate_value<G: Game + ?Sized, R: RngCore>(
    game: &G,
    f: &dyn Policy,
    g: &dyn Policy,
    s0: usize,
    horizon: usize,
    n_rollouts: usize,
    rng: &mut R,
) -> Result<ValueEstimate> {
    if n_rollouts == 0 {
        return input_err("n_rollouts must be at least 1");
    }
    let returns = (0..n_rollouts)
        .map(|_| sample_trajectory(game, f, g, s0, horizon, rng).map(|t| discounted_return(&t, game.discount())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ValueEstimate::from_samples(&returns))
}

/// A game given by explicit tables, with one-hot state features.
#[derive(Debug, Clone)]
pub struct TableGame {
    n_states: usize,
    n_f: usize,
    n_g: usize,
    discount: f64,
    rewards: Vec<f64>,
    // indexed by (s * n_f + af) * n_g + ag
    transitions: Vec<Vec<(usize, f64)>>,
}

impl TableGame {
    /// `transition(s, af, ag)` returns the successor distribution.
    pub fn new(
        rewards: Vec<f64>,
        n_f: usize,
        n_g: usize,
        discount: f64,
        transition: impl Fn(usize, usize, usize) -> Vec<(usize, f64)>,
    ) -> Result<TableGame> {
        let n_states = rewards.len();
        if n_states == 0 || n_f == 0 || n_g == 0 {
            return input_err("a game needs at least one state and one action per side");
        }
        if !(0.0..1.0).contains(&discount) {
            return input_err(format!("discount {discount} outside [0, 1)"));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("non-finite reward".into()));
        }
        let mut transitions = Vec::with_capacity(n_states * n_f * n_g);
        for s in 0..n_states {
            for af in 0..n_f {
                for ag in 0..n_g {
                    let dist = transition(s, af, ag);
                    let total: f64 = dist.iter().map(|&(_, p)| p).sum();
                    if (total - 1.0).abs() > 1e-9 || dist.iter().any(|&(t, p)| t >= n_states || p < 0.0) {
                        return input_err(format!("bad transition distribution at ({s}, {af}, {ag})"));
                    }
                    transitions.push(dist);
                }
            }
        }
        Ok(TableGame { n_states, n_f, n_g, discount, rewards, transitions })
    }

    /// A random game: uniform rewards in `[-1, 1]` and one to three successors
    /// per joint action with random weights.
    pub fn random<R: RngCore>(n_states: usize, n_f: usize, n_g: usize, discount: f64, rng: &mut R) -> Result<TableGame> {
        let rewards: Vec<f64> = (0..n_states).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut table = Vec::with_capacity(n_states * n_f * n_g);
        for _ in 0..n_states * n_f * n_g {
            let k = rng.gen_range(1..=3.min(n_states));
            let mut dist: Vec<(usize, f64)> = (0..k).map(|_| (rng.gen_range(0..n_states), rng.gen_range(0.1..1.0))).collect();
            let total: f64 = dist.iter().map(|d| d.1).sum();
            dist.iter_mut().for_each(|d| d.1 /= total);
            table.push(dist);
        }
        TableGame::new(rewards, n_f, n_g, discount, |s, af, ag| table[(s * n_f + af) * n_g + ag].clone())
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }
}

impl Game for TableGame {
    fn state_count(&self) -> u64 {
        self.n_states as u64
    }

    fn action_count(&self, side: Side) -> usize {
        match side {
            Side::F => self.n_f,
            Side::G => self.n_g,
        }
    }

    fn discount(&self) -> f64 {
        self.discount
    }

    fn reward(&self, state: usize) -> f64 {
        self.rewards[state]
    }

    fn transitions(&self, state: usize, af: usize, ag: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        out.extend_from_slice(&self.transitions[(state * self.n_f + af) * self.n_g + ag]);
    }

    fn feature_dim(&self) -> usize {
        self.n_states
    }

    fn write_features(&self, state: usize, out: &mut [f64]) {
        out.fill(0.0);
        out[state] = 1.0;
    }
}

/// The dynamics of `base` with its reward replaced by a table.
pub struct WithRewards<'a, G: ?Sized> {
    base: &'a G,
    rewards: Vec<f64>,
}

impl<'a, G: Game + ?Sized> WithRewards<'a, G> {
    pub fn new(base: &'a G, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() as u64 != base.state_count() {
            return input_err("reward table length differs from the state count");
        }
        Ok(WithRewards { base, rewards })
    }
}

impl<G: Game + ?Sized> Game for WithRewards<'_, G> {
    fn state_count(&self) -> u64 {
        self.base.state_count()
    }
    fn action_count(&self, side: Side) -> usize {
        self.base.action_count(side)
    }
    fn discount(&self) -> f64 {
        self.base.discount()
    }
    fn reward(&self, state: usize) -> f64 {
        self.rewards[state]
    }
    fn transitions(&self, state: usize, af: usize, ag: usize, out: &mut Vec<(usize, f64)>) {
        self.base.transitions(state, af, ag, out)
    }
    fn sample_next(&self, state: usize, af: usize, ag: usize, rng: &mut dyn RngCore) -> usize {
        self.base.sample_next(state, af, ag, rng)
    }
    fn feature_dim(&self) -> usize {
        self.base.feature_dim()
    }
    fn write_features(&self, state: usize, out: &mut [f64]) {
        self.base.write_features(state, out)
    }
    fn random_state(&self, rng: &mut dyn RngCore) -> usize {
        self.base.random_state(rng)
    }
}

/// Always plays one fixed action.
#[derive(Debug, Clone, Copy)]
pub struct PurePolicy {
    pub action: usize,
    pub action_count: usize,
}

impl Policy for PurePolicy {
    fn action_count(&self) -> usize {
        self.action_count
    }
    fn write_probs(&self, _state: usize, out: &mut [f64]) {
        out.fill(0.0);
        out[self.action] = 1.0;
    }
}

/// Uniform over all actions.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy(pub usize);

impl Policy for UniformPolicy {
    fn action_count(&self) -> usize {
        self.0
    }
    fn write_probs(&self, _state: usize, out: &mut [f64]) {
        out.fill(1.0 / self.0 as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Two states that swap every step regardless of actions.
    fn two_cycle(r0: f64, r1: f64, discount: f64) -> TableGame {
        TableGame::new(vec![r0, r1], 2, 2, discount, |s, _, _| vec![(1 - s, 1.0)]).unwrap()
    }

    #[test]
    fn zero_horizon_is_the_start_state() {
        let game = two_cycle(3.0, 1.0, 0.9);
        let f = PurePolicy { action: 0, action_count: 2 };
        let traj = sample_trajectory(&game, &f, &f, 0, 0, &mut RngStream::new(0, 0).rng()).unwrap();
        assert_eq!(traj.states, vec![0]);
        assert_eq!(traj.rewards, vec![3.0]);
        assert!(traj.actions_f.is_empty() && traj.actions_g.is_empty());
        assert_eq!(discounted_return(&traj, 0.9), 3.0);
    }

    #[test]
    fn cyclic_chain_alternates() {
        let game = two_cycle(0.0, 1.0, 0.9);
        let f = UniformPolicy(2);
        let traj = sample_trajectory(&game, &f, &f, 0, 5, &mut RngStream::new(4, 0).rng()).unwrap();
        assert_eq!(traj.states, vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(traj.horizon(), 5);
        for (s, r) in traj.states.iter().zip(&traj.rewards) {
            assert_eq!(*r, game.reward(*s));
        }
    }

    #[test]
    fn deterministic_game_ignores_seed() {
        let game = TableGame::new(vec![0.0, 1.0, 2.0], 2, 2, 0.9, |s, af, ag| vec![((s + af + 2 * ag) % 3, 1.0)]).unwrap();
        let f = PurePolicy { action: 1, action_count: 2 };
        let g = PurePolicy { action: 0, action_count: 2 };
        let a = sample_trajectory(&game, &f, &g, 2, 7, &mut RngStream::new(1, 0).rng()).unwrap();
        let b = sample_trajectory(&game, &f, &g, 2, 7, &mut RngStream::new(99, 5).rng()).unwrap();
        assert_eq!(a, b);
        let est = estimate_value(&game, &f, &g, 2, 7, 16, &mut RngStream::new(3, 0).rng()).unwrap();
        assert!(est.standard_error < 1e-12);
    }

    #[test]
    fn invalid_start_state_is_rejected() {
        let game = two_cycle(0.0, 0.0, 0.5);
        let f = UniformPolicy(2);
        let err = sample_trajectory(&game, &f, &f, 2, 3, &mut RngStream::new(0, 0).rng());
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn discounted_return_examples() {
        let traj = |rewards: Vec<f64>| Trajectory {
            states: vec![0; rewards.len()],
            actions_f: vec![0; rewards.len() - 1],
            actions_g: vec![0; rewards.len() - 1],
            rewards,
        };
        assert_eq!(discounted_return(&traj(vec![0.0, 0.0, 0.0]), 0.9), 0.0);
        assert!((discounted_return(&traj(vec![1.0, 1.0]), 0.9) - 1.9).abs() < 1e-15);
        assert_eq!(discounted_return(&traj(vec![-4.5]), 0.9), -4.5);
    }

    #[test]
    fn zero_reward_estimate_is_zero() {
        let game = TableGame::random(4, 2, 3, 0.9, &mut RngStream::new(5, 0).rng()).unwrap();
        let zero = WithRewards::new(&game, vec![0.0; 4]).unwrap();
        let est = estimate_value(&zero, &UniformPolicy(2), &UniformPolicy(3), 1, 20, 10, &mut RngStream::new(1, 1).rng()).unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn truncation_bound_constant_reward() {
        // Constant reward c: the tail beyond T is exactly c * gamma^{T+1} / (1 - gamma).
        let (c, gamma) = (-2.5f64, 0.9f64);
        for horizon in [0usize, 1, 5, 50] {
            let partial = discounted_sum(&vec![c; horizon + 1], gamma);
            let full = c / (1.0 - gamma);
            let bound = gamma.powi(horizon as i32 + 1) * c.abs() / (1.0 - gamma);
            assert!((partial - full).abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn table_game_rejects_bad_rows() {
        assert!(TableGame::new(vec![0.0], 1, 1, 0.9, |_, _, _| vec![(0, 0.7)]).is_err());
        assert!(TableGame::new(vec![0.0], 1, 1, 1.0, |_, _, _| vec![(0, 1.0)]).is_err());
    }
}

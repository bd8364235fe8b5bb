//! Evaluation metrics for recovered rewards and policies.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::error::{input_err, Result};
use crate::game::{feature_matrix, Game, Side, ValueEstimate};
use crate::mlp::Mlp;
use crate::nash::RewardSource;
use crate::oracle::{TabularModel, TabularPolicy};
use crate::rng::sample_index;

/// Probabilities below this are clamped before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

/// Sample Pearson correlation. Errors when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return input_err("pearson needs two equal-length samples of at least 2");
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return input_err("correlation undefined for a constant sample");
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Uniformly random states, with repetition.
pub fn sample_states<G: Game + ?Sized>(game: &G, n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    (0..n).map(|_| game.random_state(rng)).collect()
}

/// Correlation of a recovered reward with the game's own reward at `states`.
pub fn reward_correlation<G: Game + ?Sized>(game: &G, reward: &dyn RewardSource, states: &[usize]) -> Result<f64> {
    let recovered = reward.rewards(states)?;
    let truth: Vec<f64> = states.iter().map(|&s| game.reward(s)).collect();
    pearson(&recovered, &truth)
}

/// `KL(p || q)` of two distributions; the flag reports a clamped `q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> (f64, bool) {
    let mut clamped = false;
    let mut kl = 0.0;
    for (&pa, &qa) in p.iter().zip(q) {
        if pa <= 0.0 {
            continue;
        }
        let qa = if qa < KL_FLOOR {
            clamped = true;
            KL_FLOOR
        } else {
            qa
        };
        kl += pa * (pa / qa).ln();
    }
    (kl.max(0.0), clamped)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub kl: ValueEstimate,
    /// Some state needed the probability floor.
    pub clamped: bool,
}

/// Mean and standard error over `states` of `KL(p(.|s) || q(.|s))`.
pub fn policy_kl<G: Game + ?Sized>(game: &G, p: &Mlp, q: &Mlp, states: &[usize]) -> Result<KlEstimate> {
    if p.output_dim() != q.output_dim() {
        return input_err("policies have different action counts");
    }
    if states.is_empty() {
        return input_err("no states to compare policies on");
    }
    let x = feature_matrix(game, states);
    let (pp, qq) = (p.forward(x.view())?, q.forward(x.view())?);
    let mut clamped = false;
    let per_state: Vec<f64> = pp
        .rows()
        .into_iter()
        .zip(qq.rows())
        .map(|(a, b)| {
            let (kl, c) = kl_divergence(a.as_slice().expect("contiguous"), b.as_slice().expect("contiguous"));
            clamped |= c;
            kl
        })
        .collect();
    Ok(KlEstimate { kl: ValueEstimate::from_samples(&per_state), clamped })
}

/// Percentage loss of a policy's value against the Nash opponent relative
/// to the Nash value `v_ref`. Positive means worse than equilibrium for the
/// policy's own side.
pub fn deterioration(v_ref: f64, v_policy: f64, side: Side) -> f64 {
    let loss = match side {
        Side::F => v_ref - v_policy,
        Side::G => v_policy - v_ref,
    };
    100.0 * loss / v_ref.abs()
}

/// [`deterioration`] with exact values: `policy` plays `side` against the
/// oracle Nash `opponent`, both averaged uniformly over states.
pub fn deterioration_exact(model: &TabularModel, v_star: f64, policy: &TabularPolicy, side: Side, opponent: &TabularPolicy) -> Result<f64> {
    let v = match side {
        Side::F => model.policy_eval(policy, opponent, 1e-10)?,
        Side::G => model.policy_eval(opponent, policy, 1e-10)?,
    };
    Ok(deterioration(v_star, v.mean(), side))
}

/// A policy taking part in a matchup.
#[derive(Debug, Clone, Copy)]
pub enum Actor<'a> {
    Net(&'a Mlp),
    Uniform(usize),
}

impl Actor<'_> {
    fn tabulate<G: Game + ?Sized>(&self, game: &G) -> Result<TabularPolicy> {
        match self {
            Actor::Net(net) => crate::nash::tabulate_policy(game, net),
            Actor::Uniform(n) => Ok(TabularPolicy::uniform(game.state_count() as usize, *n)),
        }
    }
}

/// Discounted returns `sum_{t=0..T} gamma^t R(s_t)` of one rollout per start.
pub fn rollout_returns<G: Game + ?Sized>(
    game: &G,
    rewards: &dyn RewardSource,
    f: Actor,
    g: Actor,
    starts: &[usize],
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut current = starts.to_vec();
    let mut returns = vec![0.0; starts.len()];
    let mut weight = 1.0;
    let probs = |actor: &Actor, x: &ndarray::Array2<f64>| -> Result<Option<ndarray::Array2<f64>>> {
        match actor {
            Actor::Net(net) => net.forward(x.view()).map(Some),
            Actor::Uniform(_) => Ok(None),
        }
    };
    let pick = |p: &Option<ndarray::Array2<f64>>, actor: &Actor, k: usize, rng: &mut ChaCha8Rng| match (p, actor) {
        (Some(p), _) => sample_index(p.row(k).as_slice().expect("contiguous"), rng),
        (None, Actor::Uniform(n)) => sample_index(&vec![1.0 / *n as f64; *n], rng),
        (None, Actor::Net(_)) => unreachable!("network actors always have probabilities"),
    };
    for t in 0..=horizon {
        let r = rewards.rewards(&current)?;
        returns.iter_mut().zip(&r).for_each(|(acc, r)| *acc += weight * r);
        if t == horizon {
            break;
        }
        weight *= game.discount();
        let x = feature_matrix(game, &current);
        let (pf, pg) = (probs(&f, &x)?, probs(&g, &x)?);
        for (k, s) in current.iter_mut().enumerate() {
            let af = pick(&pf, &f, k, rng);
            let ag = pick(&pg, &g, k, rng);
            *s = game.sample_next(*s, af, ag, rng);
        }
    }
    Ok(returns)
}

/// Column labels of the matchup table, in order.
pub const MATCHUP_COLUMNS: [&str; 5] = ["fA_gA", "fB_gA", "fR_gA", "fA_gB", "fA_gR"];

/// Values of the five pairings of method A against method B and a uniform
/// random player.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchupTable {
    pub sampled: Vec<ValueEstimate>,
    /// Uniform-over-states exact values when the game is enumerable.
    pub exact: Option<Vec<f64>>,
}

/// Paired evaluation: every pairing starts from the same states and replays
/// the same random stream.
#[allow(clippy::too_many_arguments)]
pub fn matchup<G: Game + ?Sized>(
    game: &G,
    rewards: &dyn RewardSource,
    a: (&Mlp, &Mlp),
    b: (&Mlp, &Mlp),
    starts: &[usize],
    horizon: usize,
    rng: &ChaCha8Rng,
    model: Option<&TabularModel>,
) -> Result<MatchupTable> {
    let rf = Actor::Uniform(game.action_count(Side::F));
    let rg = Actor::Uniform(game.action_count(Side::G));
    let (fa, ga) = (Actor::Net(a.0), Actor::Net(a.1));
    let (fb, gb) = (Actor::Net(b.0), Actor::Net(b.1));
    let pairs = [(fa, ga), (fb, ga), (rf, ga), (fa, gb), (fa, rg)];
    let mut sampled = Vec::with_capacity(pairs.len());
    for (f, g) in pairs {
        let returns = rollout_returns(game, rewards, f, g, starts, horizon, &mut rng.clone())?;
        sampled.push(ValueEstimate::from_samples(&returns));
    }
    let exact = match model {
        Some(model) => {
            let mut values = Vec::with_capacity(pairs.len());
            for (f, g) in pairs {
                values.push(model.policy_eval(&f.tabulate(game)?, &g.tabulate(game)?, 1e-10)?.mean());
            }
            Some(values)
        }
        None => None,
    };
    Ok(MatchupTable { sampled, exact })
}

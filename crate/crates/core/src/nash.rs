//! Adversarial actor-critic training towards one side's Nash strategy.
//!
//! A [`NashRun`] holds a learner policy (the side whose equilibrium strategy
//! is sought), a response policy trained to exploit it, two critics and a
//! frozen copy of all four networks that generates rollouts. Most iterations
//! improve the response; every `k_cycle` iterations a few update the learner.
//! [`NashTrainer`] drives two mirrored runs, one per side.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::game::{feature_matrix, Game, Side, ValueEstimate};
use crate::mlp::{Adam, AdamConfig, Head, Mlp};
use crate::oracle::{TabularModel, TabularPolicy};
use crate::rng::{sample_index, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NashConfig {
    pub horizon: usize,
    pub k_refresh: u64,
    pub gae_lambda: f64,
    pub k_cycle: u64,
    pub k_g: u64,
    /// Learning rate of the policy whose equilibrium is sought.
    pub lr_nash: f64,
    /// Learning rate of the exploiting opponent.
    pub lr_response: f64,
    pub lr_critic: f64,
    pub clip_epsilon: f64,
    pub batch_agents: usize,
    /// The first `warmup_len` iterations of every `warmup_period` only train
    /// the response side.
    pub warmup_len: u64,
    pub warmup_period: u64,
    pub total_iterations: u64,
    pub hidden: Vec<usize>,
    /// Metric-log cadence in iterations.
    pub log_every: u64,
    /// Trajectories per value estimate.
    pub eval_batch: usize,
    /// Exploitability is measured exactly when the game has at most this many
    /// states.
    pub oracle_state_cap: u64,
}

impl Default for NashConfig {
    fn default() -> Self {
        NashConfig {
            horizon: 10,
            k_refresh: 10,
            gae_lambda: 0.9,
            k_cycle: 100,
            k_g: 90,
            lr_nash: 1e-4,
            lr_response: 3e-4,
            lr_critic: 3e-4,
            clip_epsilon: 0.2,
            batch_agents: 64,
            warmup_len: 5_000,
            warmup_period: 50_000,
            total_iterations: 50_000,
            hidden: vec![256, 256],
            log_every: 1_000,
            eval_batch: 64,
            oracle_state_cap: 10_000,
        }
    }
}

impl NashConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(0 < self.k_g && self.k_g < self.k_cycle) {
            return bad("need 0 < k_g < k_cycle");
        }
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must lie in (0, 1]");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if self.horizon == 0 || self.k_refresh == 0 || self.batch_agents == 0 || self.eval_batch == 0 {
            return bad("horizon, k_refresh, batch_agents and eval_batch must be positive");
        }
        if self.warmup_period == 0 || self.warmup_len > self.warmup_period {
            return bad("need 0 < warmup_period and warmup_len <= warmup_period");
        }
        if self.log_every == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("log_every and hidden widths must be positive");
        }
        for lr in [self.lr_nash, self.lr_response, self.lr_critic] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad("learning rates must be finite and non-negative");
            }
        }
        Ok(())
    }

    /// Whether iteration `i` (1-based) trains the response side (and the
    /// critics) rather than the learner.
    pub fn is_response_step(&self, i: u64) -> bool {
        let in_warmup = (i - 1) % self.warmup_period < self.warmup_len;
        in_warmup || i % self.k_cycle <= self.k_g
    }
}

/// Per-state rewards for training: the game's own, or a learned model.
pub trait RewardSource {
    fn rewards(&self, states: &[usize]) -> Result<Vec<f64>>;
}

/// The game's built-in reward.
pub struct GameReward<'a, G: ?Sized>(pub &'a G);

impl<G: Game + ?Sized> RewardSource for GameReward<'_, G> {
    fn rewards(&self, states: &[usize]) -> Result<Vec<f64>> {
        Ok(states.iter().map(|&s| self.0.reward(s)).collect())
    }
}

/// `A_t = sum_k (gamma lambda)^k delta_{t+k}` with
/// `delta_t = sign * r_t + gamma v_{t+1} - v_t`, for `t < T = values.len() - 1`.
pub fn compute_gae(rewards: &[f64], values: &[f64], discount: f64, lambda: f64, sign: f64) -> Result<Vec<f64>> {
    if values.is_empty() || rewards.len() + 1 < values.len() {
        return input_err(format!("GAE needs T+1 values and T rewards, got {} and {}", values.len(), rewards.len()));
    }
    let horizon = values.len() - 1;
    let mut adv = vec![0.0; horizon];
    let mut acc = 0.0;
    for t in (0..horizon).rev() {
        let delta = sign * rewards[t] + discount * values[t + 1] - values[t];
        acc = delta + discount * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Clipped surrogate `-scale * sum_t min(r_t A_t, clip(r_t, 1-eps, 1+eps) A_t)`
/// where `r_t = pi(a_t | s_t) / old_probs[t]`. Step `t` reads feature row
/// `rows[t]` of `x`, so repeated states share one forward pass.
#[allow(clippy::too_many_arguments)]
pub fn ppo_policy_loss(
    net: &Mlp,
    x: &Array2<f64>,
    rows: &[usize],
    actions: &[usize],
    old_probs: &[f64],
    advantages: &[f64],
    clip_epsilon: f64,
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = rows.len();
    if actions.len() != n || old_probs.len() != n || advantages.len() != n {
        return input_err("PPO step arrays differ in length");
    }
    if let Some(p) = old_probs.iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::Numeric(format!("rollout probability {p} for a taken action")));
    }
    net.loss_grad(x.view(), |probs| {
        let mut grad = Array2::zeros(probs.dim());
        let mut loss = 0.0;
        for t in 0..n {
            let (row, a, adv) = (rows[t], actions[t], advantages[t]);
            let ratio = probs[[row, a]] / old_probs[t];
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv;
            if unclipped <= clipped {
                loss -= scale * unclipped;
                grad[[row, a]] -= scale * adv / old_probs[t];
            } else {
                loss -= scale * clipped;
            }
        }
        Ok((loss, grad))
    })
}

/// `scale * sum_t (v(s_t) - targets[t])^2`, with the same row indirection as
/// [`ppo_policy_loss`].
pub fn critic_loss(net: &Mlp, x: &Array2<f64>, rows: &[usize], targets: &[f64], scale: f64) -> Result<(f64, Vec<f64>)> {
    if rows.len() != targets.len() {
        return input_err("critic rows and targets differ in length");
    }
    net.loss_grad(x.view(), |out| {
        let mut grad = Array2::zeros(out.dim());
        let mut loss = 0.0;
        for (&row, &target) in rows.iter().zip(targets) {
            let err = out[[row, 0]] - target;
            loss += scale * err * err;
            grad[[row, 0]] += 2.0 * scale * err;
        }
        Ok((loss, grad))
    })
}

fn side_index(side: Side) -> usize {
    match side {
        Side::F => 0,
        Side::G => 1,
    }
}

/// Target-network outputs for one state, valid until the next refresh.
#[derive(Debug, Clone)]
struct CachedState {
    probs: [Vec<f64>; 2],
    values: [f64; 2],
    reward: f64,
}

/// Networks for a policy pair and its critics.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub policies: [Mlp; 2],
    pub critics: [Mlp; 2],
}

impl Networks {
    pub fn new<G: Game + ?Sized>(game: &G, hidden: &[usize], rng: &mut impl Rng) -> Result<Networks> {
        let d = game.feature_dim();
        let pf = Mlp::new(d, hidden, game.action_count(Side::F), Head::Softmax, rng)?;
        let pg = Mlp::new(d, hidden, game.action_count(Side::G), Head::Softmax, rng)?;
        let vf = Mlp::new(d, hidden, 1, Head::Scalar, rng)?;
        let vg = Mlp::new(d, hidden, 1, Head::Scalar, rng)?;
        Ok(Networks { policies: [pf, pg], critics: [vf, vg] })
    }

    pub fn policy(&self, side: Side) -> &Mlp {
        &self.policies[side_index(side)]
    }

    pub fn critic(&self, side: Side) -> &Mlp {
        &self.critics[side_index(side)]
    }
}

/// Whether an iteration trained the response side or the learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Response,
    Learner,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub kind: StepKind,
    pub policy_loss: f64,
    /// Combined loss of both critics on response steps.
    pub critic_loss: Option<f64>,
    pub refreshed: bool,
}

/// One mirrored half of the adversarial training.
#[derive(Debug, Clone)]
pub struct NashRun {
    learner: Side,
    cfg: NashConfig,
    pub online: Networks,
    pub target: Networks,
    policy_adam: [Adam; 2],
    critic_adam: [Adam; 2],
    cache: HashMap<usize, CachedState>,
}

/// Flattened rollout batch: `batch_agents * horizon` steps.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    /// Distinct visited states in first-visit order; step rows index into it.
    pub unique_states: Vec<usize>,
    pub rows: Vec<usize>,
    pub actions: [Vec<usize>; 2],
    pub old_probs: [Vec<f64>; 2],
    pub advantages: [Vec<f64>; 2],
    /// Critic regression targets `v_target(s_t) + A_t`.
    pub value_targets: [Vec<f64>; 2],
    /// Undiscounted mean reward per step, for logging.
    pub mean_reward: f64,
}

impl NashRun {
    pub fn new<G: Game + ?Sized>(game: &G, learner: Side, cfg: &NashConfig, rng: &mut impl Rng) -> Result<NashRun> {
        cfg.validate()?;
        let online = Networks::new(game, &cfg.hidden, rng)?;
        let lr = |side: Side| if side == learner { cfg.lr_nash } else { cfg.lr_response };
        let policy_adam = [
            Adam::for_net(AdamConfig::with_lr(lr(Side::F)), &online.policies[0]),
            Adam::for_net(AdamConfig::with_lr(lr(Side::G)), &online.policies[1]),
        ];
        let critic_adam = [
            Adam::for_net(AdamConfig::with_lr(cfg.lr_critic), &online.critics[0]),
            Adam::for_net(AdamConfig::with_lr(cfg.lr_critic), &online.critics[1]),
        ];
        Ok(NashRun { learner, cfg: cfg.clone(), target: online.clone(), online, policy_adam, critic_adam, cache: HashMap::new() })
    }

    pub fn learner(&self) -> Side {
        self.learner
    }

    pub fn config(&self) -> &NashConfig {
        &self.cfg
    }

    /// Copy online parameters into the targets.
    pub fn refresh_targets(&mut self) {
        self.target = self.online.clone();
        self.cache.clear();
    }

    /// Forget cached target outputs and rewards (call after the reward
    /// changes).
    pub fn invalidate_cache(&mut self) {
        self.cache.clear();
    }

    fn ensure_cached<G: Game + ?Sized>(&mut self, game: &G, rewards: &dyn RewardSource, states: &[usize]) -> Result<()> {
        let mut missing: Vec<usize> = Vec::new();
        for &s in states {
            if !self.cache.contains_key(&s) && !missing.contains(&s) {
                missing.push(s);
            }
        }
        if missing.is_empty() {
            return Ok(());
        }
        let x = feature_matrix(game, &missing);
        let pf = self.target.policies[0].forward(x.view())?;
        let pg = self.target.policies[1].forward(x.view())?;
        let vf = self.target.critics[0].forward_scalar(x.view())?;
        let vg = self.target.critics[1].forward_scalar(x.view())?;
        let r = rewards.rewards(&missing)?;
        for (k, &s) in missing.iter().enumerate() {
            if !r[k].is_finite() || !vf[k].is_finite() || !vg[k].is_finite() {
                return Err(Error::Numeric(format!("non-finite reward or value at state {s}")));
            }
            let entry = CachedState { probs: [pf.row(k).to_vec(), pg.row(k).to_vec()], values: [vf[k], vg[k]], reward: r[k] };
            self.cache.insert(s, entry);
        }
        Ok(())
    }

    /// Roll out the target policies from random starts and compute
    /// advantages and critic targets for both sides.
    pub fn rollout<G: Game + ?Sized>(&mut self, game: &G, rewards: &dyn RewardSource, rng: &mut ChaCha8Rng) -> Result<RolloutBatch> {
        let (b, horizon) = (self.cfg.batch_agents, self.cfg.horizon);
        let mut current: Vec<usize> = (0..b).map(|_| game.random_state(rng)).collect();
        let mut paths: Vec<Vec<usize>> = current.iter().map(|&s| vec![s]).collect();
        let mut acts: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; b];
        for _ in 0..horizon {
            self.ensure_cached(game, rewards, &current)?;
            for k in 0..b {
                let entry = &self.cache[&current[k]];
                let af = sample_index(&entry.probs[0], rng);
                let ag = sample_index(&entry.probs[1], rng);
                let next = game.sample_next(current[k], af, ag, rng);
                acts[k][0].push(af);
                acts[k][1].push(ag);
                paths[k].push(next);
                current[k] = next;
            }
        }
        self.ensure_cached(game, rewards, &current)?;

        let mut batch = RolloutBatch::default();
        let mut row_of: HashMap<usize, usize> = HashMap::new();
        let mut reward_total = 0.0;
        for k in 0..b {
            let path = &paths[k];
            let r: Vec<f64> = path.iter().map(|s| self.cache[s].reward).collect();
            reward_total += r[..horizon].iter().sum::<f64>();
            for side in [Side::F, Side::G] {
                let i = side_index(side);
                let values: Vec<f64> = path.iter().map(|s| self.cache[s].values[i]).collect();
                let adv = compute_gae(&r, &values, game.discount(), self.cfg.gae_lambda, side.reward_sign())?;
                for t in 0..horizon {
                    let s = path[t];
                    let a = acts[k][i][t];
                    batch.actions[i].push(a);
                    batch.old_probs[i].push(self.cache[&s].probs[i][a]);
                    batch.advantages[i].push(adv[t]);
                    batch.value_targets[i].push(values[t] + adv[t]);
                }
            }
            for &s in &path[..horizon] {
                let next_row = row_of.len();
                let row = *row_of.entry(s).or_insert_with(|| {
                    batch.unique_states.push(s);
                    next_row
                });
                batch.rows.push(row);
            }
        }
        batch.mean_reward = reward_total / (b * horizon) as f64;
        Ok(batch)
    }

    fn policy_step(&mut self, side: Side, batch: &RolloutBatch, x: &Array2<f64>) -> Result<f64> {
        let i = side_index(side);
        let scale = 1.0 / self.cfg.batch_agents as f64;
        let (loss, grads) = ppo_policy_loss(
            &self.online.policies[i],
            x,
            &batch.rows,
            &batch.actions[i],
            &batch.old_probs[i],
            &batch.advantages[i],
            self.cfg.clip_epsilon,
            scale,
        )?;
        self.policy_adam[i].step(self.online.policies[i].params_mut(), &grads)?;
        Ok(loss)
    }

    fn critic_step(&mut self, batch: &RolloutBatch, x: &Array2<f64>) -> Result<f64> {
        let scale = 1.0 / self.cfg.batch_agents as f64;
        let mut total = 0.0;
        for i in 0..2 {
            let (loss, grads) = critic_loss(&self.online.critics[i], x, &batch.rows, &batch.value_targets[i], scale)?;
            self.critic_adam[i].step(self.online.critics[i].params_mut(), &grads)?;
            total += loss;
        }
        Ok(total)
    }

    /// One iteration (1-based index `i`): rollout with the targets, then a
    /// response step (response policy and both critics) or a learner step,
    /// then a target refresh when `i % k_refresh == 0`.
    pub fn train_iteration<G: Game + ?Sized>(
        &mut self,
        game: &G,
        rewards: &dyn RewardSource,
        i: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<IterationStats> {
        if i == 0 {
            return input_err("iterations are numbered from 1");
        }
        let batch = self.rollout(game, rewards, rng)?;
        let x = feature_matrix(game, &batch.unique_states);
        let stats = if self.cfg.is_response_step(i) {
            let policy_loss = self.policy_step(self.learner.other(), &batch, &x)?;
            let critic = self.critic_step(&batch, &x)?;
            IterationStats { kind: StepKind::Response, policy_loss, critic_loss: Some(critic), refreshed: false }
        } else {
            let policy_loss = self.policy_step(self.learner, &batch, &x)?;
            IterationStats { kind: StepKind::Learner, policy_loss, critic_loss: None, refreshed: false }
        };
        let refreshed = i.is_multiple_of(self.cfg.k_refresh);
        if refreshed {
            self.refresh_targets();
        }
        Ok(IterationStats { refreshed, ..stats })
    }

    pub fn adam_states(&self) -> [&Adam; 4] {
        [&self.policy_adam[0], &self.policy_adam[1], &self.critic_adam[0], &self.critic_adam[1]]
    }
}

/// Mean discounted return `sum_{t=0..T} gamma^t R(s_t)` of `batch` rollouts of
/// two policy networks from uniformly random starts, stepped in lockstep.
#[allow(clippy::too_many_arguments)]
pub fn estimate_return<G: Game + ?Sized>(
    game: &G,
    rewards: &dyn RewardSource,
    f: &Mlp,
    g: &Mlp,
    horizon: usize,
    batch: usize,
    rng: &mut dyn RngCore,
) -> Result<ValueEstimate> {
    let starts: Vec<usize> = (0..batch).map(|_| game.random_state(rng)).collect();
    estimate_return_from(game, rewards, f, g, &starts, horizon, rng)
}

/// [`estimate_return`] from given starting states.
pub fn estimate_return_from<G: Game + ?Sized>(
    game: &G,
    rewards: &dyn RewardSource,
    f: &Mlp,
    g: &Mlp,
    starts: &[usize],
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<ValueEstimate> {
    let mut current = starts.to_vec();
    let mut returns = vec![0.0; starts.len()];
    let mut weight = 1.0;
    for t in 0..=horizon {
        let r = rewards.rewards(&current)?;
        returns.iter_mut().zip(&r).for_each(|(acc, r)| *acc += weight * r);
        if t == horizon {
            break;
        }
        weight *= game.discount();
        let x = feature_matrix(game, &current);
        let pf = f.forward(x.view())?;
        let pg = g.forward(x.view())?;
        for (k, s) in current.iter_mut().enumerate() {
            let af = sample_index(pf.row(k).as_slice().expect("contiguous"), rng);
            let ag = sample_index(pg.row(k).as_slice().expect("contiguous"), rng);
            *s = game.sample_next(*s, af, ag, rng);
        }
    }
    Ok(ValueEstimate::from_samples(&returns))
}

/// Tabulate a policy network over every state of an enumerable game.
pub fn tabulate_policy<G: Game + ?Sized>(game: &G, net: &Mlp) -> Result<TabularPolicy> {
    let n = game.state_count() as usize;
    let mut probs = Array2::zeros((n, net.output_dim()));
    for start in (0..n).step_by(4096) {
        let states: Vec<usize> = (start..(start + 4096).min(n)).collect();
        let out = net.forward(feature_matrix(game, &states).view())?;
        probs.slice_mut(ndarray::s![start..start + states.len(), ..]).assign(&out);
    }
    TabularPolicy::new(probs)
}

/// A policy network read through a game's features, one state at a time.
pub struct NetPolicy<'a, G: ?Sized> {
    pub net: &'a Mlp,
    pub game: &'a G,
}

impl<G: Game + ?Sized> crate::game::Policy for NetPolicy<'_, G> {
    fn action_count(&self) -> usize {
        self.net.output_dim()
    }

    fn write_probs(&self, state: usize, out: &mut [f64]) {
        let p = self.net.forward(feature_matrix(self.game, &[state]).view()).expect("features match the network");
        out.copy_from_slice(p.row(0).as_slice().expect("contiguous"));
    }
}

/// Memoized action distributions of a frozen policy network. Rollouts of a
/// fixed policy revisit the same states many times.
#[derive(Debug, Clone)]
pub struct PolicyCache<'a> {
    net: &'a Mlp,
    probs: HashMap<usize, Vec<f64>>,
}

impl<'a> PolicyCache<'a> {
    pub fn new(net: &'a Mlp) -> PolicyCache<'a> {
        PolicyCache { net, probs: HashMap::new() }
    }

    pub fn net(&self) -> &'a Mlp {
        self.net
    }

    /// Evaluate the network on whichever of `states` are not cached yet.
    pub fn prefetch<G: Game + ?Sized>(&mut self, game: &G, states: &[usize]) -> Result<()> {
        let mut missing: Vec<usize> = states.iter().copied().filter(|s| !self.probs.contains_key(s)).collect();
        missing.sort_unstable();
        missing.dedup();
        if missing.is_empty() {
            return Ok(());
        }
        let out = self.net.forward(feature_matrix(game, &missing).view())?;
        for (k, s) in missing.into_iter().enumerate() {
            self.probs.insert(s, out.row(k).to_vec());
        }
        Ok(())
    }

    /// Cached distribution at `state`; panics unless prefetched.
    pub fn probs(&self, state: usize) -> &[f64] {
        &self.probs[&state]
    }

    pub fn sample<G: Game + ?Sized>(&mut self, game: &G, state: usize, rng: &mut dyn RngCore) -> Result<usize> {
        self.prefetch(game, &[state])?;
        Ok(sample_index(self.probs(state), rng))
    }
}

/// The two value gaps used for the reward-step gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GapEstimate {
    /// Nash-approximate f against its trained adversary.
    pub v_f_gbest: ValueEstimate,
    /// Trained adversary of g against the Nash-approximate g.
    pub v_fbest_g: ValueEstimate,
}

impl GapEstimate {
    /// `v(f_best, g) - v(f, g_best)`; near zero when both sides are close to
    /// equilibrium.
    pub fn gap(&self) -> f64 {
        self.v_fbest_g.mean - self.v_f_gbest.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashLogRow {
    pub iteration: u64,
    pub v_fg: f64,
    pub v_f_gbest: f64,
    pub v_fbest_g: f64,
    pub exploitability: Option<f64>,
}

/// Two mirrored runs: one seeks f's equilibrium strategy, the other g's.
#[derive(Debug, Clone)]
pub struct NashTrainer {
    pub f_run: NashRun,
    pub g_run: NashRun,
    iteration: u64,
    f_rng: ChaCha8Rng,
    g_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
}

impl NashTrainer {
    pub fn new<G: Game + ?Sized>(game: &G, cfg: &NashConfig, stream: &RngStream) -> Result<NashTrainer> {
        let f_run = NashRun::new(game, Side::F, cfg, &mut stream.child(1).rng())?;
        let g_run = NashRun::new(game, Side::G, cfg, &mut stream.child(2).rng())?;
        Ok(NashTrainer {
            f_run,
            g_run,
            iteration: 0,
            f_rng: stream.child(3).rng(),
            g_rng: stream.child(4).rng(),
            eval_rng: stream.child(5).rng(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &NashConfig {
        self.f_run.config()
    }

    /// Nash-approximate f.
    pub fn f_policy(&self) -> &Mlp {
        self.f_run.online.policy(Side::F)
    }

    /// Nash-approximate g.
    pub fn g_policy(&self) -> &Mlp {
        self.g_run.online.policy(Side::G)
    }

    /// Trained adversary of `g_policy`.
    pub fn best_response_f(&self) -> &Mlp {
        self.g_run.online.policy(Side::F)
    }

    /// Trained adversary of `f_policy`.
    pub fn best_response_g(&self) -> &Mlp {
        self.f_run.online.policy(Side::G)
    }

    /// One iteration of each mirrored run.
    pub fn step<G: Game + ?Sized>(&mut self, game: &G, rewards: &dyn RewardSource) -> Result<(IterationStats, IterationStats)> {
        self.iteration += 1;
        let i = self.iteration;
        let a = self.f_run.train_iteration(game, rewards, i, &mut self.f_rng)?;
        let b = self.g_run.train_iteration(game, rewards, i, &mut self.g_rng)?;
        Ok((a, b))
    }

    pub fn invalidate_cache(&mut self) {
        self.f_run.invalidate_cache();
        self.g_run.invalidate_cache();
    }

    pub fn estimate_gap<G: Game + ?Sized>(&mut self, game: &G, rewards: &dyn RewardSource) -> Result<GapEstimate> {
        let (horizon, batch) = (self.config().horizon, self.config().eval_batch);
        let v_f_gbest = estimate_return(game, rewards, &self.f_run.online.policies[0], &self.f_run.online.policies[1], horizon, batch, &mut self.eval_rng)?;
        let v_fbest_g = estimate_return(game, rewards, &self.g_run.online.policies[0], &self.g_run.online.policies[1], horizon, batch, &mut self.eval_rng)?;
        Ok(GapEstimate { v_f_gbest, v_fbest_g })
    }

    /// Sampled values of the current pair and both adversaries, plus exact
    /// exploitability when `model` is supplied.
    pub fn log_row<G: Game + ?Sized>(&mut self, game: &G, rewards: &dyn RewardSource, model: Option<&TabularModel>) -> Result<NashLogRow> {
        let (horizon, batch) = (self.config().horizon, self.config().eval_batch);
        let v_fg = estimate_return(game, rewards, &self.f_run.online.policies[0], &self.g_run.online.policies[1], horizon, batch, &mut self.eval_rng)?;
        let gap = self.estimate_gap(game, rewards)?;
        let exploitability = match model {
            Some(model) => Some(self.exploitability(game, model)?),
            None => None,
        };
        Ok(NashLogRow {
            iteration: self.iteration,
            v_fg: v_fg.mean,
            v_f_gbest: gap.v_f_gbest.mean,
            v_fbest_g: gap.v_fbest_g.mean,
            exploitability,
        })
    }

    pub fn exploitability<G: Game + ?Sized>(&self, game: &G, model: &TabularModel) -> Result<f64> {
        let f = tabulate_policy(game, self.f_policy())?;
        let g = tabulate_policy(game, self.g_policy())?;
        model.exploitability(&f, &g)
    }
}

/// Outcome of [`solve_nash`].
#[derive(Debug, Clone)]
pub struct NashOutcome {
    pub trainer: NashTrainer,
    pub log: Vec<NashLogRow>,
}

/// Oracle model for exact exploitability, when the game is small enough.
pub fn oracle_model<G: Game + ?Sized>(game: &G, cfg: &NashConfig) -> Result<Option<TabularModel>> {
    if game.state_count() <= cfg.oracle_state_cap {
        Ok(Some(TabularModel::with_cap(game, cfg.oracle_state_cap)?))
    } else {
        Ok(None)
    }
}

/// Train both mirrored runs for `cfg.total_iterations`, logging every
/// `cfg.log_every` iterations (and at the end).
pub fn solve_nash<G: Game + ?Sized>(game: &G, rewards: &dyn RewardSource, cfg: &NashConfig, stream: &RngStream) -> Result<NashOutcome> {
    let mut trainer = NashTrainer::new(game, cfg, stream)?;
    let model = oracle_model(game, cfg)?;
    let log = run_nash(game, rewards, &mut trainer, model.as_ref())?;
    Ok(NashOutcome { trainer, log })
}

/// [`solve_nash`] on a caller-owned trainer, which survives a failed run.
pub fn run_nash<G: Game + ?Sized>(
    game: &G,
    rewards: &dyn RewardSource,
    trainer: &mut NashTrainer,
    model: Option<&TabularModel>,
) -> Result<Vec<NashLogRow>> {
    let (total, every) = (trainer.config().total_iterations, trainer.config().log_every);
    let mut log = Vec::new();
    for _ in 0..total {
        trainer.step(game, rewards)?;
        if trainer.iteration().is_multiple_of(every) {
            log.push(trainer.log_row(game, rewards, model)?);
        }
    }
    if log.last().map(|r| r.iteration) != Some(trainer.iteration()) {
        log.push(trainer.log_row(game, rewards, model)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chase::{ChaseConfig, ChaseGame};
    use crate::mlp::{finite_difference, relative_error};

    fn small_cfg() -> NashConfig {
        NashConfig { hidden: vec![16], batch_agents: 8, total_iterations: 30, log_every: 10, eval_batch: 8, ..NashConfig::default() }
    }

    #[test]
    fn gae_cases() {
        let r = [1.0, -2.0, 0.5];
        let v = [0.3, -0.4, 0.8, 1.1];
        // T = 1
        let a = compute_gae(&r[..1], &v[..2], 0.9, 0.9, 1.0).unwrap();
        assert_eq!(a, vec![1.0 + 0.9 * -0.4 - 0.3]);
        // lambda = 0 gives the one-step residuals.
        let a = compute_gae(&r, &v, 0.9, 0.0, -1.0).unwrap();
        for t in 0..3 {
            assert_eq!(a[t], -r[t] + 0.9 * v[t + 1] - v[t]);
        }
        // T = 2 closed form.
        let a = compute_gae(&r[..2], &v[..3], 0.9, 0.9, 1.0).unwrap();
        let d0 = r[0] + 0.9 * v[1] - v[0];
        let d1 = r[1] + 0.9 * v[2] - v[1];
        assert_eq!(a[0], d0 + 0.81 * d1);
        assert_eq!(a[1], d1);
        assert!(compute_gae(&r[..1], &v, 0.9, 0.9, 1.0).is_err());
    }

    #[test]
    fn schedule_matches_cycle_and_warmup() {
        let cfg = NashConfig::default();
        assert!(cfg.is_response_step(1));
        assert!(cfg.is_response_step(5_000));
        assert!(cfg.is_response_step(50_095));
        assert!(!cfg.is_response_step(5_095));
        assert!(cfg.is_response_step(5_090));
        let learner_steps = (10_001..=11_000).filter(|&i| !cfg.is_response_step(i)).count();
        assert_eq!(learner_steps, 90);
    }

    #[test]
    fn ppo_loss_examples() {
        let mut rng = RngStream::new(1, 0).rng();
        let net = Mlp::new(2, &[4], 3, Head::Softmax, &mut rng).unwrap();
        let x = Array2::from_shape_vec((1, 2), vec![0.5, -0.5]).unwrap();
        let p = net.forward(x.view()).unwrap();
        // Ratio one everywhere: loss is minus the advantage sum.
        let (loss, _) = ppo_policy_loss(&net, &x, &[0, 0], &[0, 2], &[p[[0, 0]], p[[0, 2]]], &[1.5, -0.25], 0.2, 1.0).unwrap();
        assert!((loss + 1.25).abs() < 1e-12);
        let (loss, g) = ppo_policy_loss(&net, &x, &[0], &[1], &[p[[0, 1]]], &[0.0], 0.2, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        // r = 1.5, A = 1, eps = 0.2: the clipped term wins with zero gradient.
        let old = p[[0, 1]] / 1.5;
        let (loss, g) = ppo_policy_loss(&net, &x, &[0], &[1], &[old], &[1.0], 0.2, 1.0).unwrap();
        assert!((loss + 1.2).abs() < 1e-12);
        assert!(g.iter().all(|&v| v == 0.0));
        // r = 0.5 with A < 0 is also outside the trust region.
        let (_, g) = ppo_policy_loss(&net, &x, &[0], &[1], &[p[[0, 1]] * 2.0], &[-1.0], 0.2, 1.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(matches!(ppo_policy_loss(&net, &x, &[0], &[1], &[0.0], &[1.0], 0.2, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn critic_loss_examples() {
        let mut rng = RngStream::new(2, 0).rng();
        let net = Mlp::new(2, &[4], 1, Head::Scalar, &mut rng).unwrap();
        let x = Array2::from_shape_vec((2, 2), vec![0.5, -0.5, 1.0, 2.0]).unwrap();
        let v = net.forward_scalar(x.view()).unwrap();
        let (loss, g) = critic_loss(&net, &x, &[0, 1], &v, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&d| d == 0.0));
        let (loss, _) = critic_loss(&net, &x, &[1], &[v[1] - 3.0], 1.0).unwrap();
        assert!((loss - 9.0).abs() < 1e-12);
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = RngStream::new(3, 0).rng();
        let mut net = Mlp::new(3, &[6, 5], 4, Head::Softmax, &mut rng).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p += rng.gen_range(-0.3..0.3));
        let x = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let rows = [0, 1, 2, 1];
        let actions = [1, 3, 0, 2];
        let p = net.forward(x.view()).unwrap();
        // Ratios near one so every step sits inside the trust region.
        let old: Vec<f64> = rows.iter().zip(&actions).map(|(&r, &a)| p[[r, a]] * 1.03).collect();
        let adv = [0.7, -1.1, 0.4, 2.0];
        let (_, grads) = ppo_policy_loss(&net, &x, &rows, &actions, &old, &adv, 0.2, 0.5).unwrap();
        let numeric = finite_difference(net.params(), 1e-6, |params| {
            let mut probe = net.clone();
            probe.params_mut().copy_from_slice(params);
            ppo_policy_loss(&probe, &x, &rows, &actions, &old, &adv, 0.2, 0.5).unwrap().0
        });
        assert!(relative_error(&grads, &numeric, 1e-8) < 1e-5);
    }

    #[test]
    fn rollout_shapes_and_target_dependence() {
        let game = ChaseGame::new(ChaseConfig::default()).unwrap();
        let cfg = small_cfg();
        let mut run = NashRun::new(&game, Side::F, &cfg, &mut RngStream::new(4, 0).rng()).unwrap();
        let reward = GameReward(&game);
        let batch = run.rollout(&game, &reward, &mut RngStream::new(5, 0).rng()).unwrap();
        assert_eq!(batch.rows.len(), cfg.batch_agents * cfg.horizon);
        assert!(batch.old_probs[0].iter().chain(&batch.old_probs[1]).all(|&p| p > 0.0));
        // Online changes alone do not move rollouts until a refresh.
        run.online.policies[0].params_mut().iter_mut().for_each(|p| *p += 1.0);
        let again = run.rollout(&game, &reward, &mut RngStream::new(5, 0).rng()).unwrap();
        assert_eq!(batch.actions, again.actions);
        run.refresh_targets();
        let moved = run.rollout(&game, &reward, &mut RngStream::new(5, 0).rng()).unwrap();
        assert_ne!(batch.old_probs[0], moved.old_probs[0]);
    }

    #[test]
    fn zero_learning_rates_freeze_parameters() {
        let game = ChaseGame::new(ChaseConfig::default()).unwrap();
        let cfg = NashConfig { lr_nash: 0.0, lr_response: 0.0, lr_critic: 0.0, ..small_cfg() };
        let out = solve_nash(&game, &GameReward(&game), &cfg, &RngStream::new(6, 0)).unwrap();
        let fresh = NashTrainer::new(&game, &cfg, &RngStream::new(6, 0)).unwrap();
        assert_eq!(out.trainer.f_run.online, fresh.f_run.online);
        assert_eq!(out.trainer.g_run.online, fresh.g_run.online);
        assert_eq!(out.log.len(), 3);
        assert!(out.log.iter().all(|r| r.exploitability.is_some()));
    }

    #[test]
    fn zero_iterations_return_initial_policies() {
        let game = ChaseGame::new(ChaseConfig::default()).unwrap();
        let cfg = NashConfig { total_iterations: 0, ..small_cfg() };
        let out = solve_nash(&game, &GameReward(&game), &cfg, &RngStream::new(7, 0)).unwrap();
        let probs = tabulate_policy(&game, out.trainer.f_policy()).unwrap();
        assert!(probs.probs().iter().all(|&p| (p - 0.2).abs() < 0.05));
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            NashConfig { k_g: 100, ..NashConfig::default() },
            NashConfig { gae_lambda: 0.0, ..NashConfig::default() },
            NashConfig { clip_epsilon: 1.0, ..NashConfig::default() },
            NashConfig { hidden: vec![], ..NashConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_reward_returns_are_zero() {
        let game = ChaseGame::new(ChaseConfig::default()).unwrap();
        struct Zero;
        impl RewardSource for Zero {
            fn rewards(&self, states: &[usize]) -> Result<Vec<f64>> {
                Ok(vec![0.0; states.len()])
            }
        }
        let mut trainer = NashTrainer::new(&game, &small_cfg(), &RngStream::new(8, 0)).unwrap();
        let gap = trainer.estimate_gap(&game, &Zero).unwrap();
        assert_eq!(gap.gap(), 0.0);
        assert_eq!(gap.v_f_gbest.mean, 0.0);
    }
}

//! Reward recovery from sub-optimal demonstrations of both sides.
//!
//! The reward model is pushed to make the demonstrated actions look as good
//! as the current equilibrium policies: for a demo record `(s, a_f, a_g)` the
//! value of `(f*, g)` with g forced to `a_g` at the first step should not
//! exceed the value of `(f, g*)` with f forced to `a_f`. The policy pair is
//! retrained continuously under the evolving reward.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chase::{ChaseConfig, ChaseGame, Move};
use crate::error::{input_err, Error, Result};
use crate::game::{feature_matrix, Game, Policy, Side};
use crate::mlp::{Adam, AdamConfig, Head, Mlp};
use crate::nash::{GapEstimate, NashConfig, NashTrainer, PolicyCache, RewardSource};
use crate::rng::{sample_index, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DemoRecord {
    pub state: usize,
    pub action_f: usize,
    pub action_g: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    /// Per-player deflection probability.
    pub epsilon: f64,
    pub n_trajectories: usize,
    pub traj_length: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig { epsilon: 0.1, n_trajectories: 32_000, traj_length: 10 }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("demo epsilon must lie in [0, 1]".into()));
        }
        if self.n_trajectories == 0 || self.traj_length == 0 {
            return Err(Error::Config("demo sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Demonstrations on a chase game, with the settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub game: ChaseConfig,
    pub epsilon: f64,
    pub seed: u64,
    pub records: Vec<DemoRecord>,
}

const DEMO_MAGIC: &str = "# zsirl demos v1";

impl DemoSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Uniform draw with replacement.
    pub fn sample<'a>(&'a self, rng: &mut impl Rng) -> Result<&'a DemoRecord> {
        if self.records.is_empty() {
            return input_err("empty demonstration set");
        }
        Ok(&self.records[rng.gen_range(0..self.records.len())])
    }

    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<DemoRecord>> {
        (0..n).map(|_| self.sample(rng).copied()).collect()
    }

    /// Text form: a magic line, a `# key=value` header with the game config,
    /// epsilon and seed, then one record per line: the flat state coordinates
    /// (predators then preys, `x y` each) followed by the f and g joint-action
    /// indices, space separated.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let game = ChaseGame::new(self.game)?;
        writeln!(w, "{DEMO_MAGIC}")?;
        writeln!(
            w,
            "# grid_n={} team_size={} discount={} epsilon={} seed={} records={}",
            self.game.grid_n,
            self.game.team_size,
            self.game.discount,
            self.epsilon,
            self.seed,
            self.records.len()
        )?;
        let mut line = String::new();
        for r in &self.records {
            line.clear();
            for c in game.decode(r.state)?.coordinates() {
                line.push_str(&c.to_string());
                line.push(' ');
            }
            line.push_str(&format!("{} {}", r.action_f, r.action_g));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<DemoSet> {
        let mut lines = r.lines();
        let magic = lines.next().transpose()?.unwrap_or_default();
        if magic.trim() != DEMO_MAGIC {
            return Err(Error::Format(format!("unexpected demo magic {magic:?}")));
        }
        let header_line = lines.next().transpose()?.unwrap_or_default();
        let header: HashMap<&str, &str> =
            header_line.trim_start_matches('#').split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        let field = |key: &str| header.get(key).copied().ok_or_else(|| Error::Format(format!("demo header lacks {key}")));
        let parse_err = |key: &str| Error::Format(format!("bad demo header field {key}"));
        let game_cfg = ChaseConfig {
            grid_n: field("grid_n")?.parse().map_err(|_| parse_err("grid_n"))?,
            team_size: field("team_size")?.parse().map_err(|_| parse_err("team_size"))?,
            discount: field("discount")?.parse().map_err(|_| parse_err("discount"))?,
        };
        let epsilon: f64 = field("epsilon")?.parse().map_err(|_| parse_err("epsilon"))?;
        let seed: u64 = field("seed")?.parse().map_err(|_| parse_err("seed"))?;
        let game = ChaseGame::new(game_cfg).map_err(|e| Error::Format(e.to_string()))?;
        let n_coords = 4 * game.team_size();
        let n_f = game.action_count(Side::F);
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let nums: Vec<i64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Format(format!("bad demo record {line:?}"))))
                .collect::<Result<_>>()?;
            if nums.len() != n_coords + 2 {
                return Err(Error::Format(format!("demo record has {} fields, expected {}", nums.len(), n_coords + 2)));
            }
            let state = crate::chase::ChaseState::from_coordinates(&nums[..n_coords])
                .and_then(|s| game.encode(&s))
                .map_err(|e| Error::Format(e.to_string()))?;
            let (af, ag) = (nums[n_coords], nums[n_coords + 1]);
            if af < 0 || ag < 0 || af as usize >= n_f || ag as usize >= n_f {
                return Err(Error::Format(format!("demo action out of range in {line:?}")));
            }
            records.push(DemoRecord { state, action_f: af as usize, action_g: ag as usize });
        }
        Ok(DemoSet { game: game_cfg, epsilon, seed, records })
    }
}

/// With probability `epsilon` deflect a move: a direction turns by +-90
/// degrees, `Stay` becomes one of the four directions.
pub fn corrupt_move(m: Move, epsilon: f64, rng: &mut impl Rng) -> Move {
    if epsilon <= 0.0 || rng.gen::<f64>() >= epsilon {
        return m;
    }
    match m {
        Move::Stay => [Move::Up, Move::Down, Move::Left, Move::Right][rng.gen_range(0..4)],
        _ => m.perpendicular()[rng.gen_range(0..2)],
    }
}

fn corrupt_joint(game: &ChaseGame, action: usize, epsilon: f64, rng: &mut impl Rng) -> Result<usize> {
    let moves: Vec<Move> = game.split_action(action)?.into_iter().map(|m| corrupt_move(m, epsilon, rng)).collect();
    game.joint_action(&moves)
}

/// Roll out `(f, g)` from uniform random starts with every player's move
/// passed through [`corrupt_move`]; the corrupted moves are both recorded
/// and executed.
pub fn generate_demos(
    game: &ChaseGame,
    f: &dyn Policy,
    g: &dyn Policy,
    cfg: &DemoConfig,
    seed: u64,
    stream: &RngStream,
) -> Result<DemoSet> {
    cfg.validate()?;
    let mut rng = stream.rng();
    let mut records = Vec::with_capacity(cfg.n_trajectories * cfg.traj_length);
    let mut pf = vec![0.0; f.action_count()];
    let mut pg = vec![0.0; g.action_count()];
    for _ in 0..cfg.n_trajectories {
        let mut s = game.random_state(&mut rng);
        for _ in 0..cfg.traj_length {
            f.write_probs(s, &mut pf);
            g.write_probs(s, &mut pg);
            let af = corrupt_joint(game, sample_index(&pf, &mut rng), cfg.epsilon, &mut rng)?;
            let ag = corrupt_joint(game, sample_index(&pg, &mut rng), cfg.epsilon, &mut rng)?;
            records.push(DemoRecord { state: s, action_f: af, action_g: ag });
            s = game.sample_next(s, af, ag, &mut rng);
        }
    }
    Ok(DemoSet { game: *game.config(), epsilon: cfg.epsilon, seed, records })
}

/// State sequences for a batch of records. `f_side[k]` starts at record `k`
/// with g forced to the demonstrated action at step 0 (estimates the value
/// of `(f*, g_E)`); `g_side[k]` forces f's demonstrated action instead.
/// Each sequence has `horizon + 1` states.
#[derive(Debug, Clone, PartialEq)]
pub struct GapTrajectories {
    pub f_side: Vec<Vec<usize>>,
    pub g_side: Vec<Vec<usize>>,
}

pub fn sample_gap_trajectories<G: Game + ?Sized>(
    game: &G,
    records: &[DemoRecord],
    f: &mut PolicyCache,
    g: &mut PolicyCache,
    horizon: usize,
    rng: &mut dyn RngCore,
) -> Result<GapTrajectories> {
    if records.is_empty() {
        return input_err("no demonstration records to start from");
    }
    let n = records.len();
    // Paths 0..n are the f side, n..2n the g side; all advance in lockstep.
    let mut paths: Vec<Vec<usize>> = (0..2 * n).map(|k| vec![records[k % n].state]).collect();
    for t in 0..horizon {
        let current: Vec<usize> = paths.iter().map(|p| p[t]).collect();
        f.prefetch(game, &current)?;
        g.prefetch(game, &current)?;
        for (k, path) in paths.iter_mut().enumerate() {
            let mut af = sample_index(f.probs(current[k]), rng);
            let mut ag = sample_index(g.probs(current[k]), rng);
            if t == 0 {
                if k < n {
                    ag = records[k].action_g;
                } else {
                    af = records[k - n].action_f;
                }
            }
            path.push(game.sample_next(current[k], af, ag, rng));
        }
    }
    let g_side = paths.split_off(n);
    Ok(GapTrajectories { f_side: paths, g_side })
}

/// `c * (cov(r, prior) + |mean r| + |var r - rho|)` with unbiased sample
/// moments, and its gradient with respect to `r`.
pub fn regularizer_phi(r: &[f64], prior: &[f64], c: f64, rho: f64) -> Result<(f64, Vec<f64>)> {
    let n = r.len();
    if n < 2 || prior.len() != n {
        return input_err("the regularizer needs at least two states with matching prior values");
    }
    let nf = n as f64;
    let mean_r = r.iter().sum::<f64>() / nf;
    let mean_d = prior.iter().sum::<f64>() / nf;
    let cov = r.iter().zip(prior).map(|(a, b)| (a - mean_r) * (b - mean_d)).sum::<f64>() / (nf - 1.0);
    let var = r.iter().map(|a| (a - mean_r).powi(2)).sum::<f64>() / (nf - 1.0);
    let value = c * (cov + mean_r.abs() + (var - rho).abs());
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let (s_mean, s_var) = (sign(mean_r), sign(var - rho));
    let grad = r
        .iter()
        .zip(prior)
        .map(|(a, d)| c * ((d - mean_d) / (nf - 1.0) + s_mean / nf + s_var * 2.0 * (a - mean_r) / (nf - 1.0)))
        .collect();
    Ok((value, grad))
}

/// Prior signal the reward should covary negatively with.
pub trait CovariancePrior {
    fn prior_value(&self, state: usize) -> f64;
}

impl CovariancePrior for ChaseGame {
    /// Mean predator-prey distance.
    fn prior_value(&self, state: usize) -> f64 {
        ChaseGame::mean_distance(&self.decode(state).expect("state in range"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlConfig {
    /// Iterations between gap checks.
    pub k_r: u64,
    /// Reward steps per passed gap check.
    pub i_r: usize,
    /// Gap threshold for reward steps.
    pub tau: f64,
    pub reward_horizon: usize,
    pub lr_reward: f64,
    pub reg_weight: f64,
    pub reg_variance_target: f64,
    pub pretrain_iters: usize,
    pub demo_batch: usize,
    pub total_iterations: u64,
    pub reward_hidden: Vec<usize>,
}

impl Default for IrlConfig {
    fn default() -> Self {
        IrlConfig {
            k_r: 1_000,
            i_r: 20,
            tau: 3.0,
            reward_horizon: 50,
            lr_reward: 2.5e-5,
            reg_weight: 0.25,
            reg_variance_target: 5.0,
            pretrain_iters: 5_000,
            demo_batch: 64,
            total_iterations: 100_000,
            reward_hidden: vec![256, 256],
        }
    }
}

impl IrlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_r == 0 || self.i_r == 0 || self.demo_batch < 2 || self.reward_hidden.contains(&0) || self.reward_hidden.is_empty() {
            return Err(Error::Config("k_r, i_r, reward widths must be positive and demo_batch at least 2".into()));
        }
        if !(self.lr_reward >= 0.0 && self.reg_weight >= 0.0 && self.reg_variance_target >= 0.0) || self.tau.is_nan() {
            return Err(Error::Config("learning rate and regularizer constants must be non-negative".into()));
        }
        Ok(())
    }
}

/// A scalar-head network read as a state reward.
pub struct NetReward<'a, G: ?Sized> {
    pub net: &'a Mlp,
    pub game: &'a G,
}

impl<G: Game + ?Sized> RewardSource for NetReward<'_, G> {
    fn rewards(&self, states: &[usize]) -> Result<Vec<f64>> {
        self.net.forward_scalar(feature_matrix(self.game, states).view())
    }
}

/// Reward model plus its optimizer.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub net: Mlp,
    pub adam: Adam,
}

impl RewardModel {
    pub fn new<G: Game + ?Sized>(game: &G, cfg: &IrlConfig, rng: &mut impl Rng) -> Result<RewardModel> {
        let net = Mlp::new(game.feature_dim(), &cfg.reward_hidden, 1, Head::Scalar, rng)?;
        let adam = Adam::for_net(AdamConfig::with_lr(cfg.lr_reward), &net);
        Ok(RewardModel { net, adam })
    }
}

/// Loss and gradient of one reward step: the batch-mean discounted gap
/// `v_f - v_g` plus the regularizer over the records' starting states.
/// Returns `(total, gap part, gradient)`.
pub fn reward_step_loss<G: Game + CovariancePrior + ?Sized>(
    game: &G,
    net: &Mlp,
    trajectories: &GapTrajectories,
    records: &[DemoRecord],
    cfg: &IrlConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let mut unique: Vec<usize> = Vec::new();
    let mut row_of: HashMap<usize, usize> = HashMap::new();
    let mut row = |s: usize, unique: &mut Vec<usize>| {
        *row_of.entry(s).or_insert_with(|| {
            unique.push(s);
            unique.len() - 1
        })
    };
    let n = trajectories.f_side.len() as f64;
    // Per-row weight of the gap term.
    let mut weights: Vec<(usize, f64)> = Vec::new();
    for (paths, sign) in [(&trajectories.f_side, 1.0), (&trajectories.g_side, -1.0)] {
        for path in paths.iter() {
            let mut w = 1.0;
            for &s in path {
                weights.push((row(s, &mut unique), sign * w / n));
                w *= game.discount();
            }
        }
    }
    let phi_rows: Vec<usize> = records.iter().map(|r| row(r.state, &mut unique)).collect();
    let prior: Vec<f64> = records.iter().map(|r| game.prior_value(r.state)).collect();
    let x = feature_matrix(game, &unique);
    let mut gap = 0.0;
    let (total, grads) = net.loss_grad(x.view(), |out| {
        let mut d = Array2::zeros(out.dim());
        for &(row, w) in &weights {
            gap += w * out[[row, 0]];
            d[[row, 0]] += w;
        }
        let r: Vec<f64> = phi_rows.iter().map(|&row| out[[row, 0]]).collect();
        let (phi, dphi) = regularizer_phi(&r, &prior, cfg.reg_weight, cfg.reg_variance_target)?;
        for (&row, g) in phi_rows.iter().zip(dphi) {
            d[[row, 0]] += g;
        }
        Ok((gap + phi, d))
    })?;
    Ok((total, gap, grads))
}

/// Adam steps on the regularizer alone over random demo batches.
pub fn pretrain_reward<G: Game + CovariancePrior + ?Sized>(
    game: &G,
    model: &mut RewardModel,
    demo: &DemoSet,
    cfg: &IrlConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let phi = PhiSettings { weight: cfg.reg_weight, variance_target: cfg.reg_variance_target, batch: cfg.demo_batch };
    pretrain_phi(game, &mut model.net, &mut model.adam, demo, &phi, cfg.pretrain_iters, rng)
}

/// Regularizer settings shared by every reward learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiSettings {
    pub weight: f64,
    pub variance_target: f64,
    pub batch: usize,
}

impl PhiSettings {
    /// `phi` of a scalar network's outputs at `states`, with the gradient
    /// with respect to those outputs.
    pub fn eval<G: CovariancePrior + ?Sized>(&self, game: &G, states: &[usize], outputs: &[f64]) -> Result<(f64, Vec<f64>)> {
        let prior: Vec<f64> = states.iter().map(|&s| game.prior_value(s)).collect();
        regularizer_phi(outputs, &prior, self.weight, self.variance_target)
    }
}

/// `iters` Adam steps of a scalar network on `phi` alone.
pub fn pretrain_phi<G: Game + CovariancePrior + ?Sized>(
    game: &G,
    net: &mut Mlp,
    adam: &mut Adam,
    demo: &DemoSet,
    phi: &PhiSettings,
    iters: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for _ in 0..iters {
        let batch = demo.sample_batch(phi.batch, rng)?;
        let states: Vec<usize> = batch.iter().map(|r| r.state).collect();
        let (_, grads) = net.loss_grad(feature_matrix(game, &states).view(), |out| {
            let (value, d) = phi.eval(game, &states, out.column(0).as_slice().expect("contiguous"))?;
            Ok((value, Array2::from_shape_vec(out.dim(), d).expect("one gradient per output")))
        })?;
        adam.step(net.params_mut(), &grads)?;
    }
    Ok(())
}

/// One reward step on a fresh batch of records. Returns the gap part of the
/// loss (the IRL loss).
pub fn reward_step<G: Game + CovariancePrior + ?Sized>(
    game: &G,
    model: &mut RewardModel,
    demo: &DemoSet,
    f: &mut PolicyCache,
    g: &mut PolicyCache,
    cfg: &IrlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let records = demo.sample_batch(cfg.demo_batch, rng)?;
    let traj = sample_gap_trajectories(game, &records, f, g, cfg.reward_horizon, rng)?;
    let (_, gap, grads) = reward_step_loss(game, &model.net, &traj, &records, cfg)?;
    model.adam.step(model.net.params_mut(), &grads)?;
    Ok(gap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapCheck {
    pub iteration: u64,
    pub v_f_gbest: f64,
    pub v_fbest_g: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardStepLog {
    pub iteration: u64,
    pub irl_loss: f64,
}

#[derive(Debug, Clone)]
pub struct IrlOutcome {
    pub reward: RewardModel,
    pub trainer: NashTrainer,
    pub gap_checks: Vec<GapCheck>,
    pub reward_steps: Vec<RewardStepLog>,
}

/// Algorithm state between iterations, so callers can checkpoint on failure.
#[derive(Debug, Clone)]
pub struct IrlRun {
    pub reward: RewardModel,
    pub trainer: NashTrainer,
    reward_rng: ChaCha8Rng,
    iteration: u64,
    pub gap_checks: Vec<GapCheck>,
    pub reward_steps: Vec<RewardStepLog>,
}

impl IrlRun {
    /// Fresh models, with the reward pretrained on the regularizer.
    pub fn new<G: Game + CovariancePrior + ?Sized>(
        game: &G,
        demo: &DemoSet,
        irl: &IrlConfig,
        nash: &NashConfig,
        stream: &RngStream,
    ) -> Result<IrlRun> {
        irl.validate()?;
        nash.validate()?;
        if demo.is_empty() {
            return input_err("empty demonstration set");
        }
        let mut reward = RewardModel::new(game, irl, &mut stream.child(10).rng())?;
        let mut reward_rng = stream.child(11).rng();
        pretrain_reward(game, &mut reward, demo, irl, &mut reward_rng)?;
        let trainer = NashTrainer::new(game, nash, &stream.child(12))?;
        Ok(IrlRun { reward, trainer, reward_rng, iteration: 0, gap_checks: Vec::new(), reward_steps: Vec::new() })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// One policy iteration under the current reward; every `k_r`
    /// iterations a gap check, and reward steps if it passes.
    pub fn step<G: Game + CovariancePrior + ?Sized>(&mut self, game: &G, demo: &DemoSet, irl: &IrlConfig) -> Result<Option<GapCheck>> {
        self.iteration += 1;
        let i = self.iteration;
        self.trainer.step(game, &NetReward { net: &self.reward.net, game })?;
        if !i.is_multiple_of(irl.k_r) {
            return Ok(None);
        }
        let gap: GapEstimate = self.trainer.estimate_gap(game, &NetReward { net: &self.reward.net, game })?;
        let passed = gap.gap() < irl.tau;
        let check = GapCheck { iteration: i, v_f_gbest: gap.v_f_gbest.mean, v_fbest_g: gap.v_fbest_g.mean, passed };
        self.gap_checks.push(check.clone());
        if passed {
            let mut f = PolicyCache::new(self.trainer.f_policy());
            let mut g = PolicyCache::new(self.trainer.g_policy());
            for _ in 0..irl.i_r {
                let loss = reward_step(game, &mut self.reward, demo, &mut f, &mut g, irl, &mut self.reward_rng)?;
                self.reward_steps.push(RewardStepLog { iteration: i, irl_loss: loss });
            }
            self.trainer.invalidate_cache();
        }
        Ok(Some(check))
    }

    pub fn into_outcome(self) -> IrlOutcome {
        IrlOutcome { reward: self.reward, trainer: self.trainer, gap_checks: self.gap_checks, reward_steps: self.reward_steps }
    }
}

/// Pretrain the reward on the regularizer, then alternate policy iterations
/// under the current reward with gated reward steps every `k_r` iterations.
/// `on_check` sees every gap check (for progress output or checkpoints).
pub fn train_irl<G: Game + CovariancePrior + ?Sized>(
    game: &G,
    demo: &DemoSet,
    irl: &IrlConfig,
    nash: &NashConfig,
    stream: &RngStream,
    mut on_check: impl FnMut(&GapCheck),
) -> Result<IrlOutcome> {
    let mut run = IrlRun::new(game, demo, irl, nash, stream)?;
    for _ in 0..irl.total_iterations {
        if let Some(check) = run.step(game, demo, irl)? {
            on_check(&check);
        }
    }
    Ok(run.into_outcome())
}

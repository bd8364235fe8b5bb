//! Comparison methods: two-phase deep BIRL, deep DIRL with a growing policy
//! set, and a penalty-method Nash solver built on value upper bounds.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::game::{feature_matrix, Game, Side};
use crate::irl::{pretrain_phi, CovariancePrior, DemoRecord, DemoSet, NetReward, PhiSettings};
use crate::mlp::{Adam, AdamConfig, Head, Mlp};
use crate::nash::{tabulate_policy, NashConfig, NashTrainer, PolicyCache, RewardSource};
use crate::oracle::{TabularModel, TabularPolicy};
use crate::rng::{sample_index, RngStream};

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn nonzero(name: &str, v: u64) -> Result<()> {
    if v == 0 {
        Err(Error::Config(format!("{name} must be at least 1")))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BirlConfig {
    pub v_iterations: u64,
    pub r_iterations: u64,
    pub lagrange_coefficient: f64,
    pub reg_weight: f64,
    pub reg_variance_target: f64,
    pub lr: f64,
    pub demo_batch: usize,
    pub hidden: Vec<usize>,
}

impl Default for BirlConfig {
    fn default() -> Self {
        BirlConfig {
            v_iterations: 500_000,
            r_iterations: 500_000,
            lagrange_coefficient: 1.0,
            reg_weight: 0.25,
            reg_variance_target: 5.0,
            lr: 1e-4,
            demo_batch: 64,
            hidden: vec![256, 256],
        }
    }
}

impl BirlConfig {
    pub fn validate(&self) -> Result<()> {
        nonzero("birl.v_iterations", self.v_iterations)?;
        nonzero("birl.r_iterations", self.r_iterations)?;
        positive("birl.lagrange_coefficient", self.lagrange_coefficient)?;
        positive("birl.lr", self.lr)?;
        if self.demo_batch < 2 {
            return Err(Error::Config("birl.demo_batch must be at least 2".into()));
        }
        Ok(())
    }

    fn phi(&self) -> PhiSettings {
        PhiSettings { weight: self.reg_weight, variance_target: self.reg_variance_target, batch: self.demo_batch }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirlConfig {
    pub outer_iterations: usize,
    /// Policy iterations per pi-step.
    pub pi_iterations: u64,
    /// Reward updates per R-step.
    pub r_iterations: u64,
    pub lr: f64,
    pub reg_weight: f64,
    pub reg_variance_target: f64,
    pub pretrain_iters: usize,
    pub horizon: usize,
    pub demo_batch: usize,
    pub reward_hidden: Vec<usize>,
}

impl Default for DirlConfig {
    fn default() -> Self {
        DirlConfig {
            outer_iterations: 10,
            pi_iterations: 50_000,
            r_iterations: 50_000,
            lr: 1e-4,
            reg_weight: 0.25,
            reg_variance_target: 5.0,
            pretrain_iters: 5000,
            horizon: 50,
            demo_batch: 64,
            reward_hidden: vec![256, 256],
        }
    }
}

impl DirlConfig {
    pub fn validate(&self) -> Result<()> {
        nonzero("dirl.outer_iterations", self.outer_iterations as u64)?;
        nonzero("dirl.pi_iterations", self.pi_iterations)?;
        nonzero("dirl.r_iterations", self.r_iterations)?;
        positive("dirl.lr", self.lr)?;
        if self.demo_batch < 2 {
            return Err(Error::Config("dirl.demo_batch must be at least 2".into()));
        }
        Ok(())
    }

    fn phi(&self) -> PhiSettings {
        PhiSettings { weight: self.reg_weight, variance_target: self.reg_variance_target, batch: self.demo_batch }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpNashConfig {
    pub lagrange: f64,
    /// Sampled transitions per expectation in a constraint.
    pub rollouts: usize,
    pub iterations: u64,
    pub lr: f64,
    pub batch_states: usize,
    pub hidden: Vec<usize>,
    pub log_every: u64,
    pub oracle_state_cap: u64,
}

impl Default for QpNashConfig {
    fn default() -> Self {
        QpNashConfig {
            lagrange: 10.0,
            rollouts: 5,
            iterations: 500_000,
            lr: 1e-4,
            batch_states: 64,
            hidden: vec![256, 256],
            log_every: 1000,
            oracle_state_cap: 10_000,
        }
    }
}

impl QpNashConfig {
    pub fn validate(&self) -> Result<()> {
        positive("qp.lagrange", self.lagrange)?;
        nonzero("qp.rollouts", self.rollouts as u64)?;
        nonzero("qp.iterations", self.iterations)?;
        nonzero("qp.batch_states", self.batch_states as u64)?;
        nonzero("qp.log_every", self.log_every)?;
        positive("qp.lr", self.lr)
    }
}

/// Row index of each distinct state, in first-seen order.
#[derive(Default)]
struct Rows {
    states: Vec<usize>,
    index: HashMap<usize, usize>,
}

impl Rows {
    fn of(&mut self, s: usize) -> usize {
        let states = &mut self.states;
        *self.index.entry(s).or_insert_with(|| {
            states.push(s);
            states.len() - 1
        })
    }
}

/// A demo record plus the random comparison actions of one BIRL sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BirlSample {
    pub record: DemoRecord,
    pub action_f: usize,
    pub action_g: usize,
}

pub fn sample_birl_batch<G: Game + ?Sized>(game: &G, demo: &DemoSet, n: usize, rng: &mut impl Rng) -> Result<Vec<BirlSample>> {
    let (nf, ng) = (game.action_count(Side::F), game.action_count(Side::G));
    Ok(demo
        .sample_batch(n, rng)?
        .into_iter()
        .map(|record| BirlSample { record, action_f: rng.gen_range(0..nf), action_g: rng.gen_range(0..ng) })
        .collect())
}

/// BIRL value-phase loss: the Lagrangian penalty on one-step lookahead
/// comparisons, batch-averaged, plus `phi` on the value outputs at the
/// records' states. Returns `(total, penalty part, gradient)`.
pub fn birl_v_loss<G: Game + CovariancePrior + ?Sized>(
    game: &G,
    net: &Mlp,
    batch: &[BirlSample],
    cfg: &BirlConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    if batch.is_empty() {
        return input_err("empty BIRL batch");
    }
    let mut rows = Rows::default();
    let mut succ = Vec::new();
    // Per sample: lookahead distributions for (expert, expert), (random f, expert g), (expert f, random g).
    let mut looks = Vec::with_capacity(batch.len());
    for b in batch {
        let r = b.record;
        let mut one = |af, ag| -> Vec<(usize, f64)> {
            game.transitions(r.state, af, ag, &mut succ);
            succ.iter().map(|&(s, p)| (rows.of(s), p)).collect()
        };
        looks.push([one(r.action_f, r.action_g), one(b.action_f, r.action_g), one(r.action_f, b.action_g)]);
    }
    let phi_rows: Vec<usize> = batch.iter().map(|b| rows.of(b.record.state)).collect();
    let phi_states: Vec<usize> = batch.iter().map(|b| b.record.state).collect();
    let x = feature_matrix(game, &rows.states);
    let (gamma, lam, n) = (game.discount(), cfg.lagrange_coefficient, batch.len() as f64);
    let phi = cfg.phi();
    let mut penalty = 0.0;
    let (total, grads) = net.loss_grad(x.view(), |out| {
        let v = |dist: &[(usize, f64)]| dist.iter().map(|&(row, p)| p * out[[row, 0]]).sum::<f64>();
        let mut d = Array2::zeros(out.dim());
        for [ee, rf, rg] in &looks {
            // f maximizes: the random f action must not look better than the expert's.
            let vf = gamma * (v(rf) - v(ee));
            if vf > 0.0 {
                penalty += lam * vf / n;
                rf.iter().for_each(|&(row, p)| d[[row, 0]] += lam * gamma * p / n);
                ee.iter().for_each(|&(row, p)| d[[row, 0]] -= lam * gamma * p / n);
            }
            // g minimizes: the random g action must not look lower than the expert's.
            let vg = gamma * (v(ee) - v(rg));
            if vg > 0.0 {
                penalty += lam * vg / n;
                ee.iter().for_each(|&(row, p)| d[[row, 0]] += lam * gamma * p / n);
                rg.iter().for_each(|&(row, p)| d[[row, 0]] -= lam * gamma * p / n);
            }
        }
        let outputs: Vec<f64> = phi_rows.iter().map(|&row| out[[row, 0]]).collect();
        let (phi_value, dphi) = phi.eval(game, &phi_states, &outputs)?;
        for (&row, g) in phi_rows.iter().zip(dphi) {
            d[[row, 0]] += g;
        }
        Ok((penalty + phi_value, d))
    })?;
    Ok((total, penalty, grads))
}

/// One logged optimizer step of a baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iteration: u64,
    pub loss: f64,
}

fn should_log(i: u64, total: u64) -> bool {
    i == 1 || i == total || i.is_multiple_of(1000)
}

/// Train the expert value model `v_{theta_V}`.
pub fn birl_v_phase<G: Game + CovariancePrior + ?Sized>(
    demo: &DemoSet,
    game: &G,
    cfg: &BirlConfig,
    stream: &RngStream,
) -> Result<(Mlp, Vec<LossRow>)> {
    cfg.validate()?;
    if demo.is_empty() {
        return input_err("empty demonstration set");
    }
    let mut net = Mlp::new(game.feature_dim(), &cfg.hidden, 1, Head::Scalar, &mut stream.child(1).rng())?;
    let mut adam = Adam::for_net(AdamConfig::with_lr(cfg.lr), &net);
    let mut rng = stream.child(2).rng();
    let mut log = Vec::new();
    for i in 1..=cfg.v_iterations {
        let batch = sample_birl_batch(game, demo, cfg.demo_batch, &mut rng)?;
        let (loss, _, grads) = birl_v_loss(game, &net, &batch, cfg)?;
        adam.step(net.params_mut(), &grads)?;
        if should_log(i, cfg.v_iterations) {
            log.push(LossRow { iteration: i, loss });
        }
    }
    Ok((net, log))
}

/// BIRL reward-phase loss on records with their sampled successors:
/// squared error of `R(s)` against `v(s) - gamma v(s')` plus `phi` on `R`.
pub fn birl_r_loss<G: Game + CovariancePrior + ?Sized>(
    game: &G,
    reward: &Mlp,
    value: &Mlp,
    records: &[DemoRecord],
    next: &[usize],
    cfg: &BirlConfig,
) -> Result<(f64, Vec<f64>)> {
    if records.is_empty() || records.len() != next.len() {
        return input_err("BIRL reward batch needs one successor per record");
    }
    let states: Vec<usize> = records.iter().map(|r| r.state).collect();
    let v = value.forward_scalar(feature_matrix(game, &states).view())?;
    let v_next = value.forward_scalar(feature_matrix(game, next).view())?;
    let targets: Vec<f64> = v.iter().zip(&v_next).map(|(a, b)| a - game.discount() * b).collect();
    let n = records.len() as f64;
    let phi = cfg.phi();
    reward.loss_grad(feature_matrix(game, &states).view(), |out| {
        let r = out.column(0).to_vec();
        let (phi_value, dphi) = phi.eval(game, &states, &r)?;
        let mut loss = phi_value;
        let mut d = Array2::zeros(out.dim());
        for (k, (&rk, &y)) in r.iter().zip(&targets).enumerate() {
            loss += (rk - y).powi(2) / n;
            d[[k, 0]] = 2.0 * (rk - y) / n + dphi[k];
        }
        Ok((loss, d))
    })
}

/// Regress a reward model onto `v(s) - gamma v(s')` along expert transitions.
pub fn birl_r_phase<G: Game + CovariancePrior + ?Sized>(
    value: &Mlp,
    demo: &DemoSet,
    game: &G,
    cfg: &BirlConfig,
    stream: &RngStream,
) -> Result<(Mlp, Vec<LossRow>)> {
    cfg.validate()?;
    if demo.is_empty() {
        return input_err("empty demonstration set");
    }
    let mut net = Mlp::new(game.feature_dim(), &cfg.hidden, 1, Head::Scalar, &mut stream.child(3).rng())?;
    let mut adam = Adam::for_net(AdamConfig::with_lr(cfg.lr), &net);
    let mut rng = stream.child(4).rng();
    let mut log = Vec::new();
    for i in 1..=cfg.r_iterations {
        let records = demo.sample_batch(cfg.demo_batch, &mut rng)?;
        let next: Vec<usize> = records.iter().map(|r| game.sample_next(r.state, r.action_f, r.action_g, &mut rng)).collect();
        let (loss, grads) = birl_r_loss(game, &net, value, &records, &next, cfg)?;
        adam.step(net.params_mut(), &grads)?;
        if should_log(i, cfg.r_iterations) {
            log.push(LossRow { iteration: i, loss });
        }
    }
    Ok((net, log))
}

#[derive(Debug, Clone)]
pub struct BirlOutcome {
    pub value: Mlp,
    pub reward: Mlp,
    pub trainer: NashTrainer,
    pub v_log: Vec<LossRow>,
    pub r_log: Vec<LossRow>,
}

/// Both BIRL phases, then a Nash solve under the recovered reward.
pub fn birl_train<G: Game + CovariancePrior + ?Sized>(
    game: &G,
    demo: &DemoSet,
    cfg: &BirlConfig,
    nash: &NashConfig,
    stream: &RngStream,
) -> Result<BirlOutcome> {
    nash.validate()?;
    let (value, v_log) = birl_v_phase(demo, game, cfg, stream)?;
    let (reward, r_log) = birl_r_phase(&value, demo, game, cfg, stream)?;
    let mut trainer = NashTrainer::new(game, nash, &stream.child(5))?;
    let source = NetReward { net: &reward, game };
    for _ in 0..nash.total_iterations {
        trainer.step(game, &source)?;
    }
    Ok(BirlOutcome { value, reward, trainer, v_log, r_log })
}

/// The asymmetric gap weighting `max(x, 0) + 2 min(x, 0)`.
pub fn dirl_p(x: f64) -> f64 {
    x.max(0.0) + 2.0 * x.min(0.0)
}

fn dirl_p_slope(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        2.0
    }
}

/// State paths for one DIRL R-step: from each record's state, both experts
/// (`ee`), the sampled pair's f against the expert g (`fe`), and the expert
/// f against the sampled pair's g (`eg`) act at step 0; the latest
/// policies act afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct DirlPaths {
    pub ee: Vec<Vec<usize>>,
    pub fe: Vec<Vec<usize>>,
    pub eg: Vec<Vec<usize>>,
}

pub fn sample_dirl_paths<G: Game + ?Sized>(
    game: &G,
    records: &[DemoRecord],
    pair: (&mut PolicyCache, &mut PolicyCache),
    latest: (&mut PolicyCache, &mut PolicyCache),
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DirlPaths> {
    if records.is_empty() {
        return input_err("no demonstration records to start from");
    }
    let (fj, gj) = pair;
    let (fk, gk) = latest;
    let n = records.len();
    let starts: Vec<usize> = records.iter().map(|r| r.state).collect();
    fj.prefetch(game, &starts)?;
    gj.prefetch(game, &starts)?;
    let mut paths: Vec<Vec<usize>> = Vec::with_capacity(3 * n);
    for (k, r) in records.iter().chain(records).chain(records).enumerate() {
        let (af, ag) = match k / n {
            0 => (r.action_f, r.action_g),
            1 => (sample_index(fj.probs(r.state), rng), r.action_g),
            _ => (r.action_f, sample_index(gj.probs(r.state), rng)),
        };
        let mut path = vec![r.state];
        if horizon > 0 {
            path.push(game.sample_next(r.state, af, ag, rng));
        }
        paths.push(path);
    }
    for t in 1..horizon {
        let current: Vec<usize> = paths.iter().map(|p| p[t]).collect();
        fk.prefetch(game, &current)?;
        gk.prefetch(game, &current)?;
        for (path, &s) in paths.iter_mut().zip(&current) {
            let af = sample_index(fk.probs(s), rng);
            let ag = sample_index(gk.probs(s), rng);
            path.push(game.sample_next(s, af, ag, rng));
        }
    }
    let eg = paths.split_off(2 * n);
    let fe = paths.split_off(n);
    Ok(DirlPaths { ee: paths, fe, eg })
}

/// R-step loss: minus the batch mean of
/// `p(v_EE - v_FE) + p(v_EG - v_EE)`, plus `phi` at the records' states.
/// Returns `(loss, objective, gradient)`.
pub fn dirl_r_loss<G: Game + CovariancePrior + ?Sized>(
    game: &G,
    net: &Mlp,
    paths: &DirlPaths,
    records: &[DemoRecord],
    phi: &PhiSettings,
) -> Result<(f64, f64, Vec<f64>)> {
    let n = records.len();
    if n == 0 || paths.ee.len() != n || paths.fe.len() != n || paths.eg.len() != n {
        return input_err("DIRL paths do not match the records");
    }
    let mut rows = Rows::default();
    let mut weighted = |path: &[usize]| -> Vec<(usize, f64)> {
        let mut w = 1.0;
        path.iter()
            .map(|&s| {
                let item = (rows.of(s), w);
                w *= game.discount();
                item
            })
            .collect()
    };
    let sets: Vec<[Vec<(usize, f64)>; 3]> =
        (0..n).map(|i| [weighted(&paths.ee[i]), weighted(&paths.fe[i]), weighted(&paths.eg[i])]).collect();
    let phi_rows: Vec<usize> = records.iter().map(|r| rows.of(r.state)).collect();
    let states: Vec<usize> = records.iter().map(|r| r.state).collect();
    let x = feature_matrix(game, &rows.states);
    let mut objective = 0.0;
    let (loss, grads) = net.loss_grad(x.view(), |out| {
        let v = |path: &[(usize, f64)]| path.iter().map(|&(row, w)| w * out[[row, 0]]).sum::<f64>();
        let mut d = Array2::zeros(out.dim());
        let scale = 1.0 / n as f64;
        for [ee, fe, eg] in &sets {
            let (vee, vfe, veg) = (v(ee), v(fe), v(eg));
            let (x1, x2) = (vee - vfe, veg - vee);
            objective += scale * (dirl_p(x1) + dirl_p(x2));
            let (s1, s2) = (dirl_p_slope(x1) * scale, dirl_p_slope(x2) * scale);
            // The loss is the negated objective.
            ee.iter().for_each(|&(row, w)| d[[row, 0]] -= (s1 - s2) * w);
            fe.iter().for_each(|&(row, w)| d[[row, 0]] += s1 * w);
            eg.iter().for_each(|&(row, w)| d[[row, 0]] -= s2 * w);
        }
        let outputs: Vec<f64> = phi_rows.iter().map(|&row| out[[row, 0]]).collect();
        let (phi_value, dphi) = phi.eval(game, &states, &outputs)?;
        for (&row, g) in phi_rows.iter().zip(dphi) {
            d[[row, 0]] += g;
        }
        Ok((phi_value - objective, d))
    })?;
    Ok((loss, objective, grads))
}

/// The growing set of equilibrium pairs, optionally mirrored to checkpoints
/// `pi_{k}_f.ckpt` / `pi_{k}_g.ckpt` under a directory.
#[derive(Debug, Clone, Default)]
pub struct PolicySet {
    pairs: Vec<(Mlp, Mlp)>,
    dir: Option<PathBuf>,
}

impl PolicySet {
    pub fn new(dir: Option<&Path>) -> Result<PolicySet> {
        if let Some(dir) = dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(PolicySet { pairs: Vec::new(), dir: dir.map(Path::to_path_buf) })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, k: usize) -> &(Mlp, Mlp) {
        &self.pairs[k]
    }

    pub fn push(&mut self, f: Mlp, g: Mlp) -> Result<()> {
        if let Some(dir) = &self.dir {
            let k = self.pairs.len();
            f.write_checkpoint(BufWriter::new(File::create(dir.join(format!("pi_{k}_f.ckpt")))?))?;
            g.write_checkpoint(BufWriter::new(File::create(dir.join(format!("pi_{k}_g.ckpt")))?))?;
        }
        self.pairs.push((f, g));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirlLogRow {
    pub outer: usize,
    pub iteration: u64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct DirlOutcome {
    pub reward: Mlp,
    pub trainer: NashTrainer,
    pub policies: PolicySet,
    pub log: Vec<DirlLogRow>,
}

/// Alternate Nash solves under the current reward (warm-started, appending
/// each result to the policy set) with reward steps against pairs drawn
/// uniformly from the set.
pub fn dirl_train<G: Game + CovariancePrior + ?Sized>(
    game: &G,
    demo: &DemoSet,
    cfg: &DirlConfig,
    nash: &NashConfig,
    stream: &RngStream,
    policy_dir: Option<&Path>,
) -> Result<DirlOutcome> {
    cfg.validate()?;
    nash.validate()?;
    if demo.is_empty() {
        return input_err("empty demonstration set");
    }
    let phi = cfg.phi();
    let mut reward = Mlp::new(game.feature_dim(), &cfg.reward_hidden, 1, Head::Scalar, &mut stream.child(20).rng())?;
    let mut adam = Adam::for_net(AdamConfig::with_lr(cfg.lr), &reward);
    let mut rng = stream.child(21).rng();
    pretrain_phi(game, &mut reward, &mut adam, demo, &phi, cfg.pretrain_iters, &mut rng)?;
    let mut trainer = NashTrainer::new(game, nash, &stream.child(22))?;
    let mut policies = PolicySet::new(policy_dir)?;
    let mut log = Vec::new();
    for outer in 0..cfg.outer_iterations {
        trainer.invalidate_cache();
        let source = NetReward { net: &reward, game };
        for _ in 0..cfg.pi_iterations {
            trainer.step(game, &source)?;
        }
        policies.push(trainer.f_policy().clone(), trainer.g_policy().clone())?;
        let mut fk = PolicyCache::new(trainer.f_policy());
        let mut gk = PolicyCache::new(trainer.g_policy());
        let mut pair_caches: Vec<Option<(PolicyCache, PolicyCache)>> = (0..policies.len()).map(|_| None).collect();
        for i in 1..=cfg.r_iterations {
            let j = rng.gen_range(0..policies.len());
            let (fj, gj) = pair_caches[j].get_or_insert_with(|| {
                let (f, g) = policies.get(j);
                (PolicyCache::new(f), PolicyCache::new(g))
            });
            let records = demo.sample_batch(cfg.demo_batch, &mut rng)?;
            let paths = sample_dirl_paths(game, &records, (fj, gj), (&mut fk, &mut gk), cfg.horizon, &mut rng)?;
            let (_, objective, grads) = dirl_r_loss(game, &reward, &paths, &records, &phi)?;
            adam.step(reward.params_mut(), &grads)?;
            if should_log(i, cfg.r_iterations) {
                log.push(DirlLogRow { outer, iteration: i, objective });
            }
        }
    }
    Ok(DirlOutcome { reward, trainer, policies, log })
}

/// Policies and value upper bounds of the penalty-method Nash solver.
#[derive(Debug, Clone, PartialEq)]
pub struct QpModels {
    pub f: Mlp,
    pub g: Mlp,
    /// Upper bound on f's value against g.
    pub vf: Mlp,
    /// Upper bound on g's value (negated reward) against f.
    pub vg: Mlp,
}

impl QpModels {
    pub fn new<G: Game + ?Sized>(game: &G, hidden: &[usize], rng: &mut impl Rng) -> Result<QpModels> {
        let d = game.feature_dim();
        Ok(QpModels {
            f: Mlp::new(d, hidden, game.action_count(Side::F), Head::Softmax, rng)?,
            g: Mlp::new(d, hidden, game.action_count(Side::G), Head::Softmax, rng)?,
            vf: Mlp::new(d, hidden, 1, Head::Scalar, rng)?,
            vg: Mlp::new(d, hidden, 1, Head::Scalar, rng)?,
        })
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.f, &mut self.g, &mut self.vf, &mut self.vg]
    }
}

/// One minibatch of the penalty objective. For state `i`, `succ_f[i][ag]`
/// holds the sampled successors of `(af[i], ag)` for every g action, and
/// `succ_g[i][af]` those of `(af, ag[i])` for every f action.
#[derive(Debug, Clone, PartialEq)]
pub struct QpBatch {
    pub states: Vec<usize>,
    pub af: Vec<usize>,
    pub ag: Vec<usize>,
    pub succ_f: Vec<Vec<Vec<usize>>>,
    pub succ_g: Vec<Vec<Vec<usize>>>,
}

pub fn sample_qp_batch<G: Game + ?Sized>(game: &G, models: &QpModels, cfg: &QpNashConfig, rng: &mut ChaCha8Rng) -> Result<QpBatch> {
    let states: Vec<usize> = (0..cfg.batch_states).map(|_| game.random_state(rng)).collect();
    let x = feature_matrix(game, &states);
    let pf = models.f.forward(x.view())?;
    let pg = models.g.forward(x.view())?;
    let (nf, ng) = (game.action_count(Side::F), game.action_count(Side::G));
    let mut batch = QpBatch { states: Vec::new(), af: Vec::new(), ag: Vec::new(), succ_f: Vec::new(), succ_g: Vec::new() };
    for (k, &s) in states.iter().enumerate() {
        let af = sample_index(pf.row(k).as_slice().expect("contiguous"), rng);
        let ag = sample_index(pg.row(k).as_slice().expect("contiguous"), rng);
        let succ_f = (0..ng).map(|b| (0..cfg.rollouts).map(|_| game.sample_next(s, af, b, rng)).collect()).collect();
        let succ_g = (0..nf).map(|a| (0..cfg.rollouts).map(|_| game.sample_next(s, a, ag, rng)).collect()).collect();
        batch.states.push(s);
        batch.af.push(af);
        batch.ag.push(ag);
        batch.succ_f.push(succ_f);
        batch.succ_g.push(succ_g);
    }
    Ok(batch)
}

/// Value and gradients (f, g, vf, vg) of the penalty objective on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct QpLoss {
    pub total: f64,
    pub objective: f64,
    pub penalty_f: f64,
    pub penalty_g: f64,
    pub grads: [Vec<f64>; 4],
}

/// `mean(vf(s) + vg(s))` plus `lambda` times the hinge violations of
/// `R(s) + gamma E_{g, s'} vf(s') <= vf(s)` at the sampled f action and
/// `-R(s) + gamma E_{f, s'} vg(s') <= vg(s)` at the sampled g action. The
/// opponent expectation is exact over its action distribution, the
/// transition expectation a mean over the sampled successors.
pub fn qp_loss<G: Game + ?Sized>(
    game: &G,
    rewards: &dyn RewardSource,
    models: &QpModels,
    batch: &QpBatch,
    cfg: &QpNashConfig,
) -> Result<QpLoss> {
    let b = batch.states.len();
    if b == 0 {
        return input_err("empty QP batch");
    }
    let mut vf_rows = Rows::default();
    let mut vg_rows = Rows::default();
    let own_f: Vec<usize> = batch.states.iter().map(|&s| vf_rows.of(s)).collect();
    let own_g: Vec<usize> = batch.states.iter().map(|&s| vg_rows.of(s)).collect();
    let succ_f: Vec<Vec<Vec<usize>>> =
        batch.succ_f.iter().map(|per| per.iter().map(|ss| ss.iter().map(|&s| vf_rows.of(s)).collect()).collect()).collect();
    let succ_g: Vec<Vec<Vec<usize>>> =
        batch.succ_g.iter().map(|per| per.iter().map(|ss| ss.iter().map(|&s| vg_rows.of(s)).collect()).collect()).collect();
    let x_states = feature_matrix(game, &batch.states);
    let x_vf = feature_matrix(game, &vf_rows.states);
    let x_vg = feature_matrix(game, &vg_rows.states);
    let r = rewards.rewards(&batch.states)?;
    let pf = models.f.forward(x_states.view())?;
    let pg = models.g.forward(x_states.view())?;
    let vf = models.vf.forward_scalar(x_vf.view())?;
    let vg = models.vg.forward_scalar(x_vg.view())?;

    let (gamma, lam, n) = (game.discount(), cfg.lagrange, b as f64);
    let mut d_pf = Array2::zeros(pf.dim());
    let mut d_pg = Array2::zeros(pg.dim());
    let mut d_vf = Array2::zeros((vf.len(), 1));
    let mut d_vg = Array2::zeros((vg.len(), 1));
    let (mut objective, mut penalty_f, mut penalty_g) = (0.0, 0.0, 0.0);
    let mean = |v: &[f64], rows: &[usize]| rows.iter().map(|&k| v[k]).sum::<f64>() / rows.len() as f64;
    for i in 0..b {
        let (kf, kg) = (own_f[i], own_g[i]);
        objective += (vf[kf] + vg[kg]) / n;
        d_vf[[kf, 0]] += 1.0 / n;
        d_vg[[kg, 0]] += 1.0 / n;

        let m_f: Vec<f64> = succ_f[i].iter().map(|rows| mean(&vf, rows)).collect();
        let q_f = r[i] + gamma * m_f.iter().enumerate().map(|(a, m)| pg[[i, a]] * m).sum::<f64>() - vf[kf];
        if q_f > 0.0 {
            penalty_f += lam * q_f / n;
            d_vf[[kf, 0]] -= lam / n;
            for (a, rows) in succ_f[i].iter().enumerate() {
                d_pg[[i, a]] += lam * gamma * m_f[a] / n;
                for &k in rows {
                    d_vf[[k, 0]] += lam * gamma * pg[[i, a]] / (n * rows.len() as f64);
                }
            }
        }

        let m_g: Vec<f64> = succ_g[i].iter().map(|rows| mean(&vg, rows)).collect();
        let q_g = -r[i] + gamma * m_g.iter().enumerate().map(|(a, m)| pf[[i, a]] * m).sum::<f64>() - vg[kg];
        if q_g > 0.0 {
            penalty_g += lam * q_g / n;
            d_vg[[kg, 0]] -= lam / n;
            for (a, rows) in succ_g[i].iter().enumerate() {
                d_pf[[i, a]] += lam * gamma * m_g[a] / n;
                for &k in rows {
                    d_vg[[k, 0]] += lam * gamma * pf[[i, a]] / (n * rows.len() as f64);
                }
            }
        }
    }
    let total = objective + penalty_f + penalty_g;
    let backprop = |net: &Mlp, x: &Array2<f64>, d: Array2<f64>| net.loss_grad(x.view(), |_| Ok((total, d))).map(|(_, g)| g);
    let grads = [
        backprop(&models.f, &x_states, d_pf)?,
        backprop(&models.g, &x_states, d_pg)?,
        backprop(&models.vf, &x_vf, d_vf)?,
        backprop(&models.vg, &x_vg, d_vg)?,
    ];
    Ok(QpLoss { total, objective, penalty_f, penalty_g, grads })
}

/// Largest violation of either bound constraint over every state and action,
/// with values, policies and transitions all exact.
pub fn qp_tabular_violation(model: &TabularModel, vf: &[f64], vg: &[f64], f: &TabularPolicy, g: &TabularPolicy) -> f64 {
    let (nf, ng) = (model.action_count(Side::F), model.action_count(Side::G));
    let gamma = model.discount();
    let ev = |v: &[f64], s, af, ag| model.successors(s, af, ag).iter().map(|&(t, p)| p * v[t]).sum::<f64>();
    let mut worst = f64::NEG_INFINITY;
    for s in 0..model.state_count() {
        let r = model.rewards()[s];
        for af in 0..nf {
            let e = (0..ng).map(|ag| g.row(s)[ag] * ev(vf, s, af, ag)).sum::<f64>();
            worst = worst.max(r + gamma * e - vf[s]);
        }
        for ag in 0..ng {
            let e = (0..nf).map(|af| f.row(s)[af] * ev(vg, s, af, ag)).sum::<f64>();
            worst = worst.max(-r + gamma * e - vg[s]);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpLogRow {
    pub iteration: u64,
    pub objective: f64,
    pub penalty_f: f64,
    pub penalty_g: f64,
    pub exploitability: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct QpOutcome {
    pub models: QpModels,
    pub log: Vec<QpLogRow>,
}

/// Adam steps on the penalty objective for all four models.
pub fn qp_nash_train<G: Game + ?Sized>(
    game: &G,
    rewards: &dyn RewardSource,
    cfg: &QpNashConfig,
    stream: &RngStream,
) -> Result<QpOutcome> {
    cfg.validate()?;
    let mut models = QpModels::new(game, &cfg.hidden, &mut stream.child(1).rng())?;
    let mut adams: Vec<Adam> =
        [&models.f, &models.g, &models.vf, &models.vg].iter().map(|net| Adam::for_net(AdamConfig::with_lr(cfg.lr), net)).collect();
    let mut rng = stream.child(2).rng();
    let oracle = if game.state_count() <= cfg.oracle_state_cap {
        let table = rewards.rewards(&(0..game.state_count() as usize).collect::<Vec<_>>())?;
        Some(TabularModel::new(game)?.with_rewards(table)?)
    } else {
        None
    };
    let mut log = Vec::new();
    for i in 1..=cfg.iterations {
        let batch = sample_qp_batch(game, &models, cfg, &mut rng)?;
        let loss = qp_loss(game, rewards, &models, &batch, cfg)?;
        for ((net, adam), grads) in models.nets_mut().into_iter().zip(&mut adams).zip(&loss.grads) {
            adam.step(net.params_mut(), grads)?;
        }
        if i % cfg.log_every == 0 || i == cfg.iterations {
            let exploitability = match &oracle {
                Some(model) => Some(model.exploitability(&tabulate_policy(game, &models.f)?, &tabulate_policy(game, &models.g)?)?),
                None => None,
            };
            log.push(QpLogRow {
                iteration: i,
                objective: loss.objective,
                penalty_f: loss.penalty_f,
                penalty_g: loss.penalty_g,
                exploitability,
            });
        }
    }
    Ok(QpOutcome { models, log })
}

//! Acceptance checks A1-A9 at desk scale. Every check prints one PASS/FAIL
//! line (outside the test harness's capture) and then asserts.
//!
//! The IRL runs are shared between A4, A5 and A6, so the whole file takes
//! tens of minutes on one core.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use ndarray::Array2;
use rand::Rng;
use zsirl::baselines::{birl_train, dirl_train, qp_nash_train, BirlConfig, DirlConfig, QpNashConfig};
use zsirl::config::ExperimentConfig;
use zsirl::experiment::{Baseline, EvalKind, Experiment};
use zsirl::irl::{
    generate_demos, regularizer_phi, reward_step_loss, train_irl, DemoConfig, DemoRecord, DemoSet, GapTrajectories, IrlConfig, NetReward,
};
use zsirl::metrics::{deterioration_exact, reward_correlation, sample_states};
use zsirl::mlp::{finite_difference, relative_error};
use zsirl::nash::{compute_gae, critic_loss, oracle_model, ppo_policy_loss, run_nash, tabulate_policy, NashTrainer, RewardSource};
use zsirl::oracle::ShapleySolution;
use zsirl::{ChaseConfig, ChaseGame, Game, GameReward, Head, Mlp, NashConfig, RngStream, Side, TableGame, TabularModel, TabularPolicy};

const SEED: u64 = 2024;

fn report(id: &str, pass: bool, detail: String) {
    let line = format!("{id} {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass, "{id} failed: {detail}");
}

fn chase(grid_n: usize) -> ChaseGame {
    ChaseGame::new(ChaseConfig { grid_n, team_size: 1, discount: 0.9 }).unwrap()
}

struct Oracle {
    game: ChaseGame,
    model: TabularModel,
    sol: ShapleySolution,
}

impl Oracle {
    fn v_star(&self) -> f64 {
        self.sol.values.mean()
    }

    /// Deterioration of a trained pair against the exact Nash opponents.
    fn deterioration(&self, f: &Mlp, g: &Mlp) -> (f64, f64) {
        let f = tabulate_policy(&self.game, f).unwrap();
        let g = tabulate_policy(&self.game, g).unwrap();
        (
            deterioration_exact(&self.model, self.v_star(), &f, Side::F, &self.sol.g).unwrap(),
            deterioration_exact(&self.model, self.v_star(), &g, Side::G, &self.sol.f).unwrap(),
        )
    }
}

fn oracle(grid_n: usize) -> &'static Oracle {
    static CELLS: [OnceLock<Oracle>; 2] = [OnceLock::new(), OnceLock::new()];
    CELLS[usize::from(grid_n == 5)].get_or_init(|| {
        let game = chase(grid_n);
        let model = TabularModel::new(&game).unwrap();
        let sol = model.shapley_solve(1e-10, 100_000).unwrap();
        Oracle { game, model, sol }
    })
}

/// Bounds on the value of the matrix game `m` implied by the two mixes.
fn mix_guarantees(m: &Array2<f64>, x: &[f64], y: &[f64]) -> (f64, f64) {
    let (rows, cols) = m.dim();
    let lower = (0..cols).map(|j| (0..rows).map(|i| x[i] * m[[i, j]]).sum::<f64>()).fold(f64::INFINITY, f64::min);
    let upper = (0..rows).map(|i| (0..cols).map(|j| y[j] * m[[i, j]]).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max);
    (lower, upper)
}

#[test]
fn a1_oracle_correctness() {
    let o = oracle(3);
    let game = &o.game;
    let v = &o.sol.values.values;
    // Bellman minimax residual recomputed from the returned mixes, without the
    // LP: the stage value lies between the two guarantees.
    let mut residual: f64 = 0.0;
    let mut next = Vec::new();
    for s in 0..81 {
        let mut m = Array2::zeros((5, 5));
        for af in 0..5 {
            for ag in 0..5 {
                game.transitions(s, af, ag, &mut next);
                m[[af, ag]] = game.reward(s) + 0.9 * next.iter().map(|&(t, p)| p * v[t]).sum::<f64>();
            }
        }
        let (lo, hi) = mix_guarantees(&m, &o.sol.f.row(s).to_vec(), &o.sol.g.row(s).to_vec());
        residual = residual.max((lo - v[s]).abs()).max((hi - v[s]).abs());
    }
    let exploitability = o.model.exploitability(&o.sol.f, &o.sol.g).unwrap();
    report(
        "A1",
        residual < 1e-6 && exploitability.abs() < 1e-4,
        format!("residual {residual:.3e} (< 1e-6), exploitability {exploitability:.3e} (< 1e-4), mean v* {:.6}", o.v_star()),
    );
}

fn random_policy(states: usize, actions: usize, rng: &mut impl Rng) -> TabularPolicy {
    let probs = Array2::from_shape_fn((states, actions), |_| -rng.gen_range(1e-9f64..1.0).ln());
    let sums = probs.sum_axis(ndarray::Axis(1));
    TabularPolicy::new(&probs / &sums.insert_axis(ndarray::Axis(1))).unwrap()
}

#[test]
fn a2_no_local_maxima() {
    let mut rng = RngStream::new(SEED, 2).rng();
    let mut worst: f64 = 0.0;
    let mut games = 0;
    for (n, nf, ng) in [(10, 3, 3), (6, 2, 3), (8, 3, 2)] {
        let game = TableGame::random(n, nf, ng, 0.9, &mut rng).unwrap();
        let model = TabularModel::new(&game).unwrap();
        let v_star = model.shapley_solve(1e-12, 100_000).unwrap().values.mean();
        for _ in 0..10 {
            let init = random_policy(n, nf, &mut rng);
            let trace = model.ascend_f(&init, 0.5, 100_000).unwrap();
            worst = worst.max((trace.best_value - v_star).abs());
        }
        games += 1;
    }
    report("A2", worst < 1e-3, format!("{games} games x 10 restarts, worst |F(f) - v*| {worst:.3e} (< 1e-3)"));
}

fn desk_nash() -> NashConfig {
    NashConfig { hidden: vec![64, 64], total_iterations: 50_000, log_every: 5_000, ..NashConfig::default() }
}

#[test]
fn a3_adversarial_nash_3x3() {
    let o = oracle(3);
    let cfg = desk_nash();
    let mut trainer = NashTrainer::new(&o.game, &cfg, &RngStream::new(SEED, 3)).unwrap();
    let model = oracle_model(&o.game, &cfg).unwrap().unwrap();
    let log = run_nash(&o.game, &GameReward(&o.game), &mut trainer, Some(&model)).unwrap();
    let last = log.last().unwrap();
    let exploitability = last.exploitability.unwrap();
    let bound = 0.1 * o.v_star().abs();
    let trace: Vec<String> = log.iter().map(|r| format!("{:.2}", r.exploitability.unwrap())).collect();
    report(
        "A3",
        exploitability <= bound,
        format!("exploitability after {} iterations {exploitability:.3} (<= {bound:.3}); trace [{}]", last.iteration, trace.join(", ")),
    );
}

const EPSILONS: [f64; 3] = [0.05, 0.1, 0.2];

fn demos(k: usize) -> &'static DemoSet {
    static CELLS: [OnceLock<DemoSet>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    CELLS[k].get_or_init(|| {
        let o = oracle(3);
        let cfg = DemoConfig { epsilon: EPSILONS[k], n_trajectories: 5_000, traj_length: 10 };
        generate_demos(&o.game, &o.sol.f, &o.sol.g, &cfg, SEED, &RngStream::new(SEED, 40 + k as u64)).unwrap()
    })
}

/// States shared by every correlation and spread measurement.
fn eval_states() -> &'static [usize] {
    static STATES: OnceLock<Vec<usize>> = OnceLock::new();
    STATES.get_or_init(|| sample_states(&oracle(3).game, 1024, &mut RngStream::new(SEED, 9).rng()))
}

fn desk_irl() -> IrlConfig {
    IrlConfig { total_iterations: 100_000, reward_hidden: vec![256, 256], ..IrlConfig::default() }
}

struct Recovered {
    corr: f64,
    reward_std: f64,
    det: (f64, f64),
    reward_steps: usize,
}

fn recovered(reward: &Mlp, f: &Mlp, g: &Mlp, reward_steps: usize) -> Recovered {
    let o = oracle(3);
    let states = eval_states();
    let source = NetReward { net: reward, game: &o.game };
    let corr = reward_correlation(&o.game, &source, states).unwrap();
    let r = source.rewards(states).unwrap();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let reward_std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r.len() as f64 - 1.0)).sqrt();
    Recovered { corr, reward_std, det: o.deterioration(f, g), reward_steps }
}

fn irl(k: usize) -> &'static Recovered {
    static CELLS: [OnceLock<Recovered>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    CELLS[k].get_or_init(|| {
        let o = oracle(3);
        let out = train_irl(&o.game, demos(k), &desk_irl(), &desk_nash(), &RngStream::new(SEED, 50 + k as u64), |_| {}).unwrap();
        recovered(&out.reward.net, out.trainer.f_policy(), out.trainer.g_policy(), out.reward_steps.len())
    })
}

#[test]
fn a4_irl_desk_scale() {
    let r = irl(1);
    let pass = r.corr >= 0.5 && r.det.0 <= 20.0 && r.det.1 <= 20.0;
    report(
        "A4",
        pass,
        format!(
            "pearson {:.3} (>= 0.5), deterioration f {:.2}% g {:.2}% (<= 20%), {} reward steps",
            r.corr, r.det.0, r.det.1, r.reward_steps
        ),
    );
}

#[test]
fn a5_demo_quality_robustness() {
    let runs: Vec<&Recovered> = (0..3).map(irl).collect();
    let corrs: Vec<f64> = runs.iter().map(|r| r.corr).collect();
    let stds: Vec<f64> = runs.iter().map(|r| r.reward_std).collect();
    let spread = corrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - corrs.iter().cloned().fold(f64::INFINITY, f64::min);
    let monotone = stds.windows(2).all(|w| w[1] <= w[0]);
    report(
        "A5",
        spread <= 0.15 && monotone,
        format!("pearson at eps .05/.1/.2 = {corrs:.3?} (spread {spread:.3} <= 0.15), reward std {stds:.3?} (non-increasing)"),
    );
}

#[test]
fn a6_baseline_ordering() {
    let o = oracle(3);
    let ours = irl(1);
    let demo = demos(1);
    let nash = NashConfig { total_iterations: 100_000, ..desk_nash() };
    let birl_cfg = BirlConfig { v_iterations: 20_000, r_iterations: 20_000, ..BirlConfig::default() };
    let b = birl_train(&o.game, demo, &birl_cfg, &nash, &RngStream::new(SEED, 60)).unwrap();
    let birl = recovered(&b.reward, b.trainer.f_policy(), b.trainer.g_policy(), 0);
    let dirl_cfg = DirlConfig {
        outer_iterations: 5,
        pi_iterations: 20_000,
        r_iterations: 2_000,
        reward_hidden: vec![256, 256],
        ..DirlConfig::default()
    };
    let d = dirl_train(&o.game, demo, &dirl_cfg, &desk_nash(), &RngStream::new(SEED, 61), None).unwrap();
    let dirl = recovered(&d.reward, d.trainer.f_policy(), d.trainer.g_policy(), 0);
    let pass = ours.det.0 < birl.det.0 && ours.det.0 < dirl.det.0 && ours.det.1 < birl.det.1 && ours.det.1 < dirl.det.1;
    report(
        "A6",
        pass,
        format!(
            "deterioration f/g: ours {:.2}%/{:.2}%, BIRL {:.2}%/{:.2}%, DIRL {:.2}%/{:.2}% (pearson {:.3}, {:.3}, {:.3})",
            ours.det.0, ours.det.1, birl.det.0, birl.det.1, dirl.det.0, dirl.det.1, ours.corr, birl.corr, dirl.corr
        ),
    );
}

#[test]
fn a7_qp_ordering_5x5() {
    let o = oracle(5);
    let rewards = GameReward(&o.game);
    let cfg = desk_nash();
    let mut trainer = NashTrainer::new(&o.game, &cfg, &RngStream::new(SEED, 70)).unwrap();
    run_nash(&o.game, &rewards, &mut trainer, None).unwrap();
    let qp_cfg = QpNashConfig { iterations: 50_000, hidden: vec![64, 64], ..QpNashConfig::default() };
    let qp = qp_nash_train(&o.game, &rewards, &qp_cfg, &RngStream::new(SEED, 71)).unwrap();
    let tab = |net: &Mlp| tabulate_policy(&o.game, net).unwrap();
    let (fa, ga) = (tab(trainer.f_policy()), tab(trainer.g_policy()));
    let (fb, gb) = (tab(&qp.models.f), tab(&qp.models.g));
    let value = |f: &TabularPolicy, g: &TabularPolicy| o.model.policy_eval(f, g, 1e-10).unwrap().mean();
    let ours = value(&fa, &gb);
    let theirs = value(&fb, &ga);
    report(
        "A7",
        ours >= theirs,
        format!(
            "v(f_nash, g_qp) {ours:.3} >= v(f_qp, g_nash) {theirs:.3}; v(f_nash, g_nash) {:.3}, v(f_qp, g_qp) {:.3}, v* {:.3}",
            value(&fa, &ga),
            value(&fb, &gb),
            o.v_star()
        ),
    );
}

fn perturbed_net(input: usize, out: usize, head: Head, rng: &mut impl Rng) -> Mlp {
    let mut net = Mlp::new(input, &[8, 6], out, head, rng).unwrap();
    net.params_mut().iter_mut().for_each(|p| *p += rng.gen_range(-0.4..0.4));
    net
}

fn fd_error(net: &Mlp, analytic: &[f64], loss: impl Fn(&Mlp) -> f64) -> f64 {
    let numeric = finite_difference(net.params(), 1e-6, |params| {
        let mut probe = net.clone();
        probe.params_mut().copy_from_slice(params);
        loss(&probe)
    });
    relative_error(analytic, &numeric, 1e-8)
}

#[test]
fn a8_numerical_hygiene() {
    let mut rng = RngStream::new(SEED, 8).rng();
    let game = chase(3);
    let dim = game.feature_dim();
    let mut worst = [0.0f64; 4];
    for _ in 0..20 {
        let x = Array2::from_shape_fn((5, dim), |_| rng.gen_range(-2.0..2.0));
        let rows: Vec<usize> = (0..12).map(|_| rng.gen_range(0..5)).collect();

        let policy = perturbed_net(dim, 5, Head::Softmax, &mut rng);
        let probs = policy.forward(x.view()).unwrap();
        let actions: Vec<usize> = (0..12).map(|_| rng.gen_range(0..5)).collect();
        // Ratios spread across both sides of the clip range, away from its kinks.
        let old: Vec<f64> = rows
            .iter()
            .zip(&actions)
            .map(|(&r, &a)| {
                let ratio = [0.5, 0.9, 1.0, 1.1, 1.6][rng.gen_range(0..5)];
                probs[[r, a]] / ratio
            })
            .collect();
        let adv: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, g) = ppo_policy_loss(&policy, &x, &rows, &actions, &old, &adv, 0.2, 1.0 / 12.0).unwrap();
        worst[0] = worst[0].max(fd_error(&policy, &g, |n| ppo_policy_loss(n, &x, &rows, &actions, &old, &adv, 0.2, 1.0 / 12.0).unwrap().0));

        let critic = perturbed_net(dim, 1, Head::Scalar, &mut rng);
        let targets: Vec<f64> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (_, g) = critic_loss(&critic, &x, &rows, &targets, 1.0 / 12.0).unwrap();
        worst[1] = worst[1].max(fd_error(&critic, &g, |n| critic_loss(n, &x, &rows, &targets, 1.0 / 12.0).unwrap().0));

        let reward = perturbed_net(dim, 1, Head::Scalar, &mut rng);
        let records: Vec<DemoRecord> =
            (0..6).map(|_| DemoRecord { state: rng.gen_range(0..81), action_f: rng.gen_range(0..5), action_g: rng.gen_range(0..5) }).collect();
        let path = |rng: &mut rand_chacha::ChaCha8Rng| (0..4).map(|_| rng.gen_range(0..81)).collect::<Vec<usize>>();
        let trajectories = GapTrajectories { f_side: (0..6).map(|_| path(&mut rng)).collect(), g_side: (0..6).map(|_| path(&mut rng)).collect() };
        let cfg = IrlConfig::default();
        let (_, _, g) = reward_step_loss(&game, &reward, &trajectories, &records, &cfg).unwrap();
        worst[2] = worst[2].max(fd_error(&reward, &g, |n| reward_step_loss(&game, n, &trajectories, &records, &cfg).unwrap().0));

        let r: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let prior: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..4.0)).collect();
        let (_, g) = regularizer_phi(&r, &prior, 0.25, 5.0).unwrap();
        let numeric = finite_difference(&r, 1e-6, |v| regularizer_phi(v, &prior, 0.25, 5.0).unwrap().0);
        worst[3] = worst[3].max(relative_error(&g, &numeric, 1e-8));
    }

    // GAE: lambda = 0 gives one-step residuals, T = 1 is a single residual,
    // and T = 2 has the closed form d0 + gamma lambda d1.
    let (rw, v, gamma, lambda) = ([0.5, -1.5, 2.0], [1.0, -0.5, 0.25, 3.0], 0.9, 0.9);
    let delta = |t: usize| rw[t] + gamma * v[t + 1] - v[t];
    let gae_ok = compute_gae(&rw, &v, gamma, 0.0, 1.0).unwrap() == (0..3).map(delta).collect::<Vec<_>>()
        && compute_gae(&rw[..1], &v[..2], gamma, lambda, 1.0).unwrap() == vec![delta(0)]
        && compute_gae(&rw[..2], &v[..3], gamma, lambda, 1.0).unwrap() == vec![delta(0) + gamma * lambda * delta(1), delta(1)];

    let pass = worst.iter().all(|&e| e < 1e-4) && gae_ok;
    report(
        "A8",
        pass,
        format!(
            "max relative FD error over 20 draws: ppo {:.1e}, critic {:.1e}, reward step {:.1e}, phi {:.1e} (< 1e-4); GAE cases exact: {gae_ok}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.nash = NashConfig { hidden: vec![16], total_iterations: 300, log_every: 100, ..NashConfig::default() };
    cfg.demo.n_trajectories = 200;
    cfg.irl = IrlConfig {
        total_iterations: 300,
        k_r: 100,
        i_r: 2,
        pretrain_iters: 20,
        reward_horizon: 10,
        reward_hidden: vec![16],
        ..IrlConfig::default()
    };
    cfg.birl = BirlConfig { v_iterations: 50, r_iterations: 50, hidden: vec![16], ..BirlConfig::default() };
    cfg.dirl = DirlConfig {
        outer_iterations: 2,
        pi_iterations: 50,
        r_iterations: 20,
        pretrain_iters: 10,
        horizon: 5,
        reward_hidden: vec![16],
        ..DirlConfig::default()
    };
    cfg.qp = QpNashConfig { iterations: 100, hidden: vec![16], log_every: 50, ..QpNashConfig::default() };
    cfg.eval.corr_states = 128;
    cfg.eval.eval_batch = 16;
    cfg.eval.eval_horizon = 20;
    cfg
}

/// Every experiment kind, start to finish, into `root`.
fn run_all(root: &Path) {
    let exp = |sub: &str, cfg: ExperimentConfig| Experiment::new(cfg, SEED, root.join(sub), root.to_path_buf()).unwrap();
    let mut cfg = tiny_config();
    exp("oracle", cfg.clone()).oracle().unwrap();
    exp("nash", cfg.clone()).solve_nash().unwrap();
    exp("demos", cfg.clone()).gen_demos().unwrap();
    cfg.inputs.demos = Some("demos/demos.txt".into());
    exp("irl", cfg.clone()).train_irl().unwrap();
    for (sub, which) in [("birl", Baseline::Birl), ("dirl", Baseline::Dirl), ("qp", Baseline::Qp)] {
        exp(sub, cfg.clone()).baseline(which).unwrap();
    }
    cfg.inputs.reward = Some("irl/reward.ckpt".into());
    cfg.inputs.policy_f = Some("irl/f.ckpt".into());
    cfg.inputs.policy_g = Some("irl/g.ckpt".into());
    cfg.inputs.reference_f = Some("nash/f.ckpt".into());
    cfg.inputs.reference_g = Some("nash/g.ckpt".into());
    cfg.inputs.b_policy_f = Some("qp/f.ckpt".into());
    cfg.inputs.b_policy_g = Some("qp/g.ckpt".into());
    let eval = exp("eval", cfg);
    for which in [EvalKind::Corr, EvalKind::Kl, EvalKind::Deterioration, EvalKind::Matchup] {
        eval.eval(which, Some(3)).unwrap();
    }
}

fn csv_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut dirs = vec![root.to_path_buf()];
    while let Some(dir) = dirs.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                dirs.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.push((path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn a9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all(&a);
    run_all(&b);
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let pass = fa.len() == fb.len() && fa.len() >= 10 && differing.is_empty();
    report("A9", pass, format!("{} metric CSVs compared byte for byte across reruns ({}); differing: {differing:?}", fa.len(), names.join(" ")));
}

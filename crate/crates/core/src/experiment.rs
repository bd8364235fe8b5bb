//! One entry point per command-line subcommand. Each run is a pure function
//! of (config, seed): it reads its inputs, writes checkpoints and CSVs under
//! the output directory, and returns printable summary lines.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::baselines::{birl_train, dirl_train, qp_nash_train};
use crate::chase::ChaseGame;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::game::{Game, Policy, Side};
use crate::irl::{generate_demos, DemoSet, IrlRun, NetReward};
use crate::metrics::{
    deterioration, deterioration_exact, matchup, policy_kl, reward_correlation, rollout_returns, sample_states, Actor, MATCHUP_COLUMNS,
};
use crate::mlp::Mlp;
use crate::nash::{oracle_model, run_nash, tabulate_policy, GameReward, NashLogRow, NashTrainer, NetPolicy, RewardSource};
use crate::oracle::{write_value_table, TabularModel};
use crate::report::{Cell, CsvTable, MetricsLog};
use crate::rng::RngStream;

const NASH_STREAM: u64 = 1;
const DEMO_STREAM: u64 = 2;
const IRL_STREAM: u64 = 3;
const BIRL_STREAM: u64 = 4;
const DIRL_STREAM: u64 = 5;
const QP_STREAM: u64 = 6;
const EVAL_STREAM: u64 = 7;

pub const NASH_LOG_HEADER: [&str; 5] = ["iteration", "v_fg", "v_f_gbest", "v_fbest_g", "exploitability"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Birl,
    Dirl,
    Qp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    Corr,
    Kl,
    Deterioration,
    Matchup,
}

/// A configured run rooted at an output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// Directory that relative input paths are resolved against.
    pub base: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn save_net(net: &Mlp, path: &Path) -> Result<()> {
    net.write_checkpoint(create(path)?)
}

pub fn load_net(path: &Path) -> Result<Mlp> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    Mlp::read_checkpoint(BufReader::new(file))
}

/// Every network and optimizer state of both mirrored runs.
pub fn save_trainer(trainer: &NashTrainer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, run) in [("f_run", &trainer.f_run), ("g_run", &trainer.g_run)] {
        let adams = run.adam_states();
        for (k, side) in ["f", "g"].into_iter().enumerate() {
            save_net(&run.online.policies[k], &dir.join(format!("{name}_policy_{side}.ckpt")))?;
            save_net(&run.online.critics[k], &dir.join(format!("{name}_critic_{side}.ckpt")))?;
            save_net(&run.target.policies[k], &dir.join(format!("{name}_target_policy_{side}.ckpt")))?;
            save_net(&run.target.critics[k], &dir.join(format!("{name}_target_critic_{side}.ckpt")))?;
            adams[k].write_state(create(&dir.join(format!("{name}_policy_{side}.adam")))?)?;
            adams[k + 2].write_state(create(&dir.join(format!("{name}_critic_{side}.adam")))?)?;
        }
    }
    Ok(())
}

/// The Nash pair and both trained adversaries under their conventional names.
fn save_policies(trainer: &NashTrainer, out: &Path) -> Result<()> {
    save_net(trainer.f_policy(), &out.join("f.ckpt"))?;
    save_net(trainer.g_policy(), &out.join("g.ckpt"))?;
    save_net(trainer.best_response_f(), &out.join("br_f.ckpt"))?;
    save_net(trainer.best_response_g(), &out.join("br_g.ckpt"))
}

pub fn write_nash_log(rows: &[NashLogRow], path: &Path) -> Result<()> {
    let mut t = CsvTable::new(create(path)?, &NASH_LOG_HEADER)?;
    for r in rows {
        t.row(&[Cell::Int(r.iteration), Cell::Float(r.v_fg), Cell::Float(r.v_f_gbest), Cell::Float(r.v_fbest_g), Cell::opt(r.exploitability)])?;
    }
    t.finish()
}

/// On a numeric failure, dump what training had reached before passing the
/// error on.
fn with_diagnostic<T>(result: Result<T>, out: &Path, dump: impl FnOnce(&Path) -> Result<()>) -> Result<T> {
    if let Err(Error::Numeric(_)) = &result {
        let dir = out.join("diagnostic");
        if let Err(e) = std::fs::create_dir_all(&dir).map_err(Error::from).and_then(|_| dump(&dir)) {
            eprintln!("could not write diagnostic checkpoint: {e}");
        }
    }
    result
}

impl Experiment {
    /// Load `config` (defaults when absent); the seed and output directory
    /// fall back to the config's, then to 0 and `out`.
    pub fn load(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Experiment> {
        let (cfg, base) = match config {
            Some(path) => (ExperimentConfig::load(path)?, path.parent().map(Path::to_path_buf).unwrap_or_default()),
            None => (ExperimentConfig::default(), PathBuf::new()),
        };
        let seed = seed.or(cfg.seed).unwrap_or(0);
        // out_dir, like the input paths, is relative to the config file.
        let out = out
            .map(Path::to_path_buf)
            .or_else(|| cfg.out_dir.as_ref().map(|p| base.join(p)))
            .unwrap_or_else(|| PathBuf::from("out"));
        Experiment::new(cfg, seed, out, base)
    }

    pub fn new(config: ExperimentConfig, seed: u64, out: PathBuf, base: PathBuf) -> Result<Experiment> {
        config.validate()?;
        std::fs::create_dir_all(&out)?;
        Ok(Experiment { config, seed, out, base })
    }

    fn stream(&self, id: u64) -> RngStream {
        RngStream::new(self.seed, id)
    }

    fn game(&self) -> Result<ChaseGame> {
        ChaseGame::new(self.config.game).map_err(|e| Error::Config(e.to_string()))
    }

    fn input(&self, path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        match path {
            Some(p) if p.is_absolute() => Ok(p.clone()),
            Some(p) => Ok(self.base.join(p)),
            None => Err(Error::Config(format!("inputs.{key} is required for this command"))),
        }
    }

    fn input_net(&self, path: &Option<PathBuf>, key: &str) -> Result<Mlp> {
        load_net(&self.input(path, key)?)
    }

    fn oracle_model(&self, game: &ChaseGame) -> Result<Option<TabularModel>> {
        oracle_model(game, &self.config.nash)
    }

    fn require_model(&self, game: &ChaseGame) -> Result<TabularModel> {
        self.oracle_model(game)?
            .ok_or_else(|| Error::Config(format!("{} states exceed nash.oracle_state_cap", game.state_count())))
    }

    fn load_demos(&self) -> Result<DemoSet> {
        let path = self.input(&self.config.inputs.demos, "demos")?;
        let file = File::open(&path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
        let demo = DemoSet::read(BufReader::new(file))?;
        if demo.game != self.config.game {
            return Err(Error::Config(format!("demos were generated on {:?}, config has {:?}", demo.game, self.config.game)));
        }
        Ok(demo)
    }

    /// Exact Shapley solution: golden value table, policies and a summary.
    pub fn oracle(&self) -> Result<Vec<String>> {
        let game = self.game()?;
        let model = self.require_model(&game)?;
        let oc = self.config.oracle;
        let sol = model.shapley_solve(oc.tol, oc.max_sweeps)?;
        let exploitability = model.exploitability(&sol.f, &sol.g)?;
        let g = &self.config.game;
        let header = [
            ("grid_n", g.grid_n.to_string()),
            ("team_size", g.team_size.to_string()),
            ("discount", g.discount.to_string()),
            ("tol", oc.tol.to_string()),
        ];
        write_value_table(create(&self.out.join("values.txt"))?, &header, &sol.values)?;
        let mut t = CsvTable::new(create(&self.out.join("oracle_policy.csv"))?, &["state", "side", "action", "probability"])?;
        for s in 0..model.state_count() {
            for (side, policy) in [("f", &sol.f), ("g", &sol.g)] {
                for (a, &p) in policy.row(s).iter().enumerate() {
                    t.row(&[Cell::Int(s as u64), Cell::text(side), Cell::Int(a as u64), Cell::Float(p)])?;
                }
            }
        }
        t.finish()?;
        let mut t = CsvTable::new(
            create(&self.out.join("oracle_summary.csv"))?,
            &["grid_n", "team_size", "discount", "tol", "sweeps", "residual", "mean_value", "exploitability"],
        )?;
        t.row(&[
            Cell::Int(g.grid_n as u64),
            Cell::Int(g.team_size as u64),
            Cell::Float(g.discount),
            Cell::Float(oc.tol),
            Cell::Int(sol.sweeps as u64),
            Cell::Float(sol.residual),
            Cell::Float(sol.values.mean()),
            Cell::Float(exploitability),
        ])?;
        t.finish()?;
        Ok(vec![
            format!("states: {}  sweeps: {}  residual: {:.3e}", model.state_count(), sol.sweeps, sol.residual),
            format!("mean value: {:.6}  exploitability: {:.3e}", sol.values.mean(), exploitability),
        ])
    }

    fn reward_source<'a>(&self, game: &'a ChaseGame, net: &'a Option<Mlp>) -> Box<dyn RewardSource + 'a> {
        match net {
            Some(net) => Box::new(NetReward { net, game }),
            None => Box::new(GameReward(game)),
        }
    }

    /// Adversarial Nash training under the game's reward, or under a reward
    /// checkpoint when `inputs.reward` is set.
    pub fn solve_nash(&self) -> Result<Vec<String>> {
        let game = self.game()?;
        let reward_net = match &self.config.inputs.reward {
            Some(_) => Some(self.input_net(&self.config.inputs.reward, "reward")?),
            None => None,
        };
        let rewards = self.reward_source(&game, &reward_net);
        let model = self.oracle_model(&game)?;
        let mut trainer = NashTrainer::new(&game, &self.config.nash, &self.stream(NASH_STREAM))?;
        let log = run_nash(&game, rewards.as_ref(), &mut trainer, model.as_ref());
        let log = with_diagnostic(log, &self.out, |dir| save_trainer(&trainer, dir))?;
        write_nash_log(&log, &self.out.join("nash_log.csv"))?;
        save_policies(&trainer, &self.out)?;
        save_trainer(&trainer, &self.out.join("trainer"))?;
        let last = log.last().expect("log has a final row");
        let mut lines = vec![format!(
            "iteration {}: v(f,g) {:.4}  v(f,g_best) {:.4}  v(f_best,g) {:.4}",
            last.iteration, last.v_fg, last.v_f_gbest, last.v_fbest_g
        )];
        if let Some(e) = last.exploitability {
            lines.push(format!("exploitability: {e:.4}"));
        }
        Ok(lines)
    }

    /// Corrupted rollouts of the oracle Nash pair, or of `inputs.policy_f` /
    /// `inputs.policy_g` when both are given.
    pub fn gen_demos(&self) -> Result<Vec<String>> {
        let game = self.game()?;
        let stream = self.stream(DEMO_STREAM);
        let inputs = &self.config.inputs;
        let demo = if inputs.policy_f.is_some() || inputs.policy_g.is_some() {
            let f = self.input_net(&inputs.policy_f, "policy_f")?;
            let g = self.input_net(&inputs.policy_g, "policy_g")?;
            let (pf, pg) = (NetPolicy { net: &f, game: &game }, NetPolicy { net: &g, game: &game });
            generate_demos(&game, &pf as &dyn Policy, &pg as &dyn Policy, &self.config.demo, self.seed, &stream)?
        } else {
            let model = self.require_model(&game)?;
            let sol = model.shapley_solve(self.config.oracle.tol, self.config.oracle.max_sweeps)?;
            generate_demos(&game, &sol.f, &sol.g, &self.config.demo, self.seed, &stream)?
        };
        demo.write(create(&self.out.join("demos.txt"))?)?;
        Ok(vec![format!("{} records at epsilon {}", demo.len(), demo.epsilon)])
    }

    pub fn train_irl(&self) -> Result<Vec<String>> {
        let game = self.game()?;
        let demo = self.load_demos()?;
        let (irl, nash) = (&self.config.irl, &self.config.nash);
        let mut run = IrlRun::new(&game, &demo, irl, nash, &self.stream(IRL_STREAM))?;
        let mut result = Ok(());
        for _ in 0..irl.total_iterations {
            if let Err(e) = run.step(&game, &demo, irl) {
                result = Err(e);
                break;
            }
        }
        with_diagnostic(result, &self.out, |dir| {
            save_net(&run.reward.net, &dir.join("reward.ckpt"))?;
            save_trainer(&run.trainer, dir)
        })?;
        let mut log = MetricsLog::new();
        for c in &run.gap_checks {
            log.push(c.iteration, "irl/v_f_gbest", c.v_f_gbest, nash.eval_batch)?;
            log.push(c.iteration, "irl/v_fbest_g", c.v_fbest_g, nash.eval_batch)?;
            log.push(c.iteration, "irl/gap_check_passed", if c.passed { 1.0 } else { 0.0 }, nash.eval_batch)?;
        }
        for r in &run.reward_steps {
            log.push(r.iteration, "irl/loss", r.irl_loss, irl.demo_batch)?;
        }
        log.write(create(&self.out.join("irl_metrics.csv"))?)?;
        save_net(&run.reward.net, &self.out.join("reward.ckpt"))?;
        save_policies(&run.trainer, &self.out)?;
        let passed = run.gap_checks.iter().filter(|c| c.passed).count();
        let mut lines = vec![format!("gap checks passed: {passed}/{}  reward steps: {}", run.gap_checks.len(), run.reward_steps.len())];
        let states = sample_states(&game, self.config.eval.corr_states, &mut self.stream(EVAL_STREAM).rng());
        if let Ok(r) = reward_correlation(&game, &NetReward { net: &run.reward.net, game: &game }, &states) {
            lines.push(format!("reward correlation: {r:.4}"));
        }
        Ok(lines)
    }

    pub fn baseline(&self, which: Baseline) -> Result<Vec<String>> {
        let game = self.game()?;
        let cfg = &self.config;
        let mut log = MetricsLog::new();
        match which {
            Baseline::Birl => {
                let demo = self.load_demos()?;
                let o = birl_train(&game, &demo, &cfg.birl, &cfg.nash, &self.stream(BIRL_STREAM))?;
                for r in &o.v_log {
                    log.push(r.iteration, "birl/v_loss", r.loss, cfg.birl.demo_batch)?;
                }
                for r in &o.r_log {
                    log.push(r.iteration, "birl/r_loss", r.loss, cfg.birl.demo_batch)?;
                }
                log.write(create(&self.out.join("birl_metrics.csv"))?)?;
                save_net(&o.value, &self.out.join("value.ckpt"))?;
                save_net(&o.reward, &self.out.join("reward.ckpt"))?;
                save_policies(&o.trainer, &self.out)?;
            }
            Baseline::Dirl => {
                let demo = self.load_demos()?;
                let dir = self.out.join("policy_set");
                let o = dirl_train(&game, &demo, &cfg.dirl, &cfg.nash, &self.stream(DIRL_STREAM), Some(&dir))?;
                for r in &o.log {
                    let step = r.outer as u64 * cfg.dirl.r_iterations + r.iteration;
                    log.push(step, "dirl/objective", r.objective, cfg.dirl.demo_batch)?;
                }
                log.write(create(&self.out.join("dirl_metrics.csv"))?)?;
                save_net(&o.reward, &self.out.join("reward.ckpt"))?;
                save_policies(&o.trainer, &self.out)?;
            }
            Baseline::Qp => {
                let o = qp_nash_train(&game, &GameReward(&game), &cfg.qp, &self.stream(QP_STREAM))?;
                for r in &o.log {
                    log.push(r.iteration, "qp/objective", r.objective, cfg.qp.batch_states)?;
                    log.push(r.iteration, "qp/penalty_f", r.penalty_f, cfg.qp.batch_states)?;
                    log.push(r.iteration, "qp/penalty_g", r.penalty_g, cfg.qp.batch_states)?;
                    if let Some(e) = r.exploitability {
                        log.push(r.iteration, "qp/exploitability", e, game.state_count() as usize)?;
                    }
                }
                log.write(create(&self.out.join("qp_metrics.csv"))?)?;
                save_net(&o.models.f, &self.out.join("f.ckpt"))?;
                save_net(&o.models.g, &self.out.join("g.ckpt"))?;
                save_net(&o.models.vf, &self.out.join("vf.ckpt"))?;
                save_net(&o.models.vg, &self.out.join("vg.ckpt"))?;
            }
        }
        Ok(vec![format!("{} rows logged", log.rows().len())])
    }

    /// `table` selects the matchup layout; only the five-pairing layout
    /// (table 3) exists.
    pub fn eval(&self, which: EvalKind, table: Option<u32>) -> Result<Vec<String>> {
        let game = self.game()?;
        let inputs = &self.config.inputs;
        let ev = self.config.eval;
        let mut rng = self.stream(EVAL_STREAM).rng();
        match which {
            EvalKind::Corr => {
                let reward = self.input_net(&inputs.reward, "reward")?;
                let states = sample_states(&game, ev.corr_states, &mut rng);
                let r = reward_correlation(&game, &NetReward { net: &reward, game: &game }, &states)?;
                let mut t = CsvTable::new(create(&self.out.join("corr.csv"))?, &["n_states", "pearson"])?;
                t.row(&[Cell::Int(states.len() as u64), Cell::Float(r)])?;
                t.finish()?;
                Ok(vec![format!("pearson over {} states: {r:.4}", states.len())])
            }
            EvalKind::Kl => {
                let states = sample_states(&game, ev.kl_states, &mut rng);
                let mut t = CsvTable::new(create(&self.out.join("kl.csv"))?, &["side", "n_states", "kl_mean", "kl_standard_error", "clamped"])?;
                let mut lines = Vec::new();
                for (side, p, q) in [("f", &inputs.policy_f, &inputs.reference_f), ("g", &inputs.policy_g, &inputs.reference_g)] {
                    if p.is_none() && q.is_none() {
                        continue;
                    }
                    let (p, q) = (self.input_net(p, &format!("policy_{side}"))?, self.input_net(q, &format!("reference_{side}"))?);
                    let kl = policy_kl(&game, &p, &q, &states)?;
                    t.row(&[
                        Cell::text(side),
                        Cell::Int(states.len() as u64),
                        Cell::Float(kl.kl.mean),
                        Cell::Float(kl.kl.standard_error),
                        Cell::Int(kl.clamped as u64),
                    ])?;
                    lines.push(format!("KL {side}: {:.5} +/- {:.5}{}", kl.kl.mean, kl.kl.standard_error, if kl.clamped { " (clamped)" } else { "" }));
                }
                t.finish()?;
                if lines.is_empty() {
                    return Err(Error::Config("kl needs inputs.policy_f/reference_f or inputs.policy_g/reference_g".into()));
                }
                Ok(lines)
            }
            EvalKind::Deterioration => self.eval_deterioration(&game, &mut rng),
            EvalKind::Matchup => {
                if let Some(n) = table.filter(|&n| n != 3) {
                    return Err(Error::Config(format!("no matchup layout for table {n}; only 3 is defined")));
                }
                let fa = self.input_net(&inputs.policy_f, "policy_f")?;
                let ga = self.input_net(&inputs.policy_g, "policy_g")?;
                let fb = self.input_net(&inputs.b_policy_f, "b_policy_f")?;
                let gb = self.input_net(&inputs.b_policy_g, "b_policy_g")?;
                let starts = sample_states(&game, ev.eval_batch, &mut rng);
                let model = self.oracle_model(&game)?;
                let m = matchup(&game, &GameReward(&game), (&fa, &ga), (&fb, &gb), &starts, ev.eval_horizon, &rng, model.as_ref())?;
                let mut header = vec!["statistic"];
                header.extend(MATCHUP_COLUMNS);
                let mut t = CsvTable::new(create(&self.out.join("matchup.csv"))?, &header)?;
                let row = |label: &str, values: Vec<f64>| {
                    let mut cells = vec![Cell::text(label)];
                    cells.extend(values.into_iter().map(Cell::Float));
                    cells
                };
                t.row(&row("mean", m.sampled.iter().map(|v| v.mean).collect()))?;
                t.row(&row("standard_error", m.sampled.iter().map(|v| v.standard_error).collect()))?;
                if let Some(exact) = &m.exact {
                    t.row(&row("exact", exact.clone()))?;
                }
                t.finish()?;
                let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:>9.3}")).collect::<Vec<_>>().join(" ");
                let mut lines = vec![MATCHUP_COLUMNS.iter().map(|c| format!("{c:>9}")).collect::<Vec<_>>().join(" ")];
                lines.push(fmt(&m.sampled.iter().map(|v| v.mean).collect::<Vec<_>>()));
                if let Some(exact) = &m.exact {
                    lines.push(fmt(exact));
                }
                Ok(lines)
            }
        }
    }

    /// Against the oracle when the game is enumerable (exact, uniform over
    /// states); otherwise sampled against the reference pair.
    fn eval_deterioration(&self, game: &ChaseGame, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<String>> {
        let inputs = &self.config.inputs;
        let f = self.input_net(&inputs.policy_f, "policy_f")?;
        let g = self.input_net(&inputs.policy_g, "policy_g")?;
        let mut rows: Vec<(Side, f64, f64, &str)> = Vec::new();
        if let Some(model) = self.oracle_model(game)? {
            let sol = model.shapley_solve(self.config.oracle.tol, self.config.oracle.max_sweeps)?;
            let v_star = sol.values.mean();
            for (side, net, opponent) in [(Side::F, &f, &sol.g), (Side::G, &g, &sol.f)] {
                let d = deterioration_exact(&model, v_star, &tabulate_policy(game, net)?, side, opponent)?;
                let v = v_star - d * v_star.abs() / 100.0 * if side == Side::F { 1.0 } else { -1.0 };
                rows.push((side, v_star, v, "exact"));
            }
        } else {
            let rf = self.input_net(&inputs.reference_f, "reference_f")?;
            let rg = self.input_net(&inputs.reference_g, "reference_g")?;
            let ev = self.config.eval;
            let starts = sample_states(game, ev.eval_batch, rng);
            let mean = |f: &Mlp, g: &Mlp| -> Result<f64> {
                let r = rollout_returns(game, &GameReward(game), Actor::Net(f), Actor::Net(g), &starts, ev.eval_horizon, &mut rng.clone())?;
                Ok(r.iter().sum::<f64>() / r.len() as f64)
            };
            let v_ref = mean(&rf, &rg)?;
            rows.push((Side::F, v_ref, mean(&f, &rg)?, "sampled"));
            rows.push((Side::G, v_ref, mean(&rf, &g)?, "sampled"));
        }
        let mut t = CsvTable::new(
            create(&self.out.join("deterioration.csv"))?,
            &["side", "v_ref", "v_policy", "deterioration_percent", "method"],
        )?;
        let mut lines = Vec::new();
        for (side, v_ref, v, method) in rows {
            let d = deterioration(v_ref, v, side);
            let name = if side == Side::F { "f" } else { "g" };
            t.row(&[Cell::text(name), Cell::Float(v_ref), Cell::Float(v), Cell::Float(d), Cell::text(method)])?;
            lines.push(format!("{name}: {d:.2}% ({method}, reference {v_ref:.4}, policy {v:.4})"));
        }
        t.finish()?;
        Ok(lines)
    }
}

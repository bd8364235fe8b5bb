//! Exact solvers for enumerable games.
//!
//! [`TabularModel`] expands a [`Game`] into explicit transition tables once;
//! everything else (minimax value iteration, policy evaluation, best
//! responses, exploitability, advantage tables) runs on that expansion.

use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1};

use crate::error::{input_err, Error, Result};
use crate::game::{Game, Policy, Side, DEFAULT_ENUMERATION_CAP};
use crate::lp::{MatrixGame, MatrixSolution};

/// Row-stochastic `N_S x |A|` table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<TabularPolicy> {
        for (s, row) in probs.rows().into_iter().enumerate() {
            let total: f64 = row.sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return input_err(format!("policy row {s} is not a distribution"));
            }
        }
        Ok(TabularPolicy { probs })
    }

    pub fn uniform(states: usize, actions: usize) -> TabularPolicy {
        TabularPolicy { probs: Array2::from_elem((states, actions), 1.0 / actions as f64) }
    }

    /// Point mass on `choice(s)` in every state.
    pub fn pure(states: usize, actions: usize, choice: impl Fn(usize) -> usize) -> TabularPolicy {
        let mut probs = Array2::zeros((states, actions));
        for s in 0..states {
            probs[[s, choice(s)]] = 1.0;
        }
        TabularPolicy { probs }
    }

    /// Tabulate any policy over `states` states.
    pub fn from_policy(policy: &dyn Policy, states: usize) -> Result<TabularPolicy> {
        let mut probs = Array2::zeros((states, policy.action_count()));
        for (s, mut row) in probs.rows_mut().into_iter().enumerate() {
            policy.write_probs(s, row.as_slice_mut().expect("contiguous row"));
        }
        TabularPolicy::new(probs)
    }

    pub fn state_count(&self) -> usize {
        self.probs.nrows()
    }

    pub fn row(&self, state: usize) -> ArrayView1<'_, f64> {
        self.probs.row(state)
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }
}

impl Policy for TabularPolicy {
    fn action_count(&self) -> usize {
        self.probs.ncols()
    }

    fn write_probs(&self, state: usize, out: &mut [f64]) {
        out.copy_from_slice(self.probs.row(state).as_slice().expect("contiguous row"));
    }
}

/// Per-state values `v(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub values: Vec<f64>,
}

impl ValueTable {
    /// Uniform average over states.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ValueTable) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct ShapleySolution {
    pub values: ValueTable,
    pub f: TabularPolicy,
    pub g: TabularPolicy,
    /// Sup-norm Bellman minimax residual of `values`.
    pub residual: f64,
    pub sweeps: usize,
}

/// Record of projected ascent on `F(f) = min_g mean_s v^{f,g}(s)`.
#[derive(Debug, Clone)]
pub struct AscentTrace {
    /// `F` at the start and after every step (`n_steps + 1` entries).
    pub values: Vec<f64>,
    /// Final iterate.
    pub policy: TabularPolicy,
    /// Iterate with the largest `F` seen, and that value. Subgradient steps
    /// are not monotone, so this is what the method actually delivers.
    pub best_policy: TabularPolicy,
    pub best_value: f64,
}

const STAGE_TOL: f64 = 1e-9;
const TIE_EPS: f64 = 1e-9;

/// Explicit expansion of an enumerable game.
#[derive(Debug, Clone)]
pub struct TabularModel {
    n: usize,
    nf: usize,
    ng: usize,
    discount: f64,
    rewards: Vec<f64>,
    offsets: Vec<usize>,
    succ: Vec<(usize, f64)>,
}

impl TabularModel {
    pub fn new<G: Game + ?Sized>(game: &G) -> Result<TabularModel> {
        Self::with_cap(game, DEFAULT_ENUMERATION_CAP)
    }

    pub fn with_cap<G: Game + ?Sized>(game: &G, cap: u64) -> Result<TabularModel> {
        let states = game.state_count();
        if states > cap {
            return Err(Error::EnumerationCap { states, cap });
        }
        let n = states as usize;
        let nf = game.action_count(Side::F);
        let ng = game.action_count(Side::G);
        let mut offsets = Vec::with_capacity(n * nf * ng + 1);
        let mut succ = Vec::with_capacity(n * nf * ng);
        let mut buf = Vec::new();
        offsets.push(0);
        for s in 0..n {
            for af in 0..nf {
                for ag in 0..ng {
                    game.transitions(s, af, ag, &mut buf);
                    succ.extend_from_slice(&buf);
                    offsets.push(succ.len());
                }
            }
        }
        let rewards: Vec<f64> = (0..n).map(|s| game.reward(s)).collect();
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("non-finite reward".into()));
        }
        Ok(TabularModel { n, nf, ng, discount: game.discount(), rewards, offsets, succ })
    }

    /// Same dynamics under a different reward table.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<TabularModel> {
        if rewards.len() != self.n {
            return input_err("reward table length differs from the state count");
        }
        Ok(TabularModel { rewards, ..self.clone() })
    }

    pub fn state_count(&self) -> usize {
        self.n
    }

    pub fn action_count(&self, side: Side) -> usize {
        match side {
            Side::F => self.nf,
            Side::G => self.ng,
        }
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn successors(&self, s: usize, af: usize, ag: usize) -> &[(usize, f64)] {
        let k = (s * self.nf + af) * self.ng + ag;
        &self.succ[self.offsets[k]..self.offsets[k + 1]]
    }

    fn expected_next(&self, s: usize, af: usize, ag: usize, v: &[f64]) -> f64 {
        self.successors(s, af, ag).iter().map(|&(t, p)| p * v[t]).sum()
    }

    fn check_policy(&self, p: &TabularPolicy, side: Side) -> Result<()> {
        if p.state_count() != self.n || p.action_count() != self.action_count(side) {
            return input_err(format!("{side:?} policy has shape {:?}", p.probs.dim()));
        }
        Ok(())
    }

    /// Stage game at `s`: `R(s) + gamma * E[v(s') | s, af, ag]`.
    pub fn stage_game(&self, s: usize, v: &[f64]) -> MatrixGame {
        let payoff = Array2::from_shape_fn((self.nf, self.ng), |(af, ag)| {
            self.rewards[s] + self.discount * self.expected_next(s, af, ag, v)
        });
        MatrixGame::new(payoff)
    }

    fn bellman_minimax(&self, v: &[f64]) -> Result<(Vec<f64>, Vec<MatrixSolution>)> {
        let sols = (0..self.n).map(|s| self.stage_game(s, v).solve(STAGE_TOL)).collect::<Result<Vec<_>>>()?;
        Ok((sols.iter().map(|m| m.value).collect(), sols))
    }

    /// Shapley minimax value iteration until successive sweeps differ by less
    /// than `tol` (or `max_sweeps`). The returned values come with their
    /// measured Bellman residual and the stage-game mixes at those values.
    pub fn shapley_solve(&self, tol: f64, max_sweeps: usize) -> Result<ShapleySolution> {
        let mut v = vec![0.0; self.n];
        let mut sweeps = 0;
        loop {
            let (next, _) = self.bellman_minimax(&v)?;
            let delta = sup_diff(&next, &v);
            v = next;
            sweeps += 1;
            if delta < tol || sweeps >= max_sweeps {
                break;
            }
        }
        let (image, sols) = self.bellman_minimax(&v)?;
        let residual = sup_diff(&image, &v);
        let f = TabularPolicy { probs: rows_to_array(sols.iter().map(|m| m.row_mix.as_slice()), self.nf) };
        let g = TabularPolicy { probs: rows_to_array(sols.iter().map(|m| m.col_mix.as_slice()), self.ng) };
        Ok(ShapleySolution { values: ValueTable { values: v }, f, g, residual, sweeps })
    }

    /// Sparse rows of the state-to-state kernel `P^{f,g}`.
    fn joint_kernel(&self, f: &TabularPolicy, g: &TabularPolicy) -> Vec<Vec<(usize, f64)>> {
        (0..self.n)
            .map(|s| {
                let mut row: Vec<(usize, f64)> = Vec::new();
                for af in 0..self.nf {
                    let pf = f.probs[[s, af]];
                    if pf == 0.0 {
                        continue;
                    }
                    for ag in 0..self.ng {
                        let pg = g.probs[[s, ag]];
                        if pg == 0.0 {
                            continue;
                        }
                        row.extend(self.successors(s, af, ag).iter().map(|&(t, p)| (t, pf * pg * p)));
                    }
                }
                merge_sparse(row)
            })
            .collect()
    }

    /// Exact `v^{f,g}`, solved by fixed-point iteration to within `tol` of the
    /// true value.
    pub fn policy_eval(&self, f: &TabularPolicy, g: &TabularPolicy, tol: f64) -> Result<ValueTable> {
        self.check_policy(f, Side::F)?;
        self.check_policy(g, Side::G)?;
        let kernel = self.joint_kernel(f, g);
        let stop = tol * (1.0 - self.discount) / self.discount.max(1e-12);
        let mut v = self.rewards.clone();
        for _ in 0..100_000 {
            let next: Vec<f64> = kernel
                .iter()
                .zip(&self.rewards)
                .map(|(row, r)| r + self.discount * row.iter().map(|&(t, p)| p * v[t]).sum::<f64>())
                .collect();
            let delta = sup_diff(&next, &v);
            v = next;
            if delta <= stop {
                break;
            }
        }
        Ok(ValueTable { values: v })
    }

    /// `Q(s, a)` for `side` playing `a` once against `opponent`, then values `v`.
    /// For `g` the entries are in f's units (what g pays).
    fn reply_values(&self, s: usize, opponent: &TabularPolicy, side: Side, v: &[f64], out: &mut [f64]) {
        for (a, q) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            match side {
                Side::F => {
                    for ag in 0..self.ng {
                        let p = opponent.probs[[s, ag]];
                        if p != 0.0 {
                            acc += p * self.expected_next(s, a, ag, v);
                        }
                    }
                }
                Side::G => {
                    for af in 0..self.nf {
                        let p = opponent.probs[[s, af]];
                        if p != 0.0 {
                            acc += p * self.expected_next(s, af, a, v);
                        }
                    }
                }
            }
            *q = self.rewards[s] + self.discount * acc;
        }
    }

    /// Optimal reply of `side` to a fixed `opponent`. Values are in f's units
    /// (a g-reply minimizes them). The policy is greedy with ties going to the
    /// lowest action index.
    pub fn best_response(&self, opponent: &TabularPolicy, side: Side, tol: f64) -> Result<(TabularPolicy, ValueTable)> {
        self.check_policy(opponent, side.other())?;
        let k = self.action_count(side);
        let stop = tol * (1.0 - self.discount) / self.discount.max(1e-12);
        let mut v = self.rewards.clone();
        let mut q = vec![0.0; k];
        let pick = |q: &[f64]| match side {
            Side::F => q.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Side::G => q.iter().copied().fold(f64::INFINITY, f64::min),
        };
        for _ in 0..100_000 {
            let mut next = vec![0.0; self.n];
            for (s, slot) in next.iter_mut().enumerate() {
                self.reply_values(s, opponent, side, &v, &mut q);
                *slot = pick(&q);
            }
            let delta = sup_diff(&next, &v);
            v = next;
            if delta <= stop {
                break;
            }
        }
        let policy = TabularPolicy::pure(self.n, k, |s| {
            let mut q = vec![0.0; k];
            self.reply_values(s, opponent, side, &v, &mut q);
            let best = pick(&q);
            q.iter()
                .position(|&x| match side {
                    Side::F => x >= best - TIE_EPS,
                    Side::G => x <= best + TIE_EPS,
                })
                .unwrap_or(0)
        });
        Ok((policy, ValueTable { values: v }))
    }

    /// `max_f' mean v^{f',g} - min_g' mean v^{f,g'}`; zero exactly at a Nash pair.
    pub fn exploitability(&self, f: &TabularPolicy, g: &TabularPolicy) -> Result<f64> {
        let (_, best_f) = self.best_response(g, Side::F, 1e-10)?;
        let (_, best_g) = self.best_response(f, Side::G, 1e-10)?;
        Ok(best_f.mean() - best_g.mean())
    }

    /// `(A_f, A_g)` with `A_f = Q_f - v` and `A_g = Q_g + v`, where `Q_g` is
    /// measured in g's own (negated) reward.
    pub fn advantage_tables(&self, f: &TabularPolicy, g: &TabularPolicy) -> Result<(Array2<f64>, Array2<f64>)> {
        let v = self.policy_eval(f, g, 1e-11)?;
        let mut adv_f = Array2::zeros((self.n, self.nf));
        let mut adv_g = Array2::zeros((self.n, self.ng));
        let mut qf = vec![0.0; self.nf];
        let mut qg = vec![0.0; self.ng];
        for s in 0..self.n {
            self.reply_values(s, g, Side::F, &v.values, &mut qf);
            self.reply_values(s, f, Side::G, &v.values, &mut qg);
            for a in 0..self.nf {
                adv_f[[s, a]] = qf[a] - v.values[s];
            }
            for a in 0..self.ng {
                // Q_g = -R - gamma E[v'] is the negation of f's reply value.
                adv_g[[s, a]] = -qg[a] + v.values[s];
            }
        }
        Ok((adv_f, adv_g))
    }

    /// `F(f) = min_g mean_s v^{f,g}(s)`.
    pub fn worst_case_value(&self, f: &TabularPolicy) -> Result<f64> {
        Ok(self.best_response(f, Side::G, 1e-10)?.1.mean())
    }

    /// Projected ascent on `F`. Each step takes one best response `g` to the
    /// current `f`, moves every state's row along `A_f` under `(f, g)` and
    /// projects back onto the simplex. Step `k` (0-based) has length
    /// `step_size / sqrt(k + 1)`.
    pub fn ascend_f(&self, f_init: &TabularPolicy, step_size: f64, n_steps: usize) -> Result<AscentTrace> {
        self.check_policy(f_init, Side::F)?;
        let mut f = f_init.clone();
        let mut values = Vec::with_capacity(n_steps + 1);
        let mut best_policy = f.clone();
        let mut best_value = f64::NEG_INFINITY;
        for k in 0..n_steps {
            let eta = step_size / ((k + 1) as f64).sqrt();
            let (g, worst) = self.best_response(&f, Side::G, 1e-10)?;
            let value = worst.mean();
            values.push(value);
            if value > best_value {
                best_value = value;
                best_policy = f.clone();
            }
            let (adv_f, _) = self.advantage_tables(&f, &g)?;
            for s in 0..self.n {
                let moved: Vec<f64> = f.probs.row(s).iter().zip(adv_f.row(s)).map(|(p, a)| p + eta * a).collect();
                let projected = project_to_simplex(&moved);
                f.probs.row_mut(s).iter_mut().zip(projected).for_each(|(dst, src)| *dst = src);
            }
        }
        let value = self.worst_case_value(&f)?;
        values.push(value);
        if value > best_value {
            best_value = value;
            best_policy = f.clone();
        }
        Ok(AscentTrace { values, policy: f, best_policy, best_value })
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn merge_sparse(mut row: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    row.sort_by_key(|e| e.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(row.len());
    for (t, p) in row {
        match out.last_mut() {
            Some(last) if last.0 == t => last.1 += p,
            _ => out.push((t, p)),
        }
    }
    out
}

fn rows_to_array<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    let n = flat.len() / width;
    Array2::from_shape_vec((n, width), flat).expect("rows of equal width")
}

const TABLE_MAGIC: &str = "# zsirl value table v1";

/// Write a value table as text: a magic line, one `# key=value ...` header
/// line, then `state value` rows with 17 significant digits.
pub fn write_value_table<W: Write>(mut w: W, header: &[(&str, String)], values: &ValueTable) -> Result<()> {
    writeln!(w, "{TABLE_MAGIC}")?;
    let fields: Vec<String> = header.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(w, "# {}", fields.join(" "))?;
    for (s, v) in values.values.iter().enumerate() {
        writeln!(w, "{s} {v:.16e}")?;
    }
    Ok(())
}

/// Inverse of [`write_value_table`].
pub fn read_value_table<R: BufRead>(r: R) -> Result<(Vec<(String, String)>, ValueTable)> {
    let mut lines = r.lines();
    let magic = lines.next().transpose()?.unwrap_or_default();
    if magic.trim() != TABLE_MAGIC {
        return Err(Error::Format(format!("unexpected value-table magic {magic:?}")));
    }
    let header_line = lines.next().transpose()?.unwrap_or_default();
    let header = header_line
        .trim_start_matches('#')
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let mut values = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let idx: usize = parse_field(parts.next(), &line)?;
        let value: f64 = parse_field(parts.next(), &line)?;
        if idx != values.len() {
            return Err(Error::Format(format!("state {idx} out of order")));
        }
        values.push(value);
    }
    Ok((header, ValueTable { values }))
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, line: &str) -> Result<T> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad value-table row {line:?}")))
}

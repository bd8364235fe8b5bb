//! Matrix games solved as linear programs with a dense tableau simplex.

use ndarray::Array2;

use crate::error::{input_err, Error, Result};

/// A two-player zero-sum stage game; the row player maximizes.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGame {
    pub payoff: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSolution {
    pub value: f64,
    pub row_mix: Vec<f64>,
    pub col_mix: Vec<f64>,
}

const PIVOT_EPS: f64 = 1e-12;

impl MatrixGame {
    pub fn new(payoff: Array2<f64>) -> MatrixGame {
        MatrixGame { payoff }
    }

    /// Solve for the value and a pair of optimal mixed strategies.
    ///
    /// The returned mixes are checked against every pure reply: the row mix
    /// guarantees at least `value - tol`, the column mix at most `value + tol`.
    pub fn solve(&self, tol: f64) -> Result<MatrixSolution> {
        let (m, n) = self.payoff.dim();
        if m == 0 || n == 0 {
            return input_err("empty payoff matrix");
        }
        if self.payoff.iter().any(|v| !v.is_finite()) {
            return input_err("payoff matrix has non-finite entries");
        }
        let sol = self.pure_saddle().map_or_else(|| self.simplex(), Ok)?;
        self.verify(&sol, tol)?;
        Ok(sol)
    }

    fn pure_saddle(&self) -> Option<MatrixSolution> {
        let (m, n) = self.payoff.dim();
        let row_mins: Vec<f64> = self.payoff.rows().into_iter().map(|r| r.fold(f64::INFINITY, |a, &b| a.min(b))).collect();
        let col_maxs: Vec<f64> = self.payoff.columns().into_iter().map(|c| c.fold(f64::NEG_INFINITY, |a, &b| a.max(b))).collect();
        let (i, lower) = argmax_first(&row_mins);
        let (j, upper) = argmin_first(&col_maxs);
        if lower < upper {
            return None;
        }
        let mut row_mix = vec![0.0; m];
        let mut col_mix = vec![0.0; n];
        row_mix[i] = 1.0;
        col_mix[j] = 1.0;
        Some(MatrixSolution { value: self.payoff[[i, j]], row_mix, col_mix })
    }

    // max sum(w) s.t. A w <= 1, w >= 0 with A = M + shift > 0.
    // Then value(A) = 1/sum(w), the column mix is w normalized and the row
    // mix is the normalized dual, read off the slack columns.
    fn simplex(&self) -> Result<MatrixSolution> {
        let (m, n) = self.payoff.dim();
        let min = self.payoff.fold(f64::INFINITY, |a, &b| a.min(b));
        let shift = 1.0 - min;
        let cols = n + m;
        let width = cols + 1;
        let mut tab = vec![0.0; (m + 1) * width];
        for i in 0..m {
            for j in 0..n {
                tab[i * width + j] = self.payoff[[i, j]] + shift;
            }
            tab[i * width + n + i] = 1.0;
            tab[i * width + cols] = 1.0;
        }
        let obj = m * width;
        for j in 0..n {
            tab[obj + j] = -1.0;
        }
        let mut basis: Vec<usize> = (n..n + m).collect();

        let max_pivots = 50 * (m + n) + 1000;
        let mut pivots = 0;
        loop {
            // Bland's rule: lowest-index improving column.
            let Some(enter) = (0..cols).find(|&j| tab[obj + j] < -PIVOT_EPS) else { break };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let a = tab[i * width + enter];
                if a > PIVOT_EPS {
                    let ratio = tab[i * width + cols] / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((k, best)) => {
                            if ratio < best - 1e-15 || (ratio <= best + 1e-15 && basis[i] < basis[k]) {
                                Some((i, ratio))
                            } else {
                                Some((k, best))
                            }
                        }
                    };
                }
            }
            // A w <= 1 with A > 0 is bounded, so a leaving row always exists.
            let (row, _) = leave.ok_or_else(|| Error::Numeric("unbounded matrix-game LP".into()))?;
            pivot(&mut tab, width, m + 1, row, enter);
            basis[row] = enter;
            pivots += 1;
            if pivots > max_pivots {
                return Err(Error::Numeric("simplex failed to terminate".into()));
            }
        }

        let z = tab[obj + cols];
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::Numeric(format!("degenerate LP objective {z}")));
        }
        let mut col_mix = vec![0.0; n];
        for (i, &b) in basis.iter().enumerate() {
            if b < n {
                col_mix[b] = tab[i * width + cols].max(0.0);
            }
        }
        let row_mix: Vec<f64> = (0..m).map(|i| tab[obj + n + i].max(0.0)).collect();
        Ok(MatrixSolution {
            value: 1.0 / z - shift,
            row_mix: normalized(row_mix)?,
            col_mix: normalized(col_mix)?,
        })
    }

    fn verify(&self, sol: &MatrixSolution, tol: f64) -> Result<()> {
        let (lower, upper) = self.guarantees(&sol.row_mix, &sol.col_mix);
        if lower < sol.value - tol || upper > sol.value + tol {
            return Err(Error::Numeric(format!(
                "matrix-game solution off by more than {tol}: value {} but guarantees [{lower}, {upper}]",
                sol.value
            )));
        }
        Ok(())
    }

    /// `(min_j x^T M e_j, max_i e_i^T M y)`: what each mix secures against pure replies.
    pub fn guarantees(&self, row_mix: &[f64], col_mix: &[f64]) -> (f64, f64) {
        let lower = self
            .payoff
            .columns()
            .into_iter()
            .map(|c| c.iter().zip(row_mix).map(|(a, x)| a * x).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let upper = self
            .payoff
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(col_mix).map(|(a, y)| a * y).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        (lower, upper)
    }
}

fn pivot(tab: &mut [f64], width: usize, rows: usize, row: usize, col: usize) {
    let p = tab[row * width + col];
    for k in 0..width {
        tab[row * width + k] /= p;
    }
    for i in 0..rows {
        if i == row {
            continue;
        }
        let factor = tab[i * width + col];
        if factor != 0.0 {
            for k in 0..width {
                tab[i * width + k] -= factor * tab[row * width + k];
            }
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = v.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric("mixed strategy with zero mass".into()));
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(v)
}

pub(crate) fn argmax_first(xs: &[f64]) -> (usize, f64) {
    xs.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
}

pub(crate) fn argmin_first(xs: &[f64]) -> (usize, f64) {
    xs.iter().enumerate().fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn matching_pennies() {
        let sol = MatrixGame::new(array![[1.0, -1.0], [-1.0, 1.0]]).solve(1e-8).unwrap();
        assert!(sol.value.abs() < 1e-12);
        for p in sol.row_mix.iter().chain(&sol.col_mix) {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        // Equalizing 2x = 1 - x for the row player gives x = 1/3, value 2/3.
        let sol = MatrixGame::new(array![[2.0, 0.0], [0.0, 1.0]]).solve(1e-8).unwrap();
        assert!((sol.value - 2.0 / 3.0).abs() < 1e-12);
        assert!((sol.row_mix[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((sol.row_mix[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((sol.col_mix[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_matrix() {
        let sol = MatrixGame::new(Array2::from_elem((3, 4), -2.5)).solve(1e-8).unwrap();
        assert!((sol.value + 2.5).abs() < 1e-12);
    }

    #[test]
    fn rock_paper_scissors_variant() {
        let m = array![[0.0, 2.0, -1.0], [-1.0, 0.0, 1.0], [1.0, -1.0, 0.0]];
        let sol = MatrixGame::new(m).solve(1e-8).unwrap();
        assert!((sol.value - 1.0 / 12.0).abs() < 1e-12);
        let expect = [0.25, 1.0 / 3.0, 5.0 / 12.0];
        for (p, e) in sol.row_mix.iter().zip(expect) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        let err = MatrixGame::new(array![[1.0, f64::NAN]]).solve(1e-8);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn solution_is_a_saddle_point(rows in 1usize..7, cols in 1usize..7, entries in proptest::collection::vec(-10.0f64..10.0, 36)) {
            let m = Array2::from_shape_fn((rows, cols), |(i, j)| entries[i * 6 + j]);
            let game = MatrixGame::new(m);
            let sol = game.solve(1e-8).unwrap();
            let (lower, upper) = game.guarantees(&sol.row_mix, &sol.col_mix);
            prop_assert!(lower >= sol.value - 1e-8 && upper <= sol.value + 1e-8);
            let maxmin = game.payoff.rows().into_iter().map(|r| r.fold(f64::INFINITY, |a, &b| a.min(b))).fold(f64::NEG_INFINITY, f64::max);
            let minmax = game.payoff.columns().into_iter().map(|c| c.fold(f64::NEG_INFINITY, |a, &b| a.max(b))).fold(f64::INFINITY, f64::min);
            prop_assert!(sol.value >= maxmin - 1e-9 && sol.value <= minmax + 1e-9);
            prop_assert!((sol.row_mix.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

//! Dense two-phase simplex over exact rationals.
//!
//! Problems here are tiny (at most a few dozen variables and rows), so a
//! dense tableau with Bland's anti-cycling rule is the right tool: exact
//! arithmetic, guaranteed termination, deterministic pivots and therefore
//! byte-for-byte reproducible solutions.
//!
//! Canonical form: maximize `c . x` subject to `A x <= b`, `x >= 0`.
//! Negative right-hand sides are allowed (phase 1 introduces artificial
//! variables for them).  Encode `>=` rows by negation and equalities as
//! two opposing inequalities.

use num_rational::BigRational;
use num_traits::{Signed, Zero};

/// `maximize objective . x` subject to `coeffs . x <= rhs` per row, `x >= 0`.
#[derive(Clone, Debug, Default)]
pub struct LpProblem {
    pub objective: Vec<BigRational>,
    pub constraints: Vec<(Vec<BigRational>, BigRational)>,
}

impl LpProblem {
    pub fn new(objective: Vec<BigRational>) -> Self {
        Self {
            objective,
            constraints: Vec::new(),
        }
    }

    pub fn add_le(&mut self, coeffs: Vec<BigRational>, rhs: BigRational) {
        assert_eq!(coeffs.len(), self.objective.len());
        self.constraints.push((coeffs, rhs));
    }

    pub fn add_ge(&mut self, coeffs: Vec<BigRational>, rhs: BigRational) {
        self.add_le(coeffs.iter().map(|c| -c).collect(), -rhs);
    }

    pub fn add_eq(&mut self, coeffs: Vec<BigRational>, rhs: BigRational) {
        self.add_le(coeffs.clone(), rhs.clone());
        self.add_ge(coeffs, rhs);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpResult {
    Optimal {
        x: Vec<BigRational>,
        value: BigRational,
    },
    Infeasible,
    Unbounded,
}

impl LpResult {
    pub fn optimal(self) -> Option<(Vec<BigRational>, BigRational)> {
        match self {
            LpResult::Optimal { x, value } => Some((x, value)),
            _ => None,
        }
    }
}

pub fn maximize(problem: &LpProblem) -> LpResult {
    Tableau::solve(problem)
}

/// Minimizes by maximizing the negated objective.
pub fn minimize(problem: &LpProblem) -> LpResult {
    let negated = LpProblem {
        objective: problem.objective.iter().map(|c| -c).collect(),
        constraints: problem.constraints.clone(),
    };
    match maximize(&negated) {
        LpResult::Optimal { x, value } => LpResult::Optimal { x, value: -value },
        other => other,
    }
}

struct Tableau {
    /// m rows of length ncols + 1 (last entry is the rhs).
    rows: Vec<Vec<BigRational>>,
    /// Reduced-cost row; last entry is minus the objective value.
    obj: Vec<BigRational>,
    basis: Vec<usize>,
    ncols: usize,
}

impl Tableau {
    fn solve(problem: &LpProblem) -> LpResult {
        let nvars = problem.objective.len();
        let m = problem.constraints.len();
        let nslack = m;
        let negative_rows: Vec<usize> = problem
            .constraints
            .iter()
            .enumerate()
            .filter(|(_, (_, b))| b.is_negative())
            .map(|(i, _)| i)
            .collect();
        let nart = negative_rows.len();
        let art_start = nvars + nslack;
        let ncols = nvars + nslack + nart;

        let mut rows = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        let mut next_art = art_start;
        for (i, (coeffs, rhs)) in problem.constraints.iter().enumerate() {
            let mut row = vec![BigRational::zero(); ncols + 1];
            let flip = rhs.is_negative();
            for (j, c) in coeffs.iter().enumerate() {
                row[j] = if flip { -c } else { c.clone() };
            }
            row[nvars + i] = if flip {
                -BigRational::from_integer(1.into())
            } else {
                BigRational::from_integer(1.into())
            };
            row[ncols] = if flip { -rhs } else { rhs.clone() };
            if flip {
                row[next_art] = BigRational::from_integer(1.into());
                basis.push(next_art);
                next_art += 1;
            } else {
                basis.push(nvars + i);
            }
            rows.push(row);
        }

        let mut t = Tableau {
            rows,
            obj: vec![BigRational::zero(); ncols + 1],
            basis,
            ncols,
        };

        if nart > 0 {
            // Phase 1: maximize minus the sum of artificials.
            let mut cost = vec![BigRational::zero(); ncols];
            for c in cost.iter_mut().take(ncols).skip(art_start) {
                *c = -BigRational::from_integer(1.into());
            }
            t.load_objective(&cost);
            t.pivot_to_optimum();
            if !t.value().is_zero() {
                return LpResult::Infeasible;
            }
            t.drive_out_artificials(art_start);
            t.truncate_cols(art_start);
        }

        // Phase 2 with the real objective.
        let mut cost = vec![BigRational::zero(); t.ncols];
        cost[..nvars].clone_from_slice(&problem.objective);
        t.load_objective(&cost);
        if !t.pivot_to_optimum() {
            return LpResult::Unbounded;
        }

        let mut x = vec![BigRational::zero(); nvars];
        for (i, &b) in t.basis.iter().enumerate() {
            if b < nvars {
                x[b] = t.rows[i][t.ncols].clone();
            }
        }
        LpResult::Optimal {
            x,
            value: t.value(),
        }
    }

    fn value(&self) -> BigRational {
        -self.obj[self.ncols].clone()
    }

    /// Sets the objective row for cost vector `cost`, eliminating basic
    /// columns so reduced costs are consistent with the current basis.
    fn load_objective(&mut self, cost: &[BigRational]) {
        self.obj = vec![BigRational::zero(); self.ncols + 1];
        self.obj[..self.ncols].clone_from_slice(cost);
        for (i, &b) in self.basis.iter().enumerate() {
            if !self.obj[b].is_zero() {
                let factor = self.obj[b].clone();
                for j in 0..=self.ncols {
                    let delta = &factor * &self.rows[i][j];
                    self.obj[j] -= delta;
                }
            }
        }
    }

    /// Bland's rule pivoting until no improving column remains.
    /// Returns false when the problem is unbounded.
    fn pivot_to_optimum(&mut self) -> bool {
        loop {
            let Some(col) = (0..self.ncols).find(|&j| self.obj[j].is_positive()) else {
                return true;
            };
            let mut best: Option<(usize, BigRational)> = None;
            for i in 0..self.rows.len() {
                if self.rows[i][col].is_positive() {
                    let ratio = &self.rows[i][self.ncols] / &self.rows[i][col];
                    let better = match &best {
                        None => true,
                        Some((bi, br)) => {
                            ratio < *br || (ratio == *br && self.basis[i] < self.basis[*bi])
                        }
                    };
                    if better {
                        best = Some((i, ratio));
                    }
                }
            }
            let Some((row, _)) = best else {
                return false;
            };
            self.pivot(row, col);
        }
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let pivot = self.rows[row][col].clone();
        for v in self.rows[row].iter_mut() {
            *v /= &pivot;
        }
        for i in 0..self.rows.len() {
            if i != row && !self.rows[i][col].is_zero() {
                let factor = self.rows[i][col].clone();
                for j in 0..=self.ncols {
                    let delta = &factor * &self.rows[row][j];
                    self.rows[i][j] -= delta;
                }
            }
        }
        if !self.obj[col].is_zero() {
            let factor = self.obj[col].clone();
            for j in 0..=self.ncols {
                let delta = &factor * &self.rows[row][j];
                self.obj[j] -= delta;
            }
        }
        self.basis[row] = col;
    }

    /// After a zero-value phase 1, pivots basic artificials onto real
    /// columns; rows with no real coefficient are redundant and dropped.
    fn drive_out_artificials(&mut self, art_start: usize) {
        let mut i = 0;
        while i < self.rows.len() {
            if self.basis[i] >= art_start {
                if let Some(col) = (0..art_start).find(|&j| !self.rows[i][j].is_zero()) {
                    self.pivot(i, col);
                } else {
                    self.rows.remove(i);
                    self.basis.remove(i);
                    continue;
                }
            }
            i += 1;
        }
    }

    fn truncate_cols(&mut self, new_ncols: usize) {
        for row in &mut self.rows {
            let rhs = row.pop().unwrap();
            row.truncate(new_ncols);
            row.push(rhs);
        }
        self.ncols = new_ncols;
    }
}

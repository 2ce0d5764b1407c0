//! Exact training of the linear eps-nv learner as a linear program.
//!
//! [`build_eps_nv_lp`] writes the empirical risk minimisation problem in
//! inequality standard form `min c'x  s.t.  Ax <= b, x >= 0`, and
//! [`solve_simplex`] solves any such problem with a dense two-phase tableau
//! simplex.
//!
//! Pricing uses Dantzig's most-negative reduced cost and switches to Bland's
//! smallest-index rule after every degenerate pivot, so a run of degenerate
//! pivots is always a run of Bland pivots and cannot cycle.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{LossKind, LossSpec};

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;

/// `min cost'x` subject to `constraint_matrix * x <= rhs`, `x >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardLp {
    pub cost: Vec<f64>,
    /// Row-major, `n_constraints x n_vars`.
    pub constraint_matrix: Vec<f64>,
    pub rhs: Vec<f64>,
    pub n_vars: usize,
    pub n_constraints: usize,
}

impl StandardLp {
    pub fn new(cost: Vec<f64>, rows: Vec<Vec<f64>>, rhs: Vec<f64>) -> Result<Self> {
        let n_vars = cost.len();
        let n_constraints = rows.len();
        if rhs.len() != n_constraints {
            return Err(Error::Dimension {
                expected: n_constraints,
                got: rhs.len(),
            });
        }
        let mut constraint_matrix = Vec::with_capacity(n_vars * n_constraints);
        for row in rows {
            if row.len() != n_vars {
                return Err(Error::Dimension {
                    expected: n_vars,
                    got: row.len(),
                });
            }
            constraint_matrix.extend(row);
        }
        Ok(StandardLp {
            cost,
            constraint_matrix,
            rhs,
            n_vars,
            n_constraints,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.constraint_matrix[i * self.n_vars..(i + 1) * self.n_vars]
    }

    fn check(&self) -> Result<()> {
        if self.cost.len() != self.n_vars {
            return Err(Error::Dimension {
                expected: self.n_vars,
                got: self.cost.len(),
            });
        }
        if self.rhs.len() != self.n_constraints {
            return Err(Error::Dimension {
                expected: self.n_constraints,
                got: self.rhs.len(),
            });
        }
        if self.constraint_matrix.len() != self.n_vars * self.n_constraints {
            return Err(Error::Dimension {
                expected: self.n_vars * self.n_constraints,
                got: self.constraint_matrix.len(),
            });
        }
        Ok(())
    }

    /// Largest violation of `Ax <= b` and `x >= 0` at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = x.iter().fold(0.0_f64, |w, &v| w.max(-v));
        for i in 0..self.n_constraints {
            let lhs: f64 = self.row(i).iter().zip(x).map(|(a, v)| a * v).sum();
            worst = worst.max(lhs - self.rhs[i]);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Unbounded,
    Infeasible,
    IterationLimit,
}

/// Raw simplex output for a [`StandardLp`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: LpStatus,
    pub iterations: usize,
}

/// Solution of the eps-nv training LP mapped back to coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub status: LpStatus,
}

/// Builds the eps-nv ERM problem for a linear decision rule.
///
/// Variables are laid out as `[theta+ (p), theta- (p), o (n), u (n)]` where
/// `o_i >= x_i'theta - s_i - eps1` is the excess over the band and
/// `u_i >= s_i + eps2 - x_i'theta` the shortfall below it. The objective is
/// `(1/n) sum (1-a) o_i + a u_i`.
pub fn build_eps_nv_lp(dataset: &Dataset, spec: &LossSpec) -> Result<StandardLp> {
    if spec.kind != LossKind::EpsNv {
        return Err(Error::Config("the LP formulation requires an eps-nv loss".into()));
    }
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("cannot build an LP from an empty dataset".into()));
    }
    let n = dataset.len();
    let p = dataset.dim()?;
    if p == 0 {
        return Err(Error::Input("dataset has no features".into()));
    }
    let n_vars = 2 * p + 2 * n;
    let n_constraints = 2 * n;
    let inv_n = 1.0 / n as f64;

    let mut cost = vec![0.0; n_vars];
    for i in 0..n {
        cost[2 * p + i] = (1.0 - spec.alpha) * inv_n;
        cost[2 * p + n + i] = spec.alpha * inv_n;
    }

    let mut a = vec![0.0; n_vars * n_constraints];
    let mut rhs = vec![0.0; n_constraints];
    for (i, row) in dataset.rows.iter().enumerate() {
        let over = &mut a[(2 * i) * n_vars..(2 * i + 1) * n_vars];
        for (j, &x) in row.features.iter().enumerate() {
            over[j] = x;
            over[p + j] = -x;
        }
        over[2 * p + i] = -1.0;
        rhs[2 * i] = row.sale + spec.eps1;

        let under = &mut a[(2 * i + 1) * n_vars..(2 * i + 2) * n_vars];
        for (j, &x) in row.features.iter().enumerate() {
            under[j] = -x;
            under[p + j] = x;
        }
        under[2 * p + n + i] = -1.0;
        rhs[2 * i + 1] = -(row.sale + spec.eps2);
    }

    Ok(StandardLp {
        cost,
        constraint_matrix: a,
        rhs,
        n_vars,
        n_constraints,
    })
}

/// Solves the eps-nv training LP and extracts `theta = theta+ - theta-`.
pub fn solve_eps_nv(dataset: &Dataset, spec: &LossSpec, max_iters: usize) -> Result<LpSolution> {
    let lp = build_eps_nv_lp(dataset, spec)?;
    let p = dataset.dim()?;
    let sol = solve_simplex(&lp, max_iters)?;
    let theta = (0..p).map(|j| sol.x[j] - sol.x[p + j]).collect();
    Ok(LpSolution {
        theta,
        objective: sol.objective,
        status: sol.status,
    })
}

/// Default iteration budget, `50 * (n_vars + n_constraints)`.
pub fn default_max_iters(lp: &StandardLp) -> usize {
    50 * (lp.n_vars + lp.n_constraints)
}

struct Tableau {
    m: usize,
    /// Number of columns excluding the rhs column.
    width: usize,
    /// Row-major `m x (width + 1)`; last column is the rhs.
    cells: Vec<f64>,
    basis: Vec<usize>,
    /// Reduced costs of the current objective.
    reduced: Vec<f64>,
    /// Negated objective value carried alongside the reduced costs.
    obj: f64,
    /// Columns that may never enter.
    barred: Vec<bool>,
    nz: Vec<usize>,
}

impl Tableau {
    fn stride(&self) -> usize {
        self.width + 1
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.cells[i * self.stride() + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.cells[i * self.stride() + self.width]
    }

    fn price(&self, bland: bool) -> Option<usize> {
        let mut best = None;
        let mut best_val = -PIVOT_TOL;
        for j in 0..self.width {
            if self.barred[j] {
                continue;
            }
            let d = self.reduced[j];
            if d < best_val {
                best = Some(j);
                if bland {
                    break;
                }
                best_val = d;
            }
        }
        best
    }

    fn ratio_test(&self, e: usize, bland: bool) -> Option<usize> {
        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for i in 0..self.m {
            let a = self.at(i, e);
            if a <= PIVOT_TOL {
                continue;
            }
            let ratio = self.rhs(i).max(0.0) / a;
            match leave {
                None => {
                    leave = Some(i);
                    best_ratio = ratio;
                }
                Some(r) => {
                    if ratio < best_ratio - 1e-12 {
                        leave = Some(i);
                        best_ratio = ratio;
                    } else if ratio <= best_ratio + 1e-12 {
                        let better = if bland {
                            self.basis[i] < self.basis[r]
                        } else {
                            a > self.at(r, e)
                        };
                        if better {
                            leave = Some(i);
                            best_ratio = best_ratio.min(ratio);
                        }
                    }
                }
            }
        }
        leave
    }

    fn pivot(&mut self, r: usize, e: usize) {
        let stride = self.stride();
        let piv = self.cells[r * stride + e];
        {
            let row = &mut self.cells[r * stride..(r + 1) * stride];
            let inv = 1.0 / piv;
            for v in row.iter_mut() {
                if *v != 0.0 {
                    *v *= inv;
                    if v.abs() < 1e-14 {
                        *v = 0.0;
                    }
                }
            }
            row[e] = 1.0;
        }
        self.nz.clear();
        for j in 0..stride {
            if self.cells[r * stride + j] != 0.0 {
                self.nz.push(j);
            }
        }
        let (before, rest) = self.cells.split_at_mut(r * stride);
        let (pivot_row, after) = rest.split_at_mut(stride);
        for row in before
            .chunks_exact_mut(stride)
            .chain(after.chunks_exact_mut(stride))
        {
            let factor = row[e];
            if factor == 0.0 {
                continue;
            }
            for &j in &self.nz {
                row[j] -= factor * pivot_row[j];
            }
            row[e] = 0.0;
        }
        let factor = self.reduced[e];
        if factor != 0.0 {
            for &j in &self.nz {
                if j == self.width {
                    self.obj -= factor * pivot_row[j];
                } else {
                    self.reduced[j] -= factor * pivot_row[j];
                }
            }
            self.reduced[e] = 0.0;
        }
        self.basis[r] = e;
    }

    /// Installs `cost` (length `width`) as the objective over the current basis.
    fn set_objective(&mut self, cost: &[f64]) {
        self.reduced.copy_from_slice(cost);
        self.obj = 0.0;
        let stride = self.stride();
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb == 0.0 {
                continue;
            }
            let row = &self.cells[i * stride..(i + 1) * stride];
            for j in 0..self.width {
                if row[j] != 0.0 {
                    self.reduced[j] -= cb * row[j];
                }
            }
            self.obj -= cb * row[self.width];
        }
    }

    /// Runs primal simplex iterations on the installed objective.
    fn optimize(&mut self, iters: &mut usize, max_iters: usize) -> LpStatus {
        let mut bland = false;
        loop {
            let Some(e) = self.price(bland) else {
                return LpStatus::Optimal;
            };
            let Some(r) = self.ratio_test(e, bland) else {
                return LpStatus::Unbounded;
            };
            if *iters >= max_iters {
                return LpStatus::IterationLimit;
            }
            let degenerate = self.rhs(r) <= FEAS_TOL;
            self.pivot(r, e);
            *iters += 1;
            bland = degenerate;
        }
    }
}

/// Dense two-phase simplex for `min c'x, Ax <= b, x >= 0`.
pub fn solve_simplex(lp: &StandardLp, max_iters: usize) -> Result<SimplexSolution> {
    lp.check()?;
    let m = lp.n_constraints;
    let n = lp.n_vars;
    let n_art = lp.rhs.iter().filter(|&&b| b < 0.0).count();
    let width = n + m + n_art;
    let stride = width + 1;

    let mut cells = vec![0.0; m * stride];
    let mut basis = vec![0; m];
    let mut next_art = n + m;
    for i in 0..m {
        let row = &mut cells[i * stride..(i + 1) * stride];
        let sign = if lp.rhs[i] < 0.0 { -1.0 } else { 1.0 };
        for (dst, &a) in row[..n].iter_mut().zip(lp.row(i)) {
            *dst = sign * a;
        }
        row[n + i] = sign;
        row[width] = sign * lp.rhs[i];
        if sign < 0.0 {
            row[next_art] = 1.0;
            basis[i] = next_art;
            next_art += 1;
        } else {
            basis[i] = n + i;
        }
    }

    let mut tab = Tableau {
        m,
        width,
        cells,
        basis,
        reduced: vec![0.0; width],
        obj: 0.0,
        barred: vec![false; width],
        nz: Vec::with_capacity(width + 1),
    };
    let mut iters = 0;

    if n_art > 0 {
        let mut phase1 = vec![0.0; width];
        phase1[n + m..].iter_mut().for_each(|c| *c = 1.0);
        tab.set_objective(&phase1);
        let status = tab.optimize(&mut iters, max_iters);
        match status {
            LpStatus::Optimal => {}
            LpStatus::IterationLimit => {
                return Ok(finish(&tab, lp, LpStatus::IterationLimit, iters));
            }
            // Phase one is bounded below by zero.
            LpStatus::Unbounded | LpStatus::Infeasible => unreachable!(),
        }
        if -tab.obj > 1e-7 {
            return Ok(finish(&tab, lp, LpStatus::Infeasible, iters));
        }
        for j in n + m..width {
            tab.barred[j] = true;
        }
        // Drive zero-level artificials out of the basis where possible.
        for i in 0..m {
            if tab.basis[i] < n + m {
                continue;
            }
            let entering = (0..n + m).find(|&j| tab.at(i, j).abs() > 1e-7);
            if let Some(e) = entering {
                tab.pivot(i, e);
            }
        }
    }

    let mut phase2 = vec![0.0; width];
    phase2[..n].copy_from_slice(&lp.cost);
    tab.set_objective(&phase2);
    let status = tab.optimize(&mut iters, max_iters);
    Ok(finish(&tab, lp, status, iters))
}

fn finish(tab: &Tableau, lp: &StandardLp, status: LpStatus, iterations: usize) -> SimplexSolution {
    let mut x = vec![0.0; lp.n_vars];
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < lp.n_vars {
            x[b] = tab.rhs(i).max(0.0);
        }
    }
    let objective = lp.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
    SimplexSolution {
        x,
        objective,
        status,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use approx::assert_abs_diff_eq;

    #[test]
    fn textbook_one_variable() {
        let lp = StandardLp::new(vec![-1.0], vec![vec![1.0]], vec![1.0]).unwrap();
        let sol = solve_simplex(&lp, 100).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0);
        assert_abs_diff_eq!(sol.objective, -1.0);
    }

    #[test]
    fn detects_unbounded() {
        // min -x s.t. -x <= 1
        let lp = StandardLp::new(vec![-1.0], vec![vec![-1.0]], vec![1.0]).unwrap();
        assert_eq!(solve_simplex(&lp, 100).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn detects_infeasible() {
        // x <= 1 and -x <= -2
        let lp =
            StandardLp::new(vec![1.0], vec![vec![1.0], vec![-1.0]], vec![1.0, -2.0]).unwrap();
        assert_eq!(solve_simplex(&lp, 100).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn needs_phase_one() {
        // min x + y s.t. x + y >= 2, x <= 3
        let lp = StandardLp::new(
            vec![1.0, 1.0],
            vec![vec![-1.0, -1.0], vec![1.0, 0.0]],
            vec![-2.0, 3.0],
        )
        .unwrap();
        let sol = solve_simplex(&lp, 100).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_abs_diff_eq!(sol.objective, 2.0, epsilon = 1e-10);
        assert!(lp.max_violation(&sol.x) < 1e-8);
    }

    #[test]
    fn iteration_limit_is_reported() {
        let lp = StandardLp::new(
            vec![-1.0, -1.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![1.0, 1.0],
        )
        .unwrap();
        assert_eq!(solve_simplex(&lp, 1).unwrap().status, LpStatus::IterationLimit);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(StandardLp::new(vec![1.0], vec![vec![1.0, 2.0]], vec![1.0]).is_err());
        let mut lp = StandardLp::new(vec![1.0], vec![vec![1.0]], vec![1.0]).unwrap();
        lp.rhs.push(2.0);
        assert!(solve_simplex(&lp, 10).is_err());
    }

    #[test]
    fn eps_nv_lp_dimensions() {
        let ds = Dataset::from_xy(
            vec![vec![1.0, 0.1], vec![1.0, 0.5], vec![1.0, 0.9]],
            vec![0.2, 0.4, 0.6],
        )
        .unwrap();
        let spec = LossSpec::eps_nv(0.6, 0.1, 0.0).unwrap();
        let lp = build_eps_nv_lp(&ds, &spec).unwrap();
        assert_eq!(lp.n_vars, 10);
        assert_eq!(lp.n_constraints, 6);
        assert_eq!(lp.constraint_matrix.len(), 60);
    }

    #[test]
    fn single_point_inside_band_costs_nothing() {
        let ds = Dataset::from_xy(vec![vec![1.0]], vec![1.0]).unwrap();
        let spec = LossSpec::eps_nv(0.5, 0.2, 0.0).unwrap();
        let sol = solve_eps_nv(&ds, &spec, 1000).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_abs_diff_eq!(sol.objective, 0.0, epsilon = 1e-12);
        assert!(sol.theta[0] >= 1.0 - 1e-12 && sol.theta[0] <= 1.2 + 1e-12);
    }

    #[test]
    fn two_points_match_grid_minimum() {
        let ds = Dataset::from_xy(vec![vec![1.0], vec![1.0]], vec![0.0, 1.0]).unwrap();
        let spec = LossSpec::eps_nv(0.5, 0.2, 0.0).unwrap();
        let sol = solve_eps_nv(&ds, &spec, 1000).unwrap();
        let grid_min = (0..=30_000)
            .map(|k| -1.0 + k as f64 * 1e-4)
            .map(|t| spec.mean(&[0.0, 1.0], &[t, t]))
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(sol.objective, grid_min, epsilon = 1e-9);
    }

    #[test]
    fn rejects_empty_and_wrong_kind() {
        let spec = LossSpec::eps_nv(0.5, 0.2, 0.0).unwrap();
        assert!(build_eps_nv_lp(&Dataset::default(), &spec).is_err());
        let ds = Dataset::from_xy(vec![vec![1.0]], vec![1.0]).unwrap();
        assert!(build_eps_nv_lp(&ds, &LossSpec::nvc(0.5).unwrap()).is_err());
    }
}

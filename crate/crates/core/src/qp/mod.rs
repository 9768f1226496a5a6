//! Dense convex quadratic programs with two-sided rows and box bounds.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    1/2 x' Q x + c' x + d
//!     subject to  lo <= A_ineq x <= hi     (two-sided rows)
//!                 A_eq x = b
//!                 lower <= x <= upper      (box)
//! ```
//!
//! and are solved by a dual active-set method (Goldfarb-Idnani) followed
//! by a KKT polish on the identified active set. The solver is stateless
//! and deterministic: identical inputs produce bitwise-identical output.

mod solver;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("objective matrix is not symmetric within 1e-12 relative")]
    AsymmetricObjective,
    #[error("inverted bounds: {0}")]
    InvertedBounds(String),
    #[error("non-finite entry in problem data: {0}")]
    NonFinite(String),
}

/// One face of the constraint system, in the solver's canonical order:
/// equalities, then per-row lower/upper sides, then per-variable bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ConstraintId {
    Eq(usize),
    IneqLower(usize),
    IneqUpper(usize),
    BoxLower(usize),
    BoxUpper(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveStatus::Optimal => write!(f, "optimal"),
            SolveStatus::MaxIterations => write!(f, "max_iterations"),
            SolveStatus::Infeasible => write!(f, "infeasible"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Feasibility tolerance on constraint violations.
    pub feas_tol: f64,
    /// Tolerance on the KKT residual for declaring optimality.
    pub kkt_tol: f64,
    /// Iteration cap factor: cap = factor * (n + m_ineq + m_eq).
    pub iter_factor: usize,
    /// Constraints to try first when hunting violations; per-frame solves
    /// pass the previous frame's active set here.
    pub warm_start: Option<Vec<ConstraintId>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            kkt_tol: 1e-6,
            iter_factor: 50,
            warm_start: None,
        }
    }
}

/// Dense convex QP. Immutable once built; safe to share across threads.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub d: f64,
    pub a_ineq: DMatrix<f64>,
    pub ineq_lower: DVector<f64>,
    pub ineq_upper: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem over a free box.
    pub fn new(q: DMatrix<f64>, c: DVector<f64>, d: f64) -> Self {
        let n = c.len();
        Self {
            q,
            c,
            d,
            a_ineq: DMatrix::zeros(0, n),
            ineq_lower: DVector::zeros(0),
            ineq_upper: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_box(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_ineq_rows(
        mut self,
        a: DMatrix<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    ) -> Self {
        self.a_ineq = a;
        self.ineq_lower = lo;
        self.ineq_upper = hi;
        self
    }

    pub fn with_eq_rows(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.eq_rhs = b;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.a_ineq.nrows()
    }

    pub fn num_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn objective_at(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.q * x).dot(x) + self.c.dot(x) + self.d
    }

    /// Largest violation over every row, equality and bound.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        if self.num_ineq() > 0 {
            let ax = &self.a_ineq * x;
            for i in 0..self.num_ineq() {
                if self.ineq_lower[i].is_finite() {
                    worst = worst.max(self.ineq_lower[i] - ax[i]);
                }
                if self.ineq_upper[i].is_finite() {
                    worst = worst.max(ax[i] - self.ineq_upper[i]);
                }
            }
        }
        if self.num_eq() > 0 {
            let ax = &self.a_eq * x;
            for e in 0..self.num_eq() {
                worst = worst.max((ax[e] - self.eq_rhs[e]).abs());
            }
        }
        for n in 0..self.num_vars() {
            if self.lower[n].is_finite() {
                worst = worst.max(self.lower[n] - x[n]);
            }
            if self.upper[n].is_finite() {
                worst = worst.max(x[n] - self.upper[n]);
            }
        }
        worst
    }

    /// Normal of a constraint in `>=` form (equalities keep their row as-is).
    pub fn constraint_normal(&self, id: ConstraintId) -> DVector<f64> {
        let n = self.num_vars();
        match id {
            ConstraintId::Eq(e) => self.a_eq.row(e).transpose(),
            ConstraintId::IneqLower(i) => self.a_ineq.row(i).transpose(),
            ConstraintId::IneqUpper(i) => -self.a_ineq.row(i).transpose(),
            ConstraintId::BoxLower(v) => {
                let mut e = DVector::zeros(n);
                e[v] = 1.0;
                e
            }
            ConstraintId::BoxUpper(v) => {
                let mut e = DVector::zeros(n);
                e[v] = -1.0;
                e
            }
        }
    }

    /// Right-hand side matching [`Self::constraint_normal`].
    pub fn constraint_rhs(&self, id: ConstraintId) -> f64 {
        match id {
            ConstraintId::Eq(e) => self.eq_rhs[e],
            ConstraintId::IneqLower(i) => self.ineq_lower[i],
            ConstraintId::IneqUpper(i) => -self.ineq_upper[i],
            ConstraintId::BoxLower(v) => self.lower[v],
            ConstraintId::BoxUpper(v) => -self.upper[v],
        }
    }

    /// Slack in `>=` form; negative means violated.
    pub fn constraint_slack(&self, id: ConstraintId, x: &DVector<f64>) -> f64 {
        match id {
            ConstraintId::Eq(e) => self.a_eq.row(e).transpose().dot(x) - self.eq_rhs[e],
            ConstraintId::IneqLower(i) => {
                self.a_ineq.row(i).transpose().dot(x) - self.ineq_lower[i]
            }
            ConstraintId::IneqUpper(i) => {
                self.ineq_upper[i] - self.a_ineq.row(i).transpose().dot(x)
            }
            ConstraintId::BoxLower(v) => x[v] - self.lower[v],
            ConstraintId::BoxUpper(v) => self.upper[v] - x[v],
        }
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        if n == 0 {
            return Err(QpError::Dimension("problem has no variables".into()));
        }
        if self.q.nrows() != n || self.q.ncols() != n {
            return Err(QpError::Dimension(format!(
                "Q is {}x{}, expected {n}x{n}",
                self.q.nrows(),
                self.q.ncols()
            )));
        }
        if self.a_ineq.ncols() != n && self.num_ineq() > 0 {
            return Err(QpError::Dimension("A_ineq column count".into()));
        }
        if self.ineq_lower.len() != self.num_ineq() || self.ineq_upper.len() != self.num_ineq() {
            return Err(QpError::Dimension("inequality bound lengths".into()));
        }
        if self.a_eq.ncols() != n && self.num_eq() > 0 {
            return Err(QpError::Dimension("A_eq column count".into()));
        }
        if self.eq_rhs.len() != self.num_eq() {
            return Err(QpError::Dimension("equality rhs length".into()));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(QpError::Dimension("box bound lengths".into()));
        }
        let scale = self.q.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.q[(i, j)] - self.q[(j, i)]).abs() > 1e-12 * scale {
                    return Err(QpError::AsymmetricObjective);
                }
            }
        }
        for v in self.q.iter().chain(self.c.iter()) {
            if v.is_nan() {
                return Err(QpError::NonFinite("objective".into()));
            }
        }
        for v in self.a_ineq.iter().chain(self.a_eq.iter()) {
            if !v.is_finite() {
                return Err(QpError::NonFinite("constraint matrix".into()));
            }
        }
        for i in 0..self.num_ineq() {
            if self.ineq_lower[i] > self.ineq_upper[i] {
                return Err(QpError::InvertedBounds(format!("row {i}")));
            }
        }
        for v in 0..n {
            if self.lower[v] > self.upper[v] {
                return Err(QpError::InvertedBounds(format!("variable {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective_value: f64,
    pub status: SolveStatus,
    pub primal_residual: f64,
    pub kkt_residual: f64,
    /// Constraints active at the solution, in working-set order.
    pub active_set: Vec<ConstraintId>,
    /// Lagrange multipliers aligned with `active_set` (>= 0 for inequalities).
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    /// Ridge added to Q when it was singular or indefinite at solver scale.
    pub ridge: f64,
}

impl QpSolution {
    pub fn multiplier_pairs(&self) -> Vec<(ConstraintId, f64)> {
        self.active_set
            .iter()
            .copied()
            .zip(self.multipliers.iter().copied())
            .collect()
    }

    pub fn diagnostics(&self) -> SolveDiagnostics {
        SolveDiagnostics {
            status: self.status.to_string(),
            iterations: self.iterations,
            residuals: ResidualRecord {
                primal: self.primal_residual,
                kkt: self.kkt_residual,
            },
        }
    }
}

/// JSON-exportable summary of a solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveDiagnostics {
    pub status: String,
    pub iterations: usize,
    pub residuals: ResidualRecord,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualRecord {
    pub primal: f64,
    pub kkt: f64,
}

/// Solve a validated problem. `status == Optimal` guarantees the solution
/// is feasible within `feas_tol` and stationary within `kkt_tol`.
pub fn solve(p: &QpProblem, cfg: &SolverConfig) -> Result<QpSolution, QpError> {
    p.validate()?;
    Ok(solver::solve_validated(p, cfg))
}

/// Max-norm of the stationarity and complementary-slackness violations at
/// `(x, multipliers)`. Zero at an exact KKT point.
pub fn kkt_residual(
    p: &QpProblem,
    x: &DVector<f64>,
    multipliers: &[(ConstraintId, f64)],
) -> f64 {
    let mut grad = &p.q * x + &p.c;
    let mut comp = 0.0f64;
    for &(id, lam) in multipliers {
        match id {
            ConstraintId::BoxLower(v) => grad[v] -= lam,
            ConstraintId::BoxUpper(v) => grad[v] += lam,
            ConstraintId::IneqLower(i) => {
                for j in 0..p.num_vars() {
                    grad[j] -= lam * p.a_ineq[(i, j)];
                }
            }
            ConstraintId::IneqUpper(i) => {
                for j in 0..p.num_vars() {
                    grad[j] += lam * p.a_ineq[(i, j)];
                }
            }
            ConstraintId::Eq(e) => {
                for j in 0..p.num_vars() {
                    grad[j] -= lam * p.a_eq[(e, j)];
                }
            }
        }
        if !matches!(id, ConstraintId::Eq(_)) {
            comp = comp.max((lam * p.constraint_slack(id, x)).abs());
        }
    }
    grad.amax().max(comp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn unconstrained_minimum_inside_box() {
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![-1.0, -1.0], 0.5)
            .with_box(dvector![0.0, 0.0], dvector![10.0, 10.0]);
        let sol = solve(&p, &cfg()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
        assert!((sol.x[1] - 1.0).abs() < 1e-10);
        assert!((sol.objective_value - (-1.0 + 0.5)).abs() < 1e-10);
    }

    #[test]
    fn box_active_minimum_is_clipped() {
        let p = QpProblem::new(DMatrix::identity(1, 1), dvector![-4.0], 0.0)
            .with_box(dvector![0.0], dvector![1.0]);
        let sol = solve(&p, &cfg()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
        assert_eq!(sol.active_set, vec![ConstraintId::BoxUpper(0)]);
    }

    #[test]
    fn symmetric_rate_objective_lands_on_constraint() {
        // Singular Q (rates sum to one); minimizer sits on x1 + x2 = 1.
        let q = dmatrix![0.25, -0.25; -0.25, 0.25];
        let p = QpProblem::new(q, dvector![-0.5, -0.5], 1.0)
            .with_box(dvector![0.0, 0.0], dvector![1.0, 1.0])
            .with_ineq_rows(
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                dvector![f64::NEG_INFINITY],
                dvector![1.0],
            );
        let sol = solve(&p, &cfg()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 0.5).abs() < 1e-7, "x = {}", sol.x);
        assert!((sol.x[1] - 0.5).abs() < 1e-7);

        // Dense grid oracle at step 1e-3 over the box.
        let mut best = f64::INFINITY;
        for i in 0..=1000 {
            for j in 0..=1000 {
                let x = dvector![i as f64 * 1e-3, j as f64 * 1e-3];
                if x[0] + x[1] <= 1.0 + 1e-12 {
                    best = best.min(p.objective_at(&x));
                }
            }
        }
        assert!((sol.objective_value - best).abs() < 1e-4);
    }

    #[test]
    fn equality_constrained_projection() {
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![0.0, 0.0], 0.0)
            .with_eq_rows(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), dvector![2.0]);
        let sol = solve(&p, &cfg()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
        assert!((sol.x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn redundant_equalities_are_skipped() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0]);
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![0.0, 0.0], 0.0)
            .with_eq_rows(a, dvector![2.0, 4.0, 2.0]);
        let sol = solve(&p, &cfg()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![0.0, 0.0], 0.0)
            .with_eq_rows(a, dvector![2.0, 3.0]);
        let sol = solve(&p, &cfg()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let p = QpProblem::new(DMatrix::identity(1, 1), dvector![0.0], 0.0)
            .with_ineq_rows(a, dvector![2.0, f64::NEG_INFINITY], dvector![f64::INFINITY, 1.0]);
        let sol = solve(&p, &cfg()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn optimal_solutions_are_feasible_rowwise() {
        let q = dmatrix![2.0, 0.3; 0.3, 1.0];
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.7, 0.7]);
        let p = QpProblem::new(q, dvector![-1.0, -2.0], 0.0)
            .with_box(dvector![0.0, 0.0], dvector![1.0, 1.0])
            .with_ineq_rows(a, dvector![-0.5, -1.0, -2.0], dvector![1.0, 0.4, 0.9]);
        let sol = solve(&p, &cfg()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.primal_residual <= 1e-8);
        assert!(sol.kkt_residual <= 1e-6);
        assert!(p.max_violation(&sol.x) <= 1e-8);
    }

    #[test]
    fn two_sided_row_lower_side_binds() {
        // Minimum norm subject to x1 + x2 >= 1.
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![0.0, 0.0], 0.0)
            .with_ineq_rows(
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                dvector![1.0],
                dvector![5.0],
            );
        let sol = solve(&p, &cfg()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 0.5).abs() < 1e-10);
        assert!((sol.x[1] - 0.5).abs() < 1e-10);
        assert_eq!(sol.active_set, vec![ConstraintId::IneqLower(0)]);
    }

    #[test]
    fn kkt_residual_zero_at_exact_point() {
        let p = QpProblem::new(DMatrix::identity(1, 1), dvector![-4.0], 0.0)
            .with_box(dvector![0.0], dvector![1.0]);
        // Analytic KKT point: x = 1, upper-bound multiplier 3.
        let r = kkt_residual(&p, &dvector![1.0], &[(ConstraintId::BoxUpper(0), 3.0)]);
        assert!(r < 1e-12, "residual {r}");
    }

    #[test]
    fn kkt_residual_positive_off_optimum() {
        let p = QpProblem::new(DMatrix::identity(2, 2), dvector![-1.0, -1.0], 0.0)
            .with_box(dvector![0.0, 0.0], dvector![10.0, 10.0]);
        let r = kkt_residual(&p, &dvector![1.0 + 1e-3, 1.0], &[]);
        assert!(r > 1e-4);
    }

    #[test]
    fn determinism_bitwise() {
        let q = dmatrix![1.0, 0.2; 0.2, 2.0];
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, -1.0]);
        let p = QpProblem::new(q, dvector![-3.0, 1.0], 0.0)
            .with_box(dvector![0.0, 0.0], dvector![1.0, 1.0])
            .with_ineq_rows(a, dvector![-1.0, -1.0], dvector![1.0, 1.0]);
        let a = solve(&p, &cfg()).unwrap();
        let b = solve(&p, &cfg()).unwrap();
        assert_eq!(a.x.as_slice(), b.x.as_slice());
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn warm_start_reaches_same_solution() {
        let q = dmatrix![1.0, 0.0; 0.0, 1.0];
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let p = QpProblem::new(q, dvector![-2.0, -2.0], 0.0)
            .with_box(dvector![0.0, 0.0], dvector![2.0, 2.0])
            .with_ineq_rows(a, dvector![f64::NEG_INFINITY], dvector![1.0]);
        let cold = solve(&p, &cfg()).unwrap();
        let mut warm_cfg = cfg();
        warm_cfg.warm_start = Some(cold.active_set.clone());
        let warm = solve(&p, &warm_cfg).unwrap();
        assert_eq!(warm.status, SolveStatus::Optimal);
        assert!((warm.x[0] - cold.x[0]).abs() < 1e-10);
    }

    #[test]
    fn diagnostics_serialize() {
        let p = QpProblem::new(DMatrix::identity(1, 1), dvector![0.0], 0.0);
        let sol = solve(&p, &cfg()).unwrap();
        let js = serde_json::to_string(&sol.diagnostics()).unwrap();
        assert!(js.contains("\"status\":\"optimal\""));
        assert!(js.contains("iterations"));
        assert!(js.contains("residuals"));
    }

    #[test]
    fn rejects_malformed_problems() {
        let p = QpProblem::new(dmatrix![1.0, 0.5; -0.5, 1.0], dvector![0.0, 0.0], 0.0);
        assert!(matches!(p.validate(), Err(QpError::AsymmetricObjective)));

        let p = QpProblem::new(DMatrix::identity(1, 1), dvector![0.0], 0.0)
            .with_box(dvector![2.0], dvector![1.0]);
        assert!(matches!(p.validate(), Err(QpError::InvertedBounds(_))));
    }
}

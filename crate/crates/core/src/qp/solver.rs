//! Goldfarb-Idnani dual active-set method with a KKT polish pass.
//!
//! The method starts at the unconstrained minimizer (dual feasible by
//! construction), repeatedly pulls the most violated constraint into the
//! working set, and terminates when no violations remain or the dual
//! becomes unbounded (primal infeasible). Equality rows are forced into
//! the working set up front; consistent duplicates are skipped so that
//! rank-deficient equality blocks are tolerated.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{ConstraintId, QpProblem, QpSolution, SolveStatus, SolverConfig};

/// Relative threshold deciding that a candidate normal lies in the span of
/// the working set (`||d_tail||^2` against `||d||^2`).
const DEP_TOL: f64 = 1e-20;

/// Working-set machinery shared by the add/drop steps.
struct WorkingSet {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    ids: Vec<ConstraintId>,
    multipliers: Vec<f64>,
    n_eq: usize,
}

impl WorkingSet {
    fn len(&self) -> usize {
        self.ids.len()
    }

    /// Rotate the tail of `d` into position `iq`, mirroring the rotations
    /// on J, then append `d[..=iq]` as a new column of R. Returns false if
    /// the new normal is numerically dependent on the working set.
    fn add(&mut self, d: &mut DVector<f64>) -> bool {
        let n = d.len();
        let iq = self.len();
        if iq >= n {
            return false;
        }
        for k in ((iq + 1)..n).rev() {
            let a = d[k - 1];
            let b = d[k];
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (cc, ss) = (a / h, b / h);
            d[k - 1] = h;
            d[k] = 0.0;
            for row in 0..n {
                let x1 = self.j[(row, k - 1)];
                let x2 = self.j[(row, k)];
                self.j[(row, k - 1)] = cc * x1 + ss * x2;
                self.j[(row, k)] = cc * x2 - ss * x1;
            }
        }
        for row in 0..=iq {
            self.r[(row, iq)] = d[row];
        }
        d[iq].abs() > f64::EPSILON * (1.0 + d.norm())
    }

    /// Drop the working-set entry at `pos` and restore R's triangularity.
    fn remove(&mut self, pos: usize) {
        let n = self.j.nrows();
        self.ids.remove(pos);
        self.multipliers.remove(pos);
        let iq = self.len() + 1;
        for col in (pos + 1)..iq {
            for row in 0..iq {
                self.r[(row, col - 1)] = self.r[(row, col)];
            }
        }
        let iq = self.len();
        for col in pos..iq {
            let a = self.r[(col, col)];
            let b = self.r[(col + 1, col)];
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (cc, ss) = (a / h, b / h);
            for k in col..iq {
                let x1 = self.r[(col, k)];
                let x2 = self.r[(col + 1, k)];
                self.r[(col, k)] = cc * x1 + ss * x2;
                self.r[(col + 1, k)] = cc * x2 - ss * x1;
            }
            for row in 0..n {
                let x1 = self.j[(row, col)];
                let x2 = self.j[(row, col + 1)];
                self.j[(row, col)] = cc * x1 + ss * x2;
                self.j[(row, col + 1)] = cc * x2 - ss * x1;
            }
        }
    }

    /// Back-substitute `R r = d[..len]`.
    fn solve_r(&self, d: &DVector<f64>) -> Vec<f64> {
        let iq = self.len();
        let mut out = vec![0.0; iq];
        for i in (0..iq).rev() {
            let mut s = d[i];
            for k in (i + 1)..iq {
                s -= self.r[(i, k)] * out[k];
            }
            out[i] = s / self.r[(i, i)];
        }
        out
    }
}

/// Sparse-aware view of a constraint normal in `>=` form.
enum Normal<'a> {
    Row { p: &'a QpProblem, i: usize, sign: f64, eq: bool },
    Unit { idx: usize, sign: f64 },
}

impl Normal<'_> {
    fn of(p: &QpProblem, id: ConstraintId) -> Normal<'_> {
        match id {
            ConstraintId::Eq(e) => Normal::Row { p, i: e, sign: 1.0, eq: true },
            ConstraintId::IneqLower(i) => Normal::Row { p, i, sign: 1.0, eq: false },
            ConstraintId::IneqUpper(i) => Normal::Row { p, i, sign: -1.0, eq: false },
            ConstraintId::BoxLower(v) => Normal::Unit { idx: v, sign: 1.0 },
            ConstraintId::BoxUpper(v) => Normal::Unit { idx: v, sign: -1.0 },
        }
    }

    fn dot(&self, v: &DVector<f64>) -> f64 {
        match *self {
            Normal::Row { p, i, sign, eq } => {
                let row = if eq { p.a_eq.row(i) } else { p.a_ineq.row(i) };
                sign * row.transpose().dot(v)
            }
            Normal::Unit { idx, sign } => sign * v[idx],
        }
    }

    /// d = J^T n, using a single row of J for unit normals.
    fn j_transpose_mul(&self, j: &DMatrix<f64>) -> DVector<f64> {
        match *self {
            Normal::Row { p, i, sign, eq } => {
                let row = if eq { p.a_eq.row(i) } else { p.a_ineq.row(i) };
                let mut d = j.tr_mul(&row.transpose());
                d *= sign;
                d
            }
            Normal::Unit { idx, sign } => {
                let mut d = j.row(idx).transpose();
                d *= sign;
                d
            }
        }
    }
}

fn is_inequality(id: ConstraintId) -> bool {
    !matches!(id, ConstraintId::Eq(_))
}

/// Canonical scan index used for deterministic tie-breaking; lower row
/// indices win, rows before boxes.
fn atom_rank(p: &QpProblem, id: ConstraintId) -> usize {
    match id {
        ConstraintId::Eq(e) => e,
        ConstraintId::IneqLower(i) => 2 * i,
        ConstraintId::IneqUpper(i) => 2 * i + 1,
        ConstraintId::BoxLower(v) => 2 * p.num_ineq() + 2 * v,
        ConstraintId::BoxUpper(v) => 2 * p.num_ineq() + 2 * v + 1,
    }
}

struct Factorized {
    chol: Cholesky<f64, nalgebra::Dyn>,
    ridge: f64,
    /// Unconstrained minimizer -Q^{-1}c under the ridged factorization.
    x0: DVector<f64>,
}

/// Cholesky of Q, ridging by eps*trace/n (escalating tenfold) whenever the
/// factorization fails, produces pivots at roundoff scale, or leaves the
/// dual start -Q^{-1}c unbounded. Rank-deficient objectives (rates summing
/// to one) land here by construction: their null space carries a component
/// of c, so the start blows up until the ridge supplies curvature. The
/// magnitude cap keeps the working-set arithmetic within f64 range; the
/// polish pass restores full accuracy against the original Q.
fn factor_with_ridge(q: &DMatrix<f64>, c: &DVector<f64>) -> Factorized {
    let n = q.nrows();
    let c_scale = c.amax();
    let trace_avg = (q.diagonal().sum() / n as f64).abs();
    let start = (1e-10 * trace_avg).max(1e-12 * (1.0 + c_scale));
    let cap = 1e10 * start.max(trace_avg);
    // Keep the dual start small enough that incremental x updates
    // cannot drift active-row slacks past the feasibility tolerance.
    let x0_cap = 1e5 * (1.0 + c_scale);
    let mut ridge = 0.0f64;
    loop {
        let mut qr = q.clone();
        if ridge > 0.0 {
            for i in 0..n {
                qr[(i, i)] += ridge;
            }
        }
        if let Some(chol) = Cholesky::new(qr) {
            let diag = chol.l_dirty().diagonal();
            let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            let dmax = diag.iter().cloned().fold(0.0f64, f64::max);
            if dmin > 1e-12 * dmax {
                let mut x0 = chol.solve(c);
                x0.neg_mut();
                if ridge > cap || (x0.amax().is_finite() && x0.amax() <= x0_cap) {
                    return Factorized { chol, ridge, x0 };
                }
            } else if ridge > cap {
                let mut x0 = chol.solve(c);
                x0.neg_mut();
                return Factorized { chol, ridge, x0 };
            }
        }
        ridge = if ridge == 0.0 { start } else { ridge * 10.0 };
    }
}

struct GiOutcome {
    x: DVector<f64>,
    ws: WorkingSet,
    status: SolveStatus,
    iterations: usize,
}

pub(super) fn solve_validated(p: &QpProblem, cfg: &SolverConfig) -> QpSolution {
    let n = p.num_vars();
    let m_i = p.num_ineq();
    let m_e = p.num_eq();
    let cap = cfg.iter_factor * (n + 2 * m_i + m_e) + 16;

    let fact = factor_with_ridge(&p.q, &p.c);
    let warm0: Vec<ConstraintId> = cfg
        .warm_start
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .copied()
        .filter(|id| match *id {
            ConstraintId::Eq(_) => false,
            ConstraintId::IneqLower(i) | ConstraintId::IneqUpper(i) => i < m_i,
            ConstraintId::BoxLower(v) | ConstraintId::BoxUpper(v) => v < n,
        })
        .collect();

    let mut outcome = gi_pass(p, cfg, &fact, fact.x0.clone(), &warm0, 0, cap);

    // Proximal re-centering: a ridged solve minimizes the shifted
    // objective, leaving a stationarity bias of ridge * x against the
    // original problem. Re-solving with c - ridge * x_prev cancels the
    // bias (and the null-space blowup in the dual start); the fixed
    // point is the original constrained optimum.
    if fact.ridge > 0.0 && outcome.status == SolveStatus::Optimal {
        for _ in 0..4 {
            let c_eff = &p.c - &outcome.x * fact.ridge;
            let mut x0 = fact.chol.solve(&c_eff);
            x0.neg_mut();
            let warm: Vec<ConstraintId> = outcome
                .ws
                .ids
                .iter()
                .copied()
                .filter(|id| is_inequality(*id))
                .collect();
            let next = gi_pass(p, cfg, &fact, x0, &warm, outcome.iterations, cap);
            if next.status != SolveStatus::Optimal {
                break;
            }
            let delta = (&next.x - &outcome.x).amax();
            let done = delta <= 1e-10 * (1.0 + next.x.amax());
            outcome = next;
            if done {
                break;
            }
        }
    }

    finalize(
        p,
        cfg,
        outcome.x,
        &outcome.ws,
        outcome.status,
        outcome.iterations,
        fact.ridge,
    )
}

/// One dual active-set pass from the given start; `x0` must be the
/// unconstrained minimizer of the (ridged, possibly prox-shifted)
/// objective so that the empty working set is dual feasible.
fn gi_pass(
    p: &QpProblem,
    cfg: &SolverConfig,
    fact: &Factorized,
    x0: DVector<f64>,
    warm: &[ConstraintId],
    start_iterations: usize,
    cap: usize,
) -> GiOutcome {
    let n = p.num_vars();
    let m_i = p.num_ineq();
    let m_e = p.num_eq();
    let lt = fact.chol.l().transpose();
    let j0 = lt
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .expect("triangular solve");
    let mut x = x0;

    let mut ws = WorkingSet {
        j: j0,
        r: DMatrix::zeros(n, n),
        ids: Vec::new(),
        multipliers: Vec::new(),
        n_eq: 0,
    };
    let mut iterations = start_iterations;

    // Equality phase: force every consistent equality into the working set.
    for e in 0..m_e {
        iterations += 1;
        let id = ConstraintId::Eq(e);
        let normal = Normal::of(p, id);
        let mut d = normal.j_transpose_mul(&ws.j);
        let iq = ws.len();
        let znp: f64 = d.rows(iq, n - iq).norm_squared();
        let resid = p.eq_rhs[e] - normal.dot(&x);
        if znp <= DEP_TOL * d.norm_squared().max(f64::MIN_POSITIVE) {
            // Row is spanned by the working set: consistent -> skip, else infeasible.
            let scale = 1.0 + p.eq_rhs[e].abs();
            if resid.abs() <= 1e-8 * scale {
                continue;
            }
            return GiOutcome { x, ws, status: SolveStatus::Infeasible, iterations };
        }
        let z = ws.j.columns(iq, n - iq) * d.rows(iq, n - iq);
        let t2 = resid / znp;
        x.axpy(t2, &z, 1.0);
        let r = ws.solve_r(&d);
        for (k, rk) in r.iter().enumerate() {
            ws.multipliers[k] -= t2 * rk;
        }
        if !ws.add(&mut d) {
            // Numerically dependent despite the znp test; treat as skipped.
            continue;
        }
        ws.ids.push(id);
        ws.multipliers.push(t2);
        ws.n_eq += 1;
    }

    let mut in_working = vec![false; 2 * m_i + 2 * n];
    let mut excluded = vec![false; 2 * m_i + 2 * n];

    'outer: loop {
        // Hunt for a violated constraint: warm-start candidates first, then
        // the most violated atom (ties to the lowest scan rank).
        let chosen: Option<ConstraintId> = {
            let ax = if m_i > 0 { &p.a_ineq * &x } else { DVector::zeros(0) };
            let slack_of = |id: ConstraintId| -> f64 {
                match id {
                    ConstraintId::IneqLower(i) => ax[i] - p.ineq_lower[i],
                    ConstraintId::IneqUpper(i) => p.ineq_upper[i] - ax[i],
                    ConstraintId::BoxLower(v) => x[v] - p.lower[v],
                    ConstraintId::BoxUpper(v) => p.upper[v] - x[v],
                    ConstraintId::Eq(_) => unreachable!(),
                }
            };
            // Absolute, matching the optimality gate on primal_residual.
            let vtol = cfg.feas_tol;

            let mut chosen: Option<ConstraintId> = None;
            for id in warm {
                let rank = atom_rank(p, *id);
                if in_working[rank] || excluded[rank] {
                    continue;
                }
                if !p.constraint_rhs(*id).is_finite() {
                    continue;
                }
                if slack_of(*id) < -vtol {
                    chosen = Some(*id);
                    break;
                }
            }
            if chosen.is_none() {
                let mut worst = 0.0f64;
                let mut consider = |id: ConstraintId, rhs: f64| {
                    if !rhs.is_finite() {
                        return;
                    }
                    let rank = atom_rank(p, id);
                    if in_working[rank] || excluded[rank] {
                        return;
                    }
                    let s = slack_of(id);
                    if s < -vtol && -s > worst {
                        worst = -s;
                        chosen = Some(id);
                    }
                };
                for i in 0..m_i {
                    consider(ConstraintId::IneqLower(i), p.ineq_lower[i]);
                    consider(ConstraintId::IneqUpper(i), p.ineq_upper[i]);
                }
                for v in 0..n {
                    consider(ConstraintId::BoxLower(v), p.lower[v]);
                    consider(ConstraintId::BoxUpper(v), p.upper[v]);
                }
            }
            chosen
        };
        let Some(pid) = chosen else {
            return GiOutcome { x, ws, status: SolveStatus::Optimal, iterations };
        };

        let normal = Normal::of(p, pid);
        let rhs_p = p.constraint_rhs(pid);
        let mut s_p = normal.dot(&x) - rhs_p;
        let mut u_p = 0.0f64;

        loop {
            iterations += 1;
            if iterations > cap {
                return GiOutcome { x, ws, status: SolveStatus::MaxIterations, iterations };
            }
            let d = normal.j_transpose_mul(&ws.j);
            let iq = ws.len();
            let znp: f64 = d.rows(iq, n - iq).norm_squared();
            let z_ok = znp > DEP_TOL * d.norm_squared().max(f64::MIN_POSITIVE);
            let r = ws.solve_r(&d);

            // Partial step: first blocking multiplier among inequality members.
            let mut t1 = f64::INFINITY;
            let mut drop_pos: Option<usize> = None;
            for (k, id) in ws.ids.iter().enumerate() {
                if !is_inequality(*id) || r[k] <= 0.0 {
                    continue;
                }
                let cand = ws.multipliers[k] / r[k];
                if cand < t1 {
                    t1 = cand;
                    drop_pos = Some(k);
                }
            }
            let t2 = if z_ok { -s_p / znp } else { f64::INFINITY };
            let t = t1.min(t2);

            if !t.is_finite() {
                return GiOutcome { x, ws, status: SolveStatus::Infeasible, iterations };
            }

            if !z_ok {
                // Dual-only step.
                let pos = drop_pos.expect("finite t1 implies a blocking index");
                for (k, rk) in r.iter().enumerate() {
                    ws.multipliers[k] -= t * rk;
                }
                u_p += t;
                in_working[atom_rank(p, ws.ids[pos])] = false;
                ws.remove(pos);
                continue;
            }

            let z = ws.j.columns(iq, n - iq) * d.rows(iq, n - iq);
            x.axpy(t, &z, 1.0);
            for (k, rk) in r.iter().enumerate() {
                ws.multipliers[k] -= t * rk;
            }
            u_p += t;
            s_p = normal.dot(&x) - rhs_p;

            if t2 <= t1 {
                let mut d_add = d;
                if !ws.add(&mut d_add) {
                    excluded[atom_rank(p, pid)] = true;
                    continue 'outer;
                }
                ws.ids.push(pid);
                ws.multipliers.push(u_p);
                in_working[atom_rank(p, pid)] = true;
                continue 'outer;
            }
            let pos = drop_pos.expect("t1 finite");
            in_working[atom_rank(p, ws.ids[pos])] = false;
            ws.remove(pos);
        }
    }
}

/// Re-solve the KKT system on the final working set with the original Q,
/// then keep whichever of (polished, raw) satisfies the tolerances best.
fn finalize(
    p: &QpProblem,
    cfg: &SolverConfig,
    x_raw: DVector<f64>,
    ws: &WorkingSet,
    status: SolveStatus,
    iterations: usize,
    ridge: f64,
) -> QpSolution {
    let build = |x: DVector<f64>, mult: Vec<f64>| -> QpSolution {
        let pairs: Vec<(ConstraintId, f64)> = ws.ids.iter().copied().zip(mult.iter().copied()).collect();
        let primal = p.max_violation(&x);
        let kkt = super::kkt_residual(p, &x, &pairs);
        QpSolution {
            objective_value: p.objective_at(&x),
            status,
            primal_residual: primal,
            kkt_residual: kkt,
            active_set: ws.ids.clone(),
            multipliers: mult,
            iterations,
            ridge,
            x,
        }
    };

    if status != SolveStatus::Optimal {
        let sol = build(x_raw, ws.multipliers.clone());
        return sol;
    }

    let raw = build(x_raw, ws.multipliers.clone());
    let polished = polish(p, &ws.ids).map(|(x, lam)| build(x, lam));

    let score = |s: &QpSolution| {
        (s.primal_residual / cfg.feas_tol).max(s.kkt_residual / cfg.kkt_tol)
    };
    let mut best = raw;
    if let Some(pol) = polished {
        if score(&pol) <= score(&best) {
            best = pol;
        }
    }
    if score(&best) > 1.0 {
        best.status = SolveStatus::MaxIterations;
    }
    best
}

/// Direct KKT solve on the active set, with iterative refinement and a
/// ridge retry when the system is numerically singular.
fn polish(p: &QpProblem, active: &[ConstraintId]) -> Option<(DVector<f64>, Vec<f64>)> {
    let n = p.num_vars();
    let m = active.len();
    let dim = n + m;
    let trace_scale = (p.q.diagonal().sum() / n as f64)
        .abs()
        .max(1e-9 * (1.0 + p.c.amax()));

    let assemble = |ridge: f64| -> DMatrix<f64> {
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (n, n)).copy_from(&p.q);
        for i in 0..n {
            k[(i, i)] += ridge;
        }
        for (row, id) in active.iter().enumerate() {
            let nv = p.constraint_normal(*id);
            for col in 0..n {
                k[(n + row, col)] = nv[col];
                k[(col, n + row)] = nv[col];
            }
        }
        k
    };
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = -p.c[i];
    }
    for (row, id) in active.iter().enumerate() {
        rhs[n + row] = p.constraint_rhs(*id);
    }

    for attempt in 0..3 {
        let ridge = if attempt == 0 {
            0.0
        } else {
            1e-10 * trace_scale * 10f64.powi(attempt - 1)
        };
        let k = assemble(ridge);
        let lu = k.clone().lu();
        let Some(mut sol) = lu.solve(&rhs) else {
            continue;
        };
        for _ in 0..2 {
            let resid = &rhs - &k * &sol;
            if let Some(corr) = lu.solve(&resid) {
                sol += corr;
            }
        }
        let resid = (&rhs - &k * &sol).amax();
        let scale = rhs.amax().max(1.0);
        if resid > 1e-6 * scale {
            continue;
        }
        let x = DVector::from_fn(n, |i, _| sol[i]);
        let lam = (0..m).map(|k| -sol[n + k]).collect();
        return Some((x, lam));
    }
    None
}

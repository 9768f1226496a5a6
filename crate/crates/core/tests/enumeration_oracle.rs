//! Exhaustive active-set enumeration oracle for tiny problems: try every
//! subset of constraints as the active set, solve the equality KKT
//! system, keep primal-feasible solutions with sign-correct multipliers,
//! and take the best. Exact for convex problems, independent of the
//! production solver's path, and unlike a grid it handles equality rows.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qplimit::qp::{self, ConstraintId, QpProblem, SolveStatus, SolverConfig};

fn enumerate_optimum(p: &QpProblem) -> Option<f64> {
    let n = p.num_vars();
    let mut atoms: Vec<ConstraintId> = Vec::new();
    for e in 0..p.num_eq() {
        atoms.push(ConstraintId::Eq(e));
    }
    let mut optional: Vec<ConstraintId> = Vec::new();
    for i in 0..p.num_ineq() {
        if p.ineq_lower[i].is_finite() {
            optional.push(ConstraintId::IneqLower(i));
        }
        if p.ineq_upper[i].is_finite() {
            optional.push(ConstraintId::IneqUpper(i));
        }
    }
    for v in 0..n {
        if p.lower[v].is_finite() {
            optional.push(ConstraintId::BoxLower(v));
        }
        if p.upper[v].is_finite() {
            optional.push(ConstraintId::BoxUpper(v));
        }
    }
    assert!(optional.len() <= 20, "enumeration oracle is for tiny problems");

    let mut best: Option<f64> = None;
    for mask in 0u32..(1u32 << optional.len()) {
        let mut active = atoms.clone();
        for (bit, id) in optional.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                active.push(*id);
            }
        }
        if active.len() > n {
            continue;
        }
        // Equality-KKT on the candidate active set, ridged for singular Q.
        let m = active.len();
        let dim = n + m;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (n, n)).copy_from(&p.q);
        for i in 0..n {
            k[(i, i)] += 1e-10;
        }
        let mut rhs = DVector::zeros(dim);
        for i in 0..n {
            rhs[i] = -p.c[i];
        }
        for (row, id) in active.iter().enumerate() {
            let nv = p.constraint_normal(*id);
            for col in 0..n {
                k[(n + row, col)] = nv[col];
                k[(col, n + row)] = nv[col];
            }
            rhs[n + row] = p.constraint_rhs(*id);
        }
        let Some(sol) = k.lu().solve(&rhs) else { continue };
        let x = DVector::from_fn(n, |i, _| sol[i]);
        if !x.iter().all(|v| v.is_finite()) {
            continue;
        }
        if p.max_violation(&x) > 1e-7 {
            continue;
        }
        let value = p.objective_at(&x);
        if best.is_none_or(|b| value < b) {
            best = Some(value);
        }
    }
    best
}

#[test]
fn solver_matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0e01);
    let mut infeasible_seen = 0usize;
    for instance in 0..150 {
        let n = rng.gen_range(1..=3);
        let m_i = rng.gen_range(0..=3);
        let with_eq = n >= 2 && rng.gen_bool(0.4);

        // PSD curvature, rank-deficient a third of the time.
        let rank = if n > 1 && rng.gen_bool(0.3) { n - 1 } else { n };
        let g = DMatrix::from_fn(n, rank, |_, _| rng.gen_range(-1.0..1.0f64));
        let q = &g * g.transpose();
        let c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0f64));
        let a = DMatrix::from_fn(m_i, n, |_, _| rng.gen_range(-1.0..1.0f64));
        let hi = DVector::from_fn(m_i, |_, _| rng.gen_range(0.1..1.2));
        let lo = DVector::from_fn(m_i, |i, _| hi[i] - rng.gen_range(0.5..2.0));
        let mut p = QpProblem::new(q, c, rng.gen_range(-1.0..1.0))
            .with_box(DVector::zeros(n), DVector::from_element(n, 1.0))
            .with_ineq_rows(a, lo, hi);
        if with_eq {
            let row = DMatrix::from_fn(1, n, |_, _| rng.gen_range(0.2..1.0f64));
            // Right-hand side reachable inside the box.
            let b = 0.5 * row.iter().sum::<f64>();
            p = p.with_eq_rows(row, DVector::from_element(1, b));
        }

        let sol = qp::solve(&p, &SolverConfig::default()).unwrap();
        let oracle = enumerate_optimum(&p);
        match (sol.status, oracle) {
            (SolveStatus::Optimal, Some(best)) => {
                assert!(
                    (sol.objective_value - best).abs() <= 1e-6 * (1.0 + best.abs()),
                    "instance {instance}: solver {} vs enumeration {best}",
                    sol.objective_value
                );
            }
            (SolveStatus::Infeasible, None) => {
                infeasible_seen += 1;
            }
            (status, oracle) => {
                panic!(
                    "instance {instance}: status {status:?} but enumeration found {oracle:?}"
                );
            }
        }
    }
    // The generator makes some instances genuinely infeasible; both
    // routes must agree on which.
    assert!(infeasible_seen > 0, "generator never produced an infeasible case");
}

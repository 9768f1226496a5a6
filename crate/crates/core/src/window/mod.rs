//! Dynamics-constrained COLA window design.
//!
//! A limiter gain envelope needs windows that (a) sum to one under shifts
//! by the frame hop (constant overlap-add), (b) stay in [0, 1] with
//! bounded support, and (c) follow attack / hold / release dynamics given
//! as sign constraints on the first difference. Among all such windows we
//! pick the smoothest: the one minimizing total squared acceleration
//! `w' T{v_R} w`, where `T{v_R}` is the banded Toeplitz matrix of the
//! twice-convolved second-difference kernel (1, -4, 6, -4, 1). That
//! matrix equals `T{v_a}^2 + e1 e1' + eM eM'`, a sum of PSD terms, so the
//! design problem is a convex QP; the corner terms implement zero-value
//! Dirichlet boundaries, which is what makes the tails taper.
//!
//! Velocity rows cover attack `t in [1, T_A]`, hold `t in (T_A, T_R)`,
//! release `t in [T_R, M]`, the last row truncating to `-w(M) <= 0`.
//! Leaving both junction velocities v(T_A), v(T_R) inequality-signed
//! (rather than pinned by the hold) keeps the constraint set mirror-
//! symmetric for symmetric onsets `T_A = M - T_R`, which is what makes
//! those windows come out symmetric, and admits the all-ones rectangle
//! when the hop equals the length.

pub mod io;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::qp::{self, QpProblem, SolveStatus, SolverConfig};

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("bad window spec: {0}")]
    BadSpec(String),
    #[error(
        "hold size {hold} violates the feasibility bound T_R - T_A <= floor(M/F)*F = {bound}"
    )]
    HoldTooLong { hold: usize, bound: usize },
    #[error("window program is infeasible for this spec (hop does not divide the length)")]
    Infeasible,
    #[error("window solve failed: {0}")]
    SolverFailure(String),
}

/// Finite-difference and overlap kernels used by the design QP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// First forward difference: +1 at t=1, -1 at t=0.
    Velocity,
    /// Central second difference: (1, -2, 1) at t = -1, 0, 1.
    Acceleration,
    /// Squared-acceleration stencil, the self-convolution of
    /// [`Kernel::Acceleration`]: (1, -4, 6, -4, 1) at t = -2..2.
    Smoothness,
    /// Overlap comb: 1 at every multiple of the hop.
    Comb { hop: usize },
}

impl Kernel {
    pub fn eval(&self, t: i64) -> f64 {
        match *self {
            Kernel::Velocity => match t {
                0 => -1.0,
                1 => 1.0,
                _ => 0.0,
            },
            Kernel::Acceleration => match t {
                -1 | 1 => 1.0,
                0 => -2.0,
                _ => 0.0,
            },
            Kernel::Smoothness => match t {
                -2 | 2 => 1.0,
                -1 | 1 => -4.0,
                0 => 6.0,
                _ => 0.0,
            },
            Kernel::Comb { hop } => {
                if hop > 0 && t.rem_euclid(hop as i64) == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Truncated Toeplitz operator: `(b - a)` rows over `m` columns with
/// `T[i][j] = kernel(j - i - a)` (1-based row/column indices), entries
/// truncated at the matrix width. `b <= a` yields an empty matrix.
pub fn toeplitz_op(kernel: Kernel, a: usize, b: usize, m: usize) -> DMatrix<f64> {
    if b <= a {
        return DMatrix::zeros(0, m);
    }
    let rows = b - a;
    DMatrix::from_fn(rows, m, |i, j| {
        kernel.eval(j as i64 + 1 - (i as i64 + 1) - a as i64)
    })
}

/// Window geometry: length, hop, and the attack/release onset samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub length: usize,
    pub hop: usize,
    pub attack: usize,
    pub release: usize,
}

impl WindowSpec {
    pub fn new(length: usize, hop: usize, attack: usize, release: usize) -> Result<Self, WindowError> {
        let spec = Self { length, hop, attack, release };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), WindowError> {
        let (m, f) = (self.length, self.hop);
        if m == 0 || f == 0 {
            return Err(WindowError::BadSpec("length and hop must be positive".into()));
        }
        if f > m {
            return Err(WindowError::BadSpec(format!("hop {f} exceeds length {m}")));
        }
        if !(1 <= self.attack && self.attack <= self.release && self.release <= m) {
            return Err(WindowError::BadSpec(format!(
                "onsets must satisfy 1 <= attack <= release <= length, got ({}, {})",
                self.attack, self.release
            )));
        }
        let hold = self.release - self.attack;
        let bound = (m / f) * f;
        if hold > bound {
            return Err(WindowError::HoldTooLong { hold, bound });
        }
        Ok(())
    }
}

/// Optimized window with its COLA certificate.
#[derive(Debug, Clone)]
pub struct ColaWindow {
    pub spec: WindowSpec,
    /// Samples w(1..=M), stored 0-based.
    pub samples: Vec<f64>,
    /// max_t |sum_k w(t - kF) - 1| recomputed over one hop period.
    pub cola_residual: f64,
    /// Total squared acceleration `w' T{v_R} w` (Dirichlet boundaries).
    pub smoothness: f64,
}

impl ColaWindow {
    /// Build directly from samples, recomputing the certificate fields.
    pub fn from_samples(spec: WindowSpec, samples: Vec<f64>) -> Result<Self, WindowError> {
        spec.validate()?;
        if samples.len() != spec.length {
            return Err(WindowError::BadSpec(format!(
                "sample count {} does not match length {}",
                samples.len(),
                spec.length
            )));
        }
        let mut w = Self { spec, samples, cola_residual: 0.0, smoothness: 0.0 };
        w.cola_residual = validate_cola(&w).cola_residual;
        w.smoothness = smoothness_energy(&w.samples);
        Ok(w)
    }

    /// First difference with the Dirichlet tail: v(M) = -w(M).
    fn velocity(&self, t: usize) -> f64 {
        let m = self.spec.length;
        debug_assert!((1..=m).contains(&t));
        let next = if t < m { self.samples[t] } else { 0.0 };
        next - self.samples[t - 1]
    }
}

/// `w' T{v_R} w` evaluated with the banded stencil.
pub fn smoothness_energy(samples: &[f64]) -> f64 {
    let m = samples.len();
    let mut acc = 0.0;
    for i in 0..m {
        let mut row = 0.0;
        for off in -2i64..=2 {
            let j = i as i64 + off;
            if (0..m as i64).contains(&j) {
                row += Kernel::Smoothness.eval(off) * samples[j as usize];
            }
        }
        acc += samples[i] * row;
    }
    acc
}

/// Per-region validation report. All quantities are violation magnitudes;
/// a well-formed window has every field at roundoff scale.
#[derive(Debug, Clone, Copy)]
pub struct ColaReport {
    pub cola_residual: f64,
    pub attack_violation: f64,
    pub hold_violation: f64,
    pub release_violation: f64,
    pub bound_violation: f64,
}

impl ColaReport {
    pub fn ok(&self) -> bool {
        self.cola_residual <= 1e-6
            && self.attack_violation <= 1e-9
            && self.hold_violation <= 1e-9
            && self.release_violation <= 1e-9
            && self.bound_violation <= 1e-9
    }
}

/// Recompute the COLA residual and region monotonicity violations.
pub fn validate_cola(w: &ColaWindow) -> ColaReport {
    let m = w.spec.length;
    let f = w.spec.hop;
    let mut cola = 0.0f64;
    for t in 1..=f.min(m) {
        let mut sum = 0.0;
        let mut idx = t;
        while idx <= m {
            sum += w.samples[idx - 1];
            idx += f;
        }
        cola = cola.max((sum - 1.0).abs());
    }
    let mut attack = 0.0f64;
    for t in 1..=w.spec.attack {
        attack = attack.max(-w.velocity(t));
    }
    let mut hold = 0.0f64;
    for t in (w.spec.attack + 1)..w.spec.release {
        hold = hold.max(w.velocity(t).abs());
    }
    let mut release = 0.0f64;
    for t in w.spec.release..=m {
        release = release.max(w.velocity(t));
    }
    let mut bound = 0.0f64;
    for &s in &w.samples {
        bound = bound.max(-s).max(s - 1.0);
    }
    ColaReport {
        cola_residual: cola,
        attack_violation: attack,
        hold_violation: hold,
        release_violation: release,
        bound_violation: bound,
    }
}

/// Design the smoothest window for `spec`: minimize `w' T{v_R} w` subject
/// to the COLA equalities, the box, and the velocity sign regions.
pub fn design_window(spec: &WindowSpec) -> Result<ColaWindow, WindowError> {
    spec.validate()?;
    let m = spec.length;
    let f = spec.hop;
    let (t_a, t_r) = (spec.attack, spec.release);

    let stencil = toeplitz_op(Kernel::Smoothness, 0, m, m);
    let q = 2.0 * &stencil;

    // Equalities: one COLA row per hop offset, then the hold region
    // v(T_A+1 .. T_R-1) (empty when the onsets are adjacent).
    let comb = toeplitz_op(Kernel::Comb { hop: f }, 0, f, m);
    let hold = toeplitz_op(Kernel::Velocity, t_a, t_r.saturating_sub(1), m);
    let n_eq = comb.nrows() + hold.nrows();
    let mut a_eq = DMatrix::zeros(n_eq, m);
    a_eq.view_mut((0, 0), (comb.nrows(), m)).copy_from(&comb);
    a_eq.view_mut((comb.nrows(), 0), (hold.nrows(), m)).copy_from(&hold);
    let mut eq_rhs = DVector::zeros(n_eq);
    for i in 0..comb.nrows() {
        eq_rhs[i] = 1.0;
    }

    // Sign regions as one-sided rows: v(1..T_A) >= 0, v(T_R..M) <= 0.
    let attack = toeplitz_op(Kernel::Velocity, 0, t_a, m);
    let release = toeplitz_op(Kernel::Velocity, t_r - 1, m, m);
    let n_ineq = attack.nrows() + release.nrows();
    let mut a_ineq = DMatrix::zeros(n_ineq, m);
    a_ineq.view_mut((0, 0), (attack.nrows(), m)).copy_from(&attack);
    a_ineq.view_mut((attack.nrows(), 0), (release.nrows(), m)).copy_from(&release);
    let mut lo = DVector::from_element(n_ineq, f64::NEG_INFINITY);
    let mut hi = DVector::from_element(n_ineq, f64::INFINITY);
    for i in 0..attack.nrows() {
        lo[i] = 0.0;
    }
    for i in attack.nrows()..n_ineq {
        hi[i] = 0.0;
    }

    let problem = QpProblem::new(q, DVector::zeros(m), 0.0)
        .with_box(DVector::zeros(m), DVector::from_element(m, 1.0))
        .with_eq_rows(a_eq, eq_rhs)
        .with_ineq_rows(a_ineq, lo, hi);

    let sol = qp::solve(&problem, &SolverConfig::default())
        .map_err(|e| WindowError::SolverFailure(e.to_string()))?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(WindowError::Infeasible),
        SolveStatus::MaxIterations => {
            return Err(WindowError::SolverFailure(format!(
                "iteration cap hit (primal residual {:.3e})",
                sol.primal_residual
            )))
        }
    }

    let samples: Vec<f64> = sol.x.iter().copied().collect();
    let mut w = ColaWindow { spec: *spec, samples, cola_residual: 0.0, smoothness: 0.0 };
    w.cola_residual = validate_cola(&w).cola_residual;
    w.smoothness = (&stencil * &sol.x).dot(&sol.x);
    Ok(w)
}

/// Minimum eigenvalue of the smoothness matrix assembled as
/// `T{v_a}^2 + e1 e1' + eM eM'`; non-negative by construction.
pub fn psd_check_stencil(m: usize) -> f64 {
    assert!(m >= 3, "stencil check needs at least 3 samples");
    let mat = stencil_as_squared_acceleration(m);
    let eig = SymmetricEigen::new(mat);
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// The PSD decomposition route to the smoothness matrix.
pub fn stencil_as_squared_acceleration(m: usize) -> DMatrix<f64> {
    let accel = toeplitz_op(Kernel::Acceleration, 0, m, m);
    let mut mat = &accel * &accel;
    mat[(0, 0)] += 1.0;
    mat[(m - 1, m - 1)] += 1.0;
    mat
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn velocity_operator_rows() {
        let t = toeplitz_op(Kernel::Velocity, 0, 3, 4);
        let expect = [
            [-1.0, 1.0, 0.0, 0.0],
            [0.0, -1.0, 1.0, 0.0],
            [0.0, 0.0, -1.0, 1.0],
        ];
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(t[(i, j)], expect[i][j]);
            }
        }
    }

    #[test]
    fn comb_operator_rows() {
        let t = toeplitz_op(Kernel::Comb { hop: 2 }, 0, 2, 4);
        assert_eq!(t.nrows(), 2);
        assert_eq!(t.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(t.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn smoothness_stencil_matches_self_convolution() {
        // Oracle: explicit discrete convolution of (1, -2, 1) with itself.
        let mut conv = [0.0f64; 5];
        let acc = [1.0, -2.0, 1.0];
        for (i, a) in acc.iter().enumerate() {
            for (j, b) in acc.iter().enumerate() {
                conv[i + j] += a * b;
            }
        }
        assert_eq!(conv, [1.0, -4.0, 6.0, -4.0, 1.0]);
        let t = toeplitz_op(Kernel::Smoothness, 0, 5, 5);
        for i in 0..5i64 {
            for j in 0..5i64 {
                let off = j - i;
                let expect = if off.abs() <= 2 { conv[(off + 2) as usize] } else { 0.0 };
                assert_eq!(t[(i as usize, j as usize)], expect);
            }
        }
    }

    #[test]
    fn empty_operator_for_inverted_range() {
        let t = toeplitz_op(Kernel::Velocity, 3, 3, 8);
        assert_eq!(t.nrows(), 0);
        let t = toeplitz_op(Kernel::Velocity, 5, 3, 8);
        assert_eq!(t.nrows(), 0);
    }

    #[test]
    fn decomposition_identity_holds() {
        for m in [3usize, 5, 16, 64] {
            let direct = toeplitz_op(Kernel::Smoothness, 0, m, m);
            let squared = stencil_as_squared_acceleration(m);
            let diff = (&direct - &squared).amax();
            assert!(diff <= 1e-12, "m={m} diff={diff}");
        }
    }

    #[test]
    fn stencil_is_psd() {
        assert!(psd_check_stencil(3) >= -1e-10);
        assert!(psd_check_stencil(64) >= -1e-10);
    }

    #[test]
    fn rectangle_when_hop_equals_length() {
        let spec = WindowSpec::new(8, 8, 1, 8).unwrap();
        let w = design_window(&spec).unwrap();
        for &s in &w.samples {
            assert!((s - 1.0).abs() < 1e-9, "samples {:?}", w.samples);
        }
        assert!(w.cola_residual < 1e-9);
    }

    #[test]
    fn four_sample_window_matches_hand_kkt() {
        // M=4, F=2, T_A=2, T_R=3. COLA pins w3 = 1-w1, w4 = 1-w2, leaving
        // the 2-dim manifold (w1, w2) with v1 >= 0 and v2 >= 0, i.e.
        // w2 >= w1 and w1 + w2 <= 1. The energy reduces to
        // 10 w1^2 + 10 w2^2 - 8 w1 w2 - 2 w1 - 10 w2 + 4, minimized at
        // (5/14, 9/14).
        let spec = WindowSpec::new(4, 2, 2, 3).unwrap();
        let w = design_window(&spec).unwrap();
        let expect = [5.0 / 14.0, 9.0 / 14.0, 9.0 / 14.0, 5.0 / 14.0];
        for (got, want) in w.samples.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-8, "{:?}", w.samples);
        }
        assert!((w.smoothness - 3.0 / 7.0).abs() < 1e-8);

        // Exhaustive 1e-3 grid on the 2-dim feasible manifold.
        let mut best = f64::INFINITY;
        let mut arg = (0.0, 0.0);
        for i in 0..=1000 {
            for j in 0..=1000 {
                let (w1, w2) = (i as f64 * 1e-3, j as f64 * 1e-3);
                if w2 < w1 || w1 + w2 > 1.0 + 1e-12 {
                    continue;
                }
                let cand = [w1, w2, 1.0 - w1, 1.0 - w2];
                let e = smoothness_energy(&cand);
                if e < best {
                    best = e;
                    arg = (w1, w2);
                }
            }
        }
        assert!((arg.0 - expect[0]).abs() <= 1e-3 + 1e-12);
        assert!((arg.1 - expect[1]).abs() <= 1e-3 + 1e-12);
        assert!(w.smoothness <= best + 1e-9);
    }

    #[test]
    fn designed_windows_pass_validation() {
        for (m, f, ta, tr) in [(32, 8, 12, 20), (64, 16, 8, 20), (48, 16, 1, 48)] {
            let spec = WindowSpec::new(m, f, ta, tr).unwrap();
            let w = design_window(&spec).unwrap();
            let rep = validate_cola(&w);
            assert!(rep.ok(), "spec {:?} report {:?}", spec, rep);
        }
    }

    #[test]
    fn hold_bound_violation_is_named() {
        let err = WindowSpec::new(8, 3, 1, 8).unwrap_err();
        match err {
            WindowError::HoldTooLong { hold, bound } => {
                assert_eq!(hold, 7);
                assert_eq!(bound, 6);
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(err.to_string().contains("floor(M/F)*F"));
    }

    #[test]
    fn rectangle_cola_residual_cases() {
        // Rectangle with hop = length: perfect COLA.
        let spec = WindowSpec::new(8, 8, 1, 8).unwrap();
        let rect = ColaWindow::from_samples(spec, vec![1.0; 8]).unwrap();
        assert_eq!(validate_cola(&rect).cola_residual, 0.0);

        // Same rectangle at hop M/2 double counts: residual 1.
        let spec = WindowSpec { length: 8, hop: 4, attack: 1, release: 8 };
        let rect = ColaWindow { spec, samples: vec![1.0; 8], cola_residual: 0.0, smoothness: 0.0 };
        assert_eq!(validate_cola(&rect).cola_residual, 1.0);
    }

    #[test]
    fn uniform_baseline_is_never_smoother() {
        // The flat COLA window (hop dividing length) is feasible for any
        // onsets; the designed window must match or beat its energy.
        for (m, f, ta, tr) in [(32usize, 8usize, 10usize, 20usize), (40, 10, 5, 30)] {
            let spec = WindowSpec::new(m, f, ta, tr).unwrap();
            let w = design_window(&spec).unwrap();
            let flat = vec![f as f64 / m as f64; m];
            assert!(w.smoothness <= smoothness_energy(&flat) + 1e-9);
        }
    }

    #[test]
    fn hop_not_dividing_length_still_designs() {
        // Residue classes then carry unequal copy counts; the free
        // junction samples absorb the difference.
        for (m, f, ta, tr) in [(5usize, 2usize, 1usize, 5usize), (10, 3, 4, 7), (11, 4, 2, 9)] {
            let spec = WindowSpec::new(m, f, ta, tr).unwrap();
            let w = design_window(&spec).unwrap();
            let rep = validate_cola(&w);
            assert!(rep.ok(), "spec {:?} report {:?}", spec, rep);
        }
    }
}

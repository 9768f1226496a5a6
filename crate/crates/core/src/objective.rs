//! Channel-mixture distortion objective.
//!
//! Distortion is the rate-weighted product of channel gains,
//! `g(x) = prod_n x_n^{w_n}`, equivalently a weighted sum of per-channel
//! dB reductions. Its second-order expansion about unity gives the
//! quadratic form used by the per-frame solver:
//!
//! ```text
//!     f(x) = 1/2 x' Q x + c' x + d,     Q = diag(w) - w w',
//!     c = (w'1 - 2) w,                  d = 1/2 1' Q 1 + w'1,
//! ```
//!
//! with `f(1) = 0`. Q is positive semi-definite exactly when the rates sum
//! to at most one; the eigenvalues are the roots of the secular equation
//! of a rank-one update to `diag(w)`, which `secular_eigs` solves by
//! bracketed bisection.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RatesError {
    #[error("attenuation rate {index} is not strictly positive (got {value})")]
    NonPositive { index: usize, value: f64 },
    #[error("rates vector is empty")]
    Empty,
    #[error("rates sum to one; the critical point recedes to infinity")]
    SingularCurvature,
}

/// Per-channel attenuation rates (dB-per-dB). Stored as given; callers
/// that need the unit-sum bound apply [`AttenuationRates::normalized`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationRates {
    w: DVector<f64>,
}

impl AttenuationRates {
    pub fn new(w: Vec<f64>) -> Result<Self, RatesError> {
        if w.is_empty() {
            return Err(RatesError::Empty);
        }
        for (index, &value) in w.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(RatesError::NonPositive { index, value });
            }
        }
        Ok(Self { w: DVector::from_vec(w) })
    }

    /// Uniform rates 1/N; saturates the PSD bound exactly.
    pub fn uniform(n: usize) -> Self {
        Self { w: DVector::from_element(n, 1.0 / n as f64) }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.len() == 0
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn sum(&self) -> f64 {
        self.w.sum()
    }

    /// Scale the rates to sum to exactly one when they exceed it,
    /// preserving ratios. Sums at or below one are kept. Returns the
    /// rates and whether scaling happened.
    pub fn normalized(&self) -> (Self, bool) {
        let s = self.sum();
        if s > 1.0 {
            (Self { w: &self.w / s }, true)
        } else {
            (self.clone(), false)
        }
    }
}

/// Quadratic distortion model `f(x) = 1/2 x'Qx + c'x + d` with `f(1) = 0`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub d: f64,
    /// Rates the model was built from (after normalization).
    pub rates: AttenuationRates,
    /// True when the input rates were scaled down to unit sum.
    pub was_normalized: bool,
}

impl QuadraticObjective {
    pub fn value_at(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.q * x).dot(x) + self.c.dot(x) + self.d
    }

    pub fn gradient_at(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x + &self.c
    }

    pub fn num_channels(&self) -> usize {
        self.c.len()
    }
}

/// `Q = diag(w) - w w'` for raw rates, without any normalization.
pub fn curvature_matrix(w: &DVector<f64>) -> DMatrix<f64> {
    let n = w.len();
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            q[(i, j)] = -w[i] * w[j];
        }
        q[(i, i)] += w[i];
    }
    q
}

/// Exact distortion product `g(x) = prod_n x_n^{w_n}`, evaluated in the
/// log domain. Any non-positive gain collapses the product to zero
/// (-inf dB); gains live in [0, 1], so negatives only arise as solver
/// roundoff.
pub fn distortion_g(x: &DVector<f64>, rates: &AttenuationRates) -> f64 {
    assert_eq!(x.len(), rates.len(), "gain/rate dimension mismatch");
    let mut log_sum = 0.0f64;
    for (xn, wn) in x.iter().zip(rates.as_vector().iter()) {
        if *xn <= 0.0 {
            return 0.0;
        }
        log_sum += wn * xn.ln();
    }
    log_sum.exp()
}

/// Distortion in dB; `-inf` when any gain is fully muted.
pub fn distortion_db(x: &DVector<f64>, rates: &AttenuationRates) -> f64 {
    let g = distortion_g(x, rates);
    if g == 0.0 {
        f64::NEG_INFINITY
    } else {
        20.0 * g.log10()
    }
}

/// Build the quadratic model from rates, normalizing sums above one.
pub fn build_objective(rates: &AttenuationRates) -> QuadraticObjective {
    let (rates, was_normalized) = rates.normalized();
    let w = rates.as_vector();
    let s = w.sum();
    let q = curvature_matrix(w);
    let c = w * (s - 2.0);
    let ones = DVector::from_element(w.len(), 1.0);
    let d = 0.5 * (&q * &ones).dot(&ones) + s;
    QuadraticObjective { q, c, d, rates, was_normalized }
}

/// Stationary point of the quadratic model: a scaled vector of ones,
/// `(2 + q)·1` with `q = s/(1-s)`. Requires `sum(w) < 1` strictly.
pub fn critical_point(rates: &AttenuationRates) -> Result<DVector<f64>, RatesError> {
    let s = rates.sum();
    if s >= 1.0 {
        return Err(RatesError::SingularCurvature);
    }
    let q = s / (1.0 - s);
    Ok(DVector::from_element(rates.len(), 2.0 + q))
}

/// Scalar `2 + q` without building the vector; defined for any `s != 1`.
pub fn critical_scale(sum_of_rates: f64) -> f64 {
    2.0 + sum_of_rates / (1.0 - sum_of_rates)
}

/// All eigenvalues of `diag(w) - w w'`, ascending, via the secular
/// equation `S(l) = 1 - sum w_n^2 / (w_n - l)`. Repeated rates deflate:
/// a value of multiplicity m contributes the eigenvalue w_n with
/// multiplicity m - 1, and S keeps one pole per distinct value.
pub fn secular_eigs(rates: &AttenuationRates) -> Vec<f64> {
    let w = rates.as_vector();
    let n = w.len();

    // Distinct pole values ascending with multiplicities (exact matches).
    let mut sorted: Vec<f64> = w.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut poles: Vec<(f64, usize)> = Vec::new();
    for v in sorted {
        match poles.last_mut() {
            Some((pv, count)) if *pv == v => *count += 1,
            _ => poles.push((v, 1)),
        }
    }

    let secular = |lambda: f64| -> f64 {
        let mut s = 1.0;
        for &(v, count) in &poles {
            s -= count as f64 * v * v / (v - lambda);
        }
        s
    };

    let mut eigs = Vec::with_capacity(n);
    let norm_sq: f64 = w.iter().map(|v| v * v).sum();

    // One root strictly below the smallest pole, then one per gap.
    let k = poles.len();
    for idx in 0..k {
        let (hi_pole, _) = poles[idx];
        let lo = if idx == 0 {
            poles[0].0 - norm_sq - 1.0
        } else {
            poles[idx - 1].0
        };
        let hi = hi_pole;
        // S -> +inf at lo+ (pole side) or S(lo) > 0 for the leftmost
        // bracket; S -> -inf at hi-. Bisect on the open interval.
        let mut a = lo;
        let mut b = hi;
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if secular(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        eigs.push(0.5 * (a + b));
        // Deflated copies of the pole above this gap.
        let mult = poles[idx].1;
        for _ in 1..mult {
            eigs.push(hi_pole);
        }
    }
    eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eigs
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn distortion_at_unity_is_one() {
        let w = AttenuationRates::new(vec![0.3, 0.3, 0.4]).unwrap();
        let x = DVector::from_element(3, 1.0);
        assert_eq!(distortion_g(&x, &w), 1.0);
    }

    #[test]
    fn distortion_square_root_case() {
        let w = AttenuationRates::new(vec![0.5, 0.5]).unwrap();
        let g = distortion_g(&dvector![0.25, 1.0], &w);
        assert!((g - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distortion_matches_log_domain_oracle() {
        let w = AttenuationRates::new(vec![0.2, 0.3, 0.5]).unwrap();
        let x = dvector![0.9, 0.8, 0.7];
        let g = distortion_g(&x, &w);
        // dB identity: 20 log10 g == sum w_n 20 log10 x_n.
        let db_direct = 20.0 * g.log10();
        let db_sum: f64 = x
            .iter()
            .zip(w.as_vector().iter())
            .map(|(xn, wn)| wn * 20.0 * xn.log10())
            .sum();
        assert!((db_direct - db_sum).abs() < 1e-9);
    }

    #[test]
    fn distortion_zero_gain_flags_silence() {
        let w = AttenuationRates::new(vec![0.5, 0.5]).unwrap();
        let x = dvector![0.0, 1.0];
        assert_eq!(distortion_g(&x, &w), 0.0);
        assert_eq!(distortion_db(&x, &w), f64::NEG_INFINITY);
    }

    #[test]
    fn objective_matches_symbolic_expansion() {
        let w = AttenuationRates::new(vec![0.5, 0.5]).unwrap();
        let obj = build_objective(&w);
        assert!((obj.q[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((obj.q[(0, 1)] + 0.25).abs() < 1e-15);
        assert!((obj.c[0] + 0.5).abs() < 1e-15);
        assert!((obj.d - 1.0).abs() < 1e-15);
        let ones = DVector::from_element(2, 1.0);
        assert!(obj.value_at(&ones).abs() < 1e-12);
    }

    #[test]
    fn single_channel_collapses_to_gain_maximization() {
        let w = AttenuationRates::new(vec![1.0]).unwrap();
        let obj = build_objective(&w);
        assert!(obj.q[(0, 0)].abs() < 1e-15);
        assert!((obj.c[0] + 1.0).abs() < 1e-15);
        assert!((obj.d - 1.0).abs() < 1e-15);
        // f(x) = 1 - x.
        assert!((obj.value_at(&dvector![0.25]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn quadratic_is_second_order_accurate() {
        // |(1 - f(x)) - g(x)| should shrink cubically toward unity.
        let w = AttenuationRates::new(vec![0.25, 0.35, 0.4]).unwrap();
        let obj = build_objective(&w);
        let dir = dvector![0.7, -0.3, 0.5];
        let mut prev_err = f64::INFINITY;
        for k in 1..=4 {
            let h = 0.1f64 / 2f64.powi(k);
            let x = DVector::from_element(3, 1.0) + &dir * h;
            let err = ((1.0 - obj.value_at(&x)) - distortion_g(&x, &w)).abs();
            // Ratio test: each halving should shrink the error by ~8.
            if prev_err.is_finite() {
                assert!(err < prev_err / 6.0, "err {err} prev {prev_err}");
            }
            prev_err = err;
        }
    }

    #[test]
    fn normalization_preserves_ratios() {
        let raw = AttenuationRates::new(vec![0.6, 1.2, 0.6]).unwrap();
        let obj = build_objective(&raw);
        assert!(obj.was_normalized);
        let w = obj.rates.as_vector();
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn critical_point_is_scaled_ones() {
        let w = AttenuationRates::new(vec![0.25, 0.25]).unwrap();
        let x = critical_point(&w).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
        // Gradient vanishes there.
        let obj = build_objective(&w);
        assert!(obj.gradient_at(&x).amax() < 1e-10);
    }

    #[test]
    fn critical_point_blows_up_near_unit_sum() {
        let w = AttenuationRates::new(vec![0.4995, 0.4995]).unwrap();
        let x = critical_point(&w).unwrap();
        assert!(x[0] > 100.0);
        // q = 999 at sum 0.999 exactly.
        assert!((critical_scale(0.999) - 1001.0).abs() < 1e-9);
    }

    #[test]
    fn critical_point_rejects_unit_sum() {
        let w = AttenuationRates::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            critical_point(&w),
            Err(RatesError::SingularCurvature)
        ));
    }

    #[test]
    fn secular_matches_2x2_characteristic_polynomial() {
        let w = AttenuationRates::new(vec![0.5, 0.5]).unwrap();
        let eigs = secular_eigs(&w);
        assert!((eigs[0] - 0.0).abs() < 1e-12);
        assert!((eigs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn secular_detects_indefiniteness_above_unit_sum() {
        let w = AttenuationRates::new(vec![0.5, 0.7]).unwrap();
        let eigs = secular_eigs(&w);
        assert!(eigs[0] < 0.0);
        assert!(eigs[1] > 0.5 && eigs[1] < 0.7, "eigs {eigs:?}");
    }

    #[test]
    fn secular_deflates_repeated_rates() {
        let w = AttenuationRates::new(vec![0.2, 0.2, 0.2]).unwrap();
        let eigs = secular_eigs(&w);
        assert_eq!(eigs.len(), 3);
        // Q = 0.2 I - w w': eigenvalues 0.2 (x2) and 0.2 - 3*0.04 = 0.08.
        assert!((eigs[0] - 0.08).abs() < 1e-10);
        assert!((eigs[1] - 0.2).abs() < 1e-12);
        assert!((eigs[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(AttenuationRates::new(vec![]).is_err());
        assert!(AttenuationRates::new(vec![0.5, 0.0]).is_err());
        assert!(AttenuationRates::new(vec![0.5, -0.1]).is_err());
    }
}

//! Per-frame problem reduction: pre-mixing cuts variables, presolve and
//! occlusion culling cut mixture-limit rows.
//!
//! A pre-mixer is a nonnegative lossless matrix `P` (`P 1 = 1`) mapping a
//! shorter gain vector `y` to full channel gains `x = P y`; the QP is
//! restricted to its column space. Occlusion culling works row by row on
//! the halfspace-box geometry: each signed row `s(x) <= tau` meets the
//! gain box in a polytope whose face vertices (hyperplane-edge crossings)
//! are cheap to enumerate for small variable counts. If row `i` is
//! strictly violated at every face vertex of row `j`, the hull of `i` is
//! contained in the hull of `j` and `j` can never support the feasible
//! region. Sorting rows by the norm of their nearest face vertex makes
//! the test one-directional, so a single sweep builds the non-occluded
//! set.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qp::{self, QpProblem, SolverConfig};

#[derive(Debug, Error)]
pub enum ReductionError {
    #[error("concatenation pre-mixer needs alpha in (0,1), got {0}")]
    BadAlpha(f64),
    #[error("pre-mixer needs at least one band and one content channel")]
    EmptyLayout,
}

/// Pre-mixer families. `Full` is the identity (no variable reduction).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PreMixerKind {
    Full,
    SingleChannel,
    MultiBand,
    MultiContent,
    Concatenation { alpha: f64 },
}

impl PreMixerKind {
    pub fn name(&self) -> &'static str {
        match self {
            PreMixerKind::Full => "full",
            PreMixerKind::SingleChannel => "single_channel",
            PreMixerKind::MultiBand => "multi_band",
            PreMixerKind::MultiContent => "multi_content",
            PreMixerKind::Concatenation { .. } => "concatenation",
        }
    }
}

/// Lossless gain pre-mixer `x = P y` over the column-major (band fastest)
/// variable stacking.
#[derive(Debug, Clone)]
pub struct PreMixer {
    pub kind: PreMixerKind,
    pub matrix: DMatrix<f64>,
    /// True when some row holds more than one nonzero entry; the box on x
    /// then becomes explicit rows in y-space.
    pub coupled: bool,
    /// Upper bounds induced on y by `0 <= P y <= 1` (unit gain box).
    pub y_upper: DVector<f64>,
}

impl PreMixer {
    pub fn n_full(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_reduced(&self) -> usize {
        self.matrix.ncols()
    }

    /// Upper bounds on y implied by `0 <= P y <= upper`, the tightest per
    /// column over the rows touching it.
    pub fn implied_y_upper(&self, upper: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::from_element(self.n_reduced(), f64::INFINITY);
        for r in 0..self.n_full() {
            for k in 0..self.n_reduced() {
                let p = self.matrix[(r, k)];
                if p > 0.0 {
                    out[k] = out[k].min(upper[r] / p);
                }
            }
        }
        out
    }

    /// Reconstruct full-space gains.
    pub fn expand(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.matrix * y
    }
}

/// Build a pre-mixer for an `n_bands x n_contents` gain layout.
pub fn build_premixer(
    kind: PreMixerKind,
    n_bands: usize,
    n_contents: usize,
) -> Result<PreMixer, ReductionError> {
    if n_bands == 0 || n_contents == 0 {
        return Err(ReductionError::EmptyLayout);
    }
    let n = n_bands * n_contents;
    let var = |band: usize, content: usize| content * n_bands + band;

    let matrix = match kind {
        PreMixerKind::Full => DMatrix::identity(n, n),
        PreMixerKind::SingleChannel => DMatrix::from_element(n, 1, 1.0),
        // I_{N_C} (x) 1_{N_B}: one column per content channel.
        PreMixerKind::MultiBand => {
            let mut p = DMatrix::zeros(n, n_contents);
            for k in 0..n_contents {
                for j in 0..n_bands {
                    p[(var(j, k), k)] = 1.0;
                }
            }
            p
        }
        // 1_{N_C} (x) I_{N_B}: one column per band.
        PreMixerKind::MultiContent => {
            let mut p = DMatrix::zeros(n, n_bands);
            for k in 0..n_contents {
                for j in 0..n_bands {
                    p[(var(j, k), j)] = 1.0;
                }
            }
            p
        }
        // [alpha (1 (x) I), (1-alpha) (I (x) 1)]: band columns then
        // content columns.
        PreMixerKind::Concatenation { alpha } => {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(ReductionError::BadAlpha(alpha));
            }
            let mut p = DMatrix::zeros(n, n_bands + n_contents);
            for k in 0..n_contents {
                for j in 0..n_bands {
                    p[(var(j, k), j)] = alpha;
                    p[(var(j, k), n_bands + k)] = 1.0 - alpha;
                }
            }
            p
        }
    };

    let coupled = (0..matrix.nrows())
        .any(|r| matrix.row(r).iter().filter(|v| **v != 0.0).count() > 1);
    let ones = DVector::from_element(n, 1.0);
    let pm = PreMixer { kind, coupled, y_upper: DVector::zeros(0), matrix };
    debug_assert!((pm.expand(&DVector::from_element(pm.n_reduced(), 1.0)) - &ones).amax() < 1e-12);
    let y_upper = pm.implied_y_upper(&ones);
    Ok(PreMixer { y_upper, ..pm })
}

/// Restrict a QP to the pre-mixer's column space: objective becomes
/// `(P'QP, P'c, d)`, rows multiply through, and the x-box turns into a
/// y-box (uncoupled) or explicit rows plus the induced y-box (coupled).
pub fn reduce_problem(p: &QpProblem, pm: &PreMixer) -> QpProblem {
    assert_eq!(pm.n_full(), p.num_vars(), "pre-mixer size mismatch");
    let np = pm.n_reduced();
    let q = pm.matrix.tr_mul(&(&p.q * &pm.matrix));
    let c = pm.matrix.tr_mul(&p.c);
    let a_ineq = &p.a_ineq * &pm.matrix;
    let a_eq = &p.a_eq * &pm.matrix;

    let mut reduced = QpProblem::new(q, c, p.d)
        .with_ineq_rows(a_ineq, p.ineq_lower.clone(), p.ineq_upper.clone())
        .with_eq_rows(a_eq, p.eq_rhs.clone());

    if pm.coupled {
        // Keep the x-box as explicit rows in y, plus the induced y-box.
        let rows = pm.matrix.clone();
        let mut a = DMatrix::zeros(reduced.a_ineq.nrows() + rows.nrows(), np);
        a.view_mut((0, 0), (reduced.a_ineq.nrows(), np)).copy_from(&reduced.a_ineq);
        a.view_mut((reduced.a_ineq.nrows(), 0), (rows.nrows(), np)).copy_from(&rows);
        let mut lo = DVector::zeros(a.nrows());
        let mut hi = DVector::zeros(a.nrows());
        for i in 0..reduced.a_ineq.nrows() {
            lo[i] = reduced.ineq_lower[i];
            hi[i] = reduced.ineq_upper[i];
        }
        for r in 0..rows.nrows() {
            lo[reduced.a_ineq.nrows() + r] = p.lower[r];
            hi[reduced.a_ineq.nrows() + r] = p.upper[r];
        }
        reduced = reduced.with_ineq_rows(a, lo, hi);
        reduced = reduced.with_box(DVector::zeros(np), pm.implied_y_upper(&p.upper));
    } else {
        // One nonzero per row: the x-box maps onto y componentwise.
        let mut lo = DVector::from_element(np, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(np, f64::INFINITY);
        for r in 0..pm.n_full() {
            for k in 0..np {
                let v = pm.matrix[(r, k)];
                if v > 0.0 {
                    lo[k] = lo[k].max(p.lower[r] / v);
                    hi[k] = hi[k].min(p.upper[r] / v);
                }
            }
        }
        reduced = reduced.with_box(lo, hi);
    }
    reduced
}

/// Where a signed mixture row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RowOrigin {
    pub sample: usize,
    pub mixer: usize,
    pub negated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Active,
    DroppedPresolve,
    DroppedOccluded,
}

/// One signed mixture-limit row `s'x <= tau`, `tau >= 0` so that x = 0 is
/// always feasible.
#[derive(Debug, Clone)]
pub struct ConstraintRow {
    pub coeffs: DVector<f64>,
    pub threshold: f64,
    pub origin: RowOrigin,
    pub min_norm_key: Option<f64>,
    pub status: RowStatus,
}

#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    pub rows: Vec<ConstraintRow>,
}

impl ConstraintSet {
    pub fn new(rows: Vec<ConstraintRow>) -> Self {
        Self { rows }
    }

    pub fn active_count(&self) -> usize {
        self.rows.iter().filter(|r| r.status == RowStatus::Active).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.rows.len())
            .filter(|&i| self.rows[i].status == RowStatus::Active)
            .collect()
    }

    /// Rewrite every row into pre-mixed coordinates (`s' P`).
    pub fn premixed(&self, pm: &PreMixer) -> ConstraintSet {
        let rows = self
            .rows
            .iter()
            .map(|r| ConstraintRow {
                coeffs: pm.matrix.tr_mul(&r.coeffs),
                threshold: r.threshold,
                origin: r.origin,
                min_norm_key: None,
                status: r.status,
            })
            .collect();
        ConstraintSet { rows }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PresolveStats {
    pub n_original: usize,
    pub n_after_implied: usize,
    pub n_after_tighten: usize,
}

/// Implied-bounds presolve plus single-variable bound tightening.
///
/// A row is unreachable inside the box when its best-case mixture
/// `sum_n max(s_n u_n, 0)` stays at or below the threshold; such rows are
/// dropped. Surviving rows then tighten each upper bound where a single
/// variable dominates, and the implied-bounds pass reruns against the
/// tightened box. Returns the tightened upper bounds alongside counts
/// after each stage.
pub fn presolve(set: &mut ConstraintSet, upper: &DVector<f64>) -> (DVector<f64>, PresolveStats) {
    let n_original = set.active_count();
    let reachable = |row: &ConstraintRow, u: &DVector<f64>| -> bool {
        let mut best = 0.0;
        for (s, ub) in row.coeffs.iter().zip(u.iter()) {
            best += (s * ub).max(0.0);
        }
        best > row.threshold
    };

    for row in set.rows.iter_mut().filter(|r| r.status == RowStatus::Active) {
        if !reachable(row, upper) {
            row.status = RowStatus::DroppedPresolve;
        }
    }
    let n_after_implied = set.active_count();

    // Tightening: from s'x <= tau, variable n with s_n > 0 obeys
    // x_n <= (tau - sum_{k != n} min(s_k u_k, 0)) / s_n.
    let mut tightened = upper.clone();
    for row in set.rows.iter().filter(|r| r.status == RowStatus::Active) {
        let neg_total: f64 = row
            .coeffs
            .iter()
            .zip(tightened.iter())
            .map(|(s, u)| (s * u).min(0.0))
            .sum();
        for (n, s) in row.coeffs.iter().enumerate() {
            if *s > 0.0 {
                let slack = row.threshold - (neg_total - (s * tightened[n]).min(0.0));
                tightened[n] = tightened[n].min(slack / s);
            }
        }
    }
    for row in set.rows.iter_mut().filter(|r| r.status == RowStatus::Active) {
        if !reachable(row, &tightened) {
            row.status = RowStatus::DroppedPresolve;
        }
    }
    let n_after_tighten = set.active_count();

    (
        tightened,
        PresolveStats { n_original, n_after_implied, n_after_tighten },
    )
}

/// Vertices of `{s'x = tau}` intersected with the box `[0, u]`: solve the
/// crossing along every hypercube edge (fix all but one coordinate at a
/// bound), keep in-range solutions, and deduplicate corner hits. At most
/// `2^(N-1) * N` vertices come back.
pub fn constraint_vertices(
    coeffs: &DVector<f64>,
    tau: f64,
    upper: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let n = coeffs.len();
    let mut verts: Vec<DVector<f64>> = Vec::new();
    let scale = 1.0 + upper.amax();
    let mut push_unique = |v: DVector<f64>| {
        for seen in &verts {
            if (seen - &v).amax() <= 1e-9 * scale {
                return;
            }
        }
        verts.push(v);
    };

    for free in 0..n {
        if coeffs[free] == 0.0 {
            continue;
        }
        let others: Vec<usize> = (0..n).filter(|&i| i != free).collect();
        for mask in 0u32..(1u32 << others.len()) {
            let mut x = DVector::zeros(n);
            let mut partial = 0.0;
            for (bit, &idx) in others.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    x[idx] = upper[idx];
                    partial += coeffs[idx] * upper[idx];
                }
            }
            let cross = (tau - partial) / coeffs[free];
            if cross >= -1e-12 * scale && cross <= upper[free] + 1e-12 * scale {
                x[free] = cross.clamp(0.0, upper[free]);
                push_unique(x);
            }
        }
    }
    verts
}

/// Row `i` occludes row `j` when `s_i` strictly exceeds its threshold at
/// every face vertex of `j`; the hull of `i` is then contained in the
/// hull of `j`.
pub fn occludes(coeffs_i: &DVector<f64>, tau_i: f64, vertices_j: &[DVector<f64>]) -> bool {
    if vertices_j.is_empty() {
        return false;
    }
    vertices_j.iter().all(|v| coeffs_i.dot(v) > tau_i)
}

/// Variable-count cap beyond which edge enumeration is abandoned and only
/// presolve applies.
pub const CULL_MAX_VARS: usize = 20;

/// Occlusion culling: merge exact duplicates, enumerate face vertices,
/// sort by min-norm key, and sweep, keeping rows not occluded by any
/// already-accepted row. Rows are culled jointly within each mixer.
pub fn cull_occluded(set: &mut ConstraintSet, upper: &DVector<f64>) {
    if upper.len() > CULL_MAX_VARS {
        return;
    }
    let mut mixers: Vec<usize> = set
        .rows
        .iter()
        .filter(|r| r.status == RowStatus::Active)
        .map(|r| r.origin.mixer)
        .collect();
    mixers.sort_unstable();
    mixers.dedup();

    for mixer in mixers {
        let idxs: Vec<usize> = (0..set.rows.len())
            .filter(|&i| {
                set.rows[i].status == RowStatus::Active && set.rows[i].origin.mixer == mixer
            })
            .collect();

        // Exact duplicates cannot occlude each other (strict inequality),
        // so merge them first; the earliest row survives.
        let mut survivors: Vec<usize> = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let dup = survivors.iter().any(|&k| {
                set.rows[k].threshold == set.rows[i].threshold
                    && set.rows[k].coeffs == set.rows[i].coeffs
            });
            if dup {
                set.rows[i].status = RowStatus::DroppedOccluded;
            } else {
                survivors.push(i);
            }
        }

        // Face vertices and min-norm keys.
        let mut verts: Vec<Vec<DVector<f64>>> = Vec::with_capacity(survivors.len());
        for &i in &survivors {
            let v = constraint_vertices(&set.rows[i].coeffs, set.rows[i].threshold, upper);
            if v.is_empty() {
                // Vacuous row that presolve should have removed.
                set.rows[i].status = RowStatus::DroppedPresolve;
                set.rows[i].min_norm_key = None;
            } else {
                let key = v.iter().map(|x| x.norm()).fold(f64::INFINITY, f64::min);
                set.rows[i].min_norm_key = Some(key);
            }
            verts.push(v);
        }

        let mut order: Vec<usize> = (0..survivors.len())
            .filter(|&k| set.rows[survivors[k]].status == RowStatus::Active)
            .collect();
        order.sort_by(|&a, &b| {
            let ka = set.rows[survivors[a]].min_norm_key.unwrap();
            let kb = set.rows[survivors[b]].min_norm_key.unwrap();
            ka.partial_cmp(&kb).unwrap().then(survivors[a].cmp(&survivors[b]))
        });

        let mut accepted: Vec<usize> = Vec::new();
        for &k in &order {
            let row_idx = survivors[k];
            let mut occluded = false;
            for &a in &accepted {
                let acc_idx = survivors[a];
                let occ = occludes(
                    &set.rows[acc_idx].coeffs,
                    set.rows[acc_idx].threshold,
                    &verts[k],
                );
                // Sorting soundness: an accepted row with a strictly
                // larger key can never occlude the candidate. Exactly
                // tied keys may occlude (mirrored rows in symmetric
                // signals); dropping the later-sorted one is still safe.
                debug_assert!(
                    !(occ
                        && set.rows[acc_idx].min_norm_key.unwrap()
                            > set.rows[row_idx].min_norm_key.unwrap()),
                    "min-norm sort violated the occlusion one-way property"
                );
                if occ {
                    occluded = true;
                    break;
                }
            }
            if occluded {
                set.rows[row_idx].status = RowStatus::DroppedOccluded;
            } else {
                accepted.push(k);
            }
        }
    }
}

/// Facet-depth tolerance for the support oracle, relative to the
/// threshold scale. Sampled full-scale tones yield clusters of
/// near-parallel rows whose mutual facets are slivers (depth grows
/// quadratically in the angular separation); slivers shallower than this
/// are not counted as supports, matching the merged-facet counts of hull
/// computations.
pub const SUPPORT_DEPTH_TOL: f64 = 3e-5;

/// Exact convex-support oracle: row `r` supports the feasible region iff
/// maximizing `s_r' x` over the other rows (and the box) exceeds its
/// threshold by more than the facet-depth tolerance. Solved as a
/// ridge-regularized LP per row; quadratic in the row count, meant for
/// offline statistics rather than the frame path.
pub fn convex_support_flags(set: &ConstraintSet, upper: &DVector<f64>) -> Vec<bool> {
    let n = upper.len();
    let active = set.active_indices();
    let m = active.len();
    let mut flags = vec![false; set.rows.len()];
    if m == 0 {
        return flags;
    }
    let mut a = DMatrix::zeros(m, n);
    let mut hi = DVector::zeros(m);
    for (k, &i) in active.iter().enumerate() {
        a.row_mut(k).copy_from(&set.rows[i].coeffs.transpose());
        hi[k] = set.rows[i].threshold;
    }
    let lo = DVector::from_element(m, f64::NEG_INFINITY);

    for (k, &i) in active.iter().enumerate() {
        let row = &set.rows[i];
        let ridge = 1e-8 * (1.0 + row.coeffs.amax());
        let q = DMatrix::identity(n, n) * ridge;
        let mut hi_k = hi.clone();
        hi_k[k] = f64::INFINITY; // drop the candidate row itself
        let p = QpProblem::new(q, -row.coeffs.clone(), 0.0)
            .with_box(DVector::zeros(n), upper.clone())
            .with_ineq_rows(a.clone(), lo.clone(), hi_k);
        if let Ok(sol) = qp::solve(&p, &SolverConfig::default()) {
            let reach = row.coeffs.dot(&sol.x);
            flags[i] = reach > row.threshold + SUPPORT_DEPTH_TOL * (1.0 + row.threshold);
        }
    }
    flags
}

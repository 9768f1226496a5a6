//! Streaming frame processor: buffer look-ahead, build the per-frame QP,
//! reduce, solve, and overlap-add the windowed gain solutions into
//! per-channel envelopes and limited output mixtures.
//!
//! Frame k covers samples `(k-1)F + 1 ..= (k-1)F + F + L` (zero padded
//! past the stream end), so consecutive frames overlap by the look-ahead
//! L and the window support M = F + L never exceeds the span a frame's
//! constraints cover. With every solve optimal, each output sample is a
//! mixture of Barycentric-weighted feasible gain vectors and therefore
//! respects the mixture limits.

pub mod config;
mod envelope;

pub use envelope::{mix_output, synthesize_envelopes, EnvelopeBank};

use std::collections::HashMap;
use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::objective::{self, AttenuationRates, QuadraticObjective, RatesError};
use crate::qp::{self, ConstraintId, QpError, QpProblem, SolveStatus, SolverConfig};
use crate::reduction::{
    self, ConstraintRow, ConstraintSet, PreMixer, PreMixerKind, ReductionError, RowOrigin,
    RowStatus, CULL_MAX_VARS,
};
use crate::window::{design_window, ColaWindow, WindowError, WindowSpec};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("bad engine config: {0}")]
    Config(String),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Rates(#[from] RatesError),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Multi-lane audio stream, one lane per (band, content, mixer) triple,
/// stored sample-major with bands fastest.
#[derive(Debug, Clone)]
pub struct StreamTensor {
    data: Vec<f64>,
    pub len: usize,
    pub n_bands: usize,
    pub n_contents: usize,
    pub n_mixers: usize,
}

impl StreamTensor {
    pub fn zeros(len: usize, n_bands: usize, n_contents: usize, n_mixers: usize) -> Self {
        Self {
            data: vec![0.0; len * n_bands * n_contents * n_mixers],
            len,
            n_bands,
            n_contents,
            n_mixers,
        }
    }

    pub fn n_lanes(&self) -> usize {
        self.n_bands * self.n_contents * self.n_mixers
    }

    pub fn lane_index(&self, band: usize, content: usize, mixer: usize) -> usize {
        band + self.n_bands * (content + self.n_contents * mixer)
    }

    /// Sample at time `t` (0-based), zero past the end.
    pub fn get(&self, t: usize, band: usize, content: usize, mixer: usize) -> f64 {
        if t >= self.len {
            return 0.0;
        }
        self.data[t * self.n_lanes() + self.lane_index(band, content, mixer)]
    }

    pub fn set(&mut self, t: usize, band: usize, content: usize, mixer: usize, v: f64) {
        let lanes = self.n_lanes();
        let lane = self.lane_index(band, content, mixer);
        self.data[t * lanes + lane] = v;
    }
}

/// One augmented frame: `fbar = F + L` samples per lane.
#[derive(Debug, Clone)]
pub struct FrameTensor {
    pub data: Vec<f64>,
    pub fbar: usize,
    pub n_bands: usize,
    pub n_contents: usize,
    pub n_mixers: usize,
    /// 1-based frame index.
    pub index: usize,
}

impl FrameTensor {
    /// Sample `i` (0-based within the frame).
    pub fn get(&self, i: usize, band: usize, content: usize, mixer: usize) -> f64 {
        let lanes = self.n_bands * self.n_contents * self.n_mixers;
        self.data[i * lanes + band + self.n_bands * (content + self.n_contents * mixer)]
    }
}

/// Split a stream into overlapping augmented frames; frame k starts at
/// offset `(k-1)F` and extends `F + L` samples with zero padding.
pub fn frame_stream<'a>(
    stream: &'a StreamTensor,
    frame_size: usize,
    lookahead: usize,
) -> impl Iterator<Item = FrameTensor> + 'a {
    assert!(frame_size >= 1);
    let n_frames = stream.len.div_ceil(frame_size);
    let fbar = frame_size + lookahead;
    let lanes = stream.n_lanes();
    (1..=n_frames).map(move |k| {
        let offset = (k - 1) * frame_size;
        let mut data = vec![0.0; fbar * lanes];
        let avail = stream.len.saturating_sub(offset).min(fbar);
        data[..avail * lanes]
            .copy_from_slice(&stream.data[offset * lanes..(offset + avail) * lanes]);
        FrameTensor {
            data,
            fbar,
            n_bands: stream.n_bands,
            n_contents: stream.n_contents,
            n_mixers: stream.n_mixers,
            index: k,
        }
    })
}

/// Engine configuration in engine units (linear thresholds, samples).
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub sample_rate: f64,
    pub frame_size: usize,
    pub lookahead: usize,
    pub n_bands: usize,
    pub n_contents: usize,
    pub n_mixers: usize,
    /// Per-mixer linear amplitude thresholds, all >= 0.
    pub thresholds: Vec<f64>,
    /// Per-variable upper gain bounds in [0, 1].
    pub upper_bounds: Vec<f64>,
    /// Per-variable attenuation rates; normalized downstream.
    pub rates: Vec<f64>,
    /// Shared window onsets (attack, release) for M = F + L.
    pub window_attack: usize,
    pub window_release: usize,
    pub premixer: PreMixerKind,
    pub culling: bool,
}

impl EngineConfig {
    pub fn n_vars(&self) -> usize {
        self.n_bands * self.n_contents
    }

    pub fn window_len(&self) -> usize {
        self.frame_size + self.lookahead
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: String| Err(EngineError::Config(msg));
        if self.frame_size == 0 {
            return bad("frame_size must be >= 1".into());
        }
        if self.n_bands == 0 || self.n_contents == 0 || self.n_mixers == 0 {
            return bad("bands, contents and mixers must all be >= 1".into());
        }
        if self.thresholds.len() != self.n_mixers {
            return bad(format!(
                "expected {} thresholds, got {}",
                self.n_mixers,
                self.thresholds.len()
            ));
        }
        if !self.thresholds.iter().all(|t| *t >= 0.0) {
            return bad("thresholds must be non-negative".into());
        }
        if self.upper_bounds.len() != self.n_vars() {
            return bad(format!(
                "expected {} upper bounds, got {}",
                self.n_vars(),
                self.upper_bounds.len()
            ));
        }
        if self.upper_bounds.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return bad("upper bounds must lie in [0, 1]".into());
        }
        if self.rates.len() != self.n_vars() {
            return bad(format!("expected {} rates, got {}", self.n_vars(), self.rates.len()));
        }
        WindowSpec::new(
            self.window_len(),
            self.frame_size,
            self.window_attack,
            self.window_release,
        )?;
        Ok(())
    }
}

/// Reduction counts for one frame, in pipeline order.
#[derive(Debug, Clone, Copy)]
pub struct ReductionCounts {
    pub n_original: usize,
    pub n_after_implied: usize,
    pub n_after_tighten: usize,
    pub n_nonoccluded: usize,
}

/// Per-frame record written to the stats CSV.
#[derive(Debug, Clone)]
pub struct FrameStats {
    pub frame: usize,
    pub counts: ReductionCounts,
    pub n_convex_support: Option<usize>,
    pub objective_f: f64,
    pub distortion_g: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub degraded: bool,
    pub wall_seconds: f64,
}

/// Assembled per-frame QP plus the bookkeeping needed for warm starts.
pub struct AssembledFrame {
    pub problem: QpProblem,
    /// Origin of each mixture row, in QP row order.
    pub mixture_origins: Vec<RowOrigin>,
    /// Coupling rows (coupled pre-mixers) sit after the mixture rows.
    pub n_coupling: usize,
    pub counts: ReductionCounts,
    pub tightened_upper: DVector<f64>,
}

/// Signed mixture-limit rows of one frame: `sgn * s_i' x <= tau_m` for
/// every sample and mixer.
pub fn frame_rows(ft: &FrameTensor, thresholds: &[f64]) -> ConstraintSet {
    let n = ft.n_bands * ft.n_contents;
    let mut rows = Vec::with_capacity(2 * ft.fbar * ft.n_mixers);
    for m in 0..ft.n_mixers {
        for i in 0..ft.fbar {
            let mut coeffs = DVector::zeros(n);
            for k in 0..ft.n_contents {
                for j in 0..ft.n_bands {
                    coeffs[k * ft.n_bands + j] = ft.get(i, j, k, m);
                }
            }
            let neg = -&coeffs;
            rows.push(ConstraintRow {
                coeffs,
                threshold: thresholds[m],
                origin: RowOrigin { sample: i + 1, mixer: m, negated: false },
                min_norm_key: None,
                status: RowStatus::Active,
            });
            rows.push(ConstraintRow {
                coeffs: neg,
                threshold: thresholds[m],
                origin: RowOrigin { sample: i + 1, mixer: m, negated: true },
                min_norm_key: None,
                status: RowStatus::Active,
            });
        }
    }
    ConstraintSet::new(rows)
}

/// Build the frame QP: signed mixture rows, presolve, pre-mix, cull, and
/// box the reduced gains. `x = 0` is always feasible.
pub fn assemble_frame_qp(
    ft: &FrameTensor,
    cfg: &EngineConfig,
    obj: &QuadraticObjective,
    premixer: &PreMixer,
) -> AssembledFrame {
    let q_r = premixer.matrix.tr_mul(&(&obj.q * &premixer.matrix));
    let c_r = premixer.matrix.tr_mul(&obj.c);
    assemble_frame_qp_cached(ft, cfg, &q_r, &c_r, obj.d, premixer)
}

fn assemble_frame_qp_cached(
    ft: &FrameTensor,
    cfg: &EngineConfig,
    q_r: &DMatrix<f64>,
    c_r: &DVector<f64>,
    d: f64,
    premixer: &PreMixer,
) -> AssembledFrame {
    let mut set = frame_rows(ft, &cfg.thresholds);
    let upper = DVector::from_vec(cfg.upper_bounds.clone());
    let (tightened, stats) = reduction::presolve(&mut set, &upper);

    let mut reduced = set.premixed(premixer);
    let y_upper = premixer.implied_y_upper(&tightened);
    if cfg.culling && premixer.n_reduced() <= CULL_MAX_VARS {
        reduction::cull_occluded(&mut reduced, &y_upper);
    }
    let n_nonoccluded = reduced.active_count();

    let np = premixer.n_reduced();
    let n_coupling = if premixer.coupled { premixer.n_full() } else { 0 };
    let n_rows = n_nonoccluded + n_coupling;
    let mut a = DMatrix::zeros(n_rows, np);
    let mut lo = DVector::from_element(n_rows, f64::NEG_INFINITY);
    let mut hi = DVector::zeros(n_rows);
    let mut mixture_origins = Vec::with_capacity(n_nonoccluded);
    for (r, idx) in reduced.active_indices().into_iter().enumerate() {
        let row = &reduced.rows[idx];
        a.row_mut(r).copy_from(&row.coeffs.transpose());
        hi[r] = row.threshold;
        mixture_origins.push(row.origin);
    }
    for r in 0..n_coupling {
        let qp_row = n_nonoccluded + r;
        a.row_mut(qp_row).copy_from(&premixer.matrix.row(r));
        lo[qp_row] = 0.0;
        hi[qp_row] = tightened[r];
    }

    let problem = QpProblem::new(q_r.clone(), c_r.clone(), d)
        .with_box(DVector::zeros(np), y_upper)
        .with_ineq_rows(a, lo, hi);

    AssembledFrame {
        problem,
        mixture_origins,
        n_coupling,
        counts: ReductionCounts {
            n_original: stats.n_original,
            n_after_implied: stats.n_after_implied,
            n_after_tighten: stats.n_after_tighten,
            n_nonoccluded,
        },
        tightened_upper: tightened,
    }
}

/// Active-set element carried between frames, keyed by row origin so it
/// survives reindexing after presolve and culling.
#[derive(Debug, Clone, Copy)]
enum WarmAtom {
    Mixture(RowOrigin),
    Coupling(usize),
    BoxLower(usize),
    BoxUpper(usize),
}

#[derive(Debug, Clone)]
pub struct FrameWarning {
    pub frame: usize,
    pub status: SolveStatus,
    pub detail: String,
}

/// Output of a full stream pass.
pub struct ProcessOutput {
    /// Limited mixtures, one channel per mixer, stream length.
    pub mixtures: Vec<Vec<f64>>,
    /// Per-channel gain envelopes over the padded span
    /// `(K-1)F + M` (flushed tail included).
    pub envelopes: Vec<Vec<f64>>,
    pub stats: Vec<FrameStats>,
    pub warnings: Vec<FrameWarning>,
    /// Samples clipped by the degraded-solve guard; zero when every
    /// frame solved to optimality.
    pub guard_clips: usize,
}

/// Streaming mixer-limiter over a fixed configuration.
pub struct MixerLimiter {
    cfg: EngineConfig,
    objective: QuadraticObjective,
    premixer: PreMixer,
    reduced_q: DMatrix<f64>,
    reduced_c: DVector<f64>,
    window: ColaWindow,
    /// Optional exact convex-support counting per frame (slow; used by
    /// the reduction experiment).
    pub count_convex_support: bool,
}

impl MixerLimiter {
    pub fn new(cfg: EngineConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let rates = AttenuationRates::new(cfg.rates.clone())?;
        let objective = objective::build_objective(&rates);
        let premixer = reduction::build_premixer(cfg.premixer, cfg.n_bands, cfg.n_contents)?;
        let spec = WindowSpec::new(
            cfg.window_len(),
            cfg.frame_size,
            cfg.window_attack,
            cfg.window_release,
        )?;
        let window = design_window(&spec)?;
        let reduced_q = premixer.matrix.tr_mul(&(&objective.q * &premixer.matrix));
        let reduced_c = premixer.matrix.tr_mul(&objective.c);
        Ok(Self {
            cfg,
            objective,
            premixer,
            reduced_q,
            reduced_c,
            window,
            count_convex_support: false,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn window(&self) -> &ColaWindow {
        &self.window
    }

    pub fn objective(&self) -> &QuadraticObjective {
        &self.objective
    }

    /// Process a finite stream: solve every frame, overlap-add envelopes,
    /// and mix the limited outputs.
    pub fn process(&mut self, stream: &StreamTensor) -> Result<ProcessOutput, EngineError> {
        if stream.n_bands != self.cfg.n_bands
            || stream.n_contents != self.cfg.n_contents
            || stream.n_mixers != self.cfg.n_mixers
        {
            return Err(EngineError::Config(format!(
                "stream layout {}x{}x{} does not match config {}x{}x{}",
                stream.n_bands,
                stream.n_contents,
                stream.n_mixers,
                self.cfg.n_bands,
                self.cfg.n_contents,
                self.cfg.n_mixers
            )));
        }
        let n = self.cfg.n_vars();
        let f = self.cfg.frame_size;
        let m_len = self.cfg.window_len();
        let overlap_frames = m_len.div_ceil(f);

        let mut bank = EnvelopeBank::new(vec![self.window.clone(); n]);
        let mut stats = Vec::new();
        let mut warnings = Vec::new();
        let mut envelopes: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut mixtures: Vec<Vec<f64>> = vec![Vec::new(); self.cfg.n_mixers];
        let mut guard_clips = 0usize;

        let mut prev_x = DVector::zeros(n);
        let mut warm: Vec<WarmAtom> = Vec::new();
        let mut recent_degraded: VecDeque<bool> = VecDeque::with_capacity(overlap_frames);

        for ft in frame_stream(stream, f, self.cfg.lookahead) {
            let t0 = Instant::now();
            let assembled = assemble_frame_qp_cached(
                &ft,
                &self.cfg,
                &self.reduced_q,
                &self.reduced_c,
                self.objective.d,
                &self.premixer,
            );

            // Map the previous frame's active set onto this frame's rows.
            let mut origin_to_row: HashMap<RowOrigin, usize> = HashMap::new();
            for (r, origin) in assembled.mixture_origins.iter().enumerate() {
                origin_to_row.insert(*origin, r);
            }
            let warm_ids: Vec<ConstraintId> = warm
                .iter()
                .filter_map(|atom| match *atom {
                    WarmAtom::Mixture(origin) => {
                        if origin.sample <= f {
                            return None;
                        }
                        let shifted = RowOrigin { sample: origin.sample - f, ..origin };
                        origin_to_row.get(&shifted).map(|&r| ConstraintId::IneqUpper(r))
                    }
                    WarmAtom::Coupling(r) => Some(ConstraintId::IneqUpper(
                        assembled.mixture_origins.len() + r,
                    )),
                    WarmAtom::BoxLower(v) => Some(ConstraintId::BoxLower(v)),
                    WarmAtom::BoxUpper(v) => Some(ConstraintId::BoxUpper(v)),
                })
                .collect();

            let solver_cfg = SolverConfig {
                warm_start: if warm_ids.is_empty() { None } else { Some(warm_ids) },
                ..SolverConfig::default()
            };
            let sol = qp::solve(&assembled.problem, &solver_cfg)?;

            let degraded = sol.status != SolveStatus::Optimal;
            let x = if degraded {
                warnings.push(FrameWarning {
                    frame: ft.index,
                    status: sol.status,
                    detail: format!(
                        "frame solve ended {} (primal {:.2e}, kkt {:.2e}); reusing scaled previous gains",
                        sol.status, sol.primal_residual, sol.kkt_residual
                    ),
                });
                warm.clear();
                scale_to_feasible(&ft, &self.cfg.thresholds, &prev_x)
            } else {
                let n_mix = assembled.mixture_origins.len();
                warm = sol
                    .active_set
                    .iter()
                    .filter_map(|id| match *id {
                        ConstraintId::IneqUpper(r) if r < n_mix => {
                            Some(WarmAtom::Mixture(assembled.mixture_origins[r]))
                        }
                        ConstraintId::IneqUpper(r) => Some(WarmAtom::Coupling(r - n_mix)),
                        // Mixture rows carry no finite lower bound, so a
                        // lower-side active can only be a coupling row.
                        ConstraintId::IneqLower(r) if r >= n_mix => {
                            Some(WarmAtom::Coupling(r - n_mix))
                        }
                        ConstraintId::IneqLower(_) => None,
                        ConstraintId::BoxLower(v) => Some(WarmAtom::BoxLower(v)),
                        ConstraintId::BoxUpper(v) => Some(WarmAtom::BoxUpper(v)),
                        ConstraintId::Eq(_) => None,
                    })
                    .collect();
                let mut x = self.premixer.expand(&sol.x);
                // Project solver roundoff back into the gain box so the
                // envelopes are exact gain reductions.
                for (v, ub) in x.iter_mut().zip(self.cfg.upper_bounds.iter()) {
                    *v = v.clamp(0.0, *ub);
                }
                x
            };

            let n_convex_support = if self.count_convex_support {
                let mut probe = frame_rows(&ft, &self.cfg.thresholds);
                let upper = DVector::from_vec(self.cfg.upper_bounds.clone());
                let (tight, _) = reduction::presolve(&mut probe, &upper);
                let mut probe = probe.premixed(&self.premixer);
                reduction::cull_occluded(&mut probe, &self.premixer.implied_y_upper(&tight));
                let flags = reduction::convex_support_flags(
                    &probe,
                    &self.premixer.implied_y_upper(&tight),
                );
                Some(flags.iter().filter(|f| **f).count())
            } else {
                None
            };

            stats.push(FrameStats {
                frame: ft.index,
                counts: assembled.counts,
                n_convex_support,
                objective_f: self.objective.value_at(&x),
                distortion_g: objective::distortion_g(&x, &self.objective.rates),
                iterations: sol.iterations,
                status: sol.status,
                degraded,
                wall_seconds: t0.elapsed().as_secs_f64(),
            });

            if recent_degraded.len() == overlap_frames {
                recent_degraded.pop_front();
            }
            recent_degraded.push_back(degraded);

            let block = bank.push(&x);
            let offset = (ft.index - 1) * f;
            emit_block(
                stream,
                &block,
                offset,
                &self.cfg.thresholds,
                recent_degraded.iter().any(|d| *d),
                &mut envelopes,
                &mut mixtures,
                &mut guard_clips,
            );
            prev_x = x;
        }

        // Flush the envelope tail; the stream is silent there, so the
        // mixtures stay zero, but tests read the envelopes.
        let tail = bank.flush();
        for ch in 0..n {
            envelopes[ch].extend_from_slice(&tail[ch]);
        }
        for mix in mixtures.iter_mut() {
            mix.truncate(stream.len);
        }

        Ok(ProcessOutput { mixtures, envelopes, stats, warnings, guard_clips })
    }
}

/// Largest scaling of the previous gains that satisfies the current
/// frame's rows; exists because zero gains are always feasible.
fn scale_to_feasible(ft: &FrameTensor, thresholds: &[f64], prev_x: &DVector<f64>) -> DVector<f64> {
    let mut beta = 1.0f64;
    for m in 0..ft.n_mixers {
        let tau = thresholds[m];
        for i in 0..ft.fbar {
            let mut mix = 0.0;
            for k in 0..ft.n_contents {
                for j in 0..ft.n_bands {
                    mix += ft.get(i, j, k, m) * prev_x[k * ft.n_bands + j];
                }
            }
            let mag = mix.abs();
            if mag > tau {
                beta = if tau == 0.0 { 0.0 } else { beta.min(tau / mag) };
            }
        }
    }
    prev_x * beta
}

#[allow(clippy::too_many_arguments)]
fn emit_block(
    stream: &StreamTensor,
    block: &[Vec<f64>],
    offset: usize,
    thresholds: &[f64],
    guard: bool,
    envelopes: &mut [Vec<f64>],
    mixtures: &mut [Vec<f64>],
    guard_clips: &mut usize,
) {
    let count = block[0].len();
    for (ch, env) in envelopes.iter_mut().enumerate() {
        env.extend_from_slice(&block[ch]);
    }
    for (m, mix) in mixtures.iter_mut().enumerate() {
        let tau = thresholds[m];
        for t in 0..count {
            let global = offset + t;
            if global >= stream.len {
                break;
            }
            let mut y = 0.0;
            for k in 0..stream.n_contents {
                for j in 0..stream.n_bands {
                    y += stream.get(global, j, k, m) * block[k * stream.n_bands + j][t];
                }
            }
            if guard && y.abs() > tau {
                y = y.clamp(-tau, tau);
                *guard_clips += 1;
            }
            mix.push(y);
        }
    }
}

/// Write per-frame stats as CSV, matching the documented schema.
pub fn write_stats_csv<W: std::io::Write>(
    out: &mut W,
    stats: &[FrameStats],
) -> std::io::Result<()> {
    writeln!(
        out,
        "frame_index,n_original,n_after_implied,n_after_tighten,n_nonoccluded,n_convex_support,objective_f,distortion_g,solver_iterations,status,degraded,wall_seconds"
    )?;
    for s in stats {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.9},{:.9},{},{},{},{:.6}",
            s.frame,
            s.counts.n_original,
            s.counts.n_after_implied,
            s.counts.n_after_tighten,
            s.counts.n_nonoccluded,
            s.n_convex_support.map_or(String::new(), |v| v.to_string()),
            s.objective_f,
            s.distortion_g,
            s.iterations,
            s.status,
            s.degraded,
            s.wall_seconds
        )?;
    }
    Ok(())
}

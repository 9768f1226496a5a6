//! Benchmark signal generators and the two reference studies: pre-mixer
//! distortion comparison on an AM lane tensor, and constraint-reduction
//! statistics on full-scale tone banks. Both emit CSV for plotting and
//! are fully deterministic given their configuration.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::engine::{
    frame_stream, frame_rows, EngineConfig, EngineError, MixerLimiter, ReductionCounts,
    StreamTensor,
};
use crate::reduction::{self, PreMixerKind};

/// Stock tone frequencies (Hz) for the reduction study.
pub const TONE_BANK_HZ: [f64; 6] = [101.0, 443.0, 1627.0, 4153.0, 8747.0, 15733.0];

/// Stock AM carrier (band) and message (content) frequencies (Hz).
pub const AM_CARRIERS_HZ: [f64; 3] = [101.0, 443.0, 1627.0];
pub const AM_MESSAGES_HZ: [f64; 3] = [2.0, 5.0, 11.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    AmTensor,
    SineBank,
}

/// Synthesized test-signal description.
#[derive(Debug, Clone)]
pub struct SignalSpec {
    pub kind: SignalKind,
    /// Carrier (band) frequencies for the AM tensor.
    pub carrier_freqs: Vec<f64>,
    /// Message (content) frequencies for the AM tensor.
    pub message_freqs: Vec<f64>,
    /// Message phase offsets, flattened band-fastest; defaults to
    /// ((k-1) N_B + j) / (N_B N_C) when empty.
    pub phases: Vec<f64>,
    /// Tone frequencies for the sine bank.
    pub tone_freqs: Vec<f64>,
    pub duration: f64,
    pub sample_rate: f64,
    pub amplitude: f64,
}

impl SignalSpec {
    pub fn am_default() -> Self {
        Self {
            kind: SignalKind::AmTensor,
            carrier_freqs: AM_CARRIERS_HZ.to_vec(),
            message_freqs: AM_MESSAGES_HZ.to_vec(),
            phases: Vec::new(),
            tone_freqs: Vec::new(),
            duration: 1.0,
            sample_rate: 48_000.0,
            amplitude: 1.0,
        }
    }

    /// First `n` stock tones, full scale, one second at 48 kHz.
    pub fn tone_bank(n: usize) -> Self {
        assert!((2..=TONE_BANK_HZ.len()).contains(&n), "tone bank supports 2..=6 tones");
        Self {
            kind: SignalKind::SineBank,
            carrier_freqs: Vec::new(),
            message_freqs: Vec::new(),
            phases: Vec::new(),
            tone_freqs: TONE_BANK_HZ[..n].to_vec(),
            duration: 1.0,
            sample_rate: 48_000.0,
            amplitude: 1.0,
        }
    }

    fn assert_below_nyquist(freqs: &[f64], rate: f64) {
        for &f in freqs {
            assert!(f > 0.0 && f < rate / 2.0, "frequency {f} Hz out of range");
        }
    }
}

/// AM lane tensor `S(t, j, k) = sin(2 pi a_j t) sin(2 pi (b_k t + phi))`
/// over one mixer.
pub fn gen_am_tensor(spec: &SignalSpec) -> StreamTensor {
    assert_eq!(spec.kind, SignalKind::AmTensor);
    SignalSpec::assert_below_nyquist(&spec.carrier_freqs, spec.sample_rate);
    SignalSpec::assert_below_nyquist(&spec.message_freqs, spec.sample_rate);
    let nb = spec.carrier_freqs.len();
    let nc = spec.message_freqs.len();
    assert!(
        spec.phases.is_empty() || spec.phases.len() == nb * nc,
        "need one phase per (band, content) pair"
    );
    let len = (spec.duration * spec.sample_rate).round() as usize;
    let phase = |j: usize, k: usize| -> f64 {
        if spec.phases.is_empty() {
            (k * nb + j + 1) as f64 / (nb * nc) as f64
        } else {
            spec.phases[k * nb + j]
        }
    };
    let mut s = StreamTensor::zeros(len, nb, nc, 1);
    let tau = 2.0 * std::f64::consts::PI;
    for t in 0..len {
        let secs = t as f64 / spec.sample_rate;
        for k in 0..nc {
            for j in 0..nb {
                let v = spec.amplitude
                    * (tau * spec.carrier_freqs[j] * secs).sin()
                    * (tau * (spec.message_freqs[k] * secs + phase(j, k))).sin();
                s.set(t, j, k, 0, v);
            }
        }
    }
    s
}

/// Full-scale sine lanes, one band per tone.
pub fn gen_tone_bank(spec: &SignalSpec) -> StreamTensor {
    assert_eq!(spec.kind, SignalKind::SineBank);
    SignalSpec::assert_below_nyquist(&spec.tone_freqs, spec.sample_rate);
    let n = spec.tone_freqs.len();
    let len = (spec.duration * spec.sample_rate).round() as usize;
    let mut s = StreamTensor::zeros(len, n, 1, 1);
    let tau = 2.0 * std::f64::consts::PI;
    for t in 0..len {
        let secs = t as f64 / spec.sample_rate;
        for (j, &f) in spec.tone_freqs.iter().enumerate() {
            s.set(t, j, 0, 0, spec.amplitude * (tau * f * secs).sin());
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct PremixExperimentConfig {
    pub signal: SignalSpec,
    pub frame_size: usize,
    pub lookahead: usize,
    pub threshold: f64,
    pub culling: bool,
}

impl Default for PremixExperimentConfig {
    fn default() -> Self {
        Self {
            signal: SignalSpec::am_default(),
            frame_size: 256,
            lookahead: 768,
            // Threshold-to-lane-amplitude ratio of the reference study;
            // mixture rows scale linearly, so 2.5 here is the same
            // operating point as unit threshold with lanes at 0.4.
            threshold: 2.5,
            culling: false,
        }
    }
}

/// Per-premixer distortion series: the full-space objective f and the
/// distortion product g, evaluated at the reconstructed gains x = P y.
#[derive(Debug, Clone)]
pub struct PremixSeries {
    pub premixer: &'static str,
    pub objective_f: Vec<f64>,
    pub distortion_g: Vec<f64>,
    pub mean_f: f64,
    pub std_f: f64,
}

#[derive(Debug, Clone)]
pub struct PremixReport {
    pub series: Vec<PremixSeries>,
}

impl PremixReport {
    pub fn get(&self, name: &str) -> &PremixSeries {
        self.series.iter().find(|s| s.premixer == name).expect("unknown premixer series")
    }

    pub fn write_frames_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "premixer,frame_index,objective_f,distortion_g")?;
        for s in &self.series {
            for (i, (f, g)) in s.objective_f.iter().zip(&s.distortion_g).enumerate() {
                writeln!(out, "{},{},{:.9},{:.9}", s.premixer, i + 1, f, g)?;
            }
        }
        Ok(())
    }

    pub fn write_summary_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "premixer,mean_f,std_f")?;
        for s in &self.series {
            writeln!(out, "{},{:.6},{:.6}", s.premixer, s.mean_f, s.std_f)?;
        }
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run the AM-tensor distortion study for every pre-mixer family plus the
/// full mixer-limiter.
pub fn run_premixer_experiment(cfg: &PremixExperimentConfig) -> Result<PremixReport, EngineError> {
    let stream = gen_am_tensor(&cfg.signal);
    let kinds: [(PreMixerKind, &'static str); 5] = [
        (PreMixerKind::SingleChannel, "single_channel"),
        (PreMixerKind::MultiBand, "multi_band"),
        (PreMixerKind::MultiContent, "multi_content"),
        (PreMixerKind::Concatenation { alpha: 0.5 }, "concatenation"),
        (PreMixerKind::Full, "full"),
    ];
    let m = cfg.frame_size + cfg.lookahead;
    let n_vars = stream.n_bands * stream.n_contents;
    let mut series = Vec::new();
    for (kind, name) in kinds {
        let engine_cfg = EngineConfig {
            sample_rate: cfg.signal.sample_rate,
            frame_size: cfg.frame_size,
            lookahead: cfg.lookahead,
            n_bands: stream.n_bands,
            n_contents: stream.n_contents,
            n_mixers: 1,
            thresholds: vec![cfg.threshold],
            upper_bounds: vec![1.0; n_vars],
            rates: vec![1.0 / n_vars as f64; n_vars],
            window_attack: 3 * m / 8,
            window_release: 5 * m / 8,
            premixer: kind,
            culling: cfg.culling,
        };
        let mut limiter = MixerLimiter::new(engine_cfg)?;
        let out = limiter.process(&stream)?;
        let f: Vec<f64> = out.stats.iter().map(|s| s.objective_f).collect();
        let g: Vec<f64> = out.stats.iter().map(|s| s.distortion_g).collect();
        let (mean_f, std_f) = mean_std(&f);
        series.push(PremixSeries {
            premixer: name,
            objective_f: f,
            distortion_g: g,
            mean_f,
            std_f,
        });
    }
    Ok(PremixReport { series })
}

#[derive(Debug, Clone)]
pub struct ReductionExperimentConfig {
    pub channels: Vec<usize>,
    pub frame_size: usize,
    pub lookahead: usize,
    pub threshold: f64,
    pub duration: f64,
    pub sample_rate: f64,
}

impl Default for ReductionExperimentConfig {
    fn default() -> Self {
        Self {
            channels: (2..=6).collect(),
            frame_size: 256,
            lookahead: 768,
            threshold: 1.0,
            duration: 1.0,
            sample_rate: 48_000.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReductionFrameRow {
    pub n_channels: usize,
    pub frame: usize,
    pub counts: ReductionCounts,
    pub n_convex: usize,
}

#[derive(Debug, Clone)]
pub struct ReductionSummary {
    pub n_channels: usize,
    pub mean_implied: f64,
    pub std_implied: f64,
    pub mean_tightened: f64,
    pub std_tightened: f64,
    pub mean_nonoccluded: f64,
    pub std_nonoccluded: f64,
    pub mean_convex: f64,
    pub std_convex: f64,
    /// Mean tightened count over mean convex-support count.
    pub ratio_presolve: f64,
    /// Mean non-occluded count over mean convex-support count.
    pub ratio_nonoccluded: f64,
}

#[derive(Debug, Clone)]
pub struct ReductionReport {
    pub rows: Vec<ReductionFrameRow>,
    pub summaries: Vec<ReductionSummary>,
}

impl ReductionReport {
    pub fn summary(&self, n: usize) -> &ReductionSummary {
        self.summaries.iter().find(|s| s.n_channels == n).expect("missing channel count")
    }

    /// (min, max) across channel counts of the presolve and non-occluded
    /// reduction ratios.
    pub fn ratio_bands(&self) -> ((f64, f64), (f64, f64)) {
        let fold = |get: &dyn Fn(&ReductionSummary) -> f64| {
            let mut lo = f64::INFINITY;
            let mut hi = 0.0f64;
            for s in &self.summaries {
                lo = lo.min(get(s));
                hi = hi.max(get(s));
            }
            (lo, hi)
        };
        (
            fold(&|s| s.ratio_presolve),
            fold(&|s| s.ratio_nonoccluded),
        )
    }

    pub fn write_frames_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(
            out,
            "n_channels,frame_index,n_original,n_after_implied,n_after_tighten,n_nonoccluded,n_convex_support"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.n_channels,
                r.frame,
                r.counts.n_original,
                r.counts.n_after_implied,
                r.counts.n_after_tighten,
                r.counts.n_nonoccluded,
                r.n_convex
            )?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(
            out,
            "n_channels,mean_implied,std_implied,mean_tightened,std_tightened,mean_nonoccluded,std_nonoccluded,mean_convex,std_convex,ratio_presolve,ratio_nonoccluded"
        )?;
        for s in &self.summaries {
            writeln!(
                out,
                "{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.3},{:.3}",
                s.n_channels,
                s.mean_implied,
                s.std_implied,
                s.mean_tightened,
                s.std_tightened,
                s.mean_nonoccluded,
                s.std_nonoccluded,
                s.mean_convex,
                s.std_convex,
                s.ratio_presolve,
                s.ratio_nonoccluded,
            )?;
        }
        Ok(())
    }
}

/// Constraint-reduction statistics on tone banks of increasing width.
/// Frames are independent here (no envelope state), so they run in
/// parallel; the per-frame computation is unchanged, keeping the output
/// deterministic.
pub fn run_reduction_experiment(cfg: &ReductionExperimentConfig) -> ReductionReport {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &n in &cfg.channels {
        let mut spec = SignalSpec::tone_bank(n);
        spec.duration = cfg.duration;
        spec.sample_rate = cfg.sample_rate;
        let stream = gen_tone_bank(&spec);
        let upper = DVector::from_element(n, 1.0);
        let frames: Vec<_> = frame_stream(&stream, cfg.frame_size, cfg.lookahead).collect();
        let mut batch: Vec<ReductionFrameRow> = frames
            .par_iter()
            .map(|ft| {
                let mut set = frame_rows(ft, &[cfg.threshold]);
                let (tightened, stats) = reduction::presolve(&mut set, &upper);
                reduction::cull_occluded(&mut set, &tightened);
                let n_nonoccluded = set.active_count();
                let flags = reduction::convex_support_flags(&set, &tightened);
                let n_convex = flags.iter().filter(|f| **f).count();
                ReductionFrameRow {
                    n_channels: n,
                    frame: ft.index,
                    counts: ReductionCounts {
                        n_original: stats.n_original,
                        n_after_implied: stats.n_after_implied,
                        n_after_tighten: stats.n_after_tighten,
                        n_nonoccluded,
                    },
                    n_convex,
                }
            })
            .collect();

        let implied: Vec<f64> = batch.iter().map(|r| r.counts.n_after_implied as f64).collect();
        let tightened: Vec<f64> = batch.iter().map(|r| r.counts.n_after_tighten as f64).collect();
        let nonocc: Vec<f64> = batch.iter().map(|r| r.counts.n_nonoccluded as f64).collect();
        let convex: Vec<f64> = batch.iter().map(|r| r.n_convex as f64).collect();
        let (mean_implied, std_implied) = mean_std(&implied);
        let (mean_tightened, std_tightened) = mean_std(&tightened);
        let (mean_nonoccluded, std_nonoccluded) = mean_std(&nonocc);
        let (mean_convex, std_convex) = mean_std(&convex);
        summaries.push(ReductionSummary {
            n_channels: n,
            mean_implied,
            std_implied,
            mean_tightened,
            std_tightened,
            mean_nonoccluded,
            std_nonoccluded,
            mean_convex,
            std_convex,
            ratio_presolve: mean_tightened / mean_convex.max(1.0),
            ratio_nonoccluded: mean_nonoccluded / mean_convex.max(1.0),
        });
        rows.append(&mut batch);
    }
    ReductionReport { rows, summaries }
}

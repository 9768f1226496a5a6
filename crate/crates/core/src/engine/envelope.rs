//! Gain envelope synthesis: overlap-add of windowed frame solutions.
//!
//! Each frame's gain solution is weighted by the per-channel window and
//! added at the frame's offset; the COLA property makes the weights a
//! partition of unity wherever every overlapping frame exists, so the
//! envelope is a Barycentric mixture of frame solutions there. At the
//! stream head and tail some overlapping frames do not exist and the
//! realized weight falls short of one; the bank renormalizes by the
//! realized weight sum, which keeps the envelope a convex combination of
//! the frames that do cover the sample (the mixture-limit argument is
//! unaffected: every contributing solution satisfies the rows covering
//! that sample).

use nalgebra::DVector;

use crate::window::ColaWindow;

/// Weight sums below this are treated as "no contributor" and left
/// unnormalized (the envelope is then zero at those samples).
const WEIGHT_FLOOR: f64 = 1e-6;

/// Streaming overlap-add accumulator for one window length/hop pair.
#[derive(Debug, Clone)]
pub struct EnvelopeBank {
    windows: Vec<ColaWindow>,
    /// Per-channel pending accumulators, `window_len` samples each.
    acc: Vec<Vec<f64>>,
    /// Per-channel pending window-weight sums.
    weight: Vec<Vec<f64>>,
    window_len: usize,
    hop: usize,
    frames_pushed: usize,
}

impl EnvelopeBank {
    /// All windows must share the same length and hop.
    pub fn new(windows: Vec<ColaWindow>) -> Self {
        assert!(!windows.is_empty(), "need at least one channel window");
        let window_len = windows[0].spec.length;
        let hop = windows[0].spec.hop;
        for w in &windows {
            assert_eq!(w.spec.length, window_len, "mismatched window lengths");
            assert_eq!(w.spec.hop, hop, "mismatched hops");
        }
        let n = windows.len();
        Self {
            windows,
            acc: vec![vec![0.0; window_len]; n],
            weight: vec![vec![0.0; window_len]; n],
            window_len,
            hop,
            frames_pushed: 0,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.windows.len()
    }

    pub fn frames_pushed(&self) -> usize {
        self.frames_pushed
    }

    /// Overlap-add one frame's solution and emit the `hop` samples that
    /// no later frame can touch.
    pub fn push(&mut self, solution: &DVector<f64>) -> Vec<Vec<f64>> {
        assert_eq!(solution.len(), self.n_channels());
        for (ch, win) in self.windows.iter().enumerate() {
            let gain = solution[ch];
            let acc = &mut self.acc[ch];
            let weight = &mut self.weight[ch];
            for (t, &w) in win.samples.iter().enumerate() {
                acc[t] += w * gain;
                weight[t] += w;
            }
        }
        self.frames_pushed += 1;
        self.emit(self.hop)
    }

    /// Emit the trailing `window_len - hop` samples after the last frame.
    pub fn flush(&mut self) -> Vec<Vec<f64>> {
        let tail = self.window_len - self.hop;
        self.emit(tail)
    }

    fn emit(&mut self, count: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; count]; self.n_channels()];
        for ch in 0..self.n_channels() {
            let acc = &mut self.acc[ch];
            let weight = &mut self.weight[ch];
            for t in 0..count {
                let w = weight[t];
                out[ch][t] = if w >= WEIGHT_FLOOR { acc[t] / w } else { acc[t] };
            }
            acc.drain(..count);
            acc.extend(std::iter::repeat_n(0.0, count));
            weight.drain(..count);
            weight.extend(std::iter::repeat_n(0.0, count));
        }
        out
    }
}

/// Overlap-add a whole sequence of frame solutions into per-channel
/// envelopes of length `(K-1)*hop + window_len`.
pub fn synthesize_envelopes(
    solutions: &[DVector<f64>],
    windows: &[ColaWindow],
    hop: usize,
) -> Vec<Vec<f64>> {
    assert!(!windows.is_empty());
    assert_eq!(hop, windows[0].spec.hop, "hop must match the window design");
    let mut bank = EnvelopeBank::new(windows.to_vec());
    let n = bank.n_channels();
    let mut env: Vec<Vec<f64>> = vec![Vec::new(); n];
    for sol in solutions {
        let block = bank.push(sol);
        for ch in 0..n {
            env[ch].extend_from_slice(&block[ch]);
        }
    }
    let tail = bank.flush();
    for ch in 0..n {
        env[ch].extend_from_slice(&tail[ch]);
    }
    env
}

/// Apply envelopes to a lane stream and sum each mixer's lanes:
/// `y_m(t) = sum_{j,k} S(t, j, k, m) v_{jk}(t)`.
pub fn mix_output(stream: &super::StreamTensor, envelopes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n_vars = stream.n_bands * stream.n_contents;
    assert_eq!(envelopes.len(), n_vars, "one envelope per (band, content)");
    let mut out = vec![vec![0.0; stream.len]; stream.n_mixers];
    for t in 0..stream.len {
        for m in 0..stream.n_mixers {
            let mut y = 0.0;
            for k in 0..stream.n_contents {
                for j in 0..stream.n_bands {
                    let v = envelopes[k * stream.n_bands + j]
                        .get(t)
                        .copied()
                        .unwrap_or(0.0);
                    y += stream.get(t, j, k, m) * v;
                }
            }
            out[m][t] = y;
        }
    }
    out
}

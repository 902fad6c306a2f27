//! Spectral estimation helpers shared by the simulator tests and the
//! evaluation module: Welch power spectral density and a Goertzel
//! single-frequency amplitude probe.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// One-sided Welch PSD estimate.
#[derive(Debug, Clone)]
pub struct Psd {
    /// Frequency axis in Hz, length `nfft/2 + 1`.
    pub freqs: Vec<f64>,
    /// Power density per frequency bin (unit²/Hz).
    pub power: Vec<f64>,
}

impl Psd {
    /// Frequency of the largest power bin.
    pub fn peak_freq(&self) -> f64 {
        let (i, _) = self
            .power
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        self.freqs[i]
    }

    /// Frequency of the largest power bin within `[lo, hi]` Hz.
    pub fn peak_freq_in(&self, lo: f64, hi: f64) -> f64 {
        let mut best = (self.freqs[0], f64::MIN);
        for (f, p) in self.freqs.iter().zip(&self.power) {
            if *f >= lo && *f <= hi && *p > best.1 {
                best = (*f, *p);
            }
        }
        best.0
    }

    /// Total power in `[lo, hi]` Hz (trapezoid-free bin sum × bin width).
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        let df = if self.freqs.len() > 1 { self.freqs[1] - self.freqs[0] } else { 1.0 };
        self.freqs
            .iter()
            .zip(&self.power)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(_, p)| p * df)
            .sum()
    }
}

fn hann(n: usize) -> Vec<f64> {
    // Periodic Hann window, the usual choice for Welch averaging.
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Welch PSD with Hann segments of `seg_len` samples and 50% overlap.
///
/// Segments shorter than `seg_len` are dropped; if the signal is shorter
/// than one segment the whole signal is used as a single segment.
pub fn welch_psd(x: &[f64], fs: f64, seg_len: usize) -> Psd {
    let seg_len = seg_len.min(x.len()).max(2);
    let hop = (seg_len / 2).max(1);
    let win = hann(seg_len);
    let win_power: f64 = win.iter().map(|w| w * w).sum();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(seg_len);

    let n_bins = seg_len / 2 + 1;
    let mut acc = vec![0.0f64; n_bins];
    let mut n_segs = 0usize;
    let mut start = 0usize;
    while start + seg_len <= x.len() {
        let mut buf: Vec<Complex64> = x[start..start + seg_len]
            .iter()
            .zip(&win)
            .map(|(v, w)| Complex64::new(v * w, 0.0))
            .collect();
        fft.process(&mut buf);
        for (k, slot) in acc.iter_mut().enumerate() {
            let mag2 = buf[k].norm_sqr();
            // One-sided density: double everything except DC and Nyquist.
            let scale = if k == 0 || (seg_len % 2 == 0 && k == n_bins - 1) { 1.0 } else { 2.0 };
            *slot += scale * mag2 / (fs * win_power);
        }
        n_segs += 1;
        start += hop;
    }
    if n_segs == 0 {
        n_segs = 1; // signal shorter than one segment: leave zeros
    }
    for v in acc.iter_mut() {
        *v /= n_segs as f64;
    }
    let freqs = (0..n_bins).map(|k| k as f64 * fs / seg_len as f64).collect();
    Psd { freqs, power: acc }
}

/// Amplitude of the sinusoidal component at frequency `f` via the Goertzel
/// recurrence. Returns the peak amplitude a signal `a·sin(2πft)` would show.
pub fn tone_amplitude(x: &[f64], fs: f64, f: f64) -> f64 {
    let n = x.len();
    let w = 2.0 * std::f64::consts::PI * f / fs;
    let coeff = 2.0 * w.cos();
    let (mut s_prev, mut s_prev2) = (0.0f64, 0.0f64);
    for &v in x {
        let s = v + coeff * s_prev - s_prev2;
        s_prev2 = s_prev;
        s_prev = s;
    }
    let real = s_prev - s_prev2 * w.cos();
    let imag = s_prev2 * w.sin();
    2.0 * (real * real + imag * imag).sqrt() / n as f64
}

/// Average of several Welch PSDs (equal lengths assumed).
pub fn mean_psd(psds: &[Psd]) -> Psd {
    assert!(!psds.is_empty(), "mean_psd of empty list");
    let n_bins = psds[0].power.len();
    let mut power = vec![0.0; n_bins];
    for p in psds {
        assert_eq!(p.power.len(), n_bins, "PSD length mismatch");
        for (a, b) in power.iter_mut().zip(&p.power) {
            *a += b;
        }
    }
    for v in power.iter_mut() {
        *v /= psds.len() as f64;
    }
    Psd { freqs: psds[0].freqs.clone(), power }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(f: f64, fs: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin())
            .collect()
    }

    #[test]
    fn welch_locates_tone() {
        let x = sine(40.0, 1000.0, 10_000, 1.0);
        let psd = welch_psd(&x, 1000.0, 1000);
        assert!((psd.peak_freq() - 40.0).abs() < 1.1, "peak at {}", psd.peak_freq());
    }

    #[test]
    fn welch_power_matches_variance() {
        // Parseval check: total PSD integral ≈ signal variance (a²/2).
        let x = sine(25.0, 1000.0, 20_000, 2.0);
        let psd = welch_psd(&x, 1000.0, 1000);
        let total = psd.band_power(0.0, 500.0);
        assert!((total - 2.0).abs() < 0.05, "total {total}");
    }

    #[test]
    fn goertzel_amplitude() {
        let x = sine(60.0, 1000.0, 10_000, 0.7);
        let a = tone_amplitude(&x, 1000.0, 60.0);
        assert!((a - 0.7).abs() < 1e-3, "amp {a}");
        let off = tone_amplitude(&x, 1000.0, 123.0);
        assert!(off < 1e-3, "off-tone {off}");
    }
}

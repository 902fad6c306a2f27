//! Per-channel signal preprocessing.
//!
//! Two branches share the common steps (anti-alias low-pass + resample,
//! line-noise notches, session z-scoring):
//!
//! * encoder branch — non-overlapping 10 s windows, MAD artifact rejection,
//!   chronological 70/15/15 split over surviving windows;
//! * transformer branch — an extra 2nd-order 50 Hz low-pass, chronological
//!   70/15/15 split of the session *in time*, then 1 s windows at 500 ms
//!   stride cut strictly inside each split so no window straddles a
//!   boundary.
//!
//! All filtering is zero-phase (forward-backward IIR with odd-reflection
//! padding of 3x the filter order and steady-state initial conditions).

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("frequency {freq} Hz at or above Nyquist ({nyquist} Hz)")]
    AboveNyquist { freq: f64, nyquist: f64 },
    #[error("unstable filter design (pole magnitude {0})")]
    Unstable(f64),
    #[error("zero-variance trace (degenerate channel)")]
    ZeroVariance,
    #[error("degenerate session: MAD estimate is zero")]
    ZeroMad,
    #[error("too few items to split: {0} < 3")]
    TooFewItems(usize),
    #[error("invalid resample target: {0} Hz")]
    BadTargetRate(f64),
    #[error("trace shorter than one window")]
    TraceTooShort,
}

/// Which channel a window came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelKey {
    pub subject: usize,
    pub session: usize,
    pub region: String,
    pub channel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct RawTrace {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub key: ChannelKey,
}

#[derive(Debug, Clone)]
pub struct Window {
    pub samples: Vec<f32>,
    /// Sample offset of the window start within its session.
    pub start: usize,
    pub split: Split,
    pub key: ChannelKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Encoder,
    Transformer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocConfig {
    pub branch: Branch,
    pub lp_order: usize,
    pub lp_cutoff: f64,
    pub notch_freqs: Vec<f64>,
    pub notch_q: f64,
    pub target_fs: f64,
    pub mad_tau: f64,
    pub split_fractions: (f64, f64, f64),
    /// Transformer-branch extra low-pass.
    pub xf_lp_order: usize,
    pub xf_lp_cutoff: f64,
    pub win_s: f64,
    pub stride_s: f64,
}

impl PreprocConfig {
    pub fn encoder() -> Self {
        Self {
            branch: Branch::Encoder,
            lp_order: 4,
            lp_cutoff: 500.0,
            notch_freqs: vec![60.0, 120.0, 180.0],
            notch_q: 30.0,
            target_fs: 1000.0,
            mad_tau: 10.0,
            split_fractions: (0.70, 0.15, 0.15),
            xf_lp_order: 2,
            xf_lp_cutoff: 50.0,
            win_s: 10.0,
            stride_s: 10.0,
        }
    }

    pub fn transformer() -> Self {
        Self {
            branch: Branch::Transformer,
            win_s: 1.0,
            stride_s: 0.5,
            ..Self::encoder()
        }
    }
}

// ---------------------------------------------------------------------------
// IIR design and zero-phase application
// ---------------------------------------------------------------------------

/// Transfer-function coefficients, `a[0] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Iir {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl Iir {
    pub fn order(&self) -> usize {
        self.a.len().max(self.b.len()) - 1
    }
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut p = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); p.len() + 1];
        for (i, &c) in p.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        p = next;
    }
    p
}

/// Butterworth low-pass via the bilinear transform.
pub fn butter_lowpass(order: usize, cutoff: f64, fs: f64) -> Result<Iir, DspError> {
    assert!(order >= 1, "filter order must be >= 1");
    let nyquist = fs / 2.0;
    if cutoff >= nyquist {
        return Err(DspError::AboveNyquist { freq: cutoff, nyquist });
    }
    let warped = 2.0 * fs * (std::f64::consts::PI * cutoff / fs).tan();
    let fs2 = 2.0 * fs;
    let mut zpoles = Vec::with_capacity(order);
    let mut gain = Complex64::new(1.0, 0.0);
    for k in 0..order {
        let theta = std::f64::consts::PI * (2.0 * k as f64 + order as f64 + 1.0)
            / (2.0 * order as f64);
        let s = warped * Complex64::new(theta.cos(), theta.sin());
        let zp = (Complex64::new(fs2, 0.0) + s) / (Complex64::new(fs2, 0.0) - s);
        if zp.norm() >= 1.0 {
            return Err(DspError::Unstable(zp.norm()));
        }
        gain *= Complex64::new(warped, 0.0) / (Complex64::new(fs2, 0.0) - s);
        zpoles.push(zp);
    }
    // All zeros at z = -1.
    let zzeros = vec![Complex64::new(-1.0, 0.0); order];
    let b_c = poly_from_roots(&zzeros);
    let a_c = poly_from_roots(&zpoles);
    let b: Vec<f64> = b_c.iter().map(|c| (c * gain).re).collect();
    let a: Vec<f64> = a_c.iter().map(|c| c.re).collect();
    Ok(Iir { b, a })
}

/// Second-order IIR notch (constant-gain biquad), quality factor `q`.
pub fn iir_notch(freq: f64, q: f64, fs: f64) -> Result<Iir, DspError> {
    let nyquist = fs / 2.0;
    if freq >= nyquist {
        return Err(DspError::AboveNyquist { freq, nyquist });
    }
    let w0 = std::f64::consts::TAU * freq / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let b = vec![1.0 / a0, -2.0 * w0.cos() / a0, 1.0 / a0];
    let a = vec![1.0, -2.0 * w0.cos() / a0, (1.0 - alpha) / a0];
    // Poles of the quadratic a: radius sqrt(a[2]).
    let r = a[2].abs().sqrt();
    if r >= 1.0 {
        return Err(DspError::Unstable(r));
    }
    Ok(Iir { b, a })
}

/// Direct-form II transposed filtering with initial state `zi` (scaled by
/// the caller); returns the filtered signal.
fn lfilter(iir: &Iir, x: &[f64], zi: Option<&[f64]>) -> Vec<f64> {
    let n = iir.a.len().max(iir.b.len());
    let mut b = iir.b.clone();
    let mut a = iir.a.clone();
    b.resize(n, 0.0);
    a.resize(n, 0.0);
    let mut z = vec![0.0f64; n - 1];
    if let Some(zi) = zi {
        z.copy_from_slice(zi);
    }
    let mut y = Vec::with_capacity(x.len());
    for &xm in x {
        let ym = b[0] * xm + z[0];
        for i in 0..n - 2 {
            z[i] = b[i + 1] * xm + z[i + 1] - a[i + 1] * ym;
        }
        z[n - 2] = b[n - 1] * xm - a[n - 1] * ym;
        y.push(ym);
    }
    y
}

/// Steady-state initial conditions for a unit step (lfilter_zi).
fn lfilter_zi(iir: &Iir) -> Vec<f64> {
    let n = iir.a.len().max(iir.b.len());
    let mut b = iir.b.clone();
    let mut a = iir.a.clone();
    b.resize(n, 0.0);
    a.resize(n, 0.0);
    let m = n - 1;
    // Solve (I - C^T) zi = B with C the companion matrix of `a` and
    // B = b[1:] - a[1:] * b[0].
    let mut mat = vec![vec![0.0f64; m]; m];
    for (i, row) in mat.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    // companion(a)[0][j] = -a[j+1]; companion[i][i-1] = 1. Transposed:
    // C^T[i][0] = -a[i+1]; C^T[i-1][i] = 1.
    for i in 0..m {
        mat[i][0] += a[i + 1];
        if i + 1 < m {
            mat[i][i + 1] -= 1.0;
        }
    }
    let mut rhs: Vec<f64> = (0..m).map(|i| b[i + 1] - a[i + 1] * b[0]).collect();
    // Gaussian elimination with partial pivoting; m <= 4 in practice.
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&i, &j| mat[i][col].abs().partial_cmp(&mat[j][col].abs()).unwrap())
            .unwrap();
        mat.swap(col, piv);
        rhs.swap(col, piv);
        let d = mat[col][col];
        for row in col + 1..m {
            let f = mat[row][col] / d;
            for k in col..m {
                mat[row][k] -= f * mat[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut zi = vec![0.0f64; m];
    for row in (0..m).rev() {
        let mut acc = rhs[row];
        for k in row + 1..m {
            acc -= mat[row][k] * zi[k];
        }
        zi[row] = acc / mat[row][row];
    }
    zi
}

/// Zero-phase (forward-backward) filtering with odd-reflection padding of
/// 3x the filter order. Output length equals input length.
pub fn zero_phase(iir: &Iir, x: &[f64]) -> Vec<f64> {
    let pad = (3 * iir.order()).min(x.len().saturating_sub(1));
    let mut ext = Vec::with_capacity(x.len() + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    let last = x.len() - 1;
    for i in 1..=pad {
        ext.push(2.0 * x[last] - x[last - i]);
    }
    let zi = lfilter_zi(iir);
    let scaled: Vec<f64> = zi.iter().map(|z| z * ext[0]).collect();
    let fwd = lfilter(iir, &ext, Some(&scaled));
    let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
    let scaled: Vec<f64> = zi.iter().map(|z| z * rev[0]).collect();
    rev = lfilter(iir, &rev, Some(&scaled));
    rev.reverse();
    rev[pad..pad + x.len()].to_vec()
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn bessel_i0(x: f64) -> f64 {
    // Power series; converges quickly for the beta values used here.
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

fn kaiser(n: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| {
            let t = 2.0 * i as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - t * t).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase rational resampler with a Kaiser-windowed sinc kernel.
/// Duration is preserved to within one output sample.
pub fn resample_poly(x: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>, DspError> {
    if fs_out <= 0.0 {
        return Err(DspError::BadTargetRate(fs_out));
    }
    if (fs_in - fs_out).abs() < 1e-9 {
        return Ok(x.to_vec());
    }
    // Rational approximation of the rate ratio (rates here are integral Hz).
    let up0 = (fs_out * 1000.0).round() as u64;
    let down0 = (fs_in * 1000.0).round() as u64;
    let g = gcd(up0, down0);
    let (up, down) = ((up0 / g) as usize, (down0 / g) as usize);
    let max_rate = up.max(down);
    let half_len = 10 * max_rate;
    let n_taps = 2 * half_len + 1;
    let win = kaiser(n_taps, 5.0);
    let f_c = 1.0 / max_rate as f64; // cutoff relative to the upsampled Nyquist
    let mut h: Vec<f64> = (0..n_taps)
        .map(|i| {
            let t = i as f64 - half_len as f64;
            f_c * sinc(f_c * t) * win[i]
        })
        .collect();
    let s: f64 = h.iter().sum();
    for v in h.iter_mut() {
        *v *= up as f64 / s;
    }

    let n_out = (x.len() * up).div_ceil(down);
    let mut y = vec![0.0f64; n_out];
    for (m, slot) in y.iter_mut().enumerate() {
        // Output sample m sits at upsampled index m*down; the kernel is
        // centered (half_len) so the resampler has zero group delay.
        let center = m * down + half_len;
        let mut acc = 0.0;
        // x_up[j] = x[j/up] when j % up == 0; j = center - k.
        let j_max = center.min(up * (x.len() - 1));
        let j_min = center.saturating_sub(n_taps - 1);
        let mut j = j_max - (j_max % up);
        while j >= j_min {
            let k = center - j;
            if k < n_taps && j % up == 0 {
                acc += h[k] * x[j / up];
            }
            if j < up {
                break;
            }
            j -= up;
        }
        *slot = acc;
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Normalization, artifact rejection, splits
// ---------------------------------------------------------------------------

/// Session-wise standardization: subtract the mean, divide by the std.
pub fn session_zscore(x: &[f64]) -> Result<Vec<f64>, DspError> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(DspError::ZeroVariance);
    }
    let sd = var.sqrt();
    Ok(x.iter().map(|v| (v - mean) / sd).collect())
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Robust session statistics: median and 1.4826x the median absolute
/// deviation.
pub fn mad_stats(x: &[f64]) -> Result<(f64, f64), DspError> {
    let mut v = x.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = x.iter().map(|s| (s - med).abs()).collect();
    let sigma = 1.4826 * median(&mut dev);
    if sigma <= 0.0 {
        return Err(DspError::ZeroMad);
    }
    Ok((med, sigma))
}

/// Discard windows containing any sample outside `med ± tau*sigma`, where
/// the statistics come from the full-session signal. Survivors keep their
/// order.
pub fn mad_reject(windows: Vec<Window>, med: f64, sigma: f64, tau: f64) -> Vec<Window> {
    let lo = med - tau * sigma;
    let hi = med + tau * sigma;
    windows
        .into_iter()
        .filter(|w| w.samples.iter().all(|&s| (s as f64) >= lo && (s as f64) <= hi))
        .collect()
}

/// Chronological split counts: floor for train and val, remainder to test.
pub fn chronological_split(
    n: usize,
    fractions: (f64, f64, f64),
) -> Result<(usize, usize, usize), DspError> {
    if n < 3 {
        return Err(DspError::TooFewItems(n));
    }
    let n_train = (fractions.0 * n as f64).floor() as usize;
    let n_val = (fractions.1 * n as f64).floor() as usize;
    let n_test = n - n_train - n_val;
    Ok((n_train, n_val, n_test))
}

fn common_steps(x: &RawTrace, cfg: &PreprocConfig) -> Result<(Vec<f64>, f64), DspError> {
    let mut samples = x.samples.clone();
    let mut fs = x.fs;
    if fs > cfg.target_fs {
        // Anti-aliasing only matters when downsampling.
        let lp = butter_lowpass(cfg.lp_order, cfg.lp_cutoff, fs)?;
        samples = zero_phase(&lp, &samples);
    }
    if (fs - cfg.target_fs).abs() > 1e-9 {
        samples = resample_poly(&samples, fs, cfg.target_fs)?;
        fs = cfg.target_fs;
    }
    for &f in &cfg.notch_freqs {
        let notch = iir_notch(f, cfg.notch_q, fs)?;
        samples = zero_phase(&notch, &samples);
    }
    let samples = session_zscore(&samples)?;
    Ok((samples, fs))
}

fn cut_windows(
    samples: &[f64],
    fs: f64,
    key: &ChannelKey,
    win_len: usize,
    stride: usize,
    range: std::ops::Range<usize>,
    split: Split,
    out: &mut Vec<Window>,
) {
    let _ = fs;
    let mut start = range.start;
    while start + win_len <= range.end {
        out.push(Window {
            samples: samples[start..start + win_len].iter().map(|&v| v as f32).collect(),
            start,
            split,
            key: key.clone(),
        });
        start += stride;
    }
}

/// Encoder branch: common steps, non-overlapping 10 s windows, MAD
/// rejection, chronological split over survivors.
pub fn preprocess_encoder_branch(
    x: &RawTrace,
    cfg: &PreprocConfig,
) -> Result<Vec<Window>, DspError> {
    let (samples, fs) = common_steps(x, cfg)?;
    let win_len = (cfg.win_s * fs).round() as usize;
    if samples.len() < win_len {
        return Err(DspError::TraceTooShort);
    }
    let mut windows = Vec::new();
    cut_windows(&samples, fs, &x.key, win_len, win_len, 0..samples.len(), Split::Train, &mut windows);
    let (med, sigma) = mad_stats(&samples)?;
    let mut kept = mad_reject(windows, med, sigma, cfg.mad_tau);
    let (n_train, n_val, _) = chronological_split(kept.len(), cfg.split_fractions)?;
    for (i, w) in kept.iter_mut().enumerate() {
        w.split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(kept)
}

/// Transformer branch: common steps plus the 50 Hz low-pass, chronological
/// split of the session in time, then overlapping windows cut within each
/// split (leakage-free).
pub fn preprocess_transformer_branch(
    x: &RawTrace,
    cfg: &PreprocConfig,
) -> Result<Vec<Window>, DspError> {
    let (mut samples, fs) = common_steps(x, cfg)?;
    let lp = butter_lowpass(cfg.xf_lp_order, cfg.xf_lp_cutoff, fs)?;
    samples = zero_phase(&lp, &samples);
    let win_len = (cfg.win_s * fs).round() as usize;
    let stride = (cfg.stride_s * fs).round() as usize;
    if samples.len() < win_len {
        return Err(DspError::TraceTooShort);
    }
    let n = samples.len();
    let train_end = (cfg.split_fractions.0 * n as f64).floor() as usize;
    let val_end = train_end + (cfg.split_fractions.1 * n as f64).floor() as usize;
    let mut windows = Vec::new();
    cut_windows(&samples, fs, &x.key, win_len, stride, 0..train_end, Split::Train, &mut windows);
    cut_windows(&samples, fs, &x.key, win_len, stride, train_end..val_end, Split::Val, &mut windows);
    cut_windows(&samples, fs, &x.key, win_len, stride, val_end..n, Split::Test, &mut windows);
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::tone_amplitude;

    fn key() -> ChannelKey {
        ChannelKey { subject: 0, session: 0, region: "GPi".into(), channel: 0 }
    }

    fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (std::f64::consts::TAU * f * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn lowpass_passband_flat() {
        let iir = butter_lowpass(4, 500.0, 2000.0).unwrap();
        let x = sine(10.0, 2000.0, 20_000);
        let y = zero_phase(&iir, &x);
        let a = tone_amplitude(&y, 2000.0, 10.0);
        assert!((a - 1.0).abs() < 0.01, "passband amplitude {a}");
    }

    #[test]
    fn notch_attenuates_60hz() {
        let iir = iir_notch(60.0, 30.0, 1000.0).unwrap();
        let x = sine(60.0, 1000.0, 10_000);
        let y = zero_phase(&iir, &x);
        let a = tone_amplitude(&y, 1000.0, 60.0);
        let db = -20.0 * a.log10();
        assert!(db > 20.0, "attenuation {db} dB");
        // Neighboring content survives.
        let x2 = sine(40.0, 1000.0, 10_000);
        let y2 = zero_phase(&iir, &x2);
        assert!((tone_amplitude(&y2, 1000.0, 40.0) - 1.0).abs() < 0.02);
    }

    #[test]
    fn zero_phase_impulse_symmetric() {
        let iir = butter_lowpass(4, 100.0, 1000.0).unwrap();
        let mut x = vec![0.0f64; 2001];
        x[1000] = 1.0;
        let y = zero_phase(&iir, &x);
        for k in 1..400 {
            assert!(
                (y[1000 + k] - y[1000 - k]).abs() < 1e-9,
                "asymmetric at lag {k}: {} vs {}",
                y[1000 + k],
                y[1000 - k]
            );
        }
    }

    #[test]
    fn zero_phase_no_lag() {
        // Cross-correlation of input and filtered output peaks at lag 0.
        let iir = butter_lowpass(4, 80.0, 1000.0).unwrap();
        let x = sine(30.0, 1000.0, 4000);
        let y = zero_phase(&iir, &x);
        let mut best = (0i64, f64::MIN);
        for lag in -20i64..=20 {
            let mut acc = 0.0;
            for i in 0..x.len() {
                let j = i as i64 + lag;
                if j >= 0 && (j as usize) < y.len() {
                    acc += x[i] * y[j as usize];
                }
            }
            if acc > best.1 {
                best = (lag, acc);
            }
        }
        assert_eq!(best.0, 0, "correlation peak at lag {}", best.0);
    }

    #[test]
    fn nyquist_design_rejected() {
        assert!(matches!(
            butter_lowpass(4, 500.0, 1000.0),
            Err(DspError::AboveNyquist { .. })
        ));
        assert!(matches!(iir_notch(500.0, 30.0, 1000.0), Err(DspError::AboveNyquist { .. })));
    }

    #[test]
    fn resample_identity() {
        let x = sine(20.0, 1000.0, 5000);
        let y = resample_poly(&x, 1000.0, 1000.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn resample_halves_rate() {
        let x = sine(20.0, 2000.0, 20_000);
        let y = resample_poly(&x, 2000.0, 1000.0).unwrap();
        assert_eq!(y.len(), 10_000);
        let a = tone_amplitude(&y[500..9500], 1000.0, 20.0);
        assert!((a - 1.0).abs() < 0.01, "resampled amplitude {a}");
    }

    #[test]
    fn resample_duration_contract() {
        for (n, fi, fo) in [(10_000usize, 1000.0, 250.0), (9_999, 1000.0, 500.0), (4_000, 400.0, 1000.0)] {
            let x = vec![1.0f64; n];
            let y = resample_poly(&x, fi, fo).unwrap();
            let expect = n as f64 * fo / fi;
            assert!((y.len() as f64 - expect).abs() <= 1.0, "{} vs {}", y.len(), expect);
        }
    }

    #[test]
    fn zscore_definition_and_idempotence() {
        let x = sine(7.0, 1000.0, 4096).iter().map(|v| 3.0 * v + 5.0).collect::<Vec<_>>();
        let z = session_zscore(&x).unwrap();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
        let z2 = session_zscore(&z).unwrap();
        for (a, b) in z.iter().zip(&z2) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(session_zscore(&vec![2.5; 100]), Err(DspError::ZeroVariance)));
    }

    #[test]
    fn mad_rejects_spike() {
        let mut samples = vec![0.0f64; 10_000];
        // Mildly textured signal so sigma > 0.
        for (i, v) in samples.iter_mut().enumerate() {
            *v = ((i % 7) as f64 - 3.0) * 0.1;
        }
        let (med, sigma) = mad_stats(&samples).unwrap();
        let mut windows: Vec<Window> = (0..10)
            .map(|w| Window {
                samples: samples[w * 1000..(w + 1) * 1000].iter().map(|&v| v as f32).collect(),
                start: w * 1000,
                split: Split::Train,
                key: key(),
            })
            .collect();
        windows[3].samples[500] = (med + 12.0 * sigma) as f32;
        let kept = mad_reject(windows, med, sigma, 10.0);
        assert_eq!(kept.len(), 9);
        assert!(kept.iter().all(|w| w.start != 3000));
        assert!(kept.windows(2).all(|p| p[0].start < p[1].start), "order preserved");
    }

    #[test]
    fn mad_keeps_gaussian_windows() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::SeedStream::new(5).derive("mad");
        let samples: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (med, sigma) = mad_stats(&samples).unwrap();
        let windows: Vec<Window> = (0..10)
            .map(|w| Window {
                samples: samples[w * 10_000..(w + 1) * 10_000].iter().map(|&v| v as f32).collect(),
                start: w * 10_000,
                split: Split::Train,
                key: key(),
            })
            .collect();
        let kept = mad_reject(windows, med, sigma, 10.0);
        assert_eq!(kept.len(), 10, "P(|z| > 14.8) is negligible");
    }

    #[test]
    fn mad_tau_zero_rejects_everything() {
        let samples: Vec<f64> = (0..1000).map(|i| (i % 5) as f64).collect();
        let (med, sigma) = mad_stats(&samples).unwrap();
        let windows: Vec<Window> = vec![Window {
            samples: samples[..100].iter().map(|&v| v as f32).collect(),
            start: 0,
            split: Split::Train,
            key: key(),
        }];
        let kept = mad_reject(windows, med, sigma, 0.0);
        assert!(kept.is_empty());
    }

    #[test]
    fn split_rule() {
        assert_eq!(chronological_split(100, (0.7, 0.15, 0.15)).unwrap(), (70, 15, 15));
        assert_eq!(chronological_split(10, (0.7, 0.15, 0.15)).unwrap(), (7, 1, 2));
        assert_eq!(chronological_split(3, (0.7, 0.15, 0.15)).unwrap(), (2, 0, 1));
        assert!(matches!(chronological_split(2, (0.7, 0.15, 0.15)), Err(DspError::TooFewItems(2))));
    }

    #[test]
    fn encoder_branch_pipeline() {
        let x = RawTrace { samples: sine(20.0, 1000.0, 60_000), fs: 1000.0, key: key() };
        let cfg = PreprocConfig::encoder();
        let windows = preprocess_encoder_branch(&x, &cfg).unwrap();
        assert_eq!(windows.len(), 6);
        let trains = windows.iter().filter(|w| w.split == Split::Train).count();
        let vals = windows.iter().filter(|w| w.split == Split::Val).count();
        let tests = windows.iter().filter(|w| w.split == Split::Test).count();
        assert_eq!((trains, vals, tests), (4, 0, 2));
        // Determinism.
        let again = preprocess_encoder_branch(&x, &cfg).unwrap();
        assert_eq!(windows.len(), again.len());
        for (a, b) in windows.iter().zip(&again) {
            assert_eq!(a.samples, b.samples);
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn encoder_branch_drops_spiked_window() {
        let mut samples = sine(20.0, 1000.0, 60_000);
        samples[25_000] = 100.0; // lands in window 2 (0-based)
        let x = RawTrace { samples, fs: 1000.0, key: key() };
        let windows = preprocess_encoder_branch(&x, &PreprocConfig::encoder()).unwrap();
        assert_eq!(windows.len(), 5);
        assert!(windows.iter().all(|w| w.start != 20_000));
    }

    #[test]
    fn transformer_branch_counts_and_boundaries() {
        let x = RawTrace { samples: sine(5.0, 1000.0, 100_000), fs: 1000.0, key: key() };
        let cfg = PreprocConfig::transformer();
        let windows = preprocess_transformer_branch(&x, &cfg).unwrap();
        let trains: Vec<_> = windows.iter().filter(|w| w.split == Split::Train).collect();
        assert_eq!(trains.len(), 139);
        // No window straddles a split boundary.
        for w in &windows {
            let end = w.start + w.samples.len();
            match w.split {
                Split::Train => assert!(end <= 70_000),
                Split::Val => assert!(w.start >= 70_000 && end <= 85_000),
                Split::Test => assert!(w.start >= 85_000),
            }
        }
    }

    #[test]
    fn transformer_branch_kills_120hz() {
        let mut samples = sine(10.0, 1000.0, 60_000);
        for (i, v) in samples.iter_mut().enumerate() {
            *v += (std::f64::consts::TAU * 120.0 * i as f64 / 1000.0).sin();
        }
        let x = RawTrace { samples, fs: 1000.0, key: key() };
        let cfg = PreprocConfig::transformer();
        let (pre, fs) = common_steps(&x, &cfg).unwrap();
        let lp = butter_lowpass(cfg.xf_lp_order, cfg.xf_lp_cutoff, fs).unwrap();
        let y = zero_phase(&lp, &pre);
        // Relative to the 120 Hz content in the un-notched, un-filtered input
        // (unit amplitude before z-scoring; z-scoring rescales both tones
        // equally, so compare against the surviving 10 Hz carrier).
        let a120 = tone_amplitude(&y, fs, 120.0);
        let a10 = tone_amplitude(&y, fs, 10.0);
        let db = 20.0 * (a10 / a120.max(1e-300)).log10();
        assert!(db > 40.0, "120 Hz only {db} dB below passband");
    }

    #[test]
    fn splits_disjoint_per_key() {
        let x = RawTrace { samples: sine(3.0, 1000.0, 50_000), fs: 1000.0, key: key() };
        let windows = preprocess_transformer_branch(&x, &PreprocConfig::transformer()).unwrap();
        let max_train = windows
            .iter()
            .filter(|w| w.split == Split::Train)
            .map(|w| w.start + w.samples.len())
            .max()
            .unwrap();
        let min_val = windows.iter().filter(|w| w.split == Split::Val).map(|w| w.start).min().unwrap();
        let max_val = windows
            .iter()
            .filter(|w| w.split == Split::Val)
            .map(|w| w.start + w.samples.len())
            .max()
            .unwrap();
        let min_test = windows.iter().filter(|w| w.split == Split::Test).map(|w| w.start).min().unwrap();
        assert!(max_train <= min_val && max_val <= min_test);
    }
}

//! Vibration frequency prediction for short state trajectories.
//!
//! The estimator works in two stages. A least-squares sinusoid
//! `a·sin(2πft + φ) + c` is fitted first; on horizons of a few dozen samples
//! this is far sharper than any periodogram. When the fit leaves too much
//! residual the channel falls back to a Gaussian-windowed Welch power spectral
//! density and its dominant peak.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::model::Trajectory;

/// Fewest samples any estimator here accepts.
pub const MIN_SAMPLES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("need at least {min} samples, got {got}")]
    TooShort { min: usize, got: usize },
    #[error("segment length {segment} exceeds signal length {len}")]
    SegmentTooLong { segment: usize, len: usize },
    #[error("trajectory is not uniformly sampled")]
    NonUniform,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidFit {
    pub amplitude: f64,
    /// Hz, never negative.
    pub frequency: f64,
    /// Radians in `[-π, π]`.
    pub phase: f64,
    pub offset: f64,
    pub rms_residual: f64,
}

impl SinusoidFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.frequency * t + self.phase).sin() + self.offset
    }
}

/// One-sided power spectral density on a uniform grid from 0 to Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    pub frequencies: Vec<f64>,
    pub power: Vec<f64>,
    /// Bin spacing in Hz.
    pub resolution: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyPrediction {
    /// Dominant frequency in Hz.
    pub frequency: f64,
    /// Share of the signal explained by the reported frequency, in `[0, 1]`.
    pub confidence: f64,
    /// Whether the sinusoid prefit was accepted (otherwise PSD fallback).
    pub from_fit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOptions {
    /// Welch segment length for the fallback; `None` uses the whole channel.
    pub segment_len: Option<usize>,
    pub overlap_frac: f64,
    pub gaussian_sigma_frac: f64,
    /// Prefit accepted when `rms_residual < residual_ratio · rms(signal)`.
    pub residual_ratio: f64,
    /// Per-channel starting frequencies; skips the coarse scan when present.
    pub freq_hints: Option<Vec<f64>>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { segment_len: None, overlap_frac: 0.5, gaussian_sigma_frac: 0.25, residual_ratio: 0.1, freq_hints: None }
    }
}

/// Mean and population standard deviation.
fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn is_constant(mean: f64, std: f64) -> bool {
    std == 0.0 || std <= 1e-12 * mean.abs()
}

/// Least-squares `(a, b, c)` of `a sin + b cos + c` at fixed frequency, the
/// sum of squared residuals and its derivative with respect to frequency.
fn linear_fit_with_slope(y: &[f64], dt: f64, f: f64) -> ([f64; 3], f64, f64) {
    let w = 2.0 * PI * f * dt;
    let (mut ss, mut sc, mut s1, mut cc, mut c1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut ys, mut yc, mut y1) = (0.0, 0.0, 0.0);
    for (k, &v) in y.iter().enumerate() {
        let (s, c) = (w * k as f64).sin_cos();
        ss += s * s;
        sc += s * c;
        s1 += s;
        cc += c * c;
        c1 += c;
        ys += v * s;
        yc += v * c;
        y1 += v;
    }
    let n = y.len() as f64;
    let ridge = 1e-12 * (ss + cc + n);
    let g = nalgebra::Matrix3::new(ss + ridge, sc, s1, sc, cc + ridge, c1, s1, c1, n + ridge);
    let rhs = nalgebra::Vector3::new(ys, yc, y1);
    let coef = g.cholesky().map(|ch| ch.solve(&rhs)).unwrap_or_else(|| {
        // fall back to the offset-only model
        nalgebra::Vector3::new(0.0, 0.0, y1 / n)
    });
    let (a, b, c) = (coef[0], coef[1], coef[2]);
    // by the variable-projection identity d(SSE)/df = −2 Σ r_k ∂(model_k)/∂f at fixed coefficients
    let (mut sse, mut slope) = (0.0, 0.0);
    for (k, &v) in y.iter().enumerate() {
        let (s, co) = (w * k as f64).sin_cos();
        let r = v - (a * s + b * co + c);
        sse += r * r;
        slope -= 2.0 * r * 2.0 * PI * dt * k as f64 * (a * co - b * s);
    }
    ([a, b, c], sse, slope)
}

fn linear_fit(y: &[f64], dt: f64, f: f64) -> ([f64; 3], f64) {
    let (coef, sse, _) = linear_fit_with_slope(y, dt, f);
    (coef, sse)
}

/// Polish a golden-section minimiser by bisecting the residual slope.
fn polish_minimum(y: &[f64], dt: f64, f: f64, lo: f64, hi: f64) -> f64 {
    let slope = |x: f64| linear_fit_with_slope(y, dt, x).2;
    let delta = 1e-6 * (hi - lo);
    let (mut a, mut b) = ((f - delta).max(lo), (f + delta).min(hi));
    let (sa, sb) = (slope(a), slope(b));
    if !(sa < 0.0 && sb > 0.0) {
        return f;
    }
    loop {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            return mid;
        }
        let sm = slope(mid);
        if sm == 0.0 {
            return mid;
        }
        if sm < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
}

fn frequency_limits(k: usize, dt: f64) -> (f64, f64) {
    let window = (k - 1) as f64 * dt;
    (0.25 / window, 0.5 / dt * (1.0 - 1e-9))
}

/// Golden-section minimisation of the fit residual over `[lo, hi]`.
fn golden_section(y: &[f64], dt: f64, mut lo: f64, mut hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let sse = |f: f64| linear_fit(y, dt, f).1;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (sse(x1), sse(x2));
    let tol = 1e-11 * hi.max(1e-12);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = sse(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = sse(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Coarse scan for the best starting frequency of the sinusoid fit.
fn coarse_frequency(y: &[f64], dt: f64) -> f64 {
    let (lo, hi) = frequency_limits(y.len(), dt);
    let points = 96;
    let mut best = (lo, f64::INFINITY);
    for i in 0..=points {
        let f = lo + (hi - lo) * i as f64 / points as f64;
        let sse = linear_fit(y, dt, f).1;
        if sse < best.1 {
            best = (f, sse);
        }
    }
    best.0
}

/// Least-squares sinusoid fit started from `freq_init`.
///
/// The frequency is refined by golden-section search inside one window
/// resolution `1/(K·dt)` on either side of `freq_init`; the bracket slides if
/// the minimum lands on its edge. A constant signal yields frequency and
/// amplitude zero.
pub fn fit_sinusoid(samples: &[f64], dt: f64, freq_init: f64) -> Result<SinusoidFit, SpectralError> {
    if samples.len() < MIN_SAMPLES {
        return Err(SpectralError::TooShort { min: MIN_SAMPLES, got: samples.len() });
    }
    if !(dt > 0.0) {
        return Err(SpectralError::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    if !samples.iter().all(|v| v.is_finite()) || !freq_init.is_finite() {
        return Err(SpectralError::InvalidArgument("non-finite input".into()));
    }
    let (mean, std) = mean_std(samples);
    if is_constant(mean, std) {
        return Ok(SinusoidFit { amplitude: 0.0, frequency: 0.0, phase: 0.0, offset: mean, rms_residual: std });
    }
    // normalised copy: the fit is then exactly scale invariant
    let y: Vec<f64> = samples.iter().map(|v| (v - mean) / std).collect();
    let k = y.len();
    let (f_lo, f_hi) = frequency_limits(k, dt);
    let width = 1.0 / (k as f64 * dt);
    let mut center = freq_init.clamp(f_lo, f_hi);
    let mut f = center;
    for _ in 0..8 {
        let lo = (center - width).max(f_lo);
        let hi = (center + width).min(f_hi);
        f = polish_minimum(&y, dt, golden_section(&y, dt, lo, hi), lo, hi);
        let at_lower = f - lo < 1e-6 * width && lo > f_lo;
        let at_upper = hi - f < 1e-6 * width && hi < f_hi;
        if !(at_lower || at_upper) {
            break;
        }
        center = f;
    }
    let ([a, b, c], sse) = linear_fit(&y, dt, f);
    Ok(SinusoidFit {
        amplitude: a.hypot(b) * std,
        frequency: f,
        phase: b.atan2(a),
        offset: mean + c * std,
        rms_residual: (sse / k as f64).sqrt() * std,
    })
}

fn gaussian_window(len: usize, sigma: f64) -> Vec<f64> {
    let center = (len as f64 - 1.0) / 2.0;
    (0..len).map(|i| (-0.5 * ((i as f64 - center) / sigma).powi(2)).exp()).collect()
}

/// Welch's averaged modified periodogram with a Gaussian window.
///
/// Segments are mean-removed and windowed by a Gaussian of standard deviation
/// `gaussian_sigma_frac · segment_len / 2` samples. The result is a one-sided
/// density normalised by the window power, so `Σ power · resolution` equals the
/// windowed mean square of the signal.
pub fn welch_psd(
    samples: &[f64],
    dt: f64,
    segment_len: usize,
    overlap_frac: f64,
    gaussian_sigma_frac: f64,
) -> Result<SpectralEstimate, SpectralError> {
    if segment_len < MIN_SAMPLES {
        return Err(SpectralError::TooShort { min: MIN_SAMPLES, got: segment_len });
    }
    if segment_len > samples.len() {
        return Err(SpectralError::SegmentTooLong { segment: segment_len, len: samples.len() });
    }
    if !(dt > 0.0) {
        return Err(SpectralError::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    if !(0.0..1.0).contains(&overlap_frac) {
        return Err(SpectralError::InvalidArgument(format!("overlap must be in [0, 1), got {overlap_frac}")));
    }
    if !(gaussian_sigma_frac > 0.0) {
        return Err(SpectralError::InvalidArgument("gaussian sigma must be positive".into()));
    }
    let fs = 1.0 / dt;
    let window = gaussian_window(segment_len, gaussian_sigma_frac * segment_len as f64 / 2.0);
    let window_power: f64 = window.iter().map(|w| w * w).sum();
    let step = (segment_len - (overlap_frac * segment_len as f64).round() as usize).max(1);
    let segments = (samples.len() - segment_len) / step + 1;
    let bins = segment_len / 2 + 1;

    let fft = FftPlanner::new().plan_fft_forward(segment_len);
    let mut buf = vec![Complex::new(0.0, 0.0); segment_len];
    let mut power = vec![0.0; bins];
    for s in 0..segments {
        let seg = &samples[s * step..s * step + segment_len];
        let mean = seg.iter().sum::<f64>() / segment_len as f64;
        for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            let mut v = buf[k].norm_sqr() / (fs * window_power);
            let nyquist_bin = segment_len % 2 == 0 && k == segment_len / 2;
            if k != 0 && !nyquist_bin {
                v *= 2.0;
            }
            *p += v;
        }
    }
    power.iter_mut().for_each(|p| *p /= segments as f64);
    let resolution = fs / segment_len as f64;
    Ok(SpectralEstimate { frequencies: (0..bins).map(|k| k as f64 * resolution).collect(), power, resolution })
}

/// Peak frequencies in descending power order.
///
/// Local maxima (the DC bin excluded) are refined by three-point parabolic
/// interpolation of the log power; peaks under `min_prominence · max(power)`
/// are dropped.
pub fn dominant_frequencies(spec: &SpectralEstimate, count: usize, min_prominence: f64) -> Vec<f64> {
    let p = &spec.power;
    let max = p.iter().cloned().fold(0.0, f64::max);
    if count == 0 || max <= 0.0 || p.len() < 2 {
        return Vec::new();
    }
    let floor = max * 1e-300_f64.max(f64::MIN_POSITIVE);
    let ln = |v: f64| (v + floor).ln();
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for i in 1..p.len() {
        let left = p[i - 1];
        let right = p.get(i + 1).copied().unwrap_or(f64::NEG_INFINITY);
        if p[i] > left && p[i] >= right && p[i] >= min_prominence * max && p[i] > 0.0 {
            let offset = if i + 1 < p.len() {
                let (a, b, c) = (ln(left), ln(p[i]), ln(right));
                let denom = a - 2.0 * b + c;
                if denom.abs() > 1e-300 {
                    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            peaks.push(((i as f64 + offset) * spec.resolution, p[i]));
        }
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    peaks.into_iter().take(count).map(|(f, _)| f).collect()
}

/// Predict the dominant frequency of one uniformly sampled channel.
pub fn predict_channel(samples: &[f64], dt: f64, opts: &PredictOptions, hint: Option<f64>) -> Result<FrequencyPrediction, SpectralError> {
    if samples.len() < MIN_SAMPLES {
        return Err(SpectralError::TooShort { min: MIN_SAMPLES, got: samples.len() });
    }
    let (mean, std) = mean_std(samples);
    if is_constant(mean, std) {
        return Ok(FrequencyPrediction { frequency: 0.0, confidence: 0.0, from_fit: false });
    }
    let y: Vec<f64> = samples.iter().map(|v| (v - mean) / std).collect();
    let init = hint.filter(|h| h.is_finite() && *h > 0.0).unwrap_or_else(|| coarse_frequency(&y, dt));
    let fit = fit_sinusoid(&y, dt, init)?;
    // y has unit rms, so residual ratios are absolute here
    if fit.rms_residual < opts.residual_ratio {
        let explained = (1.0 - fit.rms_residual * fit.rms_residual).clamp(0.0, 1.0);
        return Ok(FrequencyPrediction { frequency: fit.frequency, confidence: explained, from_fit: true });
    }
    let segment = opts.segment_len.unwrap_or(y.len()).min(y.len());
    let detrended: Vec<f64> = y.iter().map(|v| v - fit.offset).collect();
    let spec = welch_psd(&detrended, dt, segment, opts.overlap_frac, opts.gaussian_sigma_frac)?;
    let total: f64 = spec.power.iter().sum();
    match dominant_frequencies(&spec, 1, 0.0).first() {
        Some(&f) if total > 0.0 => {
            let bin = ((f / spec.resolution).round() as usize).min(spec.power.len() - 1);
            Ok(FrequencyPrediction { frequency: f, confidence: spec.power[bin] / total, from_fit: false })
        }
        _ => Ok(FrequencyPrediction { frequency: fit.frequency, confidence: 0.0, from_fit: true }),
    }
}

/// Dominant frequency of each modal channel of a uniformly sampled trajectory.
pub fn predict_frequencies(
    traj: &Trajectory,
    modal_indices: &[usize],
    opts: &PredictOptions,
) -> Result<Vec<FrequencyPrediction>, SpectralError> {
    if traj.len() < MIN_SAMPLES {
        return Err(SpectralError::TooShort { min: MIN_SAMPLES, got: traj.len() });
    }
    let dt = traj.uniform_dt().ok_or(SpectralError::NonUniform)?;
    modal_indices
        .iter()
        .enumerate()
        .map(|(c, &idx)| {
            let hint = opts.freq_hints.as_ref().and_then(|h| h.get(c).copied());
            predict_channel(&traj.channel(idx), dt, opts, hint)
        })
        .collect()
}

//! Frame-level f0 and voicing estimation by normalized autocorrelation.
//!
//! This is deliberately plain: per frame, find the autocorrelation peak in
//! the lag range of the configured f0 band, refine it parabolically, and
//! call the frame voiced when both the peak and the frame energy clear
//! their thresholds.

use crate::error::{Error, Result};
use crate::signal::WaveformSignal;

#[derive(Debug, Clone, Copy)]
pub struct PitchConfig {
    pub frame_hop_s: f64,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// Minimum normalized autocorrelation peak for a voiced decision.
    pub voicing_threshold: f64,
    /// Minimum frame RMS for a voiced decision; rejects digital silence.
    pub energy_threshold: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        PitchConfig {
            frame_hop_s: super::DEFAULT_FRAME_HOP_S,
            f0_min_hz: 50.0,
            f0_max_hz: 500.0,
            voicing_threshold: 0.5,
            energy_threshold: 1e-4,
        }
    }
}

/// Per-frame (f0 Hz, voiced flag) for the whole signal. Frame n starts at
/// sample `n * hop`; the frame count is `len / hop` rounded down, matching
/// the conditioning frame grid.
pub fn estimate_f0_vuv(
    signal: &WaveformSignal,
    config: &PitchConfig,
) -> Result<(Vec<f64>, Vec<u8>)> {
    if signal.is_empty() {
        return Err(Error::EmptyInput("cannot estimate f0 of an empty signal".into()));
    }
    let fs = signal.sample_rate as f64;
    if fs < 2.0 * config.f0_max_hz {
        return Err(Error::InvalidConfig(format!(
            "sample rate {fs} too low for f0 range up to {} Hz",
            config.f0_max_hz
        )));
    }
    let hop = (fs * config.frame_hop_s).round() as usize;
    if hop == 0 {
        return Err(Error::InvalidConfig("frame hop shorter than one sample".into()));
    }
    let lag_min = (fs / config.f0_max_hz).floor().max(2.0) as usize;
    let lag_max = (fs / config.f0_min_hz).ceil() as usize;
    let window = 2 * lag_max;

    let frames = signal.len() / hop;
    let mut f0 = vec![0.0; frames.max(1)];
    let mut vuv = vec![0u8; frames.max(1)];
    let x = &signal.samples;

    for n in 0..frames.max(1) {
        let start = n * hop;
        let end = (start + window).min(x.len());
        let frame = &x[start..end];
        if frame.len() < 2 * lag_min {
            continue;
        }
        let mean = frame.iter().sum::<f64>() / frame.len() as f64;
        let centered: Vec<f64> = frame.iter().map(|v| v - mean).collect();
        let rms =
            (centered.iter().map(|v| v * v).sum::<f64>() / centered.len() as f64).sqrt();
        if rms < config.energy_threshold {
            continue;
        }
        let upper = lag_max.min(centered.len() - 1);
        if upper < lag_min {
            continue;
        }
        let mut corr = vec![0.0; upper + 1];
        let mut best_lag = 0;
        let mut best_score = f64::NEG_INFINITY;
        let mut peak = 0.0f64;
        for lag in lag_min..=upper {
            let c = normalized_autocorr(&centered, lag);
            corr[lag] = c;
            peak = peak.max(c);
            // small octave penalty so a perfectly periodic signal resolves
            // to its shortest period rather than a multiple
            let score = c - 0.01 * (lag as f64 / lag_min as f64).log2();
            if score > best_score {
                best_score = score;
                best_lag = lag;
            }
        }
        if best_lag == 0 || peak < config.voicing_threshold || corr[best_lag] < config.voicing_threshold {
            continue;
        }
        let lag = refine_peak(&corr, best_lag, lag_min, upper);
        let hz = fs / lag;
        if hz >= config.f0_min_hz && hz <= config.f0_max_hz {
            f0[n] = hz;
            vuv[n] = 1;
        }
    }
    Ok((f0, vuv))
}

fn normalized_autocorr(x: &[f64], lag: usize) -> f64 {
    let n = x.len() - lag;
    let mut num = 0.0;
    let mut e0 = 0.0;
    let mut e1 = 0.0;
    for i in 0..n {
        num += x[i] * x[i + lag];
        e0 += x[i] * x[i];
        e1 += x[i + lag] * x[i + lag];
    }
    let denom = (e0 * e1).sqrt();
    if denom <= 0.0 {
        0.0
    } else {
        num / denom
    }
}

/// Parabolic interpolation of the peak position from its neighbors.
fn refine_peak(corr: &[f64], peak: usize, lo: usize, hi: usize) -> f64 {
    if peak <= lo || peak >= hi {
        return peak as f64;
    }
    let (a, b, c) = (corr[peak - 1], corr[peak], corr[peak + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-12 {
        return peak as f64;
    }
    let shift = 0.5 * (a - c) / denom;
    peak as f64 + shift.clamp(-0.5, 0.5)
}

//! Short-time magnitude spectra for the objective evaluator: 25 ms Hann
//! windows every 5 ms, floored so silent frames never produce -inf under a
//! later log.

use crate::compute::Tensor;
use crate::error::{Error, Result};
use crate::signal::WaveformSignal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const MAGNITUDE_FLOOR: f64 = 1e-10;
const WINDOW_S: f64 = 0.025;
const HOP_S: f64 = 0.005;

/// Linear magnitude spectrogram `[F x M]`: `F = fft_size/2 + 1` frequency
/// rows, one column per frame, every entry at least [`MAGNITUDE_FLOOR`].
#[derive(Debug, Clone)]
pub struct SpectralFrames {
    pub magnitudes: Tensor,
    pub fft_size: usize,
    pub hop: usize,
    pub window_len: usize,
}

impl SpectralFrames {
    pub fn bins(&self) -> usize {
        self.magnitudes.shape[0]
    }

    pub fn frames(&self) -> usize {
        self.magnitudes.shape[1]
    }

    pub fn frame(&self, m: usize) -> Vec<f64> {
        (0..self.bins()).map(|f| self.magnitudes.at2(f, m)).collect()
    }
}

/// Magnitude STFT with a 25 ms Hann window, 5 ms hop and the next
/// power-of-two FFT (512 points at 16 kHz, so 257 bins).
pub fn stft_magnitudes(signal: &WaveformSignal) -> Result<SpectralFrames> {
    let fs = signal.sample_rate as f64;
    let window_len = (WINDOW_S * fs).round() as usize;
    let hop = (HOP_S * fs).round() as usize;
    if signal.len() < window_len {
        return Err(Error::InvalidData(format!(
            "signal of {} samples is shorter than one {window_len}-sample analysis window",
            signal.len()
        )));
    }
    let fft_size = window_len.next_power_of_two();
    let bins = fft_size / 2 + 1;
    let frames = (signal.len() - window_len) / hop + 1;

    let window: Vec<f64> = (0..window_len)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / window_len as f64).cos())
        .collect();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut mags = Tensor::zeros(vec![bins, frames]);
    for m in 0..frames {
        let start = m * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < window_len {
                Complex::new(signal.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for f in 0..bins {
            mags.set2(f, m, buf[f].norm().max(MAGNITUDE_FLOOR));
        }
    }
    Ok(SpectralFrames {
        magnitudes: mags,
        fft_size,
        hop,
        window_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn zero_signal_sits_on_the_floor() {
        let signal = WaveformSignal::new(vec![0.0; 1000], 16_000);
        let frames = stft_magnitudes(&signal).unwrap();
        assert!(frames
            .magnitudes
            .data
            .iter()
            .all(|&m| m == MAGNITUDE_FLOOR));
    }

    #[test]
    fn tone_at_bin_center_peaks_there() {
        // 1 kHz at 16 kHz with a 512-point FFT sits exactly on bin 32
        let fs = 16_000u32;
        let samples: Vec<f64> = (0..fs as usize)
            .map(|i| (TAU * 1000.0 * i as f64 / fs as f64).sin())
            .collect();
        let frames = stft_magnitudes(&WaveformSignal::new(samples, fs)).unwrap();
        assert_eq!(frames.bins(), 257);
        for m in 0..frames.frames() {
            let col = frames.frame(m);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 32, "frame {m}");
        }
    }

    #[test]
    fn frame_count_arithmetic() {
        let signal = WaveformSignal::new(vec![0.0; 16_000], 16_000);
        let frames = stft_magnitudes(&signal).unwrap();
        assert_eq!(frames.frames(), (16_000 - 400) / 80 + 1);
        assert_eq!(frames.frames(), 196);
        assert_eq!(frames.window_len, 400);
        assert_eq!(frames.hop, 80);
        assert_eq!(frames.fft_size, 512);
    }

    #[test]
    fn too_short_signal_is_an_error() {
        let signal = WaveformSignal::new(vec![0.0; 399], 16_000);
        assert!(stft_magnitudes(&signal).is_err());
    }
}

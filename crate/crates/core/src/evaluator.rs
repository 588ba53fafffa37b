//! Objective evaluation: per-frame RMSE of log-magnitude spectra between
//! target and converted speech, in dB, aggregated over a corpus.
//!
//! Frame counts may differ (by a frame or two of trailing audio); both
//! spectrograms are truncated to the shorter before comparison. No time
//! alignment beyond that is performed.

use crate::error::{Error, Result};
use crate::features::stft_magnitudes;
use crate::signal::WaveformSignal;
use rayon::prelude::*;

/// RMSE in dB between two magnitude frames:
/// `sqrt(mean over bins of (20 log10(target/converted))^2)`.
///
/// Inputs must already be floored away from zero (the STFT does this), so
/// the ratio is always finite.
pub fn rmse_frame(target: &[f64], converted: &[f64]) -> Result<f64> {
    if target.len() != converted.len() {
        return Err(Error::ShapeMismatch {
            context: "rmse_frame",
            expected: format!("{} bins", target.len()),
            got: format!("{}", converted.len()),
        });
    }
    if target.is_empty() {
        return Err(Error::EmptyInput("rmse_frame with zero bins".into()));
    }
    let mut acc = 0.0;
    for (t, c) in target.iter().zip(converted) {
        let db = 20.0 * (t / c).log10();
        acc += db * db;
    }
    Ok((acc / target.len() as f64).sqrt())
}

/// Per-utterance evaluation result.
#[derive(Debug, Clone)]
pub struct UtteranceRmse {
    pub mean_db: f64,
    /// Frames actually compared (the shorter of the two).
    pub frames: usize,
    /// How many frames were dropped from the longer signal.
    pub dropped_frames: usize,
}

pub fn rmse_utterance(
    target: &WaveformSignal,
    converted: &WaveformSignal,
) -> Result<UtteranceRmse> {
    let t = stft_magnitudes(target)?;
    let c = stft_magnitudes(converted)?;
    let frames = t.frames().min(c.frames());
    let dropped = t.frames().max(c.frames()) - frames;
    let mut sum = 0.0;
    for m in 0..frames {
        sum += rmse_frame(&t.frame(m), &c.frame(m))?;
    }
    Ok(UtteranceRmse {
        mean_db: sum / frames as f64,
        frames,
        dropped_frames: dropped,
    })
}

#[derive(Debug, Clone)]
pub struct UtteranceEntry {
    pub name: String,
    pub rmse: UtteranceRmse,
}

/// Corpus-level report. The headline number is frame-weighted; the
/// utterance-weighted mean is reported alongside for transparency.
#[derive(Debug, Clone)]
pub struct RmseReport {
    pub utterances: Vec<UtteranceEntry>,
    pub frame_weighted_db: f64,
    pub utterance_weighted_db: f64,
    pub total_frames: usize,
}

pub fn evaluate_corpus(
    pairs: Vec<(String, WaveformSignal, WaveformSignal)>,
) -> Result<RmseReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no utterance pairs to evaluate".into()));
    }
    let utterances: Vec<UtteranceEntry> = pairs
        .into_par_iter()
        .map(|(name, target, converted)| {
            rmse_utterance(&target, &converted).map(|rmse| UtteranceEntry { name, rmse })
        })
        .collect::<Result<Vec<_>>>()?;
    let total_frames: usize = utterances.iter().map(|u| u.rmse.frames).sum();
    let frame_weighted_db = utterances
        .iter()
        .map(|u| u.rmse.mean_db * u.rmse.frames as f64)
        .sum::<f64>()
        / total_frames as f64;
    let utterance_weighted_db =
        utterances.iter().map(|u| u.rmse.mean_db).sum::<f64>() / utterances.len() as f64;
    Ok(RmseReport {
        utterances,
        frame_weighted_db,
        utterance_weighted_db,
        total_frames,
    })
}

impl RmseReport {
    /// Machine-readable report: one tab-separated record per utterance
    /// (name, frames, RMSE dB), then a corpus line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\n",
                u.name, u.rmse.frames, u.rmse.mean_db
            ));
        }
        out.push_str(&format!(
            "corpus\t{}\t{:.6}\n",
            self.total_frames, self.frame_weighted_db
        ));
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&format!(
                "{:<40} {:>8} frames  {:>10.3} dB\n",
                u.name, u.rmse.frames, u.rmse.mean_db
            ));
        }
        out.push_str(&format!(
            "corpus mean (frame-weighted):     {:.3} dB over {} frames\n",
            self.frame_weighted_db, self.total_frames
        ));
        out.push_str(&format!(
            "corpus mean (utterance-weighted): {:.3} dB over {} utterances\n",
            self.utterance_weighted_db,
            self.utterances.len()
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn noise(n: usize, amp: f64, seed: u64) -> WaveformSignal {
        let mut rng = SplitMix64::new(seed);
        WaveformSignal::new((0..n).map(|_| rng.uniform(amp)).collect(), 16_000)
    }

    #[test]
    fn identical_frames_are_zero_db() {
        let frame = vec![1.0, 0.5, 2.0, 1e-3];
        assert_eq!(rmse_frame(&frame, &frame).unwrap(), 0.0);
    }

    #[test]
    fn constant_ratio_is_twenty_db_per_decade() {
        let target = vec![1.0, 0.5, 2.0, 0.25];
        let converted: Vec<f64> = target.iter().map(|v| v / 10.0).collect();
        let db = rmse_frame(&target, &converted).unwrap();
        assert!((db - 20.0).abs() < 1e-9, "{db}");
    }

    #[test]
    fn half_matched_half_decade_frame() {
        let target = vec![1.0, 1.0, 3.0, 3.0];
        let converted = vec![1.0, 1.0, 0.3, 0.3];
        let db = rmse_frame(&target, &converted).unwrap();
        assert!((db - 200.0f64.sqrt()).abs() < 1e-9, "{db}");
        assert!((db - 14.142135623730951).abs() < 1e-9);
    }

    #[test]
    fn mismatched_bins_rejected() {
        assert!(rmse_frame(&[1.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn identity_utterance_is_zero() {
        let x = noise(16_000, 0.4, 7);
        let r = rmse_utterance(&x, &x).unwrap();
        assert_eq!(r.mean_db, 0.0);
        assert_eq!(r.frames, 196);
        assert_eq!(r.dropped_frames, 0);
    }

    #[test]
    fn constant_gain_passes_through_the_linear_stft() {
        let x = noise(8_000, 0.4, 8);
        for gain in [0.1, 0.5, 2.0, 10.0] {
            let scaled = WaveformSignal::new(
                x.samples.iter().map(|v| v * gain).collect(),
                x.sample_rate,
            );
            let r = rmse_utterance(&x, &scaled).unwrap();
            let expected = (20.0 * gain.log10()).abs();
            assert!(
                (r.mean_db - expected).abs() < 1e-6,
                "gain {gain}: {} vs {expected}",
                r.mean_db
            );
        }
    }

    #[test]
    fn rmse_is_symmetric() {
        let a = noise(6_000, 0.3, 9);
        let b = noise(6_000, 0.3, 10);
        let ab = rmse_utterance(&a, &b).unwrap().mean_db;
        let ba = rmse_utterance(&b, &a).unwrap().mean_db;
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
    }

    #[test]
    fn silence_against_speech_is_finite_and_large() {
        let x = noise(8_000, 0.4, 11);
        let silent = WaveformSignal::new(vec![0.0; 8_000], 16_000);
        let r = rmse_utterance(&x, &silent).unwrap();
        assert!(r.mean_db.is_finite());
        assert!(r.mean_db > 60.0, "{}", r.mean_db);
    }

    #[test]
    fn frame_count_mismatch_truncates_and_reports() {
        let a = noise(16_000, 0.4, 12);
        let b = WaveformSignal::new(a.samples[..16_000 - 3 * 80].to_vec(), 16_000);
        let r = rmse_utterance(&a, &b).unwrap();
        assert_eq!(r.frames, 193);
        assert_eq!(r.dropped_frames, 3);
        assert_eq!(r.mean_db, 0.0, "shared prefix is identical");
    }

    #[test]
    fn corpus_aggregation_is_frame_weighted() {
        let a = noise(16_000, 0.4, 13); // 196 frames at 0 dB
        let b = noise(8_000, 0.4, 14); // 96 frames at 20 dB
        let b2 = WaveformSignal::new(b.samples.iter().map(|v| v * 10.0).collect(), 16_000);
        let report = evaluate_corpus(vec![
            ("a".into(), a.clone(), a.clone()),
            ("b".into(), b, b2),
        ])
        .unwrap();
        let frames_a = 196.0;
        let frames_b = 96.0;
        let expected = 20.0 * frames_b / (frames_a + frames_b);
        assert!(
            (report.frame_weighted_db - expected).abs() < 1e-6,
            "{} vs {expected}",
            report.frame_weighted_db
        );
        assert!((report.utterance_weighted_db - 10.0).abs() < 1e-6);
        let tsv = report.to_tsv();
        assert!(tsv.lines().count() == 3);
        assert!(tsv.contains("corpus\t292\t"));
    }
}

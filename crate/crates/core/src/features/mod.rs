//! Local conditioning: PPG ingestion, f0/voicing, per-speaker f0
//! statistics, the log-linear f0 transform and frame-to-sample upsampling.
//!
//! A [`ConditioningTrack`] holds frame-rate features; [`upsample_conditioning`]
//! extends them to sample rate as the stacked matrix
//! `[ppg rows, log-f0 row, vuv row]` that conditions every layer of the
//! model. All operations here are pure; per-utterance extraction
//! parallelizes freely.

mod pitch;
mod stft;

pub use pitch::{estimate_f0_vuv, PitchConfig};
pub use stft::{stft_magnitudes, SpectralFrames};

use crate::compute::Tensor;
use crate::error::{Error, Result};

/// Frame-rate conditioning features for one utterance.
///
/// `ppg` is channel-major `[D x N]` (one column per frame); `f0` is Hz with
/// 0 on unvoiced frames; `vuv` is the binary voicing flag. The invariant
/// `f0[n] > 0 <=> vuv[n] == 1` is enforced at construction.
#[derive(Debug, Clone)]
pub struct ConditioningTrack {
    pub ppg: Tensor,
    pub f0: Vec<f64>,
    pub vuv: Vec<u8>,
    pub frame_hop_s: f64,
}

pub const DEFAULT_FRAME_HOP_S: f64 = 0.005;

impl ConditioningTrack {
    pub fn new(ppg: Tensor, f0: Vec<f64>, vuv: Vec<u8>, frame_hop_s: f64) -> Result<Self> {
        if ppg.shape.len() != 2 || ppg.shape[0] == 0 || ppg.shape[1] == 0 {
            return Err(Error::InvalidData(format!(
                "PPG must be a non-empty [D x N] matrix, got shape {:?}",
                ppg.shape
            )));
        }
        let frames = ppg.shape[1];
        if f0.len() != frames || vuv.len() != frames {
            return Err(Error::ShapeMismatch {
                context: "ConditioningTrack",
                expected: format!("{frames} f0/vuv frames"),
                got: format!("{} f0, {} vuv", f0.len(), vuv.len()),
            });
        }
        ppg.check_finite("ConditioningTrack ppg")?;
        for (n, (&f, &v)) in f0.iter().zip(&vuv).enumerate() {
            if !f.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("f0 frame {n}"),
                });
            }
            if v > 1 {
                return Err(Error::InvalidData(format!(
                    "vuv frame {n} must be 0 or 1, got {v}"
                )));
            }
            if (f > 0.0) != (v == 1) {
                return Err(Error::InvalidData(format!(
                    "frame {n}: f0 {f} inconsistent with vuv {v}"
                )));
            }
        }
        if frame_hop_s <= 0.0 {
            return Err(Error::InvalidConfig("frame hop must be positive".into()));
        }
        Ok(ConditioningTrack {
            ppg,
            f0,
            vuv,
            frame_hop_s,
        })
    }

    pub fn ppg_dim(&self) -> usize {
        self.ppg.shape[0]
    }

    pub fn frames(&self) -> usize {
        self.ppg.shape[1]
    }

    /// Replace the f0 contour, preserving the voicing pattern.
    pub fn with_f0(&self, f0: Vec<f64>) -> Result<Self> {
        ConditioningTrack::new(self.ppg.clone(), f0, self.vuv.clone(), self.frame_hop_s)
    }
}

/// How frame vectors are extended to sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    /// Repeat each frame `ratio` times. Exactly invertible by taking every
    /// ratio-th column.
    #[default]
    Hold,
    /// Linearly interpolate PPG and log-f0 between frame centers; voicing
    /// stays binary (held).
    Linear,
}

/// Sample-rate conditioning matrix `[(D+2) x T]`, rows ordered
/// `[ppg channels, log-f0, vuv]`, `T = frames * ratio` exactly.
#[derive(Debug, Clone)]
pub struct UpsampledConditioning {
    pub data: Tensor,
    pub ppg_dim: usize,
    pub ratio: usize,
}

impl UpsampledConditioning {
    pub fn channels(&self) -> usize {
        self.data.shape[0]
    }

    pub fn samples(&self) -> usize {
        self.data.shape[1]
    }

    pub fn log_f0_row(&self) -> &[f64] {
        let t = self.samples();
        &self.data.data[self.ppg_dim * t..(self.ppg_dim + 1) * t]
    }

    pub fn vuv_row(&self) -> &[f64] {
        let t = self.samples();
        &self.data.data[(self.ppg_dim + 1) * t..(self.ppg_dim + 2) * t]
    }
}

/// Extend a frame-rate track to sample rate.
///
/// The f0 channel carries ln(f0) with unvoiced gaps linearly interpolated
/// at frame granularity (zero at utterance edges with no voiced anchor);
/// the separate vuv channel keeps the voicing decision binary.
pub fn upsample_conditioning(
    track: &ConditioningTrack,
    sample_rate: u32,
    mode: UpsampleMode,
) -> Result<UpsampledConditioning> {
    if track.frames() == 0 {
        return Err(Error::EmptyInput("conditioning track has no frames".into()));
    }
    let exact = sample_rate as f64 * track.frame_hop_s;
    let ratio = exact.round();
    if ratio < 1.0 || (exact - ratio).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "sample rate {sample_rate} times frame hop {} s is not an integer ({exact})",
            track.frame_hop_s
        )));
    }
    let ratio = ratio as usize;
    let d = track.ppg_dim();
    let n = track.frames();
    let t_len = n * ratio;
    let log_f0 = interpolated_log_f0(&track.f0, &track.vuv);

    let channels = d + 2;
    let mut data = vec![0.0; channels * t_len];
    for t in 0..t_len {
        let frame = t / ratio;
        match mode {
            UpsampleMode::Hold => {
                for c in 0..d {
                    data[c * t_len + t] = track.ppg.at2(c, frame);
                }
                data[d * t_len + t] = log_f0[frame];
            }
            UpsampleMode::Linear => {
                // interpolate between this frame and the next; the last
                // frame extends by hold
                let frac = (t % ratio) as f64 / ratio as f64;
                let next = (frame + 1).min(n - 1);
                for c in 0..d {
                    let a = track.ppg.at2(c, frame);
                    let b = track.ppg.at2(c, next);
                    data[c * t_len + t] = a + (b - a) * frac;
                }
                let a = log_f0[frame];
                let b = log_f0[next];
                data[d * t_len + t] = a + (b - a) * frac;
            }
        }
        data[(d + 1) * t_len + t] = track.vuv[frame] as f64;
    }
    Ok(UpsampledConditioning {
        data: Tensor {
            shape: vec![channels, t_len],
            data,
        },
        ppg_dim: d,
        ratio,
    })
}

/// ln(f0) per frame with unvoiced gaps bridged by linear interpolation
/// between the surrounding voiced frames. Runs before the first / after the
/// last voiced frame are zero.
fn interpolated_log_f0(f0: &[f64], vuv: &[u8]) -> Vec<f64> {
    let n = f0.len();
    let mut out = vec![0.0; n];
    let voiced: Vec<usize> = (0..n).filter(|&i| vuv[i] == 1).collect();
    if voiced.is_empty() {
        return out;
    }
    for &i in &voiced {
        out[i] = f0[i].ln();
    }
    for w in voiced.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b > a + 1 {
            let (ya, yb) = (out[a], out[b]);
            let span = (b - a) as f64;
            for i in (a + 1)..b {
                out[i] = ya + (yb - ya) * (i - a) as f64 / span;
            }
        }
    }
    out
}

/// Mean / standard deviation of ln(f0) over voiced frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Stats {
    pub mu: f64,
    pub sigma: f64,
    pub frame_count: usize,
}

/// Pool voiced frames across tracks and compute log-domain statistics.
pub fn f0_statistics(tracks: &[ConditioningTrack]) -> Result<F0Stats> {
    f0_statistics_from_contours(tracks.iter().map(|t| (t.f0.as_slice(), t.vuv.as_slice())))
}

pub fn f0_statistics_from_contours<'a, I>(contours: I) -> Result<F0Stats>
where
    I: IntoIterator<Item = (&'a [f64], &'a [u8])>,
{
    let mut logs = Vec::new();
    for (f0, vuv) in contours {
        for (&f, &v) in f0.iter().zip(vuv) {
            if v == 1 {
                logs.push(f.ln());
            }
        }
    }
    if logs.is_empty() {
        return Err(Error::EmptyInput(
            "no voiced frames to compute f0 statistics from".into(),
        ));
    }
    let n = logs.len() as f64;
    let mu = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / n;
    Ok(F0Stats {
        mu,
        sigma: var.sqrt(),
        frame_count: logs.len(),
    })
}

/// Log-linear f0 conversion from source to target speaker statistics.
///
/// Voiced frames map through
/// `exp((ln f - mu_src) * sigma_tgt / sigma_src + mu_tgt)`; unvoiced frames
/// (f0 = 0) pass through unchanged.
pub fn transform_f0(f0: &[f64], source: &F0Stats, target: &F0Stats) -> Result<Vec<f64>> {
    if f0.iter().all(|&f| f <= 0.0) {
        log::warn!("transform_f0: input is entirely unvoiced, returning unchanged");
        return Ok(f0.to_vec());
    }
    if source.sigma == 0.0 && target.sigma != 0.0 {
        return Err(Error::InvalidData(
            "source f0 deviation is zero with nonzero target deviation; scaling undefined".into(),
        ));
    }
    let scale = if source.sigma == 0.0 {
        0.0
    } else {
        target.sigma / source.sigma
    };
    Ok(f0
        .iter()
        .map(|&f| {
            if f > 0.0 {
                ((f.ln() - source.mu) * scale + target.mu).exp()
            } else {
                0.0
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn track(d: usize, f0: Vec<f64>, hop: f64) -> ConditioningTrack {
        let n = f0.len();
        let vuv: Vec<u8> = f0.iter().map(|&f| (f > 0.0) as u8).collect();
        let ppg = Tensor::new(vec![d, n], (0..d * n).map(|i| i as f64).collect()).unwrap();
        ConditioningTrack::new(ppg, f0, vuv, hop).unwrap()
    }

    #[test]
    fn construction_enforces_voicing_consistency() {
        let ppg = Tensor::zeros(vec![2, 3]);
        // f0 > 0 with vuv == 0 is inconsistent
        assert!(ConditioningTrack::new(ppg, vec![100.0, 0.0, 0.0], vec![0, 0, 0], 0.005).is_err());
    }

    #[test]
    fn ratio_and_length() {
        let t = track(2, vec![100.0, 110.0, 120.0], 0.005);
        let up = upsample_conditioning(&t, 16_000, UpsampleMode::Hold).unwrap();
        assert_eq!(up.ratio, 80);
        assert_eq!(up.samples(), 240);
        assert_eq!(up.channels(), 4);
    }

    #[test]
    fn non_integer_ratio_rejected() {
        let t = track(1, vec![100.0], 0.0053);
        assert!(upsample_conditioning(&t, 16_000, UpsampleMode::Hold).is_err());
    }

    #[test]
    fn hold_repeats_each_frame() {
        let ppg = Tensor::new(vec![1, 2], vec![3.0, 7.0]).unwrap();
        let t = ConditioningTrack::new(ppg, vec![0.0, 0.0], vec![0, 0], 2.0).unwrap();
        let up = upsample_conditioning(&t, 1, UpsampleMode::Hold).unwrap();
        assert_eq!(up.ratio, 2);
        assert_eq!(&up.data.data[0..4], &[3.0, 3.0, 7.0, 7.0]);
    }

    #[test]
    fn all_unvoiced_gives_zero_f0_and_vuv_rows() {
        let t = track(2, vec![0.0, 0.0, 0.0], 0.005);
        let up = upsample_conditioning(&t, 16_000, UpsampleMode::Hold).unwrap();
        assert!(up.log_f0_row().iter().all(|&v| v == 0.0));
        assert!(up.vuv_row().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unvoiced_gaps_are_bridged_in_log_domain() {
        let f0 = vec![0.0, 100.0, 0.0, 0.0, 400.0, 0.0];
        let vuv = vec![0u8, 1, 0, 0, 1, 0];
        let logs = interpolated_log_f0(&f0, &vuv);
        assert_eq!(logs[0], 0.0, "leading edge has no anchor");
        assert_eq!(logs[5], 0.0, "trailing edge has no anchor");
        assert!((logs[1] - 100.0f64.ln()).abs() < 1e-15);
        assert!((logs[4] - 400.0f64.ln()).abs() < 1e-15);
        let third = (400.0f64.ln() - 100.0f64.ln()) / 3.0;
        assert!((logs[2] - (100.0f64.ln() + third)).abs() < 1e-12);
        assert!((logs[3] - (100.0f64.ln() + 2.0 * third)).abs() < 1e-12);
    }

    #[test]
    fn downsampling_recovers_ppg_exactly() {
        let t = track(3, vec![100.0, 0.0, 150.0, 200.0], 0.005);
        let up = upsample_conditioning(&t, 16_000, UpsampleMode::Hold).unwrap();
        let t_len = up.samples();
        for c in 0..3 {
            for n in 0..t.frames() {
                assert_eq!(up.data.data[c * t_len + n * up.ratio], t.ppg.at2(c, n));
            }
        }
    }

    #[test]
    fn linear_mode_interpolates_between_frames() {
        let ppg = Tensor::new(vec![1, 2], vec![0.0, 4.0]).unwrap();
        let t = ConditioningTrack::new(ppg, vec![0.0, 0.0], vec![0, 0], 4.0).unwrap();
        let up = upsample_conditioning(&t, 1, UpsampleMode::Linear).unwrap();
        assert_eq!(&up.data.data[0..8], &[0.0, 1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn stats_single_frame() {
        let s = f0_statistics(&[track(1, vec![100.0], 0.005)]).unwrap();
        assert!((s.mu - 100.0f64.ln()).abs() < 1e-15);
        assert_eq!(s.sigma, 0.0);
        assert_eq!(s.frame_count, 1);
    }

    #[test]
    fn stats_two_frames_closed_form() {
        let s = f0_statistics(&[track(1, vec![100.0, 400.0], 0.005)]).unwrap();
        assert!((s.mu - 200.0f64.ln()).abs() < 1e-12, "mu={}", s.mu);
        assert!((s.sigma - 2.0f64.ln()).abs() < 1e-12, "sigma={}", s.sigma);
    }

    #[test]
    fn stats_pool_across_tracks() {
        let a = track(1, vec![100.0, 0.0], 0.005);
        let b = track(1, vec![0.0, 400.0], 0.005);
        let s = f0_statistics(&[a, b]).unwrap();
        assert!((s.mu - 200.0f64.ln()).abs() < 1e-12);
        assert_eq!(s.frame_count, 2);
    }

    #[test]
    fn stats_require_voiced_frames() {
        assert!(f0_statistics(&[track(1, vec![0.0, 0.0], 0.005)]).is_err());
    }

    #[test]
    fn transform_identity_under_equal_stats() {
        let stats = F0Stats {
            mu: 150.0f64.ln(),
            sigma: 0.4,
            frame_count: 10,
        };
        let f0 = vec![100.0, 0.0, 180.0, 220.0];
        let out = transform_f0(&f0, &stats, &stats).unwrap();
        for (a, b) in f0.iter().zip(&out) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn transform_pure_mean_shift() {
        let src = F0Stats {
            mu: 100.0f64.ln(),
            sigma: 1.0,
            frame_count: 10,
        };
        let tgt = F0Stats {
            mu: 200.0f64.ln(),
            sigma: 1.0,
            frame_count: 10,
        };
        let out = transform_f0(&[100.0], &src, &tgt).unwrap();
        assert!((out[0] - 200.0).abs() < 1e-9, "{}", out[0]);
    }

    #[test]
    fn transform_closed_form_scaling() {
        let src = F0Stats {
            mu: 100.0f64.ln(),
            sigma: 0.5,
            frame_count: 10,
        };
        let tgt = F0Stats {
            mu: 100.0f64.ln(),
            sigma: 1.0,
            frame_count: 10,
        };
        let out = transform_f0(&[150.0], &src, &tgt).unwrap();
        // 100 * (150/100)^2 = 225
        assert!((out[0] - 225.0).abs() / 225.0 < 1e-9, "{}", out[0]);
    }

    #[test]
    fn transform_preserves_voicing_and_rejects_degenerate_scale() {
        let src = F0Stats {
            mu: 5.0,
            sigma: 0.0,
            frame_count: 1,
        };
        let tgt = F0Stats {
            mu: 5.0,
            sigma: 0.3,
            frame_count: 9,
        };
        assert!(transform_f0(&[100.0, 0.0], &src, &tgt).is_err());

        let src = F0Stats {
            mu: 100.0f64.ln(),
            sigma: 0.2,
            frame_count: 5,
        };
        let out = transform_f0(&[120.0, 0.0, 90.0], &src, &tgt).unwrap();
        assert!(out[0] > 0.0 && out[2] > 0.0);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn all_unvoiced_passes_through_unchanged() {
        let stats = F0Stats {
            mu: 1.0,
            sigma: 1.0,
            frame_count: 3,
        };
        let f0 = vec![0.0, 0.0];
        assert_eq!(transform_f0(&f0, &stats, &stats).unwrap(), f0);
    }

    #[test]
    fn converting_with_own_stats_reaches_target_stats() {
        // algebraic identity: after conversion, voiced log-f0 has exactly
        // the target mean/deviation
        let f0: Vec<f64> = (0..50)
            .map(|i| if i % 7 == 0 { 0.0 } else { 90.0 + 3.0 * i as f64 })
            .collect();
        let vuv: Vec<u8> = f0.iter().map(|&f| (f > 0.0) as u8).collect();
        let src = f0_statistics_from_contours([(f0.as_slice(), vuv.as_slice())]).unwrap();
        let tgt = F0Stats {
            mu: 210.0f64.ln(),
            sigma: 0.37,
            frame_count: 99,
        };
        let out = transform_f0(&f0, &src, &tgt).unwrap();
        let re = f0_statistics_from_contours([(out.as_slice(), vuv.as_slice())]).unwrap();
        assert!((re.mu - tgt.mu).abs() < 1e-9, "mu {} vs {}", re.mu, tgt.mu);
        assert!((re.sigma - tgt.sigma).abs() < 1e-9, "sigma {} vs {}", re.sigma, tgt.sigma);
    }

    proptest! {
        #[test]
        fn transform_is_strictly_increasing_on_voiced_frames(
            a in 60.0f64..350.0,
            b in 60.0f64..350.0,
            mu_t in 4.0f64..6.0,
            sigma_ratio in 0.2f64..3.0,
        ) {
            prop_assume!((a - b).abs() > 1e-9);
            let src = F0Stats { mu: 5.0, sigma: 0.4, frame_count: 10 };
            let tgt = F0Stats { mu: mu_t, sigma: 0.4 * sigma_ratio, frame_count: 10 };
            let out = transform_f0(&[a, b], &src, &tgt).unwrap();
            if a < b {
                prop_assert!(out[0] < out[1]);
            } else {
                prop_assert!(out[0] > out[1]);
            }
        }
    }
}

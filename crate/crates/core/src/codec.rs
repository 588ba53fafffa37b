//! μ-law companding between real-valued waveforms and quantized classes.
//!
//! Encoding compresses amplitude logarithmically before uniform
//! quantization into `Q` classes; decoding returns the center of each
//! quantization bin, which halves the worst-case reconstruction error and
//! makes encode(decode(c)) == c hold for every class.

use crate::error::{Error, Result};
use crate::signal::{ClassSequence, WaveformSignal};

/// μ-law quantizer configuration. `Q` classes, compression constant
/// `mu = Q - 1`. The default of 256 classes is the standard choice for
/// categorical waveform models; `Q` stays configurable up to 65536 for
/// higher-depth variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MuLawConfig {
    pub classes: usize,
}

impl Default for MuLawConfig {
    fn default() -> Self {
        MuLawConfig { classes: 256 }
    }
}

impl MuLawConfig {
    pub fn new(classes: usize) -> Result<Self> {
        if !(2..=65536).contains(&classes) {
            return Err(Error::InvalidConfig(format!(
                "class count must be in [2, 65536], got {classes}"
            )));
        }
        Ok(MuLawConfig { classes })
    }

    pub fn mu(&self) -> f64 {
        (self.classes - 1) as f64
    }

    /// The class a zero sample encodes to; used as pre-utterance history.
    pub fn silence_class(&self) -> u16 {
        encode_sample(0.0, *self)
    }

    pub fn validate_classes(&self, classes: &[u16]) -> Result<()> {
        for &c in classes {
            if c as usize >= self.classes {
                return Err(Error::ClassOutOfRange {
                    class: c as usize,
                    classes: self.classes,
                });
            }
        }
        Ok(())
    }
}

/// Encode one sample. Out-of-range input is clipped to [-1, 1] first.
pub fn encode_sample(x: f64, config: MuLawConfig) -> u16 {
    let q = config.classes as f64;
    let mu = config.mu();
    let x = x.clamp(-1.0, 1.0);
    let y = x.signum() * (1.0 + mu * x.abs()).ln() / (1.0 + mu).ln();
    let class = ((y + 1.0) / 2.0 * q).floor();
    (class.clamp(0.0, q - 1.0)) as u16
}

/// Decode one class to the center of its bin.
pub fn decode_sample(class: u16, config: MuLawConfig) -> Result<f64> {
    if class as usize >= config.classes {
        return Err(Error::ClassOutOfRange {
            class: class as usize,
            classes: config.classes,
        });
    }
    let q = config.classes as f64;
    let mu = config.mu();
    let y = 2.0 * (class as f64 + 0.5) / q - 1.0;
    Ok(y.signum() * ((1.0 + mu).powf(y.abs()) - 1.0) / mu)
}

pub fn mulaw_encode(signal: &WaveformSignal, config: MuLawConfig) -> ClassSequence {
    signal
        .samples
        .iter()
        .map(|&x| encode_sample(x, config))
        .collect()
}

pub fn mulaw_decode(
    classes: &[u16],
    config: MuLawConfig,
    sample_rate: u32,
) -> Result<WaveformSignal> {
    let samples = classes
        .iter()
        .map(|&c| decode_sample(c, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(WaveformSignal::new(samples, sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const Q256: MuLawConfig = MuLawConfig { classes: 256 };

    #[test]
    fn zero_maps_to_center_class() {
        assert_eq!(encode_sample(0.0, Q256), 128);
        assert_eq!(Q256.silence_class(), 128);
    }

    #[test]
    fn endpoints() {
        assert_eq!(encode_sample(1.0, Q256), 255);
        assert_eq!(encode_sample(-1.0, Q256), 0);
        // clipping
        assert_eq!(encode_sample(7.5, Q256), 255);
        assert_eq!(encode_sample(-7.5, Q256), 0);
    }

    #[test]
    fn center_class_decodes_near_zero() {
        let x = decode_sample(128, Q256).unwrap();
        assert!((x - 8.5871e-5).abs() < 1e-8, "got {x}");
    }

    #[test]
    fn decode_is_odd_symmetric() {
        let lo = decode_sample(0, Q256).unwrap();
        let hi = decode_sample(255, Q256).unwrap();
        assert!((lo + hi).abs() < 1e-15, "{lo} vs {hi}");
    }

    #[test]
    fn encode_monotone_on_dense_grid() {
        let mut prev = 0u16;
        let mut first = true;
        let mut x = -1.0f64;
        while x <= 1.0 {
            let c = encode_sample(x, Q256);
            if !first {
                assert!(c >= prev, "encode not monotone at x={x}: {prev} -> {c}");
            }
            prev = c;
            first = false;
            x += 1e-4;
        }
    }

    #[test]
    fn round_trip_error_bound_on_dense_grid() {
        // brute-force oracle: worst |decode(encode(x)) - x| over the grid
        let mut worst = 0.0f64;
        let mut x = -1.0f64;
        while x <= 1.0 {
            let back = decode_sample(encode_sample(x, Q256), Q256).unwrap();
            worst = worst.max((back - x).abs());
            x += 1e-4;
        }
        assert!(worst <= 0.022, "worst round-trip error {worst}");
        // the bound is tight to the top bin, not loose
        assert!(worst > 0.02, "worst round-trip error suspiciously small: {worst}");
    }

    #[test]
    fn decode_rejects_out_of_range() {
        assert!(decode_sample(255, Q256).is_ok());
        let q16 = MuLawConfig { classes: 16 };
        assert!(decode_sample(16, q16).is_err());
    }

    #[test]
    fn class_count_bounds() {
        assert!(MuLawConfig::new(1).is_err());
        assert!(MuLawConfig::new(2).is_ok());
        assert!(MuLawConfig::new(65536).is_ok());
        assert!(MuLawConfig::new(65537).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip_is_identity_on_classes(c in 0u16..256) {
            let x = decode_sample(c, Q256).unwrap();
            prop_assert_eq!(encode_sample(x, Q256), c);
        }

        #[test]
        fn reconstruction_error_bound_holds_for_random_samples(x in -1.0f64..1.0) {
            let back = decode_sample(encode_sample(x, Q256), Q256).unwrap();
            prop_assert!((back - x).abs() <= 0.022);
        }

        #[test]
        fn encode_is_order_preserving(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(encode_sample(lo, Q256) <= encode_sample(hi, Q256));
        }

        #[test]
        fn negation_mirrors_classes(c in 0u16..256) {
            // bin centers are symmetric, so negating a decoded center lands
            // in the mirrored bin
            let x = decode_sample(c, Q256).unwrap();
            prop_assert_eq!(encode_sample(-x, Q256), 255 - c);
        }
    }

    #[test]
    fn round_trip_on_all_classes_for_odd_q() {
        for q in [2usize, 3, 17, 256, 1024] {
            let cfg = MuLawConfig { classes: q };
            for c in 0..q as u16 {
                let x = decode_sample(c, cfg).unwrap();
                assert_eq!(encode_sample(x, cfg), c, "Q={q} class {c}");
            }
        }
    }
}

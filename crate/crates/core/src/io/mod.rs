//! File formats at the pipeline boundary: WAV audio, VCF1 feature
//! matrices, and f0 statistics as two-line text.

mod vcf1;
mod wav;

pub use vcf1::{read_vcf1, write_vcf1, write_vcf1_column};
pub use wav::{read_wav, write_wav, REQUIRED_SAMPLE_RATE};

use crate::error::{Error, Result};
use crate::features::F0Stats;
use std::fs;
use std::path::Path;

/// Write f0 statistics as `mu=<float>` / `sigma=<float>` lines.
pub fn write_f0_stats(path: &Path, stats: &F0Stats) -> Result<()> {
    let text = format!("mu={}\nsigma={}\n", stats.mu, stats.sigma);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_f0_stats(path: &Path) -> Result<F0Stats> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |detail: String| Error::MalformedFile {
        format: "f0 stats",
        path: path.to_path_buf(),
        detail,
    };
    let mut mu = None;
    let mut sigma = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(malformed(format!("bad line '{line}'")));
        };
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|e| malformed(format!("bad value for {key}: {e}")))?;
        match key.trim() {
            "mu" => mu = Some(value),
            "sigma" => sigma = Some(value),
            _ => {}
        }
    }
    let mu = mu.ok_or_else(|| malformed("missing mu".into()))?;
    let sigma = sigma.ok_or_else(|| malformed("missing sigma".into()))?;
    if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
        return Err(malformed(format!("invalid stats mu={mu} sigma={sigma}")));
    }
    Ok(F0Stats {
        mu,
        sigma,
        frame_count: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f0_stats_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f0.stats");
        let stats = F0Stats {
            mu: 5.234_119_871_234,
            sigma: 0.173_511,
            frame_count: 321,
        };
        write_f0_stats(&path, &stats).unwrap();
        let back = read_f0_stats(&path).unwrap();
        assert_eq!(back.mu.to_bits(), stats.mu.to_bits());
        assert_eq!(back.sigma.to_bits(), stats.sigma.to_bits());
    }

    #[test]
    fn f0_stats_rejects_nonsense() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.stats");
        fs::write(&path, "mu=5.0\n").unwrap();
        assert!(read_f0_stats(&path).is_err());
        fs::write(&path, "mu=5.0\nsigma=-1.0\n").unwrap();
        assert!(read_f0_stats(&path).is_err());
        fs::write(&path, "mu=abc\nsigma=1.0\n").unwrap();
        assert!(read_f0_stats(&path).is_err());
    }
}

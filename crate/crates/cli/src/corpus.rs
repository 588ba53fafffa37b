//! Corpus directory conventions: `<name>.wav` paired with
//! `<name>.ppg.vcf1` by stem; unpaired files warn and are skipped.

use std::path::{Path, PathBuf};
use wavevc::compute::Tensor;
use wavevc::features::{estimate_f0_vuv, ConditioningTrack, PitchConfig, UpsampleMode};
use wavevc::io;
use wavevc::trainer::{prepare_utterance, PreparedUtterance};
use wavevc::wavenet::ModelConfig;
use wavevc::{Error, Result};

pub struct CorpusPair {
    pub name: String,
    pub wav: PathBuf,
    pub ppg: PathBuf,
}

pub fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no .wav files in {}",
            dir.display()
        )));
    }
    Ok(wavs)
}

pub fn paired_corpus(dir: &Path) -> Result<Vec<CorpusPair>> {
    let mut pairs = Vec::new();
    for wav in wav_files(dir)? {
        let stem = wav
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let ppg = wav.with_file_name(format!("{stem}.ppg.vcf1"));
        if ppg.exists() {
            pairs.push(CorpusPair {
                name: stem,
                wav,
                ppg,
            });
        } else {
            log::warn!("skipping {}: no matching {stem}.ppg.vcf1", wav.display());
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no paired .wav / .ppg.vcf1 files in {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

/// PPG dimension shared by the whole corpus; disagreement is an error.
pub fn ppg_dimension(pairs: &[CorpusPair]) -> Result<usize> {
    let mut dim = None;
    for pair in pairs {
        let frames = io::read_vcf1(&pair.ppg)?;
        let d = frames.shape[1];
        match dim {
            None => dim = Some(d),
            Some(existing) if existing != d => {
                return Err(Error::InvalidData(format!(
                    "PPG dimension mismatch: '{}' has {d} but earlier files have {existing}",
                    pair.name
                )));
            }
            _ => {}
        }
    }
    Ok(dim.expect("paired_corpus guarantees at least one pair"))
}

/// Load, align and quantize every pair for training: PPG from file, f0 and
/// voicing estimated from the target speaker's own audio.
pub fn prepare_corpus(
    pairs: &[CorpusPair],
    model: &ModelConfig,
    pitch: &PitchConfig,
    upsample: UpsampleMode,
) -> Result<Vec<PreparedUtterance>> {
    let mut utterances = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let signal = io::read_wav(&pair.wav)?;
        let ppg_frames = io::read_vcf1(&pair.ppg)?;
        let (f0, vuv) = estimate_f0_vuv(&signal, pitch)?;
        let n_ppg = ppg_frames.shape[0];
        let n_audio = f0.len();
        if n_ppg.abs_diff(n_audio) > 1 {
            return Err(Error::InvalidData(format!(
                "utterance '{}': PPG has {n_ppg} frames but audio yields {n_audio}",
                pair.name
            )));
        }
        let frames = n_ppg.min(n_audio);
        let d = ppg_frames.shape[1];
        let mut ppg = Tensor::zeros(vec![d, frames]);
        for n in 0..frames {
            for c in 0..d {
                ppg.data[c * frames + n] = ppg_frames.data[n * d + c];
            }
        }
        let track = ConditioningTrack::new(
            ppg,
            f0[..frames].to_vec(),
            vuv[..frames].to_vec(),
            pitch.frame_hop_s,
        )?;
        utterances.push(prepare_utterance(
            &pair.name, &signal, &track, model, upsample,
        )?);
    }
    Ok(utterances)
}

/// Same-named WAVs present in both directories.
pub fn matched_wavs(
    target_dir: &Path,
    converted_dir: &Path,
) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut out = Vec::new();
    for target in wav_files(target_dir)? {
        let name = target
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let converted = converted_dir.join(&name);
        if converted.exists() {
            out.push((name, target, converted));
        } else {
            log::warn!("no converted counterpart for {name}");
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no matching WAV names between {} and {}",
            target_dir.display(),
            converted_dir.display()
        )));
    }
    Ok(out)
}

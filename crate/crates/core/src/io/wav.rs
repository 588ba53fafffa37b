//! RIFF WAV reading and writing, pinned to the pipeline's audio contract:
//! 16-bit signed PCM, mono, 16 kHz. Anything else is rejected with an error
//! naming what was found.

use crate::error::{Error, Result};
use crate::signal::WaveformSignal;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const REQUIRED_SAMPLE_RATE: u32 = 16_000;

pub fn read_wav(path: &Path) -> Result<WaveformSignal> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let unsupported = |detail: String| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(unsupported("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(unsupported(format!(
                "chunk {:?} overruns the file",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(unsupported("fmt chunk too small".into()));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => {
                data = Some(body);
            }
            _ => {}
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
        if data.is_some() && fmt.is_some() {
            break;
        }
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| unsupported("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| unsupported("missing data chunk".into()))?;
    if format != 1 {
        return Err(unsupported(format!(
            "encoding tag {format}, expected 1 (PCM)"
        )));
    }
    if bits != 16 {
        return Err(unsupported(format!("{bits}-bit samples, expected 16")));
    }
    if channels != 1 {
        return Err(unsupported(format!("{channels} channels, expected mono")));
    }
    if rate != REQUIRED_SAMPLE_RATE {
        return Err(unsupported(format!(
            "sample rate {rate} Hz, expected {REQUIRED_SAMPLE_RATE} Hz"
        )));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(WaveformSignal::new(samples, rate))
}

pub fn write_wav(path: &Path, signal: &WaveformSignal) -> Result<()> {
    let data_len = signal.len() * 2;
    let mut buf = Vec::with_capacity(44 + data_len);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&signal.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(signal.sample_rate * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &x in &signal.samples {
        let v = (x.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

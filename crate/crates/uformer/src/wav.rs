//! RIFF/WAVE reader and writer for mono 16 kHz signed 16-bit PCM.
//!
//! Anything else (other rates, channel counts, sample formats) is refused
//! with an error naming the offending field.

use std::fs;
use std::path::Path;

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Reads a mono 16 kHz PCM16 WAV file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav(format!("{}: not a RIFF/WAVE file", path.display())));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(&bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::Wav(format!("{}: truncated chunk", path.display())));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Wav(format!("{}: fmt chunk too short", path.display())));
                }
                fmt = Some((
                    u16_at(&bytes, body),
                    u16_at(&bytes, body + 2),
                    u32_at(&bytes, body + 4),
                    u16_at(&bytes, body + 14),
                ));
            }
            b"data" => data = Some(&bytes[body..body + size]),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body + size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt
        .ok_or_else(|| Error::Wav(format!("{}: missing fmt chunk", path.display())))?;
    if format != 1 {
        return Err(Error::Wav(format!(
            "{}: unsupported format tag {format} (only PCM is supported)",
            path.display()
        )));
    }
    if channels != 1 {
        return Err(Error::Wav(format!(
            "{}: {channels} channels (only mono is supported)",
            path.display()
        )));
    }
    if rate != SAMPLE_RATE {
        return Err(Error::Wav(format!(
            "{}: sample rate {rate} Hz (only {SAMPLE_RATE} Hz is supported)",
            path.display()
        )));
    }
    if bits != 16 {
        return Err(Error::Wav(format!(
            "{}: {bits}-bit samples (only 16-bit is supported)",
            path.display()
        )));
    }
    let data = data.ok_or_else(|| Error::Wav(format!("{}: missing data chunk", path.display())))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Wav(format!("{}: non-finite samples", path.display())));
    }
    Ok(Waveform::new(samples))
}

/// Writes a mono 16 kHz PCM16 WAV file, clamping samples to `[-1, 1]`.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let n = wave.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    Ok(())
}

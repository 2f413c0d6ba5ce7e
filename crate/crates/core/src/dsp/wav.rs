//! 16-bit PCM, mono, 16 kHz RIFF/WAVE reading and writing. Anything else is
//! rejected.

use std::fs;
use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const PCM: u16 = 1;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::WavFormat("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::WavFormat("chunk runs past end of file".into()))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::WavFormat("fmt chunk too small".into()));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format != PCM {
                    return Err(Error::WavFormat(format!(
                        "format tag {format}, expected integer PCM (1)"
                    )));
                }
                if channels != 1 {
                    return Err(Error::WavFormat(format!(
                        "{channels} channels, expected mono"
                    )));
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::WavFormat(format!(
                        "sample rate {rate} Hz, expected {SAMPLE_RATE} Hz"
                    )));
                }
                if bits != 16 {
                    return Err(Error::WavFormat(format!(
                        "{bits}-bit samples, expected 16-bit"
                    )));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(Error::WavFormat("data chunk before fmt chunk".into()));
                }
                if size % 2 != 0 {
                    return Err(Error::WavFormat("odd data chunk length".into()));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::new(samples, SAMPLE_RATE);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    Err(Error::WavFormat("no data chunk".into()))
}

/// Samples are clipped to the 16-bit range after scaling by 32768.
pub fn encode(w: &Waveform) -> Result<Vec<u8>> {
    if w.sample_rate() != SAMPLE_RATE {
        return Err(Error::WavFormat(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            w.sample_rate()
        )));
    }
    let data_len = 2 * w.len();
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in w.samples() {
        let q = (s * 32768.0)
            .round()
            .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<Waveform> {
    decode(&fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    fs::write(path, encode(w)?)?;
    Ok(())
}

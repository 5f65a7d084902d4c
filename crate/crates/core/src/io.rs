//! File helpers: atomic writes and a small WAV reader/writer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary sibling of `path`, then renames it into
/// place so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Sample encoding of a WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Mono audio decoded from a WAV file. Multi-channel input is rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Wav {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 3;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

pub fn encode_wav(samples: &[f64], sample_rate: u32, format: WavFormat) -> Vec<u8> {
    let (tag, bits) = match format {
        WavFormat::Pcm16 => (WAVE_FORMAT_PCM, 16u16),
        WavFormat::Float32 => (WAVE_FORMAT_IEEE_FLOAT, 32u16),
    };
    let block_align = bits / 8;
    let data_len = samples.len() as u32 * block_align as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        match format {
            WavFormat::Pcm16 => {
                let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            WavFormat::Float32 => out.extend_from_slice(&(s as f32).to_le_bytes()),
        }
    }
    out
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32, format: WavFormat) -> Result<()> {
    write_atomic(path, &encode_wav(samples, sample_rate, format))
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| parse_err(at, "unexpected end of file"))
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| parse_err(at, "unexpected end of file"))
}

/// Decodes a RIFF/WAVE byte buffer. Supports mono 16-bit PCM and 32-bit
/// float. Errors carry the byte offset where decoding failed.
pub fn decode_wav(bytes: &[u8]) -> Result<Wav> {
    if bytes.get(0..4) != Some(b"RIFF") {
        return Err(parse_err(0, "missing RIFF tag"));
    }
    if bytes.get(8..12) != Some(b"WAVE") {
        return Err(parse_err(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4)? as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 {
                return Err(parse_err(pos + 4, "fmt chunk too short"));
            }
            let mut tag = u16_at(bytes, body)?;
            let channels = u16_at(bytes, body + 2)?;
            let rate = u32_at(bytes, body + 4)?;
            let bits = u16_at(bytes, body + 14)?;
            if tag == WAVE_FORMAT_EXTENSIBLE {
                if size < 40 {
                    return Err(parse_err(pos + 4, "extensible fmt chunk too short"));
                }
                tag = u16_at(bytes, body + 24)?;
            }
            fmt = Some((tag, channels, rate, bits));
        } else if id == b"data" {
            let (tag, channels, rate, bits) = fmt.ok_or_else(|| parse_err(pos, "data chunk before fmt chunk"))?;
            if channels != 1 {
                return Err(parse_err(body - 8, format!("{channels} channels, only mono is supported")));
            }
            let end = body
                .checked_add(size)
                .filter(|e| *e <= bytes.len())
                .ok_or_else(|| parse_err(pos + 4, "data chunk exceeds file"))?;
            let data = &bytes[body..end];
            let samples = match (tag, bits) {
                (WAVE_FORMAT_PCM, 16) => {
                    if data.len() % 2 != 0 {
                        return Err(parse_err(end, "odd byte count in 16-bit data"));
                    }
                    data.chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                        .collect()
                }
                (WAVE_FORMAT_IEEE_FLOAT, 32) => {
                    if data.len() % 4 != 0 {
                        return Err(parse_err(end, "partial sample in 32-bit data"));
                    }
                    data.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect()
                }
                _ => return Err(parse_err(12, format!("unsupported encoding tag {tag} with {bits} bits"))),
            };
            return Ok(Wav {
                sample_rate: rate,
                samples,
            });
        }
        // Chunks are padded to even sizes.
        pos = body + size + (size & 1);
    }
    Err(parse_err(bytes.len(), "no data chunk"))
}

pub fn read_wav(path: &Path) -> Result<Wav> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact_for_f32_values() {
        let s: Vec<f64> = [0.0f32, 0.5, -0.25, 0.123_456_79].iter().map(|v| *v as f64).collect();
        let back = decode_wav(&encode_wav(&s, 8000, WavFormat::Float32)).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back.samples, s);
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let s = vec![0.0, 0.5, -0.5, 0.999];
        let back = decode_wav(&encode_wav(&s, 16000, WavFormat::Pcm16)).unwrap();
        for (a, b) in s.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 16384.0);
        }
    }

    #[test]
    fn malformed_input_reports_offset() {
        assert!(matches!(decode_wav(b"RIFX"), Err(Error::Parse { offset: 0, .. })));
        let mut b = encode_wav(&[0.1; 10], 8000, WavFormat::Float32);
        b.truncate(b.len() - 6);
        assert!(matches!(decode_wav(&b), Err(Error::Parse { offset: 40, .. })));
        let mut stereo = encode_wav(&[0.1; 10], 8000, WavFormat::Pcm16);
        stereo[22] = 2;
        assert!(matches!(decode_wav(&stereo), Err(Error::Parse { .. })));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}

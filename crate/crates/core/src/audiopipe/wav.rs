//! RIFF/WAVE reader and writer for 16-bit PCM and 32-bit float.

use std::fs;
use std::path::Path;

use super::AudioClip;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, message: message.into() })
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn bytes(&self, at: usize, n: usize, what: &str) -> Result<&[u8]> {
        match at.checked_add(n) {
            Some(end) if end <= self.buf.len() => Ok(&self.buf[at..end]),
            _ => fail(at, format!("truncated {what}")),
        }
    }

    fn u16(&self, at: usize, what: &str) -> Result<u16> {
        let b = self.bytes(at, 2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, at: usize, what: &str) -> Result<u32> {
        let b = self.bytes(at, 4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Fmt {
    format: SampleFormat,
    channels: usize,
    rate: u32,
}

fn parse_fmt(r: &Reader, at: usize, size: usize) -> Result<Fmt> {
    if size < 16 {
        return fail(at, format!("fmt chunk of {size} bytes is too short"));
    }
    let mut tag = r.u16(at, "fmt chunk")?;
    let channels = r.u16(at + 2, "fmt chunk")? as usize;
    let rate = r.u32(at + 4, "fmt chunk")?;
    let bits = r.u16(at + 14, "fmt chunk")?;
    if tag == FORMAT_EXTENSIBLE {
        if size < 40 {
            return fail(at, "extensible fmt chunk is too short");
        }
        tag = r.u16(at + 24, "fmt subformat")?;
    }
    if channels == 0 {
        return fail(at + 2, "zero channels");
    }
    if rate == 0 {
        return fail(at + 4, "zero sample rate");
    }
    let format = match (tag, bits) {
        (FORMAT_PCM, 16) => SampleFormat::Pcm16,
        (FORMAT_FLOAT, 32) => SampleFormat::Float32,
        (FORMAT_PCM | FORMAT_FLOAT, b) => return fail(at + 14, format!("unsupported bit depth {b}")),
        (t, _) => return fail(at, format!("unsupported codec tag {t:#06x}")),
    };
    Ok(Fmt { format, channels, rate })
}

/// Decodes a WAV byte buffer. Multichannel audio is averaged to mono.
pub fn read_wav(buf: &[u8]) -> Result<AudioClip> {
    let r = Reader { buf };
    if r.bytes(0, 4, "RIFF header")? != b"RIFF" {
        return fail(0, "missing RIFF magic");
    }
    if r.bytes(8, 4, "RIFF header")? != b"WAVE" {
        return fail(8, "missing WAVE form type");
    }
    let mut at = 12;
    let mut fmt = None;
    while at + 8 <= buf.len() {
        let id = r.bytes(at, 4, "chunk id")?;
        let size = r.u32(at + 4, "chunk size")? as usize;
        let body = at + 8;
        match id {
            b"fmt " => fmt = Some(parse_fmt(&r, body, size)?),
            b"data" => {
                let Some(fmt) = fmt else {
                    return fail(at, "data chunk before fmt chunk");
                };
                let data = r.bytes(body, size, "data chunk")?;
                return decode(data, body, &fmt);
            }
            _ => {}
        }
        at = body + size + (size & 1);
    }
    fail(buf.len(), "no data chunk")
}

fn decode(data: &[u8], offset: usize, fmt: &Fmt) -> Result<AudioClip> {
    let width = match fmt.format {
        SampleFormat::Pcm16 => 2,
        SampleFormat::Float32 => 4,
    };
    let frame = width * fmt.channels;
    if !data.len().is_multiple_of(frame) {
        return fail(offset + data.len() - data.len() % frame, "data chunk ends mid-frame");
    }
    let mut samples = Vec::with_capacity(data.len() / frame);
    for (i, f) in data.chunks_exact(frame).enumerate() {
        let mut acc = 0.0;
        for c in f.chunks_exact(width) {
            let v = match fmt.format {
                SampleFormat::Pcm16 => i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0,
                SampleFormat::Float32 => f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
            };
            if !v.is_finite() {
                return fail(offset + i * frame, "non-finite sample");
            }
            acc += v;
        }
        samples.push(acc / fmt.channels as f64);
    }
    Ok(AudioClip::new(samples, fmt.rate))
}

/// Encodes a mono clip. PCM16 rounds `x * 32768` and saturates.
pub fn write_wav(clip: &AudioClip, format: SampleFormat) -> Vec<u8> {
    let (tag, bits) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 16u16),
        SampleFormat::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let width = bits as u32 / 8;
    let data_len = clip.samples.len() as u32 * width;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * width).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &x in &clip.samples {
        match format {
            SampleFormat::Pcm16 => {
                let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            SampleFormat::Float32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
        }
    }
    out
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let clip = read_wav(&buf).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format { offset, message: format!("{}: {message}", path.display()) },
        e => e,
    })?;
    Ok(clip.with_source(path.display().to_string()))
}

pub fn save_wav(path: impl AsRef<Path>, clip: &AudioClip, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_wav(clip, format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm16(samples: &[i16], channels: u16, rate: u32) -> Vec<u8> {
        let data: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        b.extend_from_slice(&(2 * channels).to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&(data.len() as u32).to_le_bytes());
        b.extend_from_slice(&data);
        b
    }

    #[test]
    fn pcm16_scaling() {
        let clip = read_wav(&pcm16(&[16384, -32768, 0], 1, 44100)).unwrap();
        assert_eq!(clip.samples, vec![0.5, -1.0, 0.0]);
        assert_eq!(clip.sample_rate, 44100);
    }

    #[test]
    fn stereo_is_averaged() {
        let clip = read_wav(&pcm16(&[16384, 0, -8192, -8192], 2, 8000)).unwrap();
        assert_eq!(clip.samples, vec![0.25, -0.25]);
    }

    #[test]
    fn one_second_at_44k1() {
        let clip = read_wav(&pcm16(&vec![0; 44100], 1, 44100)).unwrap();
        assert_eq!(clip.len(), 44100);
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let mut b = pcm16(&[100], 1, 16000);
        let tail = b.split_off(36);
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(&tail);
        assert_eq!(read_wav(&b).unwrap().samples, vec![100.0 / 32768.0]);
    }

    #[test]
    fn errors_carry_offsets() {
        let good = pcm16(&[1, 2], 1, 16000);
        let mut bad = good.clone();
        bad[8] = b'X';
        assert!(matches!(read_wav(&bad), Err(Error::Format { offset: 8, .. })));
        let mut adpcm = good.clone();
        adpcm[20] = 2;
        assert!(matches!(read_wav(&adpcm), Err(Error::Format { offset: 20, .. })));
        let mut b24 = good.clone();
        b24[34] = 24;
        assert!(matches!(read_wav(&b24), Err(Error::Format { offset: 34, .. })));
        assert!(matches!(read_wav(&good[..45]), Err(Error::Format { offset: 44, .. })));
        assert!(matches!(read_wav(b"RIF"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn float32_round_trip_is_exact() {
        let clip = AudioClip::new(vec![0.25, -0.75, 1.0, 0.1f32 as f64], 22050);
        let back = read_wav(&write_wav(&clip, SampleFormat::Float32)).unwrap();
        assert_eq!(back, clip);
    }
}

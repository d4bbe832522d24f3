//! RIFF/WAVE reading (PCM16 and float32, mono or stereo) and writing.

use std::path::Path;

use super::AudioBuffer;
use crate::error::{MartError, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MartError::parse(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Format {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Decodes a WAV file image. Stereo is averaged down to mono and integer
/// samples are scaled by `1/32768`.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "RIFF tag")? != b"RIFF" {
        return Err(MartError::parse(0, "missing RIFF tag"));
    }
    r.u32("RIFF size")?;
    if r.take(4, "WAVE tag")? != b"WAVE" {
        return Err(MartError::parse(8, "missing WAVE tag"));
    }

    let mut format: Option<Format> = None;
    loop {
        let chunk_at = r.pos;
        let id = r.take(4, "chunk id")?;
        let size = r.u32("chunk size")? as usize;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(MartError::parse(chunk_at as u64, "fmt chunk shorter than 16 bytes"));
                }
                let body_at = r.pos;
                let mut tag = r.u16("format tag")?;
                let channels = r.u16("channel count")?;
                let sample_rate = r.u32("sample rate")?;
                r.u32("byte rate")?;
                r.u16("block align")?;
                let bits = r.u16("bits per sample")?;
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(MartError::parse(body_at as u64, "extensible fmt chunk too short"));
                    }
                    r.take(8, "extensible header")?;
                    tag = r.u16("extensible subformat")?;
                }
                r.pos = body_at + size + (size & 1);
                format = Some(Format {
                    tag,
                    channels,
                    sample_rate,
                    bits,
                });
            }
            b"data" => {
                let fmt = format
                    .as_ref()
                    .ok_or_else(|| MartError::parse(chunk_at as u64, "data chunk before fmt chunk"))?;
                let data_at = r.pos;
                let available = bytes.len().saturating_sub(data_at);
                if size > available {
                    return Err(MartError::parse(
                        data_at as u64,
                        format!("data chunk declares {size} bytes, only {available} present"),
                    ));
                }
                return decode_samples(fmt, &bytes[data_at..data_at + size], data_at);
            }
            _ => {
                r.take(size + (size & 1), "chunk body")?;
            }
        }
    }
}

fn decode_samples(fmt: &Format, data: &[u8], data_at: usize) -> Result<AudioBuffer> {
    let sample_format = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => SampleFormat::Pcm16,
        (FORMAT_FLOAT, 32) => SampleFormat::Float32,
        (tag, bits) => {
            return Err(MartError::parse(
                data_at as u64,
                format!("unsupported codec: format tag {tag}, {bits} bits"),
            ))
        }
    };
    if fmt.channels == 0 || fmt.channels > 2 {
        return Err(MartError::parse(
            data_at as u64,
            format!("unsupported channel count {}", fmt.channels),
        ));
    }
    if fmt.sample_rate == 0 {
        return Err(MartError::parse(data_at as u64, "zero sample rate"));
    }
    let width = if sample_format == SampleFormat::Pcm16 { 2 } else { 4 };
    let frame = width * fmt.channels as usize;
    let frames = data.len() / frame;
    if frames == 0 {
        return Err(MartError::parse(data_at as u64, "data chunk holds no complete frames"));
    }
    let sample = |i: usize| -> f32 {
        let b = &data[i * width..(i + 1) * width];
        match sample_format {
            SampleFormat::Pcm16 => i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0,
            SampleFormat::Float32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
        }
    };
    let ch = fmt.channels as usize;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let s = if ch == 1 {
            sample(f)
        } else {
            (sample(2 * f) + sample(2 * f + 1)) * 0.5
        };
        if !s.is_finite() {
            return Err(MartError::parse(
                (data_at + f * frame) as u64,
                "non-finite float sample",
            ));
        }
        samples.push(s);
    }
    AudioBuffer::new(samples, fmt.sample_rate)
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MartError::io(path, e))?;
    decode_wav(&bytes)
}

/// Encodes interleaved channels (`channels` = 1 or 2) as a WAV image.
pub fn encode_wav(
    interleaved: &[f32],
    channels: u16,
    sample_rate: u32,
    format: SampleFormat,
) -> Vec<u8> {
    let (tag, bits) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 16u16),
        SampleFormat::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block_align = channels * bits / 8;
    let data_len = interleaved.len() * (bits as usize / 8);
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in interleaved {
        match format {
            SampleFormat::Pcm16 => {
                let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            SampleFormat::Float32 => out.extend_from_slice(&s.to_le_bytes()),
        }
    }
    out
}

/// Writes a mono 16-bit PCM file.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(buf.samples(), 1, buf.sample_rate(), SampleFormat::Pcm16);
    std::fs::write(path, bytes).map_err(|e| MartError::io(path, e))
}

//! Minimal RIFF/WAVE reader and writer.
//!
//! Supports interleaved PCM 16-bit and IEEE float32 with any channel count.
//! The reader converts everything to f64 in [-1, 1].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}


/// Read a WAV file into a channel-major waveform.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut r = BufReader::new(File::open(path)?);

    let mut riff = [0u8; 4];
    r.read_exact(&mut riff)?;
    if &riff != b"RIFF" {
        return Err(Error::Format("missing RIFF header".into()));
    }
    let _size = read_u32(&mut r)?;
    let mut wave = [0u8; 4];
    r.read_exact(&mut wave)?;
    if &wave != b"WAVE" {
        return Err(Error::Format("missing WAVE tag".into()));
    }

    let mut format: Option<(SampleFormat, u16, u32)> = None; // (fmt, channels, rate)
    loop {
        let mut id = [0u8; 4];
        match r.read_exact(&mut id) {
            Ok(()) => {}
            Err(_) => return Err(Error::Format("no data chunk found".into())),
        }
        let size = read_u32(&mut r)? as usize;
        match &id {
            b"fmt " => {
                let mut body = vec![0u8; size];
                r.read_exact(&mut body)?;
                if size < 16 {
                    return Err(Error::Format("fmt chunk too small".into()));
                }
                let tag = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                let fmt = match (tag, bits) {
                    (1, 16) => SampleFormat::Pcm16,
                    (3, 32) => SampleFormat::Float32,
                    _ => {
                        return Err(Error::Format(format!(
                            "unsupported WAV format tag {tag} with {bits} bits"
                        )))
                    }
                };
                if channels == 0 {
                    return Err(Error::Format("zero channels".into()));
                }
                format = Some((fmt, channels, rate));
            }
            b"data" => {
                let (fmt, channels, rate) =
                    format.ok_or_else(|| Error::Format("data chunk before fmt".into()))?;
                let mut body = vec![0u8; size];
                r.read_exact(&mut body)?;
                let bytes_per = match fmt {
                    SampleFormat::Pcm16 => 2,
                    SampleFormat::Float32 => 4,
                };
                let total = size / (bytes_per * channels as usize);
                let mut chans = vec![Vec::with_capacity(total); channels as usize];
                let mut off = 0;
                for _ in 0..total {
                    for ch in chans.iter_mut() {
                        let v = match fmt {
                            SampleFormat::Pcm16 => {
                                let s = i16::from_le_bytes([body[off], body[off + 1]]);
                                s as f64 / 32768.0
                            }
                            SampleFormat::Float32 => f32::from_le_bytes([
                                body[off],
                                body[off + 1],
                                body[off + 2],
                                body[off + 3],
                            ]) as f64,
                        };
                        ch.push(v);
                        off += bytes_per;
                    }
                }
                return Waveform::new(chans, rate);
            }
            _ => {
                // Skip unknown chunks (word-aligned).
                let skip = size + (size & 1);
                std::io::copy(&mut r.by_ref().take(skip as u64), &mut std::io::sink())?;
            }
        }
    }
}

/// Write a waveform as an interleaved WAV file.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, format: SampleFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let channels = w.num_channels() as u16;
    let rate = w.sample_rate();
    let frames = w.num_samples();
    let (tag, bits): (u16, u16) = match format {
        SampleFormat::Pcm16 => (1, 16),
        SampleFormat::Float32 => (3, 32),
    };
    let bytes_per = bits as u32 / 8;
    let data_len = frames as u32 * channels as u32 * bytes_per;
    let block_align = channels * (bits / 8);
    let byte_rate = rate * block_align as u32;

    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&tag.to_le_bytes())?;
    out.write_all(&channels.to_le_bytes())?;
    out.write_all(&rate.to_le_bytes())?;
    out.write_all(&byte_rate.to_le_bytes())?;
    out.write_all(&block_align.to_le_bytes())?;
    out.write_all(&bits.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;

    for i in 0..frames {
        for ch in w.channels() {
            match format {
                SampleFormat::Pcm16 => {
                    let v = (ch[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.write_all(&v.to_le_bytes())?;
                }
                SampleFormat::Float32 => {
                    out.write_all(&(ch[i] as f32).to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = Waveform::new(
            vec![vec![0.0, 0.25, -0.5, 1.0], vec![1.0, -1.0, 0.125, 0.0]],
            16_000,
        )
        .unwrap();
        write_wav(&path, &w, SampleFormat::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.num_channels(), 2);
        assert_eq!(back.sample_rate(), 16_000);
        for (a, b) in back.channels().iter().zip(w.channels()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn pcm16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = Waveform::mono(vec![0.0, 0.5, -0.5, 0.999], 8_000).unwrap();
        write_wav(&path, &w, SampleFormat::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        for (x, y) in back.channel(0).iter().zip(w.channel(0)) {
            assert!((x - y).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(read_wav(&path).is_err());
    }
}

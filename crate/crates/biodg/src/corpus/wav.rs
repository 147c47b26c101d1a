//! WAV reading and writing.
//!
//! Readers accept 8/16/24-bit integer PCM and 32-bit float, keep the
//! first channel of multi-channel files, and normalize integer formats
//! to [-1, 1] by the format's full scale (so 16-bit +32767 maps to
//! 32767/32768, never above 1).

use std::path::Path;

use crate::error::{Error, Result};

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => {
            Error::Unsupported(format!("{}: unsupported wav encoding", path.display()))
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a WAV file, returning its sample rate and the first channel
/// normalized to [-1, 1].
pub fn read_wav(path: &Path) -> Result<(u32, Vec<f64>)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }

    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24)) => {
            let scale = 1.0 / f64::from(1i32 << (bits - 1));
            let mut out = Vec::new();
            for (i, s) in reader.samples::<i32>().enumerate() {
                let s = s.map_err(|e| map_hound(path, e))?;
                if i % channels == 0 {
                    out.push(f64::from(s) * scale);
                }
            }
            out
        }
        (hound::SampleFormat::Float, 32) => {
            let mut out = Vec::new();
            for (i, s) in reader.samples::<f32>().enumerate() {
                let s = s.map_err(|e| map_hound(path, e))?;
                if i % channels == 0 {
                    out.push(f64::from(s));
                }
            }
            out
        }
        (fmt, bits) => {
            return Err(Error::Unsupported(format!(
                "{}: {bits}-bit {fmt:?} wav is not supported",
                path.display()
            )))
        }
    };

    if samples.is_empty() {
        return Err(Error::EmptyInput(format!("{}: no samples", path.display())));
    }
    Ok((spec.sample_rate, samples))
}

/// Writes mono 16-bit PCM. Samples are clamped to [-1, 1] first.
pub fn write_wav_mono16(path: &Path, rate_hz: u32, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in samples {
        // Inverse of the reader's v/32768 normalization, so a write and
        // read back round-trips within half an LSB.
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_rate_and_amplitudes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let src: Vec<f64> = (0..400)
            .map(|i| (i as f64 * 0.05).sin() * 0.8)
            .collect();
        write_wav_mono16(&path, 2000, &src).unwrap();
        let (rate, back) = read_wav(&path).unwrap();
        assert_eq!(rate, 2000);
        assert_eq!(back.len(), src.len());
        for (a, b) in src.iter().zip(&back) {
            // 16-bit quantization: half an LSB of error.
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn full_scale_positive_sample_stays_below_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fs.wav");
        write_wav_mono16(&path, 1000, &[1.0, -1.0]).unwrap();
        let (_, back) = read_wav(&path).unwrap();
        assert!((back[0] - 32767.0 / 32768.0).abs() < 1e-12);
        assert!((back[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn multichannel_keeps_first_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 4000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..10i16 {
            w.write_sample(i * 100).unwrap(); // left
            w.write_sample(-1000).unwrap(); // right, should be dropped
        }
        w.finalize().unwrap();
        let (rate, back) = read_wav(&path).unwrap();
        assert_eq!(rate, 4000);
        assert_eq!(back.len(), 10);
        for (i, v) in back.iter().enumerate() {
            assert!((v - (i as f64 * 100.0) / 32768.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eight_bit_pcm_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 1000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for s in [0i8, 64, -64, 127, -128] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let (_, back) = read_wav(&path).unwrap();
        let want = [0.0, 0.5, -0.5, 127.0 / 128.0, -1.0];
        for (a, b) in back.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn float_wav_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for s in [0.25f32, -0.75, 0.0] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let (_, back) = read_wav(&path).unwrap();
        assert_eq!(back, vec![0.25, -0.75, 0.0]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}

//! WAV I/O. The pipeline works on 24 kHz mono PCM16 throughout.

use std::path::Path;
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 24_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("failed to read `{path}`: {source}")]
    Read { path: String, source: hound::Error },
    #[error("failed to write `{path}`: {source}")]
    Write { path: String, source: hound::Error },
    #[error("`{path}`: expected {expected} Hz, found {found} Hz")]
    WrongSampleRate { path: String, expected: u32, found: u32 },
    #[error("`{path}`: expected mono 16-bit integer PCM")]
    WrongFormat { path: String },
    #[error("`{path}`: contains no samples")]
    Empty { path: String },
}

fn check_spec(path: &Path, spec: hound::WavSpec) -> Result<(), AudioError> {
    let p = path.display().to_string();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(AudioError::WrongSampleRate {
            path: p,
            expected: SAMPLE_RATE,
            found: spec.sample_rate,
        });
    }
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(AudioError::WrongFormat { path: p });
    }
    Ok(())
}

/// Validate the header only (cheap manifest-time check).
pub fn check_wav_header(path: &Path) -> Result<(), AudioError> {
    let reader = hound::WavReader::open(path).map_err(|source| AudioError::Read {
        path: path.display().to_string(),
        source,
    })?;
    check_spec(path, reader.spec())
}

/// Read a full file into normalized `[-1, 1]` samples.
pub fn read_wav(path: &Path) -> Result<Vec<f32>, AudioError> {
    let mut reader = hound::WavReader::open(path).map_err(|source| AudioError::Read {
        path: path.display().to_string(),
        source,
    })?;
    check_spec(path, reader.spec())?;
    let samples: Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let samples = samples.map_err(|source| AudioError::Read {
        path: path.display().to_string(),
        source,
    })?;
    if samples.is_empty() {
        return Err(AudioError::Empty { path: path.display().to_string() });
    }
    Ok(samples.iter().map(|&s| f32::from(s) / 32768.0).collect())
}

pub fn write_wav(path: &Path, samples: &[f32]) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |source| AudioError::Write { path: path.display().to_string(), source };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_length_and_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let samples: Vec<f32> =
            (0..2400).map(|i| (i as f32 * 0.05).sin() * 0.5).collect();
        write_wav(&path, &samples).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn wrong_sample_rate_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("16k.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(
            check_wav_header(&path),
            Err(AudioError::WrongSampleRate { found: 16_000, .. })
        ));
    }
}

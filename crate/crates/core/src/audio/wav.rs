use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioBuffer, AudioError, SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn malformed(path: &Path, e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => AudioError::Malformed {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    }
}

/// Reads a mono 16 kHz PCM16 or float32 WAV file. PCM16 is scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| malformed(path, e))?;
    let spec = reader.spec();
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) | (SampleFormat::Float, 32) => {}
        (fmt, bits) => {
            return Err(AudioError::UnsupportedFormat {
                path: path.to_path_buf(),
                format: format!("{fmt:?}{bits}").to_lowercase(),
            })
        }
    }
    if spec.channels != 1 {
        return Err(AudioError::UnsupportedChannels {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(AudioError::UnsupportedRate {
            path: path.to_path_buf(),
            rate: spec.sample_rate,
        });
    }
    let samples = match spec.sample_format {
        SampleFormat::Int => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<Result<Vec<_>, _>>(),
        SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<Vec<_>, _>>(),
    }
    .map_err(|e| malformed(path, e))?;
    Ok(AudioBuffer {
        samples,
        rate: spec.sample_rate,
    })
}

/// Writes a mono WAV file. PCM16 rounds to the nearest step of 1/32768 and
/// saturates at the integer range.
pub fn write_wav(
    buffer: &AudioBuffer,
    path: impl AsRef<Path>,
    format: WavFormat,
) -> Result<(), AudioError> {
    let path = path.as_ref();
    if !buffer.is_finite() {
        return Err(AudioError::NonFinite {
            path: path.to_path_buf(),
        });
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: buffer.rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| malformed(path, e))?;
    for &x in &buffer.samples {
        let res = match format {
            WavFormat::Pcm16 => {
                writer.write_sample((x * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            }
            WavFormat::Float32 => writer.write_sample(x as f32),
        };
        res.map_err(|e| malformed(path, e))?;
    }
    writer.finalize().map_err(|e| malformed(path, e))
}

//! WAV input.

use std::path::Path;

use hound::{SampleFormat, WavReader};
use thiserror::Error;

use crate::fbank::Waveform;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: {channels} channels, only mono is supported")]
    NotMono { path: String, channels: u16 },
}

/// Reads a mono PCM or float WAV file, scaling integer samples to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Waveform, AudioError> {
    let wrap = |source| AudioError::Read {
        path: path.display().to_string(),
        source,
    };
    let mut reader = WavReader::open(path).map_err(wrap)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::NotMono {
            path: path.display().to_string(),
            channels: spec.channels,
        });
    }
    let samples: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wrap)?,
        SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(wrap)?
        }
    };
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

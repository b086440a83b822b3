use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{FgcmError, Result};

/// Mono audio with samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(FgcmError::Input("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(FgcmError::Input("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(FgcmError::Input(format!("sample {i} is not finite")));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> FgcmError {
    FgcmError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Read a mono 16-bit PCM or 32-bit float WAV file. No resampling is done:
/// a rate other than `expected_rate` is an error.
pub fn load_wav(path: &Path, expected_rate: u32) -> Result<AudioClip> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => FgcmError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => format_err(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format_err(path, format!("expected 1 channel, found {}", spec.channels)));
    }
    if spec.sample_rate != expected_rate {
        return Err(format_err(
            path,
            format!("sample rate {} Hz, expected {expected_rate} Hz", spec.sample_rate),
        ));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>(),
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>(),
        (fmt, bits) => {
            return Err(format_err(
                path,
                format!("unsupported codec {fmt:?} {bits}-bit (need 16-bit PCM or 32-bit float)"),
            ))
        }
    }
    .map_err(|e| format_err(path, e.to_string()))?;
    AudioClip::new(samples, spec.sample_rate).map_err(|e| format_err(path, e.to_string()))
}

/// Write a clip as mono 16-bit PCM. Samples are scaled by 32768 and clamped.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(source) => FgcmError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => format_err(path, other.to_string()),
    };
    let mut w = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

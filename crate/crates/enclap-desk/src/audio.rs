//! Audio clips and headerless PCM storage.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("clip must be non-empty")]
    Empty,
    #[error("sample {index} is {value}, outside [-1, 1] or non-finite")]
    BadSample { index: usize, value: f64 },
    #[error("sample rate must be positive")]
    BadSampleRate,
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: pcm byte length {len} is not a multiple of 4")]
    Truncated { path: String, len: usize },
}

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::BadSampleRate);
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() || !(-1.0..=1.0).contains(&s) {
                return Err(AudioError::BadSample { index: i, value: s });
            }
        }
        Ok(AudioClip { samples, sample_rate_hz })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Headerless little-endian f32 PCM.
    pub fn write_pcm(&self, path: &Path) -> Result<(), AudioError> {
        let mut bytes = Vec::with_capacity(self.samples.len() * 4);
        for &s in &self.samples {
            bytes.extend_from_slice(&(s as f32).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| AudioError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        f.write_all(&bytes).map_err(|e| AudioError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn read_pcm(path: &Path, sample_rate_hz: u32) -> Result<Self, AudioError> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| AudioError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        if bytes.len() % 4 != 0 {
            return Err(AudioError::Truncated {
                path: path.display().to_string(),
                len: bytes.len(),
            });
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            // f32 round-trip of a peak-normalized clip can overshoot 1.0 by
            // one ulp; clamp rather than reject.
            .map(|s| s.clamp(-1.0, 1.0))
            .collect();
        AudioClip::new(samples, sample_rate_hz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(AudioClip::new(vec![0.0, 1.5], 16000).is_err());
        assert!(AudioClip::new(vec![f64::NAN], 16000).is_err());
        assert!(AudioClip::new(vec![], 16000).is_err());
    }

    #[test]
    fn pcm_round_trip_is_f32_exact() {
        // values chosen to be exactly representable as f32
        let clip = AudioClip::new(vec![0.25, -0.5, 0.75, 0.0], 16000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip.pcm");
        clip.write_pcm(&p).unwrap();
        let back = AudioClip::read_pcm(&p, 16000).unwrap();
        assert_eq!(clip, back);
    }
}

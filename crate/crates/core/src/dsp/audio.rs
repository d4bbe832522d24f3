use crate::error::{MartError, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform at a known sample rate. Samples are nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(MartError::TooShort("audio buffer has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(MartError::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(MartError::Numeric(format!("sample {i} is not finite")));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    /// Exactly `len` samples starting at `offset`, wrapping around the end of
    /// the buffer as often as needed.
    pub fn cyclic_window(&self, offset: usize, len: usize) -> AudioBuffer {
        let n = self.samples.len();
        let samples = (0..len).map(|i| self.samples[(offset + i) % n]).collect();
        AudioBuffer {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn mean_power(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.samples.len() as f64
    }
}

//! Mel filterbank and fixed-size log-mel spectrograms.

use super::stft::{Magnitudes, Stft, DEFAULT_WINDOW};
use super::AudioBuffer;
use crate::error::{MartError, Result};

pub const DEFAULT_MEL_BANDS: usize = 128;
pub const DEFAULT_FRAMES: usize = 128;
pub const LOG_FLOOR: f64 = 1e-6;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over linear FFT bins, row-major `[bands × bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub bands: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    /// HTK-scale filters between `fmin` and `fmax`. A filter whose triangle
    /// covers no bin centre gets weight 1 on the bin nearest its centre.
    pub fn new(bands: usize, bins: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let bin_hz: Vec<f64> = (0..bins).map(|k| k as f64 * nyquist / (bins - 1) as f64).collect();
        let (m_lo, m_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let pts: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (bands + 1) as f64))
            .collect();
        let mut weights = vec![0.0; bands * bins];
        for m in 0..bands {
            let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            let row = &mut weights[m * bins..(m + 1) * bins];
            for (k, &f) in bin_hz.iter().enumerate() {
                let up = (f - lo) / (c - lo);
                let down = (hi - f) / (hi - c);
                row[k] = up.min(down).max(0.0);
            }
            if row.iter().all(|&w| w == 0.0) {
                let nearest = bin_hz
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - c).abs().total_cmp(&(b.1 - c).abs()))
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                row[nearest] = 1.0;
            }
        }
        MelFilterbank { bands, bins, weights }
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// Applies the filters to magnitude² and returns `[bands × frames]`.
    pub fn project(&self, mags: &Magnitudes) -> Result<Vec<f64>> {
        if mags.bins != self.bins {
            return Err(MartError::dim(format!(
                "mel projection expects {} bins, got {}",
                self.bins, mags.bins
            )));
        }
        let mut out = vec![0.0; self.bands * mags.frames];
        for t in 0..mags.frames {
            let frame = mags.frame(t);
            for m in 0..self.bands {
                out[m * mags.frames + t] = self
                    .row(m)
                    .iter()
                    .zip(frame)
                    .filter(|(w, _)| **w != 0.0)
                    .map(|(w, a)| w * a * a)
                    .sum();
            }
        }
        Ok(out)
    }
}

/// Mel projection with default range `0 .. sr/2`.
pub fn mel_project(mags: &Magnitudes, mel_bands: usize, sample_rate: u32) -> Result<Vec<f64>> {
    MelFilterbank::new(mel_bands, mags.bins, sample_rate, 0.0, sample_rate as f64 / 2.0).project(mags)
}

/// Log-mel matrix `[mel_bands × frames]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpec {
    pub mel_bands: usize,
    pub frames: usize,
    pub matrix: Vec<f32>,
    pub source_span: (usize, usize),
}

/// Hop that yields at least `frames` frames from `span_len` samples.
pub fn adaptive_hop(span_len: usize, window: usize, frames: usize) -> Result<usize> {
    let min_len = window + frames.saturating_sub(1);
    if span_len < min_len || frames == 0 {
        return Err(MartError::TooShort(format!(
            "span of {span_len} samples cannot give {frames} frames; need at least {min_len}"
        )));
    }
    if frames == 1 {
        return Ok(span_len - window + 1);
    }
    Ok((span_len - window) / (frames - 1))
}

/// Turns clips of any admissible length into log-mel matrices of one size.
pub struct LogMelFrontEnd {
    stft: Stft,
    filterbank: MelFilterbank,
    target_frames: usize,
}

impl LogMelFrontEnd {
    pub fn new(sample_rate: u32, mel_bands: usize, target_frames: usize) -> Self {
        let stft = Stft::new(DEFAULT_WINDOW);
        let filterbank =
            MelFilterbank::new(mel_bands, stft.bins(), sample_rate, 0.0, sample_rate as f64 / 2.0);
        LogMelFrontEnd {
            stft,
            filterbank,
            target_frames,
        }
    }

    pub fn mel_bands(&self) -> usize {
        self.filterbank.bands
    }

    pub fn target_frames(&self) -> usize {
        self.target_frames
    }

    pub fn min_span(&self) -> usize {
        self.stft.window_size() + self.target_frames - 1
    }

    /// Log-mel of `samples[span.0..span.1]` with exactly `target_frames`
    /// frames; trailing samples past the last full hop are dropped.
    pub fn clip(&self, samples: &[f32], span: (usize, usize)) -> Result<LogMelSpec> {
        let (start, end) = span;
        if start >= end || end > samples.len() {
            return Err(MartError::dim(format!(
                "span {span:?} is not inside a {}-sample buffer",
                samples.len()
            )));
        }
        let hop = adaptive_hop(end - start, self.stft.window_size(), self.target_frames)?;
        let mags = self
            .stft
            .magnitudes(&samples[start..end], hop, Some(self.target_frames))?;
        debug_assert_eq!(mags.frames, self.target_frames);
        let mel = self.filterbank.project(&mags)?;
        Ok(LogMelSpec {
            mel_bands: self.filterbank.bands,
            frames: self.target_frames,
            matrix: mel.iter().map(|&v| (v + LOG_FLOOR).ln() as f32).collect(),
            source_span: span,
        })
    }
}

/// One-shot log-mel for a span of a buffer, with default window and bands.
pub fn logmel_for_clip(buf: &AudioBuffer, span: (usize, usize), target_frames: usize) -> Result<LogMelSpec> {
    LogMelFrontEnd::new(buf.sample_rate(), DEFAULT_MEL_BANDS, target_frames).clip(buf.samples(), span)
}

//! Stochastic waveform augmentations applied in a fixed order: polarity
//! inversion, noise, gain, filter, delay, pitch shift.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::resample::stretch;
use super::AudioBuffer;
use crate::error::{MartError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub polarity_p: f64,
    pub noise_p: f64,
    pub noise_snr_db: (f64, f64),
    pub gain_p: f64,
    pub gain_db: (f64, f64),
    pub filter_p: f64,
    pub lowpass_hz: (f64, f64),
    pub highpass_hz: (f64, f64),
    pub delay_p: f64,
    pub delay_ms: (f64, f64),
    pub delay_decay: (f64, f64),
    pub pitch_p: f64,
    pub pitch_semitones: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            polarity_p: 0.8,
            noise_p: 0.01,
            noise_snr_db: (20.0, 40.0),
            gain_p: 0.3,
            gain_db: (-6.0, 0.0),
            filter_p: 0.8,
            lowpass_hz: (2200.0, 4000.0),
            highpass_hz: (200.0, 1200.0),
            delay_p: 0.3,
            delay_ms: (50.0, 200.0),
            delay_decay: (0.3, 0.7),
            pitch_p: 0.6,
            pitch_semitones: (-2.0, 2.0),
        }
    }
}

impl AugmentationConfig {
    /// Every probability zero: the identity augmentation.
    pub fn disabled() -> Self {
        AugmentationConfig {
            polarity_p: 0.0,
            noise_p: 0.0,
            gain_p: 0.0,
            filter_p: 0.0,
            delay_p: 0.0,
            pitch_p: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("polarity", self.polarity_p),
            ("noise", self.noise_p),
            ("gain", self.gain_p),
            ("filter", self.filter_p),
            ("delay", self.delay_p),
            ("pitch", self.pitch_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(MartError::Config(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        let ranges = [
            ("noise SNR", self.noise_snr_db),
            ("gain", self.gain_db),
            ("low-pass cutoff", self.lowpass_hz),
            ("high-pass cutoff", self.highpass_hz),
            ("delay time", self.delay_ms),
            ("delay decay", self.delay_decay),
            ("pitch shift", self.pitch_semitones),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(MartError::Config(format!("{name} range ({lo}, {hi}) is not ordered")));
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn add_noise<R: Rng + ?Sized>(x: &mut [f32], snr_db: f64, rng: &mut R) {
    let power = x.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / x.len() as f64;
    if power == 0.0 {
        return;
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    for s in x.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *s += (n * sigma) as f32;
    }
}

/// First-order IIR low-pass (`high = false`) or high-pass filter.
pub fn one_pole(x: &mut [f32], cutoff_hz: f64, sample_rate: u32, high: bool) {
    let dt = 1.0 / sample_rate as f64;
    let rc = 1.0 / (2.0 * std::f64::consts::PI * cutoff_hz);
    if high {
        let a = rc / (rc + dt);
        let (mut prev_x, mut prev_y) = (x[0] as f64, x[0] as f64);
        for s in x.iter_mut() {
            let xi = *s as f64;
            let y = a * (prev_y + xi - prev_x);
            prev_x = xi;
            prev_y = y;
            *s = y as f32;
        }
    } else {
        let a = dt / (rc + dt);
        let mut y = x[0] as f64;
        for s in x.iter_mut() {
            y += a * (*s as f64 - y);
            *s = y as f32;
        }
    }
}

/// Single echo, rescaled so the mix stays within the input's range.
pub fn echo(x: &mut [f32], delay: usize, decay: f64) {
    if delay == 0 || delay >= x.len() {
        return;
    }
    let dry = x.to_vec();
    let norm = 1.0 / (1.0 + decay);
    for i in 0..x.len() {
        let wet = if i >= delay { dry[i - delay] as f64 * decay } else { 0.0 };
        x[i] = ((dry[i] as f64 + wet) * norm) as f32;
    }
}

/// Pitch shift by resampling, then zero-padding or trimming back to the input
/// length.
pub fn pitch_shift(x: &[f32], semitones: f64) -> Vec<f32> {
    let factor = 2f64.powf(semitones / 12.0);
    let out_len = ((x.len() as f64 / factor).round() as usize).max(1);
    let mut y = stretch(x, factor, out_len);
    y.resize(x.len(), 0.0);
    y
}

/// Applies each enabled transform with its probability, in the fixed order.
/// Output length equals input length.
pub fn augment<R: Rng + ?Sized>(
    buf: &AudioBuffer,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<AudioBuffer> {
    cfg.validate()?;
    let sr = buf.sample_rate();
    let mut x = buf.samples().to_vec();
    let fires = |p: f64, rng: &mut R| p > 0.0 && rng.random::<f64>() < p;

    if fires(cfg.polarity_p, rng) {
        x.iter_mut().for_each(|s| *s = -*s);
    }
    if fires(cfg.noise_p, rng) {
        let snr = uniform(rng, cfg.noise_snr_db);
        add_noise(&mut x, snr, rng);
    }
    if fires(cfg.gain_p, rng) {
        let g = 10f64.powf(uniform(rng, cfg.gain_db) / 20.0) as f32;
        x.iter_mut().for_each(|s| *s *= g);
    }
    if fires(cfg.filter_p, rng) {
        let high = rng.random::<bool>();
        let range = if high { cfg.highpass_hz } else { cfg.lowpass_hz };
        let cutoff = uniform(rng, range).min(sr as f64 * 0.49);
        one_pole(&mut x, cutoff, sr, high);
    }
    if fires(cfg.delay_p, rng) {
        let ms = uniform(rng, cfg.delay_ms);
        let decay = uniform(rng, cfg.delay_decay);
        echo(&mut x, (ms * 1e-3 * sr as f64).round() as usize, decay);
    }
    if fires(cfg.pitch_p, rng) {
        let st = uniform(rng, cfg.pitch_semitones);
        x = pitch_shift(&x, st);
    }
    AudioBuffer::new(x, sr)
}

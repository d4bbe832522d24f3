use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::AudioBuffer;
use crate::error::{MartError, Result};

pub const DEFAULT_WINDOW: usize = 256;

/// Magnitude spectrogram stored frame-major: `data[frame * bins + bin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Magnitudes {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Magnitudes {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable short-time Fourier transform for one window size.
pub struct Stft {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(window_size: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(window_size);
        Stft {
            window: hann(window_size),
            fft,
        }
    }

    pub fn window_size(&self) -> usize {
        self.window.len()
    }

    pub fn bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    /// Magnitudes of at most `max_frames` Hann-windowed frames of `x`.
    pub fn magnitudes(&self, x: &[f32], hop: usize, max_frames: Option<usize>) -> Result<Magnitudes> {
        let n = self.window.len();
        if hop == 0 {
            return Err(MartError::Config("STFT hop must be at least 1".into()));
        }
        if x.len() < n {
            return Err(MartError::TooShort(format!(
                "{} samples is shorter than the {n}-sample window",
                x.len()
            )));
        }
        let mut frames = 1 + (x.len() - n) / hop;
        if let Some(m) = max_frames {
            frames = frames.min(m);
        }
        let bins = self.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let seg = &x[t * hop..t * hop + n];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex::new(s as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend(buf[..bins].iter().map(|c| c.norm()));
        }
        Ok(Magnitudes { frames, bins, data })
    }
}

/// Hann-windowed magnitude STFT; `1 + (len - window) / hop` frames of
/// `window/2 + 1` bins.
pub fn stft(buf: &AudioBuffer, window_size: usize, hop: usize) -> Result<Magnitudes> {
    Stft::new(window_size).magnitudes(buf.samples(), hop, None)
}

/// Plain complex DFT of one real frame, used to check the fast path.
pub fn naive_dft(x: &[f64]) -> Vec<Complex<f64>> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (t, &v)| {
                let ang = -2.0 * PI * (k * t % n) as f64 / n as f64;
                acc + Complex::new(v * ang.cos(), v * ang.sin())
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silence_gives_zero_magnitudes() {
        let b = AudioBuffer::new(vec![0.0; 1000], 16_000).unwrap();
        let m = stft(&b, 256, 100).unwrap();
        assert_eq!(m.frames, 1 + (1000 - 256) / 100);
        assert_eq!(m.bins, 129);
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_frequency_sine_peaks_at_its_bin() {
        let sr = 16_000.0;
        for k in [5usize, 17, 64, 100] {
            let f = k as f64 * sr / 256.0;
            let b = AudioBuffer::new(
                (0..4096).map(|i| (2.0 * PI * f * i as f64 / sr).sin() as f32).collect(),
                16_000,
            )
            .unwrap();
            let m = stft(&b, 256, 128).unwrap();
            for t in 0..m.frames {
                let fr = m.frame(t);
                let arg = (0..m.bins).max_by(|&a, &b| fr[a].total_cmp(&fr[b])).unwrap();
                assert_eq!(arg, k);
            }
        }
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = FftPlanner::new().plan_fft_forward(256);
        for _ in 0..10 {
            let x: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
            plan.process(&mut buf);
            let want = naive_dft(&x);
            for (a, b) in buf.iter().zip(&want) {
                assert!((a - b).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let b = AudioBuffer::new(vec![0.0; 255], 16_000).unwrap();
        assert!(matches!(stft(&b, 256, 1).unwrap_err(), MartError::TooShort(_)));
    }

    #[test]
    fn power_is_additive_for_disjoint_spectra() {
        let sr = 16_000.0;
        let sig = |k: f64| -> Vec<f32> {
            (0..2048)
                .map(|i| (2.0 * PI * k * sr / 256.0 * i as f64 / sr).sin() as f32 * 0.4)
                .collect()
        };
        let (a, b) = (sig(10.0), sig(80.0));
        let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let s = Stft::new(256);
        let (ma, mb, ms) = (
            s.magnitudes(&a, 256, None).unwrap(),
            s.magnitudes(&b, 256, None).unwrap(),
            s.magnitudes(&sum, 256, None).unwrap(),
        );
        let pa: f64 = ma.data.iter().map(|v| v * v).sum();
        let pb: f64 = mb.data.iter().map(|v| v * v).sum();
        let ps: f64 = ms.data.iter().map(|v| v * v).sum();
        assert!((ps - pa - pb).abs() / ps < 1e-6);
    }
}

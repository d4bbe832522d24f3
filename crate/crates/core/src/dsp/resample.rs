use super::AudioBuffer;
use crate::error::{MartError, Result};

/// Linear-interpolation resampling of a raw sample slice to `out_len` samples
/// spanning the same duration.
pub(crate) fn stretch(samples: &[f32], ratio: f64, out_len: usize) -> Vec<f32> {
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            if i0 >= last {
                return samples[last];
            }
            let frac = (pos - i0 as f64) as f32;
            samples[i0] + frac * (samples[i0 + 1] - samples[i0])
        })
        .collect()
}

/// Converts to `target_rate` by linear interpolation. The output has
/// `round(len · target / source)` samples.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(MartError::Config("target sample rate must be positive".into()));
    }
    let src = buf.sample_rate();
    if src == target_rate {
        return Ok(buf.clone());
    }
    let out_len = ((buf.len() as f64 * target_rate as f64 / src as f64).round() as usize).max(1);
    let ratio = src as f64 / target_rate as f64;
    AudioBuffer::new(stretch(buf.samples(), ratio, out_len), target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn identity_rate_is_identity() {
        let b = AudioBuffer::new(vec![0.1, -0.2, 0.3], 16_000).unwrap();
        assert_eq!(resample(&b, 16_000).unwrap(), b);
    }

    #[test]
    fn constant_stays_constant() {
        let b = AudioBuffer::new(vec![0.375; 999], 16_000).unwrap();
        for rate in [8_000, 11_025, 22_050, 44_100] {
            let r = resample(&b, rate).unwrap();
            assert_eq!(r.len(), (999.0 * rate as f64 / 16_000.0).round() as usize);
            assert!(r.samples().iter().all(|&s| s == 0.375));
        }
    }

    #[test]
    fn downsampled_sine_keeps_its_peak() {
        let b = AudioBuffer::new(
            (0..16_000)
                .map(|i| (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin() as f32 * 0.5)
                .collect(),
            16_000,
        )
        .unwrap();
        let r = resample(&b, 8_000).unwrap();
        assert_eq!(r.len(), 8_000);
        // Naive DFT magnitude over 0..1000 Hz at 1 Hz resolution.
        let n = r.len();
        let peak = (0..1000)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &x) in r.samples().iter().enumerate() {
                    let ang = 2.0 * PI * k as f64 * t as f64 / n as f64;
                    re += x as f64 * ang.cos();
                    im -= x as f64 * ang.sin();
                }
                (k, re.hypot(im))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(peak.0, 440);
    }
}

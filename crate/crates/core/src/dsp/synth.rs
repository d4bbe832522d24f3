//! Synthetic tagged corpus with cover cliques, for desk-scale experiments.
//!
//! Every clique is one "song": a few voices, one per tag, each a note
//! sequence of two partials over a beat envelope plus band-passed noise.
//! Tags own disjoint frequency bands. Cover versions re-render the song
//! pitch-shifted, time-stretched, re-gained and with fresh noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::manifest::{format_manifest, ManifestEntry};
use super::wav::write_wav;
use super::AudioBuffer;
use crate::error::{MartError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub tracks: usize,
    pub classes: usize,
    pub cliques: usize,
    pub sample_rate: u32,
    pub seconds: f64,
    /// Probability that a song carries a second tag.
    pub second_tag_p: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tracks: 100,
            classes: 4,
            cliques: 25,
            sample_rate: 16_000,
            seconds: 12.8,
            second_tag_p: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthTrack {
    pub id: String,
    pub audio: AudioBuffer,
    pub tags: Vec<usize>,
    pub clique: usize,
    /// 0 for the base rendering, ≥1 for covers.
    pub version: usize,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub tracks: Vec<SynthTrack>,
    pub class_names: Vec<String>,
}

const NOTES_PER_SONG: usize = 8;
const BAND_LO_HZ: f64 = 200.0;
const BAND_HI_HZ: f64 = 6400.0;

#[derive(Clone, Debug)]
struct Voice {
    notes: [f64; NOTES_PER_SONG],
    partial_ratio: f64,
    noise_center: f64,
    beat_secs: f64,
    level: f64,
}

#[derive(Clone, Debug)]
struct Song {
    tags: Vec<usize>,
    voices: Vec<Voice>,
}

#[derive(Clone, Copy, Debug)]
struct Rendition {
    pitch: f64,
    stretch: f64,
    gain: f64,
}

/// `(lo, hi)` of class `c`'s band; bands tile the range in log frequency.
pub fn class_band(c: usize, classes: usize) -> (f64, f64) {
    let span = (BAND_HI_HZ / BAND_LO_HZ).log2() / classes as f64;
    let lo = BAND_LO_HZ * 2f64.powf(span * c as f64);
    (lo, lo * 2f64.powf(span))
}

/// Inner part of a band that stays inside it under ±2 semitone shifts.
fn inner_band(c: usize, classes: usize) -> (f64, f64) {
    let (lo, hi) = class_band(c, classes);
    let margin = 2f64.powf(2.5 / 12.0);
    (lo * margin, hi / margin)
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn make_song(rng: &mut ChaCha8Rng, primary: usize, cfg: &SynthConfig) -> Song {
    let mut tags = vec![primary];
    if cfg.classes > 1 && rng.random::<f64>() < cfg.second_tag_p {
        let mut others: Vec<usize> = (0..cfg.classes).filter(|&c| c != primary).collect();
        others.shuffle(rng);
        tags.push(others[0]);
        tags.sort();
    }
    let beat_secs = 60.0 / rng.random_range(80.0..160.0);
    let voices = tags
        .iter()
        .map(|&c| {
            let band = inner_band(c, cfg.classes);
            let mut notes = [0.0; NOTES_PER_SONG];
            notes.iter_mut().for_each(|n| *n = log_uniform(rng, band));
            let ratios = [1.25, 4.0 / 3.0, 1.5];
            Voice {
                notes,
                partial_ratio: ratios[rng.random_range(0..ratios.len())],
                noise_center: log_uniform(rng, band),
                beat_secs,
                level: rng.random_range(0.6..1.0),
            }
        })
        .collect();
    Song { tags, voices }
}

/// RBJ band-pass biquad (constant peak gain) over white noise.
fn band_noise(rng: &mut ChaCha8Rng, n: usize, center: f64, q: f64, sr: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * center / sr;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn render(song: &Song, r: Rendition, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut mix = vec![0.0f64; n];
    let seg_secs = n as f64 / sr / NOTES_PER_SONG as f64 * r.stretch;
    for v in &song.voices {
        let beat = v.beat_secs * r.stretch;
        let noise = band_noise(rng, n, (v.noise_center * r.pitch).min(sr * 0.45), 4.0, sr);
        let noise_rms = (noise.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt().max(1e-12);
        let mut phase = 0.0f64;
        for (i, m) in mix.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let seg = ((t / seg_secs) as usize) % NOTES_PER_SONG;
            phase += 2.0 * PI * v.notes[seg] * r.pitch / sr;
            let tone = phase.sin() + 0.5 * (phase * v.partial_ratio).sin();
            let env = 0.35 + 0.65 * (-(t % beat) / 0.12).exp();
            *m += v.level * (0.6 * env * tone + 0.25 * noise[i] / noise_rms);
        }
    }
    let peak = mix.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1e-12);
    mix.iter().map(|&x| (x / peak * 0.8 * r.gain) as f32).collect()
}

/// Generates `cfg.tracks` tracks; track `i` belongs to clique `i % cliques`
/// and is that clique's version `i / cliques`.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.classes < 2 || cfg.cliques < 2 {
        return Err(MartError::Config("synthetic corpus needs at least 2 classes and 2 cliques".into()));
    }
    if cfg.tracks == 0 || cfg.seconds <= 0.0 || cfg.sample_rate == 0 {
        return Err(MartError::Config("synthetic corpus needs tracks, duration and rate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let songs: Vec<Song> = (0..cfg.cliques)
        .map(|c| make_song(&mut rng, c % cfg.classes, cfg))
        .collect();
    let n = (cfg.seconds * cfg.sample_rate as f64).round() as usize;
    let sr = cfg.sample_rate as f64;
    let mut tracks = Vec::with_capacity(cfg.tracks);
    for i in 0..cfg.tracks {
        let clique = i % cfg.cliques;
        let version = i / cfg.cliques;
        let mut trng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1)));
        let r = if version == 0 {
            Rendition {
                pitch: 1.0,
                stretch: 1.0,
                gain: 1.0,
            }
        } else {
            let sign = if trng.random::<bool>() { 1.0 } else { -1.0 };
            Rendition {
                pitch: 2f64.powf(sign * trng.random_range(0.3..1.2) / 12.0),
                stretch: trng.random_range(0.96..1.04),
                gain: 10f64.powf(trng.random_range(-6.0..0.0) / 20.0),
            }
        };
        let samples = render(&songs[clique], r, n, sr, &mut trng);
        tracks.push(SynthTrack {
            id: format!("tracks/track_{i:04}.wav"),
            audio: AudioBuffer::new(samples, cfg.sample_rate)?,
            tags: songs[clique].tags.clone(),
            clique,
            version,
        });
    }
    let class_names = (0..cfg.classes).map(|c| format!("band{c}")).collect();
    Ok(SynthCorpus { tracks, class_names })
}

impl SynthCorpus {
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.tracks
            .iter()
            .map(|t| ManifestEntry {
                path: t.id.clone(),
                tags: t.tags.iter().map(|&c| self.class_names[c].clone()).collect(),
                clique: format!("song{:03}", t.clique),
            })
            .collect()
    }

    /// Writes every track as 16-bit WAV under `dir/tracks/` and the manifest
    /// as `dir/manifest.tsv`; returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
        let dir = dir.as_ref();
        let tracks_dir = dir.join("tracks");
        std::fs::create_dir_all(&tracks_dir).map_err(|e| MartError::io(&tracks_dir, e))?;
        for t in &self.tracks {
            write_wav(dir.join(&t.id), &t.audio)?;
        }
        let path = dir.join("manifest.tsv");
        std::fs::write(&path, format_manifest(&self.manifest())).map_err(|e| MartError::io(&path, e))?;
        Ok(path)
    }
}

//! Waveform ingestion, augmentation, and log-mel front end.

mod audio;
pub mod augment;
pub mod manifest;
pub mod mel;
pub mod resample;
pub mod stft;
pub mod synth;
pub mod wav;

pub use audio::{AudioBuffer, DEFAULT_SAMPLE_RATE};
pub use augment::{augment, AugmentationConfig};
pub use manifest::{load_corpus, parse_manifest, read_manifest, Corpus, ManifestEntry};
pub use mel::{adaptive_hop, logmel_for_clip, mel_project, LogMelFrontEnd, LogMelSpec, MelFilterbank};
pub use resample::resample;
pub use stft::{stft, Magnitudes, Stft};
pub use synth::{synth_corpus, SynthConfig, SynthCorpus, SynthTrack};
pub use wav::{decode_wav, encode_wav, load_wav, write_wav, SampleFormat};

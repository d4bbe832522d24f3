//! Line-delimited corpus manifest: `track_path<TAB>tag1,tag2,...<TAB>clique_id`.

use std::path::{Path, PathBuf};

use super::{load_wav, resample, AudioBuffer};
use crate::error::{MartError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub tags: Vec<String>,
    pub clique: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(MartError::parse(
                at,
                format!("manifest line has {} fields, expected 3", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(MartError::parse(at, "empty track path"));
        }
        let tags = fields[1]
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        out.push(ManifestEntry {
            path: fields[0].to_string(),
            tags,
            clique: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&e.path);
        s.push('\t');
        s.push_str(&e.tags.join(","));
        s.push('\t');
        s.push_str(&e.clique);
        s.push('\n');
    }
    s
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| MartError::io(path, e))?;
    parse_manifest(&text)
}

/// Track paths are relative to the manifest's directory unless absolute.
pub fn resolve_track(manifest: &Path, track: &str) -> PathBuf {
    let p = Path::new(track);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Decoded tracks of a manifest, resampled to one rate.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub entries: Vec<ManifestEntry>,
    pub audio: Vec<AudioBuffer>,
}

pub fn load_corpus(manifest: impl AsRef<Path>, sample_rate: u32) -> Result<Corpus> {
    let manifest = manifest.as_ref();
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(MartError::parse(0, format!("manifest {} lists no tracks", manifest.display())));
    }
    let audio = entries
        .iter()
        .map(|e| resample(&load_wav(resolve_track(manifest, &e.path))?, sample_rate))
        .collect::<Result<_>>()?;
    Ok(Corpus { entries, audio })
}

/// Sorted distinct tag names across the manifest.
pub fn tag_vocabulary(entries: &[ManifestEntry]) -> Vec<String> {
    let mut v: Vec<String> = entries.iter().flat_map(|e| e.tags.iter().cloned()).collect();
    v.sort();
    v.dedup();
    v
}

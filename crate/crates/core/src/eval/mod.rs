//! Downstream evaluation: embedding extraction, linear probing and
//! retrieval scoring.
//!
//! Embeddings are the root row of the part-whole stack output (before the
//! projection head), computed with batch-norm running statistics on a
//! centered, unaugmented root crop.

pub mod metrics;
pub mod probe;
pub mod retrieval;

pub use metrics::{average_precision, first_relevant_rank, pr_auc, precision_at, roc_auc};
pub use probe::{linear_probe, ProbeConfig, ProbeReport, ProbeSplit, TagMatrix};
pub use retrieval::{rank_for, retrieval_eval, RankedList, RetrievalReport};

use std::collections::HashMap;
use std::path::Path;

use crate::diffcore::{Graph, Tensor};
use crate::dsp::{resample, AudioBuffer, LogMelFrontEnd, ManifestEntry};
use crate::error::{MartError, Result};
use crate::hac::ClipTree;
use crate::model::{hier_forward, BnMode, ParamStore};
use crate::train::{assemble_input, config_tree, root_crop, tree_spectrograms, Checkpoint, TrainConfig};

pub const EMB_MAGIC: &[u8; 8] = b"MARTEMB1";

/// Tracks processed per forward pass.
const EMBED_CHUNK: usize = 8;

/// Named embedding rows of a common width, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        EmbeddingSet {
            dim,
            ids: Vec::new(),
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, id: String, row: Vec<f32>) -> Result<()> {
        if row.len() != self.dim {
            return Err(MartError::dim(format!("embedding {id:?} has {} values, expected {}", row.len(), self.dim)));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(MartError::Numeric(format!("embedding {id:?} is not finite")));
        }
        if self.index.contains_key(&id) {
            return Err(MartError::Config(format!("duplicate embedding id {id:?}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.rows.push(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i]
    }

    pub fn rows(&self) -> Vec<&[f32]> {
        self.rows.iter().map(Vec::as_slice).collect()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.rows[i].as_slice())
    }

    /// `MARTEMB1`, u32 width, then `id_len u32, id, f32[width]` records, all
    /// little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len() * (4 * self.dim + 24));
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, row) in self.ids.iter().zip(&self.rows) {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        struct Cursor<'a> {
            bytes: &'a [u8],
            at: usize,
        }
        impl<'a> Cursor<'a> {
            fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
                let s = self
                    .bytes
                    .get(self.at..self.at + n)
                    .ok_or_else(|| MartError::parse(self.at as u64, format!("truncated {what}")))?;
                self.at += n;
                Ok(s)
            }
            fn u32(&mut self, what: &str) -> Result<usize> {
                Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")) as usize)
            }
        }
        let mut c = Cursor { bytes, at: 0 };
        if c.take(8, "magic")? != EMB_MAGIC {
            return Err(MartError::parse(0, "not a MARTEMB1 file"));
        }
        let dim = c.u32("width")?;
        let mut set = EmbeddingSet::new(dim);
        while c.at < bytes.len() {
            let start = c.at as u64;
            let len = c.u32("id length")?;
            let id = std::str::from_utf8(c.take(len, "id")?)
                .map_err(|_| MartError::parse(start + 4, "id is not UTF-8"))?
                .to_string();
            let row = c
                .take(4 * dim, "embedding")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
                .collect();
            set.push(id, row).map_err(|e| MartError::parse(start, e.to_string()))?;
        }
        Ok(set)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| MartError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| MartError::io(path, e))?)
    }
}

/// Encoder input for the centered, unaugmented trees of `tracks`.
fn tree_input(cfg: &TrainConfig, tree: &ClipTree, front: &LogMelFrontEnd, tracks: &[&AudioBuffer]) -> Result<Tensor<f32>> {
    let mut trees = Vec::with_capacity(tracks.len());
    for t in tracks {
        let audio = if t.sample_rate() == cfg.sample_rate {
            root_crop::<rand_chacha::ChaCha8Rng>(t, cfg.root_len(), None)
        } else {
            root_crop::<rand_chacha::ChaCha8Rng>(&resample(t, cfg.sample_rate)?, cfg.root_len(), None)
        };
        trees.push(tree_spectrograms(front, tree, audio.samples())?);
    }
    assemble_input::<f32>(&trees, &[], tree, &cfg.model)
}

/// Post-stack root representations of `tracks` under `store`, in eval mode.
pub fn embed_tracks(cfg: &TrainConfig, store: &ParamStore, tracks: &[&AudioBuffer]) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    let tree = config_tree(cfg)?;
    let front = LogMelFrontEnd::new(cfg.sample_rate, cfg.model.mel_bands, cfg.model.frames);
    let buffers = store.buffers_as::<f32>();
    let mut out = Vec::with_capacity(tracks.len());
    for chunk in tracks.chunks(EMBED_CHUNK) {
        let input = tree_input(cfg, &tree, &front, chunk)?;
        let g = Graph::<f32>::new();
        let bound = store.bind_frozen(&g);
        let hf = hier_forward(
            &bound,
            &cfg.model,
            g.constant(input),
            chunk.len(),
            0,
            BnMode::Eval(&buffers),
            cfg.ablation.uses_pwt(),
        )?;
        let roots = hf.levels[0].value();
        for i in 0..chunk.len() {
            let row = roots.row(i).to_vec();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(MartError::Numeric(format!("embedding of track {} is not finite", out.len())));
            }
            out.push(row);
        }
    }
    Ok(out)
}

/// A copy of `store` whose batch-norm running statistics are the average of
/// the batch statistics over `tracks`, taken in batches of `cfg.batch`.
/// Parameters are untouched.
pub fn calibrate_batchnorm(cfg: &TrainConfig, store: &ParamStore, tracks: &[&AudioBuffer]) -> Result<ParamStore> {
    cfg.validate()?;
    if tracks.is_empty() {
        return Err(MartError::Config("batch-norm calibration needs at least one track".into()));
    }
    let tree = config_tree(cfg)?;
    let front = LogMelFrontEnd::new(cfg.sample_rate, cfg.model.mel_bands, cfg.model.frames);
    let mut out = store.clone();
    for (k, chunk) in tracks.chunks(cfg.batch.max(1)).enumerate() {
        let input = tree_input(cfg, &tree, &front, chunk)?;
        let g = Graph::<f32>::new();
        let bound = store.bind_frozen(&g);
        let hf = hier_forward(&bound, &cfg.model, g.constant(input), chunk.len(), 0, BnMode::Train, false)?;
        out.update_running_stats(&hf.stats, 1.0 / (k + 1) as f64)?;
    }
    Ok(out)
}

/// Embeds named tracks with the parameters of a checkpoint.
pub fn embed(ck: &Checkpoint, ids: &[String], tracks: &[AudioBuffer]) -> Result<EmbeddingSet> {
    if ids.len() != tracks.len() {
        return Err(MartError::dim(format!("{} ids for {} tracks", ids.len(), tracks.len())));
    }
    let refs: Vec<&AudioBuffer> = tracks.iter().collect();
    let rows = embed_tracks(&ck.config, &ck.store, &refs)?;
    let mut set = EmbeddingSet::new(ck.config.model.d_e());
    for (id, row) in ids.iter().zip(rows) {
        set.push(id.clone(), row)?;
    }
    Ok(set)
}

/// Manifest entries in the row order of `set`.
fn entries_for<'a>(set: &EmbeddingSet, entries: &'a [ManifestEntry]) -> Result<Vec<&'a ManifestEntry>> {
    let by_path: HashMap<&str, &ManifestEntry> = entries.iter().map(|e| (e.path.as_str(), e)).collect();
    set.ids()
        .iter()
        .map(|id| {
            by_path
                .get(id.as_str())
                .copied()
                .ok_or_else(|| MartError::Config(format!("embedding {id:?} is not in the manifest")))
        })
        .collect()
}

/// Multi-hot tags aligned with the rows of `set`.
pub fn tag_matrix(set: &EmbeddingSet, entries: &[ManifestEntry]) -> Result<TagMatrix> {
    let rows = entries_for(set, entries)?;
    let mut names: Vec<String> = rows.iter().flat_map(|e| e.tags.iter().cloned()).collect();
    names.sort();
    names.dedup();
    let rows = rows
        .iter()
        .map(|e| names.iter().map(|n| e.tags.contains(n)).collect())
        .collect();
    Ok(TagMatrix { names, rows })
}

/// Clique ids aligned with the rows of `set`.
pub fn clique_labels(set: &EmbeddingSet, entries: &[ManifestEntry]) -> Result<Vec<String>> {
    Ok(entries_for(set, entries)?.into_iter().map(|e| e.clique.clone()).collect())
}

/// One structured metric line.
pub fn metric_line(name: &str, value: f64, split: &str, seed: u64) -> String {
    format!("metric={name} value={value:.6} split={split} seed={seed}")
}

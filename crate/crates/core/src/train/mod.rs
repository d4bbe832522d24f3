//! Pretraining: batches of root clips → two augmented views → tree
//! spectrograms → encoder, part-whole stack and head → hierarchical loss →
//! one Adam step.
//!
//! All randomness (initialization, shuffling, crops, augmentation) comes from
//! one seeded ChaCha stream whose position is saved in every checkpoint, so a
//! resumed run continues the exact trajectory of an unbroken one.

mod checkpoint;
mod config;
mod gradcheck;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState, MAGIC, VERSION,
};
pub use config::{TrainConfig, KEYS, RESUMABLE_KEYS};
pub use gradcheck::{full_model_gradcheck, GradcheckOptions};

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{adam_step, AdamState, Graph, Real, Tensor, Var};
use crate::dsp::{augment, load_corpus, AudioBuffer, AugmentationConfig, LogMelFrontEnd, LogMelSpec};
use crate::error::{MartError, Result};
use crate::hac::{build_tree_with_min_leaf, ClipTree};
use crate::loss::{hierarchical_loss, ContrastiveBatch, LossReport};
use crate::model::{
    hier_forward, project_head, spec_batch, BatchStats, BnMode, Bound, Head, ModelConfig, ParamStore, BN_MOMENTUM,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.mart";
pub const LOSS_LOG_FILE: &str = "loss.log";

/// Exactly `root_len` samples: shorter tracks wrap around, longer ones are
/// cropped at a random offset (or centered without an rng).
pub fn root_crop<R: Rng + ?Sized>(buf: &AudioBuffer, root_len: usize, rng: Option<&mut R>) -> AudioBuffer {
    if buf.len() <= root_len {
        return buf.cyclic_window(0, root_len);
    }
    let slack = buf.len() - root_len;
    let offset = match rng {
        Some(r) => r.random_range(0..=slack),
        None => slack / 2,
    };
    buf.cyclic_window(offset, root_len)
}

/// Log-mel of every tree node, in (level, index) order.
pub fn tree_spectrograms(front: &LogMelFrontEnd, tree: &ClipTree, samples: &[f32]) -> Result<Vec<LogMelSpec>> {
    tree.nodes().map(|c| front.clip(samples, c.span())).collect()
}

/// Builds the tree for a configuration, rejecting roots whose leaves cannot
/// produce the configured frame count.
pub fn config_tree(cfg: &TrainConfig) -> Result<ClipTree> {
    build_tree_with_min_leaf(cfg.root_len(), cfg.model.m, cfg.model.n, cfg.min_leaf())
}

/// Orders per-instance tree spectrograms level-major, followed by `extra`.
pub fn assemble_input<T: Real>(
    trees: &[Vec<LogMelSpec>],
    extra: &[LogMelSpec],
    tree: &ClipTree,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut refs: Vec<&LogMelSpec> = Vec::with_capacity(trees.len() * tree.node_count() + extra.len());
    let mut offset = 0;
    for level in tree.levels() {
        for t in trees {
            refs.extend(&t[offset..offset + level.len()]);
        }
        offset += level.len();
    }
    refs.extend(extra);
    spec_batch(&refs, cfg)
}

/// Encoder, part-whole stack and head over `batch` trees plus `batch`
/// second-view roots.
pub fn contrastive_forward<'g, T: Real>(
    bound: &Bound<'g, T>,
    cfg: &ModelConfig,
    tree: &ClipTree,
    input: Var<'g, T>,
    batch: usize,
    bn: BnMode<'_, T>,
    use_pwt: bool,
) -> Result<(ContrastiveBatch<'g, T>, Vec<BatchStats<T>>)> {
    let hf = hier_forward(bound, cfg, input, batch, batch, bn, use_pwt)?;
    let head = Head::bind(bound)?;
    let extra = hf.extra.ok_or_else(|| MartError::dim("no second-view roots"))?;
    let mut rows: Vec<Var<'g, T>> = hf.levels.clone();
    rows.push(extra);
    let z = project_head(&input.graph().concat_rows(&rows)?, &head)?;
    let mut levels = Vec::with_capacity(cfg.n);
    let mut at = 0;
    for l in &hf.levels {
        let r = l.shape()[0];
        levels.push(z.slice_rows(at, at + r)?);
        at += r;
    }
    let tilde = z.slice_rows(at, at + batch)?;
    Ok((ContrastiveBatch::new(levels, tilde, tree)?, hf.stats))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub adam: AdamState<f32>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    rng: ChaCha8Rng,
    tree: ClipTree,
    front: LogMelFrontEnd,
    aug: AugmentationConfig,
}

impl Trainer {
    /// Fresh parameters drawn from the configured seed.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let store = ParamStore::init(&cfg.model, &mut rng)?;
        let adam = AdamState::new(cfg.lr, cfg.weight_decay);
        Self::assemble(cfg, store, adam, rng, 0, 0)
    }

    /// Continues from a checkpoint. Only the epoch budget and paths may
    /// differ from the checkpoint's configuration.
    pub fn resume(ck: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let changed: Vec<&str> = ck
            .config
            .differing_keys(&cfg)
            .into_iter()
            .filter(|k| !RESUMABLE_KEYS.contains(k))
            .collect();
        if !changed.is_empty() {
            return Err(MartError::Config(format!(
                "cannot resume: configuration differs from the checkpoint in {}",
                changed.join(", ")
            )));
        }
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_stream(ck.rng.stream);
        rng.set_word_pos(ck.rng.word_pos);
        Self::assemble(cfg, ck.store, ck.adam, rng, ck.step, ck.epoch)
    }

    fn assemble(
        cfg: TrainConfig,
        store: ParamStore,
        adam: AdamState<f32>,
        rng: ChaCha8Rng,
        step: u64,
        epoch: u64,
    ) -> Result<Self> {
        let tree = config_tree(&cfg)?;
        let front = LogMelFrontEnd::new(cfg.sample_rate, cfg.model.mel_bands, cfg.model.frames);
        let aug = if cfg.augment {
            AugmentationConfig::default()
        } else {
            AugmentationConfig::disabled()
        };
        Ok(Trainer {
            cfg,
            store,
            adam,
            step,
            epoch,
            rng,
            tree,
            front,
            aug,
        })
    }

    pub fn tree(&self) -> &ClipTree {
        &self.tree
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            store: self.store.clone(),
            adam: self.adam.clone(),
            rng: self.rng_state(),
            step: self.step,
            epoch: self.epoch,
        }
    }

    /// Crops, augments twice and converts one batch to encoder input.
    pub fn prepare_batch(&mut self, tracks: &[&AudioBuffer]) -> Result<Tensor<f32>> {
        let root_len = self.cfg.root_len();
        let mut trees = Vec::with_capacity(tracks.len());
        let mut roots = Vec::with_capacity(tracks.len());
        for t in tracks {
            let root = root_crop(t, root_len, Some(&mut self.rng));
            let v1 = augment(&root, &self.aug, &mut self.rng)?;
            let v2 = augment(&root, &self.aug, &mut self.rng)?;
            trees.push(tree_spectrograms(&self.front, &self.tree, v1.samples())?);
            roots.push(self.front.clip(v2.samples(), (0, root_len))?);
        }
        assemble_input(&trees, &roots, &self.tree, &self.cfg.model)
    }

    /// One optimization step on a batch of tracks.
    pub fn train_step(&mut self, tracks: &[&AudioBuffer]) -> Result<LossReport> {
        let rng_at = self.rng.get_word_pos();
        let input = self.prepare_batch(tracks)?;
        let g = Graph::<f32>::new();
        let bound = self.store.bind(&g);
        let (batch, stats) = contrastive_forward(
            &bound,
            &self.cfg.model,
            &self.tree,
            g.constant(input),
            tracks.len(),
            BnMode::Train,
            self.cfg.ablation.uses_pwt(),
        )?;
        let diag = |e: MartError| match e {
            MartError::Numeric(m) => MartError::Numeric(format!(
                "step {}: {m}; batch drawn at rng word position {rng_at} of seed {}",
                self.step, self.cfg.seed
            )),
            other => other,
        };
        let (loss, report) = hierarchical_loss(&batch, self.cfg.tau, self.cfg.ablation).map_err(diag)?;
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor<f32>> = bound.vars().map(|(_, v)| grads.get_or_zeros(v)).collect();
        if let Some((name, _)) = bound.vars().zip(&gs).find(|(_, t)| !t.is_finite()).map(|(n, _)| n) {
            return Err(diag(MartError::Numeric(format!("non-finite gradient for {name}"))));
        }
        let refs: Vec<&Tensor<f32>> = gs.iter().collect();
        let mut params: Vec<&mut Tensor<f32>> = self.store.params.values_mut().collect();
        adam_step(&mut params, &refs, &mut self.adam)?;
        self.store.update_running_stats(&stats, BN_MOMENTUM)?;
        self.step += 1;
        Ok(report)
    }

    /// Shuffles the tracks and runs every full batch once; a trailing partial
    /// batch is dropped. `log` receives one line per step.
    pub fn run_epoch(&mut self, tracks: &[AudioBuffer], log: &mut dyn FnMut(String) -> Result<()>) -> Result<Vec<LossReport>> {
        let b = self.cfg.batch;
        if tracks.len() < b {
            return Err(MartError::Config(format!(
                "corpus has {} tracks, fewer than one batch of {b}",
                tracks.len()
            )));
        }
        let mut order: Vec<usize> = (0..tracks.len()).collect();
        order.shuffle(&mut self.rng);
        let mut reports = Vec::with_capacity(tracks.len() / b);
        for chunk in order.chunks_exact(b) {
            let batch: Vec<&AudioBuffer> = chunk.iter().map(|&i| &tracks[i]).collect();
            let rep = self.train_step(&batch)?;
            log(format!("epoch={} {}", self.epoch + 1, rep.log_line(self.step)))?;
            reports.push(rep);
        }
        self.epoch += 1;
        let mean = reports.iter().map(|r| r.mean).sum::<f64>() / reports.len() as f64;
        log(format!("epoch={} done steps={} mean_loss={mean:.9e}", self.epoch, self.step))?;
        Ok(reports)
    }
}

/// Result of a pretraining run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Lines logged by this run (a resumed run's earlier lines excluded).
    pub log: Vec<String>,
    pub reports: Vec<LossReport>,
}

fn open_log(dir: &Path, append: bool) -> Result<File> {
    let path = dir.join(LOSS_LOG_FILE);
    OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(|e| MartError::io(path, e))
}

/// Trains on in-memory tracks until `cfg.epochs` epochs are complete,
/// writing a checkpoint and log lines to `cfg.checkpoint_dir` if set.
pub fn pretrain_tracks(cfg: &TrainConfig, tracks: &[AudioBuffer], resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let resumed = resume.is_some();
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, cfg.clone())?,
        None => Trainer::new(cfg.clone())?,
    };
    let dir = cfg.checkpoint_dir.clone();
    let mut file = match &dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| MartError::io(d, e))?;
            Some(open_log(d, resumed)?)
        }
        None => None,
    };
    let log_path: Option<PathBuf> = dir.as_ref().map(|d| d.join(LOSS_LOG_FILE));
    let mut lines = Vec::new();
    let mut reports = Vec::new();
    while (trainer.epoch as usize) < cfg.epochs {
        let mut sink = |line: String| -> Result<()> {
            log::debug!("{line}");
            if let (Some(f), Some(p)) = (file.as_mut(), log_path.as_ref()) {
                writeln!(f, "{line}").map_err(|e| MartError::io(p, e))?;
            }
            lines.push(line);
            Ok(())
        };
        reports.extend(trainer.run_epoch(tracks, &mut sink)?);
        log::info!("epoch {} of {} done at step {}", trainer.epoch, cfg.epochs, trainer.step);
        if let Some(d) = &dir {
            save_checkpoint(d.join(CHECKPOINT_FILE), &trainer.checkpoint())?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        log: lines,
        reports,
    })
}

/// Trains on the configured manifest. With `resume`, continues from the
/// checkpoint in the configured directory.
pub fn pretrain(cfg: &TrainConfig, resume: bool) -> Result<TrainOutcome> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| MartError::Config("no manifest configured".into()))?;
    let corpus = load_corpus(manifest, cfg.sample_rate)?;
    let ck = if resume {
        let dir = cfg
            .checkpoint_dir
            .as_ref()
            .ok_or_else(|| MartError::Config("resuming needs a checkpoint directory".into()))?;
        Some(load_checkpoint(dir.join(CHECKPOINT_FILE))?)
    } else {
        None
    };
    pretrain_tracks(cfg, &corpus.audio, ck)
}

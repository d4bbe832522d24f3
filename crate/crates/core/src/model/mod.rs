//! Spectrogram encoder, part-whole transformer, and projection head.
//!
//! All forward functions are generic over the element type and read their
//! weights from a [`Bound`] set of graph variables, so one implementation
//! serves `f32` training and `f64` gradient checking.
//!
//! Node states are stored per level as row matrices, instance-major: row
//! `b·Mⁿ + m` of level `n` is node `m` of instance `b`, and the parts of row
//! `g` at level `n` are rows `M·g .. M·g + M` at level `n + 1`.

mod encoder;
mod head;
mod params;
mod pwt;

pub use encoder::{encode, padded_extent, spec_batch, BatchStats, BnMode};
pub use head::{project_head, Head};
pub use params::{Bound, Linear, ParamStore};
pub use pwt::{cross_attend, interact, pair_terms, pwt_block, pwt_stack, Unit};

use crate::diffcore::{Real, Var};
use crate::error::{MartError, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mel_bands: usize,
    pub frames: usize,
    /// Output channels of each conv block; the last one is the encoder width.
    pub channels: Vec<usize>,
    pub d_t: usize,
    pub heads: usize,
    pub m: usize,
    pub n: usize,
    pub blocks: usize,
    pub head_hidden: usize,
    pub contrastive_dim: usize,
    /// Whole-side residual scale per level pair (`n − 1` entries).
    pub lambda_down: Vec<f64>,
    /// Part-side residual scale per level pair (`n − 1` entries).
    pub lambda_up: Vec<f64>,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            mel_bands: 128,
            frames: 128,
            channels: vec![16, 32, 64, 128, 128, 256, 512],
            d_t: 192,
            heads: 3,
            m: 2,
            n: 4,
            blocks: 3,
            head_hidden: 512,
            contrastive_dim: 256,
            lambda_down: vec![1.0; 3],
            lambda_up: vec![1.0; 3],
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            frames: 32,
            channels: vec![8, 16, 16, 32, 32, 64, 64],
            d_t: 24,
            head_hidden: 64,
            contrastive_dim: 32,
            ..Self::paper()
        }
    }

    /// Tiny 64-bit gradient-check profile.
    pub fn gradcheck() -> Self {
        ModelConfig {
            mel_bands: 16,
            frames: 16,
            channels: vec![4, 4, 8, 8, 8, 8, 8],
            d_t: 6,
            heads: 3,
            m: 2,
            n: 3,
            blocks: 3,
            head_hidden: 8,
            contrastive_dim: 8,
            lambda_down: vec![1.0; 2],
            lambda_up: vec![1.0; 2],
        }
    }

    pub fn d_e(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn pairs(&self) -> usize {
        self.n.saturating_sub(1)
    }

    /// Rows of level `n` for `batch` instances.
    pub fn level_rows(&self, level: usize, batch: usize) -> usize {
        batch * self.m.pow(level as u32)
    }

    pub fn nodes_per_tree(&self) -> usize {
        (0..self.n).map(|l| self.m.pow(l as u32)).sum()
    }

    pub fn set_lambdas(&mut self, value: f64) {
        self.lambda_down = vec![value; self.pairs()];
        self.lambda_up = vec![value; self.pairs()];
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MartError::Config(msg));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channel plan {:?} must be non-empty and positive", self.channels));
        }
        if self.mel_bands == 0 || self.frames == 0 {
            return bad("mel bands and frames must be positive".into());
        }
        if self.heads == 0 || self.d_t == 0 || !self.d_t.is_multiple_of(self.heads) {
            return bad(format!("d_t = {} is not divisible by {} heads", self.d_t, self.heads));
        }
        if self.m < 2 || self.n < 1 {
            return bad(format!("tree shape M = {}, N = {} is invalid", self.m, self.n));
        }
        if self.head_hidden == 0 || self.contrastive_dim == 0 {
            return bad("projection head widths must be positive".into());
        }
        if self.lambda_down.len() != self.pairs() || self.lambda_up.len() != self.pairs() {
            return bad(format!(
                "need {} residual scales per direction, got {} and {}",
                self.pairs(),
                self.lambda_down.len(),
                self.lambda_up.len()
            ));
        }
        if self.lambda_down.iter().chain(&self.lambda_up).any(|l| !l.is_finite()) {
            return bad("residual scales must be finite".into());
        }
        Ok(())
    }
}

/// Output of [`hier_forward`].
pub struct HierForward<'g, T: Real> {
    /// Per-level node states after the part-whole stack.
    pub levels: Vec<Var<'g, T>>,
    /// Encoder outputs of the extra clips appended after the trees.
    pub extra: Option<Var<'g, T>>,
    pub stats: Vec<BatchStats<T>>,
}

/// Encodes `batch` trees plus `extra` trailing clips in one encoder pass and
/// runs the part-whole stack over the trees.
///
/// `input` is `[R×1×H×W]` with the tree clips level-major (all level-0 rows,
/// then all level-1 rows, ...) followed by the extra clips.
pub fn hier_forward<'g, T: Real>(
    bound: &Bound<'g, T>,
    cfg: &ModelConfig,
    input: Var<'g, T>,
    batch: usize,
    extra: usize,
    bn: BnMode<'_, T>,
    use_pwt: bool,
) -> Result<HierForward<'g, T>> {
    let tree_rows = batch * cfg.nodes_per_tree();
    let rows = input.shape().first().copied().unwrap_or(0);
    if rows != tree_rows + extra {
        return Err(MartError::dim(format!(
            "forward: {rows} clips given, {batch} trees need {tree_rows} plus {extra} extra"
        )));
    }
    let (enc, stats) = encode(bound, cfg, input, bn)?;
    let mut levels = Vec::with_capacity(cfg.n);
    let mut at = 0;
    for l in 0..cfg.n {
        let r = cfg.level_rows(l, batch);
        levels.push(enc.slice_rows(at, at + r)?);
        at += r;
    }
    let extra = if extra > 0 {
        Some(enc.slice_rows(at, at + extra)?)
    } else {
        None
    };
    if use_pwt {
        let blocks = (0..cfg.blocks)
            .map(|b| (0..cfg.pairs()).map(|p| Unit::bind(bound, b, p)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        levels = pwt_stack(&levels, &blocks, cfg)?;
    }
    Ok(HierForward { levels, extra, stats })
}

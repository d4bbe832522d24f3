//! Fully convolutional spectrogram encoder: conv3×3 → batch norm → ReLU →
//! 2×2 max pool per block, then a global average pool.
//!
//! An axis that has already been pooled down to one element is no longer
//! pooled. Inputs are padded by edge repetition so every pooling stage
//! divides evenly.

use indexmap::IndexMap;

use super::{Bound, ModelConfig, BN_EPS};
use crate::diffcore::{Real, Tensor, Var};
use crate::dsp::LogMelSpec;
use crate::error::{MartError, Result};

/// Batch-norm behavior for one encoder pass.
#[derive(Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval(&'a IndexMap<String, Tensor<T>>),
}

/// Per-channel statistics of one batch-norm layer in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    /// Elements per channel that produced the statistics.
    pub count: usize,
}

fn ceil_log2(n: usize) -> usize {
    n.next_power_of_two().trailing_zeros() as usize
}

/// Length an axis of size `n` is padded to before `blocks` pooling stages.
pub fn padded_extent(n: usize, blocks: usize) -> usize {
    let q = 1usize << blocks.min(ceil_log2(n));
    n.div_ceil(q) * q
}

/// Stacks log-mel matrices into `[B×1×H×W]`, padding both axes by edge
/// repetition.
pub fn spec_batch<T: Real>(specs: &[&LogMelSpec], cfg: &ModelConfig) -> Result<Tensor<T>> {
    let (h, w) = (cfg.mel_bands, cfg.frames);
    let blocks = cfg.channels.len();
    let (ph, pw) = (padded_extent(h, blocks), padded_extent(w, blocks));
    let mut data = Vec::with_capacity(specs.len() * ph * pw);
    for (i, s) in specs.iter().enumerate() {
        if s.mel_bands != h || s.frames != w || s.matrix.len() != h * w {
            return Err(MartError::dim(format!(
                "spectrogram {i} is {}×{}, encoder expects {h}×{w}",
                s.mel_bands, s.frames
            )));
        }
        for r in 0..ph {
            let row = &s.matrix[r.min(h - 1) * w..][..w];
            data.extend((0..pw).map(|c| T::of(row[c.min(w - 1)] as f64)));
        }
    }
    Tensor::new(vec![specs.len(), 1, ph, pw], data)
}

/// Encodes `[B×1×H×W]` into `[B×D_e]`. In training mode also returns the
/// batch statistics of every batch-norm layer.
pub fn encode<'g, T: Real>(
    bound: &Bound<'g, T>,
    cfg: &ModelConfig,
    input: Var<'g, T>,
    bn: BnMode<'_, T>,
) -> Result<(Var<'g, T>, Vec<BatchStats<T>>)> {
    let shape = input.shape();
    let blocks = cfg.channels.len();
    let expect = [padded_extent(cfg.mel_bands, blocks), padded_extent(cfg.frames, blocks)];
    if shape.len() != 4 || shape[1] != 1 || shape[2..] != expect {
        return Err(MartError::dim(format!(
            "encoder input {shape:?} does not match [B×1×{}×{}]",
            expect[0], expect[1]
        )));
    }
    let mut x = input;
    let mut stats = Vec::new();
    for i in 0..blocks {
        let p = format!("encoder.{i}");
        let gamma = bound.get(&format!("{p}.bn.gamma"))?;
        let beta = bound.get(&format!("{p}.bn.beta"))?;
        let y = x.conv2d(&bound.get(&format!("{p}.conv"))?)?;
        let prefix = format!("{p}.bn");
        let y = match bn {
            BnMode::Train => {
                let s = y.shape();
                let (y, mean, var) = y.batchnorm_train(&gamma, &beta, T::of(BN_EPS))?;
                stats.push(BatchStats {
                    prefix,
                    mean,
                    var,
                    count: s[0] * s[2] * s[3],
                });
                y
            }
            BnMode::Eval(buffers) => {
                let get = |s: &str| {
                    buffers
                        .get(&format!("{prefix}.{s}"))
                        .ok_or_else(|| MartError::Config(format!("missing buffer {prefix}.{s}")))
                };
                let (rm, rv) = (get("running_mean")?, get("running_var")?);
                y.batchnorm_eval(&gamma, &beta, rm.data(), rv.data(), T::of(BN_EPS))?
            }
        };
        let s = y.shape();
        let window = (if s[2] >= 2 { 2 } else { 1 }, if s[3] >= 2 { 2 } else { 1 });
        x = y.relu().maxpool2d(window)?;
    }
    Ok((x.global_avg_pool()?, stats))
}

//! Hierarchical contrastive loss.
//!
//! For instance `b` with post-interaction vectors `ŝ` (every tree node) and a
//! second-view root vector `z̃⁰_b`, all L2-normalized:
//!
//! ```text
//! pw_b  = Σ_pairs Σ_(whole, child) λ · exp(sim(whole, child) / τ)
//! pos_b = exp(sim(ŝ⁰_b, z̃⁰_b) / τ)
//! neg_b = Σ_u exp(sim(ŝ⁰_b, z̃⁰_u) / τ) + Σ_(u≠b) exp(sim(ŝ⁰_b, ŝ⁰_u) / τ)
//! L_b   = −log((pw_b + pos_b) / (pw_b + neg_b))
//! ```
//!
//! where `λ` is the child's length over the whole's length. The batch loss is
//! the mean of `L_b`.

use std::fmt;
use std::str::FromStr;

use crate::diffcore::{Real, Tensor, Var};
use crate::error::{MartError, Result};
use crate::hac::{clip_len_ratio, ClipTree};

pub const DEFAULT_TAU: f64 = 0.5;

/// Which of the two components are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Ablation {
    #[default]
    Full,
    /// No part-whole term in the loss.
    NoHcl,
    /// Part-whole transformer bypassed.
    NoPwt,
    Neither,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoHcl, Ablation::NoPwt, Ablation::Neither];

    pub fn uses_pwt(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoHcl)
    }

    pub fn uses_hcl(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoPwt)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoHcl => "no_hcl",
            Ablation::NoPwt => "no_pwt",
            Ablation::Neither => "neither",
        })
    }
}

impl FromStr for Ablation {
    type Err = MartError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| MartError::Config(format!("unknown ablation {s:?}; use full, no_hcl, no_pwt or neither")))
    }
}

/// Contrastive vectors of one batch.
pub struct ContrastiveBatch<'g, T: Real> {
    /// Per level `n`, `[B·Mⁿ × C]` head outputs (not yet normalized).
    pub levels: Vec<Var<'g, T>>,
    /// `[B × C]` head outputs of the second view's root.
    pub tilde_root: Var<'g, T>,
    /// Per level pair, the length ratio of every part within one tree.
    pub ratios: Vec<Vec<f64>>,
    pub batch: usize,
    pub m: usize,
}

impl<'g, T: Real> ContrastiveBatch<'g, T> {
    pub fn new(levels: Vec<Var<'g, T>>, tilde_root: Var<'g, T>, tree: &ClipTree) -> Result<Self> {
        if levels.len() != tree.depth() {
            return Err(MartError::dim(format!(
                "{} levels of vectors for a {}-level tree",
                levels.len(),
                tree.depth()
            )));
        }
        let batch = tilde_root.shape()[0];
        if batch == 0 {
            return Err(MartError::dim("empty batch"));
        }
        let m = tree.branching();
        let width = tilde_root.shape().get(1).copied();
        for (l, v) in levels.iter().enumerate() {
            let s = v.shape();
            if s.len() != 2 || s[0] != batch * tree.level(l).len() || Some(s[1]) != width {
                return Err(MartError::dim(format!(
                    "level {l} vectors {s:?} do not fit {batch} trees of width {width:?}"
                )));
            }
        }
        let ratios = (1..tree.depth())
            .map(|l| {
                tree.level(l)
                    .iter()
                    .map(|c| clip_len_ratio(c, &tree.level(l - 1)[c.index / m], m))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(ContrastiveBatch {
            levels,
            tilde_root,
            ratios,
            batch,
            m,
        })
    }

    fn normalized(&self) -> Result<(Vec<Var<'g, T>>, Var<'g, T>)> {
        let levels = self.levels.iter().map(|v| v.normalize_rows()).collect::<Result<_>>()?;
        Ok((levels, self.tilde_root.normalize_rows()?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub pw: Vec<f64>,
    pub neg: Vec<f64>,
    pub hc: Vec<f64>,
    /// Batch-mean part-whole contribution of each level pair.
    pub pair_partials: Vec<f64>,
    pub mean: f64,
}

impl LossReport {
    pub fn pw_mean(&self) -> f64 {
        self.pw.iter().sum::<f64>() / self.pw.len().max(1) as f64
    }

    /// `step=… loss=… pw=… pairs=…` on one line.
    pub fn log_line(&self, step: u64) -> String {
        let pairs: Vec<String> = self.pair_partials.iter().map(|p| format!("{p:.9e}")).collect();
        format!(
            "step={step} loss={:.9e} pw={:.9e} pairs={}",
            self.mean,
            self.pw_mean(),
            if pairs.is_empty() { "-".into() } else { pairs.join(",") }
        )
    }
}

fn values<T: Real>(v: &Var<'_, T>) -> Vec<f64> {
    v.value().data().iter().map(|x| x.as_f64()).collect()
}

/// `exp(sim/τ)` between each whole and its own children, weighted by length
/// ratio and summed per instance. Returns the total `[B]` and the per-pair
/// parts; `None` when the tree has a single level.
fn pw_terms<'g, T: Real>(
    levels: &[Var<'g, T>],
    batch: &ContrastiveBatch<'g, T>,
    tau: f64,
) -> Result<Option<(Var<'g, T>, Vec<Var<'g, T>>)>> {
    let g = batch.tilde_root.graph();
    let mut per_pair = Vec::with_capacity(batch.ratios.len());
    for (p, ratios) in batch.ratios.iter().enumerate() {
        let parts = levels[p + 1];
        let rows = parts.shape()[0];
        let idx: Vec<usize> = (0..rows).map(|r| r / batch.m).collect();
        let sims = levels[p].gather_rows(&idx)?.mul(&parts)?.sum_rows()?;
        let lam: Vec<T> = (0..batch.batch).flat_map(|_| ratios.iter().map(|&r| T::of(r))).collect();
        let weighted = sims.scale(T::of(1.0 / tau)).exp().mul(&g.constant(Tensor::vector(lam)))?;
        per_pair.push(weighted.reshape(&[batch.batch, ratios.len()])?.sum_rows()?);
    }
    let Some(first) = per_pair.first().copied() else {
        return Ok(None);
    };
    let total = per_pair[1..].iter().try_fold(first, |acc, v| acc.add(v))?;
    Ok(Some((total, per_pair)))
}

/// Part-whole term `[B]`; zero for a single-level tree.
pub fn part_whole_term<'g, T: Real>(batch: &ContrastiveBatch<'g, T>, tau: f64) -> Result<Var<'g, T>> {
    check_tau(tau)?;
    let (levels, _) = batch.normalized()?;
    Ok(match pw_terms(&levels, batch, tau)? {
        Some((total, _)) => total,
        None => batch.tilde_root.graph().constant(Tensor::zeros(vec![batch.batch])),
    })
}

/// `(neg, pos)`, both `[B]`.
fn neg_pos<'g, T: Real>(root: Var<'g, T>, tilde: Var<'g, T>, tau: f64) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let b = root.shape()[0];
    let inv = T::of(1.0 / tau);
    let cross = root.matmul(&tilde.transpose()?)?.scale(inv).exp();
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let pos = cross.reshape(&[b * b])?.take(&diag)?;
    let mut neg = cross.sum_rows()?;
    if b > 1 {
        let own = root.matmul(&root.transpose()?)?.scale(inv).exp();
        let off: Vec<usize> = (0..b * b).filter(|k| k / b != k % b).collect();
        let others = own.reshape(&[b * b])?.take(&off)?.reshape(&[b, b - 1])?.sum_rows()?;
        neg = neg.add(&others)?;
    }
    Ok((neg, pos))
}

/// Negative term `[B]`: every second-view root plus every other first-view
/// root.
pub fn negative_term<'g, T: Real>(batch: &ContrastiveBatch<'g, T>, tau: f64) -> Result<Var<'g, T>> {
    check_tau(tau)?;
    let (levels, tilde) = batch.normalized()?;
    Ok(neg_pos(levels[0], tilde, tau)?.0)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(MartError::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Batch-mean loss and its report.
pub fn hierarchical_loss<'g, T: Real>(
    batch: &ContrastiveBatch<'g, T>,
    tau: f64,
    ablation: Ablation,
) -> Result<(Var<'g, T>, LossReport)> {
    check_tau(tau)?;
    let (levels, tilde) = batch.normalized()?;
    let (neg, pos) = neg_pos(levels[0], tilde, tau)?;
    let pw = if ablation.uses_hcl() {
        pw_terms(&levels, batch, tau)?
    } else {
        None
    };
    let (num, den) = match &pw {
        Some((total, _)) => (total.add(&pos)?, total.add(&neg)?),
        None => (pos, neg),
    };
    let per = den.log()?.sub(&num.log()?)?;
    let hc = values(&per);
    if let Some(b) = hc.iter().position(|v| !v.is_finite()) {
        return Err(MartError::Numeric(format!("loss of instance {b} is {}", hc[b])));
    }
    let loss = per.mean();
    let (pw_vals, pair_partials) = match &pw {
        Some((total, parts)) => (
            values(total),
            parts
                .iter()
                .map(|p| values(p).iter().sum::<f64>() / batch.batch as f64)
                .collect(),
        ),
        None => (vec![0.0; batch.batch], Vec::new()),
    };
    let report = LossReport {
        pw: pw_vals,
        neg: values(&neg),
        hc,
        pair_partials,
        mean: loss.value().item().as_f64(),
    };
    Ok((loss, report))
}

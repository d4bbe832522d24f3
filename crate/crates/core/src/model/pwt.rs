//! Part-whole interaction units and the stacked part-whole transformer.
//!
//! Within one block both attention directions read the block's input state.
//! A node at an intermediate level receives the term from its children and
//! the term from its parent, each scaled by its residual weight. A term whose
//! weight is zero is not computed.

use super::{Bound, Linear, ModelConfig};
use crate::diffcore::{Real, Var};
use crate::error::{MartError, Result};

/// Weights of one interaction unit (one level pair of one block).
#[derive(Clone, Copy, Debug)]
pub struct Unit<'g, T: Real> {
    pub whole_q: Linear<'g, T>,
    pub whole_k: Linear<'g, T>,
    pub whole_v: Linear<'g, T>,
    pub part_q: Linear<'g, T>,
    pub part_k: Linear<'g, T>,
    pub part_v: Linear<'g, T>,
    pub out: Linear<'g, T>,
}

impl<'g, T: Real> Unit<'g, T> {
    pub fn bind(bound: &Bound<'g, T>, block: usize, pair: usize) -> Result<Self> {
        let l = |s: &str| bound.linear(&format!("pwt.{block}.{pair}.{s}"));
        Ok(Unit {
            whole_q: l("whole.q")?,
            whole_k: l("whole.k")?,
            whole_v: l("whole.v")?,
            part_q: l("part.q")?,
            part_k: l("part.k")?,
            part_v: l("part.v")?,
            out: l("out")?,
        })
    }
}

/// Multi-head attention of `queries` over `keys`/`values` within `groups`
/// equal row groups, followed by the output map.
pub fn cross_attend<'g, T: Real>(
    queries: &Var<'g, T>,
    keys: &Var<'g, T>,
    values: &Var<'g, T>,
    groups: usize,
    heads: usize,
    out: &Linear<'g, T>,
) -> Result<Var<'g, T>> {
    out.apply(&queries.attention(keys, values, groups, heads)?)
}

/// Unscaled attention terms of one unit: wholes attending to their parts and
/// parts attending to their whole. Either may be skipped.
pub fn pair_terms<'g, T: Real>(
    whole: &Var<'g, T>,
    parts: &Var<'g, T>,
    unit: &Unit<'g, T>,
    heads: usize,
    need: (bool, bool),
) -> Result<(Option<Var<'g, T>>, Option<Var<'g, T>>)> {
    let (gw, gp) = (whole.shape()[0], parts.shape()[0]);
    if gw == 0 || gp % gw != 0 {
        return Err(MartError::dim(format!("{gp} part rows do not split over {gw} wholes")));
    }
    let down = if need.0 {
        let q = unit.whole_q.apply(whole)?;
        let k = unit.part_k.apply(parts)?;
        let v = unit.part_v.apply(parts)?;
        Some(cross_attend(&q, &k, &v, gw, heads, &unit.out)?)
    } else {
        None
    };
    let up = if need.1 {
        let q = unit.part_q.apply(parts)?;
        let k = unit.whole_k.apply(whole)?;
        let v = unit.whole_v.apply(whole)?;
        Some(cross_attend(&q, &k, &v, gw, heads, &unit.out)?)
    } else {
        None
    };
    Ok((down, up))
}

fn residual<'g, T: Real>(x: Var<'g, T>, term: Option<Var<'g, T>>, lambda: f64) -> Result<Var<'g, T>> {
    match term {
        Some(t) => x.add(&t.scale(T::of(lambda))),
        None => Ok(x),
    }
}

/// One unit applied to its own input: returns updated `(whole, parts)`.
pub fn interact<'g, T: Real>(
    whole: &Var<'g, T>,
    parts: &Var<'g, T>,
    unit: &Unit<'g, T>,
    lambda_down: f64,
    lambda_up: f64,
    heads: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (down, up) = pair_terms(whole, parts, unit, heads, (lambda_down != 0.0, lambda_up != 0.0))?;
    Ok((residual(*whole, down, lambda_down)?, residual(*parts, up, lambda_up)?))
}

/// One part-whole transformer block over every level pair.
pub fn pwt_block<'g, T: Real>(
    state: &[Var<'g, T>],
    units: &[Unit<'g, T>],
    cfg: &ModelConfig,
) -> Result<Vec<Var<'g, T>>> {
    if state.len() != cfg.n || units.len() != cfg.pairs() {
        return Err(MartError::Config(format!(
            "state has {} levels and {} units; tree needs {} and {}",
            state.len(),
            units.len(),
            cfg.n,
            cfg.pairs()
        )));
    }
    let batch = state[0].shape()[0];
    for (l, s) in state.iter().enumerate() {
        if s.shape()[0] != cfg.level_rows(l, batch) {
            return Err(MartError::Config(format!(
                "level {l} has {} rows, expected {}",
                s.shape()[0],
                cfg.level_rows(l, batch)
            )));
        }
    }
    let mut down = Vec::with_capacity(cfg.pairs());
    let mut up = Vec::with_capacity(cfg.pairs());
    for (p, unit) in units.iter().enumerate() {
        let (ld, lu) = (cfg.lambda_down[p], cfg.lambda_up[p]);
        let (d, u) = pair_terms(&state[p], &state[p + 1], unit, cfg.heads, (ld != 0.0, lu != 0.0))?;
        down.push(d);
        up.push(u);
    }
    let mut out = Vec::with_capacity(cfg.n);
    for (l, &s) in state.iter().enumerate() {
        let mut x = s;
        if l < cfg.pairs() {
            x = residual(x, down[l], cfg.lambda_down[l])?;
        }
        if l > 0 {
            x = residual(x, up[l - 1], cfg.lambda_up[l - 1])?;
        }
        out.push(x);
    }
    Ok(out)
}

/// Blocks applied in sequence, each consuming the previous block's output.
pub fn pwt_stack<'g, T: Real>(
    state: &[Var<'g, T>],
    blocks: &[Vec<Unit<'g, T>>],
    cfg: &ModelConfig,
) -> Result<Vec<Var<'g, T>>> {
    let mut s = state.to_vec();
    for units in blocks {
        s = pwt_block(&s, units, cfg)?;
    }
    Ok(s)
}

//! Hierarchical audio cropping: an M-ary, N-level tree of sample spans over
//! one root clip, with exact containment between parts and wholes.
//!
//! Spans are half-open `[start, end)` index views into the root buffer.
//! When a span does not divide evenly, the leftmost siblings each take one
//! extra sample.

use std::fmt::Write as _;

use crate::error::{MartError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipNode {
    pub level: usize,
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl ClipNode {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn parent_index(&self, m: usize) -> Option<usize> {
        (self.level > 0).then(|| self.index / m)
    }

    pub fn child_indices(&self, m: usize) -> std::ops::Range<usize> {
        m * self.index..m * self.index + m
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipTree {
    m: usize,
    levels: Vec<Vec<ClipNode>>,
}

/// A whole node with its `M` parts, all at adjacent levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartWholePair {
    pub whole: ClipNode,
    pub parts: Vec<ClipNode>,
}

/// Splits `[start, end)` into `m` contiguous pieces, larger pieces first.
pub fn split_span(start: usize, end: usize, m: usize) -> Vec<(usize, usize)> {
    let len = end - start;
    let (base, extra) = (len / m, len % m);
    let mut out = Vec::with_capacity(m);
    let mut at = start;
    for i in 0..m {
        let w = base + usize::from(i < extra);
        out.push((at, at + w));
        at += w;
    }
    out
}

/// Tree over `root_len` samples; every leaf gets at least one sample.
pub fn build_tree(root_len: usize, m: usize, n: usize) -> Result<ClipTree> {
    build_tree_with_min_leaf(root_len, m, n, 1)
}

/// Tree over `root_len` samples whose leaves are all at least `min_leaf` long.
pub fn build_tree_with_min_leaf(root_len: usize, m: usize, n: usize, min_leaf: usize) -> Result<ClipTree> {
    if m < 2 {
        return Err(MartError::Config(format!("branching factor must be at least 2, got {m}")));
    }
    if n < 1 {
        return Err(MartError::Config("tree needs at least one level".into()));
    }
    let leaves = m
        .checked_pow((n - 1) as u32)
        .ok_or_else(|| MartError::Config(format!("{m}^{} leaves overflows", n - 1)))?;
    let required = leaves
        .checked_mul(min_leaf.max(1))
        .ok_or_else(|| MartError::Config("minimum root length overflows".into()))?;
    if root_len < required {
        return Err(MartError::TooShort(format!(
            "root of {root_len} samples is too short for {leaves} leaves; need at least {required}"
        )));
    }
    let mut levels = vec![vec![ClipNode {
        level: 0,
        index: 0,
        start: 0,
        end: root_len,
    }]];
    for level in 1..n {
        let next = levels[level - 1]
            .iter()
            .flat_map(|p| split_span(p.start, p.end, m))
            .enumerate()
            .map(|(index, (start, end))| ClipNode {
                level,
                index,
                start,
                end,
            })
            .collect();
        levels.push(next);
    }
    Ok(ClipTree { m, levels })
}

impl ClipTree {
    pub fn branching(&self) -> usize {
        self.m
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn root(&self) -> &ClipNode {
        &self.levels[0][0]
    }

    pub fn root_len(&self) -> usize {
        self.root().len()
    }

    pub fn level(&self, n: usize) -> &[ClipNode] {
        &self.levels[n]
    }

    pub fn levels(&self) -> &[Vec<ClipNode>] {
        &self.levels
    }

    pub fn leaves(&self) -> &[ClipNode] {
        self.levels.last().expect("tree has a root level")
    }

    pub fn node(&self, level: usize, index: usize) -> Option<&ClipNode> {
        self.levels.get(level)?.get(index)
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// All nodes in (level, index) order.
    pub fn nodes(&self) -> impl Iterator<Item = &ClipNode> {
        self.levels.iter().flatten()
    }

    pub fn children(&self, node: &ClipNode) -> &[ClipNode] {
        match self.levels.get(node.level + 1) {
            Some(next) => &next[node.child_indices(self.m)],
            None => &[],
        }
    }

    /// `level<TAB>index<TAB>start<TAB>end` lines in (level, index) order.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for c in self.nodes() {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", c.level, c.index, c.start, c.end);
        }
        s
    }
}

/// Every internal node with its children, in (level, index) order.
pub fn enumerate_pairs(tree: &ClipTree) -> Vec<PartWholePair> {
    let n = tree.depth();
    tree.levels[..n.saturating_sub(1)]
        .iter()
        .flatten()
        .map(|w| PartWholePair {
            whole: *w,
            parts: tree.children(w).to_vec(),
        })
        .collect()
}

/// Length of `part` relative to `whole`; `part` must be one of its children.
pub fn clip_len_ratio(part: &ClipNode, whole: &ClipNode, m: usize) -> Result<f64> {
    if part.level != whole.level + 1 || part.index / m != whole.index {
        return Err(MartError::Relationship(format!(
            "node ({}, {}) is not a child of ({}, {})",
            part.level, part.index, whole.level, whole.index
        )));
    }
    if part.start < whole.start || part.end > whole.end || part.is_empty() {
        return Err(MartError::Relationship(format!(
            "span {:?} is not contained in {:?}",
            part.span(),
            whole.span()
        )));
    }
    Ok(part.len() as f64 / whole.len() as f64)
}

//! Anchor enumeration: every `(t_s, t_e)` with `0 < t_s < t_e < L`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Anchor {
    pub start: usize,
    pub end: usize,
}

/// `(L−1)(L−2)/2`, zero below `L = 3`.
pub fn anchor_count(l: usize) -> usize {
    if l < 3 {
        0
    } else {
        (l - 1) * (l - 2) / 2
    }
}

/// Lexicographically ordered anchors for a sequence of `l` snippets.
pub fn enumerate_anchors(l: usize) -> Result<Vec<Anchor>> {
    if l < 3 {
        return Err(Error::InvalidArgument(format!(
            "no anchors exist for L = {l}; need L >= 3"
        )));
    }
    let mut out = Vec::with_capacity(anchor_count(l));
    for start in 1..l {
        for end in start + 1..l {
            out.push(Anchor { start, end });
        }
    }
    Ok(out)
}

/// Inclusive snippet ranges pooled for one anchor: inside, left context, right context.
pub type PoolRanges = [(usize, usize); 3];

/// Anchors of one sequence length together with their pooling ranges.
#[derive(Debug, Clone)]
pub struct AnchorTable {
    pub l: usize,
    pub anchors: Vec<Anchor>,
    pub ranges: Vec<PoolRanges>,
}

impl AnchorTable {
    pub fn new(l: usize) -> Result<Self> {
        let anchors = enumerate_anchors(l)?;
        let ranges = anchors.iter().map(|a| pool_ranges(*a, l)).collect();
        Ok(Self { l, anchors, ranges })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Context on each side spans a quarter of the anchor (at least one snippet),
/// clipped to the sequence.
pub fn pool_ranges(a: Anchor, l: usize) -> PoolRanges {
    let ctx = (a.end - a.start).div_ceil(4).max(1);
    let left = (a.start.saturating_sub(ctx), a.start - 1);
    let right_start = (a.end + 1).min(l - 1);
    let right = (right_start, (a.end + ctx).min(l - 1));
    [(a.start, a.end), left, right]
}

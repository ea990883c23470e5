//! Exact Euclidean neighbor ranking.
//!
//! Every anchor ranks the whole set. The anchor itself always takes rank 0;
//! every other sample is ordered by the key (squared distance, index), so
//! duplicated points resolve deterministically. Squared distances are
//! accumulated in `f64` from exact `f32` differences, in coordinate order,
//! which makes the result identical to a naive double loop.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::embed_store::EmbeddingSet;
use crate::error::{Error, Result};

/// The mined first-order neighborhood of one anchor plus the cutoff that
/// defines its negative set.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedNeighborhood {
    pub anchor: u32,
    /// The `tau1` nearest samples, anchor first.
    pub positives: Vec<u32>,
    /// Euclidean distance to the rank `tau2 - 1` sample.
    pub negative_radius: f32,
    /// Index of the rank `tau2 - 1` sample.
    pub negative_tiebreak: u32,
}

/// Squared Euclidean distance between two rows.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

#[inline]
fn key_cmp(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

pub(crate) fn check_taus(n: usize, tau1: usize, tau2: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty set".into()));
    }
    if tau1 == 0 {
        return Err(Error::InvalidArgument("tau1 must be positive".into()));
    }
    if tau1 >= tau2 {
        return Err(Error::TauOrder);
    }
    if tau2 > n {
        return Err(Error::InvalidArgument(format!("tau2 = {tau2} exceeds n = {n}")));
    }
    Ok(())
}

fn rank_anchor(set: &EmbeddingSet, anchor: usize, tau1: usize, tau2: usize, scratch: &mut Vec<(f64, u32)>) -> RankedNeighborhood {
    let v = set.row(anchor);
    scratch.clear();
    scratch.extend(
        (0..set.n())
            .filter(|&j| j != anchor)
            .map(|j| (squared_distance(v, set.row(j)), j as u32)),
    );
    // `scratch` omits the anchor, so full rank r sits at position r - 1.
    let cut = tau2 - 2;
    scratch.select_nth_unstable_by(cut, key_cmp);
    let (negative_sq, negative_tiebreak) = scratch[cut];
    let head = &mut scratch[..cut];
    if tau1 > 1 && tau1 - 1 < head.len() {
        head.select_nth_unstable_by(tau1 - 1, key_cmp);
    }
    let head = &mut scratch[..tau1 - 1];
    head.sort_unstable_by(key_cmp);

    let mut positives = Vec::with_capacity(tau1);
    positives.push(anchor as u32);
    positives.extend(head.iter().map(|&(_, j)| j));
    RankedNeighborhood {
        anchor: anchor as u32,
        positives,
        negative_radius: negative_sq.sqrt() as f32,
        negative_tiebreak,
    }
}

const ANCHOR_BLOCK: usize = 64;

/// Ranks every anchor and keeps its `tau1` nearest samples and the rank
/// `tau2 - 1` cutoff. Requires `0 < tau1 < tau2 <= n`.
///
/// Parallel over anchor blocks on the current rayon pool; the output does
/// not depend on the worker count.
pub fn compute_neighborhoods(set: &EmbeddingSet, tau1: usize, tau2: usize) -> Result<Vec<RankedNeighborhood>> {
    check_taus(set.n(), tau1, tau2)?;
    let n = set.n();
    let blocks: Vec<Vec<RankedNeighborhood>> = (0..n.div_ceil(ANCHOR_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut scratch = Vec::with_capacity(n);
            (b * ANCHOR_BLOCK..((b + 1) * ANCHOR_BLOCK).min(n))
                .map(|i| rank_anchor(set, i, tau1, tau2, &mut scratch))
                .collect()
        })
        .collect();
    Ok(blocks.into_iter().flatten().collect())
}

/// True when `j` ranks at or beyond `tau2` for the anchor of `nb`.
pub fn is_negative(set: &EmbeddingSet, nb: &RankedNeighborhood, j: usize) -> bool {
    ranks_beyond(set, nb.anchor as usize, nb.negative_tiebreak, j)
}

/// True when `j` ranks strictly after `cutoff` in the ordering of `anchor`.
/// The cutoff distance is recomputed from the set so the comparison is exact
/// regardless of how the stored radius was rounded.
pub fn ranks_beyond(set: &EmbeddingSet, anchor: usize, cutoff: u32, j: usize) -> bool {
    if j == anchor {
        return false;
    }
    let v = set.row(anchor);
    let cutoff_key = (squared_distance(v, set.row(cutoff as usize)), cutoff);
    key_cmp(&(squared_distance(v, set.row(j)), j as u32), &cutoff_key) == Ordering::Greater
}

/// The full ranking of all samples for one anchor.
pub fn full_ranking(set: &EmbeddingSet, anchor: usize) -> Vec<u32> {
    let v = set.row(anchor);
    let mut keyed: Vec<(f64, u32)> = (0..set.n())
        .filter(|&j| j != anchor)
        .map(|j| (squared_distance(v, set.row(j)), j as u32))
        .collect();
    keyed.sort_unstable_by(key_cmp);
    std::iter::once(anchor as u32).chain(keyed.into_iter().map(|(_, j)| j)).collect()
}

/// Same-class rate at sampled ranks: for r = 0, stride, 2·stride, … < n,
/// the mean over labeled anchors of 1[label(Q(i)[r]) = label(i)], reported
/// against the rank fraction r / n.
pub fn neighbor_accuracy_curve(set: &EmbeddingSet, stride: usize) -> Result<Vec<(f64, f64)>> {
    let labels = set.require_labels()?;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let n = set.n();
    let ranks: Vec<usize> = (0..n).step_by(stride).collect();
    let anchors: Vec<usize> = (0..n).filter(|&i| labels[i] >= 0).collect();
    if anchors.is_empty() {
        return Err(Error::MissingLabels);
    }
    let hits = anchors
        .par_iter()
        .map(|&i| {
            let order = full_ranking(set, i);
            ranks.iter().map(|&r| u64::from(labels[order[r] as usize] == labels[i])).collect::<Vec<_>>()
        })
        .reduce(
            || vec![0u64; ranks.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(ranks
        .iter()
        .zip(hits)
        .map(|(&r, h)| (r as f64 / n as f64, h as f64 / anchors.len() as f64))
        .collect())
}

/// Pooled same-class rate among mined positives, self excluded.
pub fn positive_purity(neighborhoods: &[RankedNeighborhood], labels: &[i32]) -> f64 {
    let mut same = 0usize;
    let mut total = 0usize;
    for nb in neighborhoods {
        let c = labels[nb.anchor as usize];
        if c < 0 {
            continue;
        }
        for &j in &nb.positives[1..] {
            total += 1;
            same += usize::from(labels[j as usize] == c);
        }
    }
    if total == 0 {
        1.0
    } else {
        same as f64 / total as f64
    }
}

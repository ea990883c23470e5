//! Cluster-to-class matching and partition agreement scores.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::embed_store::SplitSpec;
use crate::error::{Error, Result};

/// Minimum-cost perfect assignment of rows to columns (Kuhn–Munkres with
/// potentials). Among optimal assignments the lexicographically smallest
/// row → column vector is returned.
pub fn hungarian(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::Shape(format!("cost matrix must be square, got {n}x{m}")));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    // 1-based potentials; column 0 is the virtual start column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }

    // Every optimal assignment lives on zero reduced-cost edges; pick the
    // lexicographically smallest perfect matching among them.
    let scale = cost.iter().fold(1.0f64, |m, &c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| (cost[[i, j]] - u[i + 1] - v[j + 1]).abs() <= tol).collect())
        .collect();
    Ok(lexicographic_matching(&tight, row_to_col))
}

fn lexicographic_matching(tight: &[Vec<bool>], mut row_to_col: Vec<usize>) -> Vec<usize> {
    let n = row_to_col.len();
    let mut col_to_row = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    let mut col_fixed = vec![false; n];

    // Looks for an alternating path that frees `target` by rematching the
    // rows after `first_free_row`, avoiding fixed columns and `banned`.
    fn reroute(
        row: usize,
        target: usize,
        banned: usize,
        tight: &[Vec<bool>],
        col_fixed: &[bool],
        col_to_row: &[usize],
        visited: &mut [bool],
        path: &mut Vec<(usize, usize)>,
    ) -> bool {
        for j in 0..tight.len() {
            if !tight[row][j] || col_fixed[j] || j == banned || visited[j] {
                continue;
            }
            visited[j] = true;
            path.push((row, j));
            if j == target
                || reroute(col_to_row[j], target, banned, tight, col_fixed, col_to_row, visited, path)
            {
                return true;
            }
            path.pop();
        }
        false
    }

    for i in 0..n {
        for c in 0..n {
            if !tight[i][c] || col_fixed[c] {
                continue;
            }
            if row_to_col[i] == c {
                break;
            }
            // hand column c to row i; its current owner must reach i's old column
            let displaced = col_to_row[c];
            let freed = row_to_col[i];
            let mut visited = vec![false; n];
            let mut path = Vec::new();
            if reroute(displaced, freed, c, tight, &col_fixed, &col_to_row, &mut visited, &mut path) {
                for &(r, j) in &path {
                    row_to_col[r] = j;
                    col_to_row[j] = r;
                }
                row_to_col[i] = c;
                col_to_row[c] = i;
                break;
            }
        }
        col_fixed[row_to_col[i]] = true;
    }
    row_to_col
}

/// `size × size` counts with rows indexed by predicted cluster and columns
/// by true class.
pub fn confusion(pred: &[usize], truth: &[usize], size: usize) -> Result<Array2<u64>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut counts = Array2::zeros((size, size));
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= size || t >= size {
            return Err(Error::InvalidArgument(format!("id out of range: pred {p}, truth {t}, K = {size}")));
        }
        counts[[p, t]] += 1;
    }
    Ok(counts)
}

fn best_matching(counts: &Array2<u64>) -> Result<(Vec<usize>, u64)> {
    let cost = counts.mapv(|c| -(c as f64));
    let matching = hungarian(&cost)?;
    let matched = matching.iter().enumerate().map(|(p, &t)| counts[[p, t]]).sum();
    Ok((matching, matched))
}

/// Accuracy under the best one-to-one cluster → class matching, and that
/// matching.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize], k: usize) -> Result<(f64, Vec<usize>)> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    let counts = confusion(pred, truth, k)?;
    let (matching, matched) = best_matching(&counts)?;
    Ok((matched as f64 / pred.len() as f64, matching))
}

struct Contingency {
    n: f64,
    joint: HashMap<(usize, usize), u64>,
    left: HashMap<usize, u64>,
    right: HashMap<usize, u64>,
}

fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", a.len(), b.len())));
    }
    let mut c = Contingency { n: a.len() as f64, joint: HashMap::new(), left: HashMap::new(), right: HashMap::new() };
    for (&x, &y) in a.iter().zip(b) {
        *c.joint.entry((x, y)).or_default() += 1;
        *c.left.entry(x).or_default() += 1;
        *c.right.entry(y).or_default() += 1;
    }
    Ok(c)
}

fn entropy_of(counts: &HashMap<usize, u64>, n: f64) -> f64 {
    let mut sorted: Vec<u64> = counts.values().copied().collect();
    sorted.sort_unstable();
    -sorted.iter().map(|&c| c as f64 / n).map(|p| p * p.ln()).sum::<f64>()
}

/// Mutual information normalized by the arithmetic mean of the two
/// entropies. Two single-cluster partitions score 1.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    let c = contingency(pred, truth)?;
    let h_pred = entropy_of(&c.left, c.n);
    let h_truth = entropy_of(&c.right, c.n);
    let mut cells: Vec<(&(usize, usize), &u64)> = c.joint.iter().collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .into_iter()
        .map(|(&(x, y), &nxy)| {
            let pxy = nxy as f64 / c.n;
            let px = c.left[&x] as f64 / c.n;
            let py = c.right[&y] as f64 / c.n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    let denom = 0.5 * (h_pred + h_truth);
    if denom <= 0.0 {
        return Ok(1.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("ari needs at least two samples".into()));
    }
    let c = contingency(pred, truth)?;
    let mut joint: Vec<u64> = c.joint.values().copied().collect();
    joint.sort_unstable();
    let mut left: Vec<u64> = c.left.values().copied().collect();
    left.sort_unstable();
    let mut right: Vec<u64> = c.right.values().copied().collect();
    right.sort_unstable();
    let index: f64 = joint.into_iter().map(comb2).sum();
    let sum_left: f64 = left.into_iter().map(comb2).sum();
    let sum_right: f64 = right.into_iter().map(comb2).sum();
    let total = comb2(pred.len() as u64);
    // scaled by the pair total so integer-valued inputs stay exact
    let num = index * total - sum_left * sum_right;
    let denom = 0.5 * (sum_left + sum_right) * total - sum_left * sum_right;
    if denom == 0.0 {
        // both partitions are all-singletons or a single cluster: identical
        return Ok(1.0);
    }
    Ok(num / denom)
}

/// Evaluation summary. The `acc_*` fields are set for the GCD protocol;
/// `acc_old`/`acc_new` stay empty when that subset has no samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub acc_all: Option<f64>,
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
    /// `matching[cluster] = class`.
    pub matching: Vec<usize>,
    /// Sample counts (evaluated, old subset, new subset).
    #[serde(skip)]
    pub counts: (usize, usize, usize),
    /// Matched sample counts (all, old subset, new subset).
    #[serde(skip)]
    pub matched: (u64, u64, u64),
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

fn known_pairs(pred: &[usize], truth: &[i32], keep: impl Fn(usize) -> bool) -> Result<(Vec<usize>, Vec<usize>)> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .enumerate()
        .filter(|&(i, (_, &t))| t >= 0 && keep(i))
        .map(|(_, (&p, &t))| (p, t as usize))
        .unzip())
}

fn matching_size(k: usize, pred: &[usize], truth: &[usize]) -> usize {
    let max_id = pred.iter().chain(truth).copied().max().map_or(0, |m| m + 1);
    k.max(max_id)
}

/// Clustering protocol: accuracy, NMI and ARI over samples with known
/// labels (unknown labels, −1, are skipped).
pub fn cluster_report(pred: &[usize], truth: &[i32], k: usize) -> Result<MetricsReport> {
    let (p, t) = known_pairs(pred, truth, |_| true)?;
    if p.is_empty() {
        return Err(Error::MissingLabels);
    }
    let size = matching_size(k, &p, &t);
    let counts = confusion(&p, &t, size)?;
    let (matching, matched) = best_matching(&counts)?;
    Ok(MetricsReport {
        acc: matched as f64 / p.len() as f64,
        nmi: nmi(&p, &t)?,
        ari: if p.len() >= 2 { ari(&p, &t)? } else { 1.0 },
        acc_all: None,
        acc_old: None,
        acc_new: None,
        matching,
        counts: (p.len(), 0, 0),
        matched: (matched, 0, 0),
    })
}

/// GCD protocol: evaluate on the unlabeled portion only, with one matching
/// over all classes shared by the All, Old and New accuracies.
pub fn gcd_report(pred: &[usize], truth: &[i32], split: &SplitSpec, k: usize) -> Result<MetricsReport> {
    if split.labeled_mask.len() != pred.len() {
        return Err(Error::CountMismatch { expected: pred.len(), found: split.labeled_mask.len() });
    }
    let (p, t) = known_pairs(pred, truth, |i| !split.is_labeled(i))?;
    if p.is_empty() {
        return Err(Error::NoUnlabeled);
    }
    let size = matching_size(k, &p, &t);
    let counts = confusion(&p, &t, size)?;
    let (matching, matched) = best_matching(&counts)?;
    let (mut n_old, mut n_new, mut hit_old, mut hit_new) = (0usize, 0usize, 0u64, 0u64);
    for (&pi, &ti) in p.iter().zip(&t) {
        let hit = u64::from(matching[pi] == ti);
        if split.old_classes.contains(&(ti as i32)) {
            n_old += 1;
            hit_old += hit;
        } else {
            n_new += 1;
            hit_new += hit;
        }
    }
    let ratio = |h: u64, n: usize| (n > 0).then(|| h as f64 / n as f64);
    let acc = matched as f64 / p.len() as f64;
    Ok(MetricsReport {
        acc,
        nmi: nmi(&p, &t)?,
        ari: if p.len() >= 2 { ari(&p, &t)? } else { 1.0 },
        acc_all: Some(acc),
        acc_old: ratio(hit_old, n_old),
        acc_new: ratio(hit_new, n_new),
        matching,
        counts: (p.len(), n_old, n_new),
        matched: (matched, hit_old, hit_new),
    })
}

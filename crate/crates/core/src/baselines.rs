//! k-means++ seeded Lloyd clustering, the reference baseline.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embed_store::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, seed, restarts: 10, max_iter: 300, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `k × dim`.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sqdist(x: &[f32], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(&a, &b)| (f64::from(a) - b).powi(2)).sum()
}

/// Nearest centroid per point (lowest index on ties), its squared distance,
/// and the summed inertia.
fn assign(set: &EmbeddingSet, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>, f64) {
    let (labels, dists): (Vec<usize>, Vec<f64>) = (0..set.n())
        .map(|i| {
            let x = set.row(i);
            let mut best = (0, f64::INFINITY);
            for (c, row) in centroids.rows().into_iter().enumerate() {
                let d = sqdist(x, row.as_slice().expect("standard layout"));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip();
    let inertia = dists.iter().sum();
    (labels, dists, inertia)
}

fn plus_plus_seed<R: Rng>(set: &EmbeddingSet, k: usize, rng: &mut R) -> Array2<f64> {
    let dim = set.dim();
    let mut centroids = Array2::zeros((k, dim));
    let to_row = |i: usize| set.row(i).iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
    let first = rng.random_range(0..set.n());
    centroids.row_mut(0).assign(&ndarray::ArrayView1::from(&to_row(first)));
    let mut d2: Vec<f64> = (0..set.n()).map(|i| sqdist(set.row(i), centroids.row(0).as_slice().unwrap())).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave the target just past the last positive weight
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.random_range(0..set.n())
        };
        centroids.row_mut(c).assign(&ndarray::ArrayView1::from(&to_row(pick)));
        let new_c = centroids.row(c);
        let new_c = new_c.as_slice().unwrap();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sqdist(set.row(i), new_c));
        }
    }
    centroids
}

/// Cluster means; each empty cluster takes the point currently farthest
/// from its centroid (each such point used once).
fn update(set: &EmbeddingSet, labels: &[usize], dists: &[f64], k: usize) -> Array2<f64> {
    let dim = set.dim();
    let mut sums = Array2::<f64>::zeros((k, dim));
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, &v) in sums.row_mut(c).iter_mut().zip(set.row(i)) {
            *s += f64::from(v);
        }
    }
    let mut by_distance: Vec<usize> = (0..set.n()).collect();
    by_distance.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
    let mut donors = by_distance.into_iter();
    for c in 0..k {
        if counts[c] == 0 {
            let i = donors.next().expect("n >= k");
            for (s, &v) in sums.row_mut(c).iter_mut().zip(set.row(i)) {
                *s = f64::from(v);
            }
        } else {
            let inv = 1.0 / counts[c] as f64;
            sums.row_mut(c).mapv_inplace(|s| s * inv);
        }
    }
    sums
}

fn check(set: &EmbeddingSet, cfg: &KMeansConfig) -> Result<()> {
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if set.n() < cfg.k {
        return Err(Error::InvalidArgument(format!("n = {} is smaller than k = {}", set.n(), cfg.k)));
    }
    if cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(Error::InvalidArgument("restarts and max_iter must be at least 1".into()));
    }
    Ok(())
}

/// One seeded restart. Also returns the inertia observed at every
/// assignment step, ending with the final state.
pub fn kmeans_single(set: &EmbeddingSet, cfg: &KMeansConfig, restart: usize) -> Result<(KMeansResult, Vec<f64>)> {
    check(set, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let mut centroids = plus_plus_seed(set, cfg.k, &mut rng);
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let (labels, dists, inertia) = assign(set, &centroids);
        trace.push(inertia);
        let next = update(set, &labels, &dists, cfg.k);
        let shift = (&next - &centroids)
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < cfg.tol {
            break;
        }
    }
    let (assignments, _, inertia) = assign(set, &centroids);
    trace.push(inertia);
    Ok((KMeansResult { centroids, assignments, inertia, iterations }, trace))
}

/// Best of `cfg.restarts` runs by (inertia, restart index).
pub fn kmeans(set: &EmbeddingSet, cfg: &KMeansConfig) -> Result<KMeansResult> {
    check(set, cfg)?;
    let runs: Vec<KMeansResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| kmeans_single(set, cfg, r).map(|(res, _)| res))
        .collect::<Result<_>>()?;
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.inertia.total_cmp(&b.inertia).then(i.cmp(j)))
        .map(|(_, r)| r)
        .expect("at least one restart");
    Ok(best)
}

/// Writes `index,cluster` rows.
pub fn write_assignments_csv(assignments: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "cluster"])?;
    for (i, c) in assignments.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `index,cluster` file; indices must run 0..n in order.
pub fn read_assignments_csv(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (row, rec) in r.deserialize::<(usize, usize)>().enumerate() {
        let (i, c) = rec?;
        if i != row {
            return Err(Error::Shape(format!("row {row} has index {i}")));
        }
        out.push(c);
    }
    Ok(out)
}

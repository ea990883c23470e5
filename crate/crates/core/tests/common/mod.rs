//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unic_core::embed_store::EmbeddingSet;
use unic_core::head::{self, HeadKind, HeadParams, LossWeights};
use unic_core::knn::RankedNeighborhood;

/// Largest elementwise relative error between analytic and central
/// finite-difference gradients. Entries where both are below `floor` in
/// magnitude are compared against `floor` instead.
pub fn gradient_error(kind: HeadKind, seed: u64, weights: LossWeights, step: f64, floor: f64) -> f64 {
    let (dim, hidden, k, m) = (8, 16, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = HeadParams::init(kind, dim, hidden, k, &mut rng).unwrap();
    // larger weights than the default init so the softmax is far from uniform
    params.values_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let mut batch = || Array2::from_shape_simple_fn((m, dim), || rng.random_range(-2.0..2.0));
    let (a, p, n) = (batch(), batch(), batch());

    let loss = |params: &HeadParams| {
        head::loss_and_grad(params, a.view(), p.view(), n.view(), &weights).unwrap().loss.total
    };
    let analytic: Vec<f64> = head::loss_and_grad(&params, a.view(), p.view(), n.view(), &weights)
        .unwrap()
        .grads
        .values()
        .copied()
        .collect();

    let mut worst = 0.0f64;
    for (i, &g) in analytic.iter().enumerate() {
        let orig = *params.values().nth(i).unwrap();
        *params.values_mut().nth(i).unwrap() = orig + step;
        let up = loss(&params);
        *params.values_mut().nth(i).unwrap() = orig - step;
        let down = loss(&params);
        *params.values_mut().nth(i).unwrap() = orig;
        let numeric = (up - down) / (2.0 * step);
        let scale = g.abs().max(numeric.abs()).max(floor);
        worst = worst.max((g - numeric).abs() / scale);
    }
    worst
}

/// Naive double loop: full sort of every anchor's candidates.
pub fn naive_neighborhoods(set: &EmbeddingSet, tau1: usize, tau2: usize) -> Vec<RankedNeighborhood> {
    let (n, dim) = (set.n(), set.dim());
    let x = set.data();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = Vec::new();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let mut d = 0.0f64;
                for t in 0..dim {
                    let diff = x[i * dim + t] as f64 - x[j * dim + t] as f64;
                    d += diff * diff;
                }
                others.push((d, j));
            }
            others.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut positives = vec![i as u32];
            positives.extend(others[..tau1 - 1].iter().map(|&(_, j)| j as u32));
            let (d, j) = others[tau2 - 2];
            RankedNeighborhood {
                anchor: i as u32,
                positives,
                negative_radius: d.sqrt() as f32,
                negative_tiebreak: j as u32,
            }
        })
        .collect()
}

/// Minimum total cost over all permutations, smallest permutation on ties.
pub fn brute_force_assignment(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    fn permute(k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for j in 0..k {
            if !prefix.contains(&j) {
                prefix.push(j);
                permute(k, prefix, out);
                prefix.pop();
            }
        }
    }
    let k = cost.nrows();
    let mut perms = Vec::new();
    permute(k, &mut Vec::new(), &mut perms);
    let mut best = (Vec::new(), f64::INFINITY);
    for p in perms {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if c < best.1 {
            best = (p, c);
        }
    }
    best
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

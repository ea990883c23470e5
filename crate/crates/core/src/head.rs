//! The clustering head: a two-layer ReLU MLP or a single linear layer
//! followed by a softmax over K clusters, the pairwise and entropy losses,
//! and their hand-derived gradients.
//!
//! For one anchor row `a`, a positive row `p` and a negative row `n`:
//!
//! ```text
//! pos = -ln clamp(<a, p>)          neg = -ln clamp(1 - <a, n>)
//! ent = ln K - H(mean of anchor rows)
//! total = λ_pos·mean(pos) + λ_neg·mean(neg) + λ_ent·ent
//! ```
//!
//! with `clamp` onto `[ε, 1 - ε]`, `ε = 1e-7`. The clamp has zero slope
//! outside that interval.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::embed_store::EmbeddingSet;
use crate::error::{Error, Result};

pub const HEAD_MAGIC: &[u8; 8] = b"UNICHEAD";

/// Clamp applied to dot products before the logarithm.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Mlp,
    Linear,
}

impl HeadKind {
    fn code(self) -> u8 {
        match self {
            HeadKind::Mlp => 0,
            HeadKind::Linear => 1,
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(HeadKind::Mlp),
            "linear" | "fc" => Ok(HeadKind::Linear),
            other => Err(Error::InvalidArgument(format!("unknown head kind '{other}'"))),
        }
    }
}

/// One affine map `x·W + b` with `W` stored input-major (in × out).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
        Self { weight, bias: Array1::zeros(fan_out) }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight);
        z += &self.bias;
        z
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Head weights. `layers` holds `[W1/b1, W2/b2]` for the MLP and `[W/b]`
/// for the linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub kind: HeadKind,
    pub dim: usize,
    /// Hidden width; 0 for the linear head.
    pub hidden: usize,
    pub k: usize,
    pub layers: Vec<Dense>,
}

impl HeadParams {
    /// Seeded uniform(±√(1/fan_in)) weights and zero biases.
    pub fn init<R: Rng + ?Sized>(kind: HeadKind, dim: usize, hidden: usize, k: usize, rng: &mut R) -> Result<Self> {
        Self::check_shape(kind, dim, hidden, k)?;
        let layers = match kind {
            HeadKind::Mlp => vec![Dense::init(dim, hidden, rng), Dense::init(hidden, k, rng)],
            HeadKind::Linear => vec![Dense::init(dim, k, rng)],
        };
        Ok(Self { kind, dim, hidden: if kind == HeadKind::Mlp { hidden } else { 0 }, k, layers })
    }

    pub fn zeros(kind: HeadKind, dim: usize, hidden: usize, k: usize) -> Result<Self> {
        Self::check_shape(kind, dim, hidden, k)?;
        Ok(Self::zeros_unchecked(kind, dim, hidden, k))
    }

    fn zeros_unchecked(kind: HeadKind, dim: usize, hidden: usize, k: usize) -> Self {
        let layers = match kind {
            HeadKind::Mlp => vec![Dense::zeros(dim, hidden), Dense::zeros(hidden, k)],
            HeadKind::Linear => vec![Dense::zeros(dim, k)],
        };
        Self { kind, dim, hidden: if kind == HeadKind::Mlp { hidden } else { 0 }, k, layers }
    }

    /// Zero-valued parameters of identical shape.
    pub fn zeros_like(&self) -> Self {
        Self::zeros_unchecked(self.kind, self.dim, self.hidden, self.k)
    }

    fn check_shape(kind: HeadKind, dim: usize, hidden: usize, k: usize) -> Result<()> {
        if dim == 0 || k == 0 || (kind == HeadKind::Mlp && hidden == 0) {
            return Err(Error::Shape(format!("invalid head shape dim={dim} hidden={hidden} k={k}")));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flat mutable view over every parameter in declaration order.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

struct ForwardCache {
    input: Array2<f64>,
    /// Post-ReLU hidden activations (MLP only).
    hidden: Option<Array2<f64>>,
    probs: Array2<f64>,
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    z
}

fn forward_cached(params: &HeadParams, batch: ArrayView2<f64>) -> Result<ForwardCache> {
    if batch.ncols() != params.dim {
        return Err(Error::Shape(format!("batch width {} does not match head dim {}", batch.ncols(), params.dim)));
    }
    let (hidden, logits) = match params.kind {
        HeadKind::Mlp => {
            let mut h = params.layers[0].apply(batch);
            h.mapv_inplace(|v| v.max(0.0));
            let logits = params.layers[1].apply(h.view());
            (Some(h), logits)
        }
        HeadKind::Linear => (None, params.layers[0].apply(batch)),
    };
    Ok(ForwardCache { input: batch.to_owned(), hidden, probs: softmax_rows(logits) })
}

/// Class probabilities, one row per input row.
pub fn forward(params: &HeadParams, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(forward_cached(params, batch)?.probs)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clamp_prob(v: f64) -> f64 {
    v.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Binary cross-entropy of ⟨y_i, y_p⟩ against target 1.
pub fn loss_pos(y_i: &[f64], y_p: &[f64]) -> f64 {
    -clamp_prob(dot(y_i, y_p)).ln()
}

/// Binary cross-entropy of ⟨y_i, y_n⟩ against target 0.
pub fn loss_neg(y_i: &[f64], y_n: &[f64]) -> f64 {
    -clamp_prob(1.0 - dot(y_i, y_n)).ln()
}

fn mean_row(probs: &ArrayView2<f64>) -> Array1<f64> {
    probs.mean_axis(Axis(0)).expect("at least one row")
}

fn entropy(q: &Array1<f64>) -> f64 {
    -q.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// ln K minus the entropy of the mean prediction; zero exactly when the
/// mean prediction is uniform.
pub fn loss_ent(anchor_probs: ArrayView2<f64>) -> f64 {
    let k = anchor_probs.ncols() as f64;
    k.ln() - entropy(&mean_row(&anchor_probs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub lambda_ent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_pos: 1.0, lambda_neg: 1.0, lambda_ent: 3.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_pos: f64, lambda_neg: f64, lambda_ent: f64) -> Self {
        Self { lambda_pos, lambda_neg, lambda_ent }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_pos, self.lambda_neg, self.lambda_ent];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub pos: f64,
    pub neg: f64,
    pub ent: f64,
    pub total: f64,
}

/// Gradients for every parameter (same layout as [`HeadParams`]) plus the
/// loss terms at the evaluated point.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradients {
    pub grads: HeadParams,
    pub loss: LossParts,
}

/// Adds the parameter gradients implied by `d_probs` for one forward pass.
fn backward(params: &HeadParams, cache: &ForwardCache, d_probs: &Array2<f64>, grads: &mut HeadParams) {
    // softmax: dz = p ⊙ (dp − Σ_k dp·p)
    let mut dz = d_probs * &cache.probs;
    let row_dots = dz.sum_axis(Axis(1));
    dz = &dz - &(&cache.probs * &row_dots.insert_axis(Axis(1)));

    match params.kind {
        HeadKind::Linear => {
            let g = &mut grads.layers[0];
            g.weight += &cache.input.t().dot(&dz);
            g.bias += &dz.sum_axis(Axis(0));
        }
        HeadKind::Mlp => {
            let h = cache.hidden.as_ref().expect("mlp caches hidden activations");
            {
                let g = &mut grads.layers[1];
                g.weight += &h.t().dot(&dz);
                g.bias += &dz.sum_axis(Axis(0));
            }
            let mut dh = dz.dot(&params.layers[1].weight.t());
            Zip::from(&mut dh).and(h).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            let g = &mut grads.layers[0];
            g.weight += &cache.input.t().dot(&dh);
            g.bias += &dh.sum_axis(Axis(0));
        }
    }
}

/// Weighted loss and its exact gradient with respect to every head
/// parameter. `positives` and `negatives` may hold several rows per anchor:
/// row `r·c + j` pairs with anchor row `r`, where `c` is the row ratio.
pub fn loss_and_grad(
    params: &HeadParams,
    anchors: ArrayView2<f64>,
    positives: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    weights: &LossWeights,
) -> Result<BatchGradients> {
    weights.validate()?;
    let m = anchors.nrows();
    if m == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let per_anchor = |rows: usize, what: &str| -> Result<usize> {
        if rows == 0 || rows % m != 0 {
            return Err(Error::Shape(format!("{what} rows {rows} are not a positive multiple of {m} anchors")));
        }
        Ok(rows / m)
    };
    let n_pos = per_anchor(positives.nrows(), "positive")?;
    let n_neg = per_anchor(negatives.nrows(), "negative")?;

    let ca = forward_cached(params, anchors)?;
    let cp = forward_cached(params, positives)?;
    let cn = forward_cached(params, negatives)?;
    let k = params.k;

    let mut d_a = Array2::<f64>::zeros((m, k));
    let mut d_p = Array2::<f64>::zeros(cp.probs.raw_dim());
    let mut d_n = Array2::<f64>::zeros(cn.probs.raw_dim());

    let mut pos_sum = 0.0;
    let pos_scale = weights.lambda_pos / positives.nrows() as f64;
    for q in 0..positives.nrows() {
        let r = q / n_pos;
        let a = ca.probs.row(r);
        let p = cp.probs.row(q);
        let s = a.dot(&p);
        pos_sum += -clamp_prob(s).ln();
        if s > BCE_EPS && s < 1.0 - BCE_EPS && pos_scale > 0.0 {
            let g = -pos_scale / s;
            d_a.row_mut(r).scaled_add(g, &p);
            d_p.row_mut(q).scaled_add(g, &a);
        }
    }

    let mut neg_sum = 0.0;
    let neg_scale = weights.lambda_neg / negatives.nrows() as f64;
    for q in 0..negatives.nrows() {
        let r = q / n_neg;
        let a = ca.probs.row(r);
        let nrow = cn.probs.row(q);
        let u = 1.0 - a.dot(&nrow);
        neg_sum += -clamp_prob(u).ln();
        if u > BCE_EPS && u < 1.0 - BCE_EPS && neg_scale > 0.0 {
            let g = neg_scale / u;
            d_a.row_mut(r).scaled_add(g, &nrow);
            d_n.row_mut(q).scaled_add(g, &a);
        }
    }

    let q_mean = mean_row(&ca.probs.view());
    let ent = (k as f64).ln() - entropy(&q_mean);
    if weights.lambda_ent > 0.0 {
        // ∂(ln K − H(q))/∂q_k = ln q_k + 1, and ∂q_k/∂a_rk = 1/m
        let scale = weights.lambda_ent / m as f64;
        let g_q = q_mean.mapv(|v| scale * (v.max(f64::MIN_POSITIVE).ln() + 1.0));
        d_a += &g_q;
    }

    let pos = pos_sum / positives.nrows() as f64;
    let neg = neg_sum / negatives.nrows() as f64;
    let total = weights.lambda_pos * pos + weights.lambda_neg * neg + weights.lambda_ent * ent;

    let mut grads = params.zeros_like();
    let any_weight = weights.lambda_pos > 0.0 || weights.lambda_neg > 0.0 || weights.lambda_ent > 0.0;
    if any_weight {
        backward(params, &ca, &d_a, &mut grads);
    }
    if weights.lambda_pos > 0.0 {
        backward(params, &cp, &d_p, &mut grads);
    }
    if weights.lambda_neg > 0.0 {
        backward(params, &cn, &d_n, &mut grads);
    }
    Ok(BatchGradients { grads, loss: LossParts { pos, neg, ent, total } })
}

/// Copies the listed embedding rows into a dense `f64` batch.
pub fn gather_rows(set: &EmbeddingSet, indices: &[usize]) -> Array2<f64> {
    let dim = set.dim();
    let mut out = Array2::zeros((indices.len(), dim));
    for (mut dst, &i) in out.rows_mut().into_iter().zip(indices) {
        for (d, &v) in dst.iter_mut().zip(set.row(i)) {
            *d = f64::from(v);
        }
    }
    out
}

const PREDICT_CHUNK: usize = 1024;

/// Probabilities for every sample of a set, computed in chunks.
pub fn predict_probs(params: &HeadParams, set: &EmbeddingSet) -> Result<Array2<f64>> {
    if set.dim() != params.dim {
        return Err(Error::Shape(format!("embedding dim {} does not match head dim {}", set.dim(), params.dim)));
    }
    let mut out = Array2::zeros((set.n(), params.k));
    let all: Vec<usize> = (0..set.n()).collect();
    for (c, chunk) in all.chunks(PREDICT_CHUNK).enumerate() {
        let probs = forward(params, gather_rows(set, chunk).view())?;
        let start = c * PREDICT_CHUNK;
        out.slice_mut(s![start..start + chunk.len(), ..]).assign(&probs);
    }
    Ok(out)
}

/// Argmax cluster per row; ties go to the lowest cluster id.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn predict(params: &HeadParams, set: &EmbeddingSet) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_probs(params, set)?))
}

/// Largest share of samples assigned to a single cluster.
pub fn argmax_concentration(assignments: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k.max(1)];
    for &a in assignments {
        counts[a] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / assignments.len().max(1) as f64
}

/// `UNICHEAD` encoding: magic, `u8` kind (0 = mlp, 1 = linear), `u32` dim,
/// `u32` hidden, `u32` k, then each weight matrix (row-major, in × out)
/// and bias as little-endian `f32`, in layer order.
pub fn encode_head(params: &HeadParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(21 + 4 * params.param_count());
    buf.extend_from_slice(HEAD_MAGIC);
    buf.push(params.kind.code());
    for v in [params.dim, params.hidden, params.k] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in params.values() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_head(bytes: &[u8]) -> Result<HeadParams> {
    if bytes.len() < 21 {
        return Err(Error::Truncated);
    }
    if &bytes[..8] != HEAD_MAGIC {
        return Err(Error::BadMagic { expected: "UNICHEAD" });
    }
    let kind = match bytes[8] {
        0 => HeadKind::Mlp,
        1 => HeadKind::Linear,
        other => return Err(Error::InvalidArgument(format!("head kind {other}"))),
    };
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (dim, hidden, k) = (word(9), word(13), word(17));
    let mut params = HeadParams::zeros(kind, dim, hidden, k)?;
    let payload = &bytes[21..];
    let expected = 4 * params.param_count();
    if payload.len() < expected {
        return Err(Error::Truncated);
    }
    if payload.len() > expected {
        return Err(Error::Shape(format!("{} trailing bytes", payload.len() - expected)));
    }
    for (dst, c) in params.values_mut().zip(payload.chunks_exact(4)) {
        *dst = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(params)
}

pub fn write_head(params: &HeadParams, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_head(params))?;
    w.flush()?;
    Ok(())
}

pub fn read_head(path: impl AsRef<Path>) -> Result<HeadParams> {
    decode_head(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, concatenate};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((m, dim), || rng.random_range(-1.5..1.5))
    }

    #[test]
    fn zero_params_give_uniform_rows() {
        let params = HeadParams::zeros(HeadKind::Mlp, 3, 5, 4).unwrap();
        let probs = forward(&params, array![[1.0, -2.0, 0.5], [0.0, 0.0, 9.0]].view()).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn linear_logit_limit_is_monotone() {
        let mut params = HeadParams::zeros(HeadKind::Linear, 1, 0, 2).unwrap();
        params.layers[0].weight = array![[1.0, -1.0]];
        let mut last = 0.5;
        for t in [0.5, 1.0, 2.0, 5.0, 10.0, 40.0] {
            let p = forward(&params, array![[t]].view()).unwrap();
            assert!(p[[0, 0]] > last);
            last = p[[0, 0]];
        }
        assert!((1.0 - last) < 1e-30);
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = HeadParams::init(HeadKind::Mlp, 8, 16, 4, &mut rng).unwrap();
        let probs = forward(&params, random_batch(&mut rng, 6, 8).view()).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert!(forward(&params, random_batch(&mut rng, 2, 7).view()).is_err());
    }

    #[test]
    fn pairwise_loss_values() {
        let one = [1.0, 0.0];
        let other = [0.0, 1.0];
        let half = [0.5, 0.5];
        assert!((loss_pos(&one, &one) - -(1.0 - BCE_EPS).ln()).abs() < 1e-15);
        assert!((loss_pos(&half, &half) - 2f64.ln()).abs() < 1e-12);
        assert!((loss_pos(&one, &other) - 16.118_095_650_958_32).abs() < 1e-9);
        assert!(loss_neg(&one, &other) < 1e-6);
        assert!((loss_neg(&one, &one) - 16.118_095_650_958_32).abs() < 1e-9);
        let quarter = [0.25; 4];
        assert!((loss_neg(&quarter, &quarter) - -(0.75f64).ln()).abs() < 1e-12);
        assert!((-(0.75f64).ln() - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn entropy_loss_values() {
        let uniform = Array2::from_elem((3, 5), 0.2);
        assert!(loss_ent(uniform.view()).abs() < 1e-12);
        let mut same = Array2::zeros((4, 10));
        same.column_mut(3).fill(1.0);
        assert!((loss_ent(same.view()) - 10f64.ln()).abs() < 1e-12);
        let distinct = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(loss_ent(distinct.view()).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_total_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = HeadParams::init(HeadKind::Mlp, 4, 6, 3, &mut rng).unwrap();
        let b = random_batch(&mut rng, 5, 4);
        let out = loss_and_grad(&params, b.view(), b.view(), b.view(), &LossWeights::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(out.loss.total, 0.0);
        assert!(out.grads.values().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = HeadParams::init(HeadKind::Mlp, 8, 16, 4, &mut rng).unwrap();
        let (a, p, n) = (random_batch(&mut rng, 6, 8), random_batch(&mut rng, 6, 8), random_batch(&mut rng, 6, 8));
        let w = LossWeights::default();
        let once = loss_and_grad(&params, a.view(), p.view(), n.view(), &w).unwrap();
        let dup = |x: &Array2<f64>| concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let twice = loss_and_grad(&params, dup(&a).view(), dup(&p).view(), dup(&n).view(), &w).unwrap();
        assert!((once.loss.total - twice.loss.total).abs() < 1e-12);
        for (x, y) in once.grads.values().zip(twice.grads.values()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn one_hot_outputs_stay_finite() {
        // logits far apart saturate the softmax into exact one-hots
        let mut params = HeadParams::zeros(HeadKind::Linear, 2, 0, 2).unwrap();
        params.layers[0].weight = array![[1e4, -1e4], [-1e4, 1e4]];
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let b = array![[0.0, 1.0], [1.0, 0.0]];
        for (p, n) in [(&a, &b), (&b, &a), (&a, &a)] {
            let out = loss_and_grad(&params, a.view(), p.view(), n.view(), &LossWeights::default()).unwrap();
            let parts = [out.loss.pos, out.loss.neg, out.loss.ent, out.loss.total];
            assert!(parts.iter().all(|v| v.is_finite()));
            assert!(out.grads.is_finite());
        }
    }

    #[test]
    fn multiple_pairs_per_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = HeadParams::init(HeadKind::Linear, 3, 0, 3, &mut rng).unwrap();
        let a = random_batch(&mut rng, 2, 3);
        let p = random_batch(&mut rng, 4, 3);
        let n = random_batch(&mut rng, 6, 3);
        let out = loss_and_grad(&params, a.view(), p.view(), n.view(), &LossWeights::default()).unwrap();
        let pa = forward(&params, a.view()).unwrap();
        let pp = forward(&params, p.view()).unwrap();
        let expect: f64 = (0..4)
            .map(|q| loss_pos(pa.row(q / 2).as_slice().unwrap(), pp.row(q).as_slice().unwrap()))
            .sum::<f64>()
            / 4.0;
        assert!((out.loss.pos - expect).abs() < 1e-12);
        assert!(loss_and_grad(&params, a.view(), a.slice(s![..1, ..]), n.view(), &LossWeights::default()).is_err());
    }

    #[test]
    fn head_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in [HeadKind::Mlp, HeadKind::Linear] {
            let params = HeadParams::init(kind, 5, 7, 3, &mut rng).unwrap();
            let bytes = encode_head(&params);
            assert_eq!(bytes.len(), 21 + 4 * params.param_count());
            let back = decode_head(&bytes).unwrap();
            assert_eq!(encode_head(&back), bytes);
            assert!(matches!(decode_head(&bytes[..bytes.len() - 1]), Err(Error::Truncated)));
        }
    }

    fn permute_outputs(params: &HeadParams, perm: &[usize]) -> HeadParams {
        let mut out = params.clone();
        let last = out.layers.last_mut().unwrap();
        let src = params.layers.last().unwrap();
        for (new, &old) in perm.iter().enumerate() {
            last.weight.column_mut(new).assign(&src.weight.column(old));
            last.bias[new] = src.bias[old];
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn output_permutation_is_equivariant(seed in 0u64..10_000, linear in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kind = if linear { HeadKind::Linear } else { HeadKind::Mlp };
            let params = HeadParams::init(kind, 5, 9, 4, &mut rng).unwrap();
            let perm = [2usize, 0, 3, 1];
            let permuted = permute_outputs(&params, &perm);
            let (a, p, n) = (random_batch(&mut rng, 5, 5), random_batch(&mut rng, 5, 5), random_batch(&mut rng, 5, 5));
            let y = forward(&params, a.view()).unwrap();
            let yp = forward(&permuted, a.view()).unwrap();
            for r in 0..5 {
                for (new, &old) in perm.iter().enumerate() {
                    prop_assert!((yp[[r, new]] - y[[r, old]]).abs() < 1e-12);
                }
            }
            let w = LossWeights::default();
            let l1 = loss_and_grad(&params, a.view(), p.view(), n.view(), &w).unwrap().loss;
            let l2 = loss_and_grad(&permuted, a.view(), p.view(), n.view(), &w).unwrap().loss;
            prop_assert!((l1.pos - l2.pos).abs() < 1e-10);
            prop_assert!((l1.neg - l2.neg).abs() < 1e-10);
            prop_assert!((l1.ent - l2.ent).abs() < 1e-10);
        }

        #[test]
        fn losses_stay_in_bounds(raw in proptest::collection::vec(0.0f64..1.0, 12), hot in 0usize..4) {
            let mut probs = Array2::from_shape_vec((3, 4), raw).unwrap();
            for mut row in probs.rows_mut() {
                let s = row.sum();
                if s == 0.0 { row.fill(0.0); row[hot] = 1.0; } else { row /= s; }
            }
            let cap = -BCE_EPS.ln() + 1e-12;
            for i in 0..3 {
                for j in 0..3 {
                    let (a, b) = (probs.row(i).to_vec(), probs.row(j).to_vec());
                    let (lp, ln) = (loss_pos(&a, &b), loss_neg(&a, &b));
                    prop_assert!(lp >= 0.0 && lp <= cap && ln >= 0.0 && ln <= cap);
                }
            }
            let e = loss_ent(probs.view());
            prop_assert!(e >= -1e-12 && e <= 4f64.ln() + 1e-12);
        }
    }
}

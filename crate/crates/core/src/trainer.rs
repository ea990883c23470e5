//! Minibatch training of the clustering head with Adam and an
//! epoch-level cosine learning-rate schedule.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed_store::{EmbeddingSet, SplitSpec};
use crate::error::{Error, Result};
use crate::head::{self, gather_rows, HeadKind, HeadParams, LossParts, LossWeights};
use crate::metrics;
use crate::neighbor_graph::{Mode, NeighborIndex, Sampler, SupervisionConfig};

/// `lr0 · ½(1 + cos(π · epoch / total_epochs))`.
pub fn cosine_lr(lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: HeadParams,
    pub v: HeadParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &HeadParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut HeadParams,
    grads: &HeadParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Diverged);
    }
    if grads.param_count() != params.param_count() || state.m.param_count() != params.param_count() {
        return Err(Error::Shape("adam state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let moments = state.m.values_mut().zip(state.v.values_mut());
    for ((p, g), (m, v)) in params.values_mut().zip(grads.values()).zip(moments) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if !params.is_finite() {
        return Err(Error::Diverged);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub supervision: SupervisionConfig,
    pub positives_per_anchor: usize,
    pub negatives_per_anchor: usize,
    pub head_kind: HeadKind,
    pub hidden: usize,
    pub k: usize,
    /// Score the head against known labels after every epoch.
    pub eval_each_epoch: bool,
}

impl TrainConfig {
    pub fn new(k: usize) -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr0: 1e-4,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            supervision: SupervisionConfig::clustering(),
            positives_per_anchor: 1,
            negatives_per_anchor: 1,
            head_kind: HeadKind::Mlp,
            hidden: 2048,
            k,
            eval_each_epoch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.positives_per_anchor == 0 || self.negatives_per_anchor == 0 {
            return bad("at least one positive and one negative per anchor");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        self.weights.validate()?;
        self.supervision.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Row-weighted means over the epoch's steps.
    pub loss: LossParts,
    pub metrics: Option<EpochMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let with_metrics = self.epochs.iter().any(|e| e.metrics.is_some());
        let mut out = String::from("epoch,lr,loss_pos,loss_neg,loss_ent,total");
        if with_metrics {
            out.push_str(",acc,nmi,ari");
        }
        out.push('\n');
        for e in &self.epochs {
            let l = &e.loss;
            write!(out, "{},{},{},{},{},{}", e.epoch, e.lr, l.pos, l.neg, l.ent, l.total).unwrap();
            if with_metrics {
                match &e.metrics {
                    Some(m) => write!(out, ",{},{},{}", m.acc, m.nmi, m.ari).unwrap(),
                    None => out.push_str(",,,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Splits a shuffled order into batches; a trailing single anchor joins the
/// previous batch so every batch has at least two rows.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Trains a fresh head against the mined supervision. Deterministic given
/// the inputs and `cfg.seed`.
pub fn train(
    set: &EmbeddingSet,
    index: &NeighborIndex,
    split: Option<&SplitSpec>,
    cfg: &TrainConfig,
) -> Result<(HeadParams, TrainHistory)> {
    cfg.validate()?;
    if cfg.supervision.mode == Mode::Gcd && split.is_none() {
        return Err(Error::InvalidArgument("gcd mode requires a split".into()));
    }
    let sampler = Sampler::new(set, index, split, cfg.supervision)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = HeadParams::init(cfg.head_kind, set.dim(), cfg.hidden, cfg.k, &mut rng)?;
    let mut adam = AdamState::new(&params);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..set.n()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr0, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        for batch in batches(&order, cfg.batch_size) {
            let mut pos = Vec::with_capacity(batch.len() * cfg.positives_per_anchor);
            let mut neg = Vec::with_capacity(batch.len() * cfg.negatives_per_anchor);
            for &a in batch {
                for _ in 0..cfg.positives_per_anchor {
                    pos.push(sampler.sample_positive(a, &mut rng)?);
                }
                for _ in 0..cfg.negatives_per_anchor {
                    neg.push(sampler.sample_negative(a, &mut rng)?);
                }
            }
            let out = head::loss_and_grad(
                &params,
                gather_rows(set, batch).view(),
                gather_rows(set, &pos).view(),
                gather_rows(set, &neg).view(),
                &cfg.weights,
            )?;
            if !out.loss.total.is_finite() {
                return Err(Error::Diverged);
            }
            adam_step(&mut params, &out.grads, &mut adam, lr, &cfg.adam)?;
            let w = batch.len() as f64;
            sums.pos += w * out.loss.pos;
            sums.neg += w * out.loss.neg;
            sums.ent += w * out.loss.ent;
            sums.total += w * out.loss.total;
        }
        let n = set.n() as f64;
        let loss = LossParts { pos: sums.pos / n, neg: sums.neg / n, ent: sums.ent / n, total: sums.total / n };
        let metrics = match (cfg.eval_each_epoch, set.labels()) {
            (true, Some(labels)) => {
                let pred = head::predict(&params, set)?;
                let r = metrics::cluster_report(&pred, labels, cfg.k)?;
                Some(EpochMetrics { acc: r.acc, nmi: r.nmi, ari: r.ari })
            }
            _ => None,
        };
        history.epochs.push(EpochRecord { epoch, lr, loss, metrics });
    }
    Ok((params, history))
}

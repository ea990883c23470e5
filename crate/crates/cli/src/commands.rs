use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use unic_core::baselines::{self, KMeansConfig};
use unic_core::embed_store::{self, EmbeddingSet, MixtureParams, SplitSpec};
use unic_core::head::{self, HeadKind, LossWeights};
use unic_core::knn;
use unic_core::metrics::{self, MetricsReport};
use unic_core::neighbor_graph::{self, Mode, NegativeSource, NeighborIndex, PositiveSource, SupervisionConfig};
use unic_core::trainer::{self, TrainConfig};

use crate::config::RunConfig;
use crate::UsageError;

const DEFAULT_TAU1: usize = 10;
const DEFAULT_ETA: usize = 70;
const COLLAPSE_THRESHOLD: f64 = 0.9;

fn out_dir(cfg: &mut RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.get_or("out", ".".to_string())?);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn path_or(cfg: &mut RunConfig, key: &str, out: &Path, name: &str) -> Result<PathBuf> {
    let default = out.join(name).display().to_string();
    Ok(PathBuf::from(cfg.get_or(key, default)?))
}

fn echo(cfg: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    let path = dir.join(format!("{command}.config"));
    fs::write(&path, cfg.render()).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_input(cfg: &mut RunConfig, out: &Path) -> Result<EmbeddingSet> {
    if let Some(path) = cfg.get::<String>("csv")? {
        return embed_store::read_csv(&path, false).with_context(|| format!("reading {path}"));
    }
    if let Some(path) = cfg.get::<String>("csv_labels")? {
        return embed_store::read_csv(&path, true).with_context(|| format!("reading {path}"));
    }
    let path = path_or(cfg, "embeddings", out, "embeddings.emb")?;
    embed_store::read_embeddings(&path).with_context(|| format!("reading {}", path.display()))
}

fn load_split(cfg: &RunConfig, set: &EmbeddingSet) -> Result<SplitSpec> {
    let path: String = cfg
        .get("split")?
        .ok_or_else(|| UsageError("gcd mode requires --split".into()))?;
    let split = SplitSpec::read_json(&path).with_context(|| format!("reading {path}"))?;
    split.validate(set)?;
    Ok(split)
}

fn cluster_count(cfg: &mut RunConfig, set: &EmbeddingSet) -> Result<usize> {
    match cfg.get::<usize>("k")? {
        Some(k) => Ok(k),
        None if set.class_count() > 0 => cfg.get_or("k", set.class_count()),
        None => Err(UsageError("--k is required when the embeddings carry no labels".into()).into()),
    }
}

fn mining_params(cfg: &mut RunConfig, n: usize) -> Result<(usize, usize, usize)> {
    Ok((cfg.get_or("tau1", DEFAULT_TAU1)?, cfg.get_or("tau2", n / 2)?, cfg.get_or("eta", DEFAULT_ETA)?))
}

fn report_for(pred: &[usize], set: &EmbeddingSet, split: Option<&SplitSpec>, k: usize) -> Result<MetricsReport> {
    let labels = set.require_labels()?;
    Ok(match split {
        Some(split) => metrics::gcd_report(pred, labels, split, k)?,
        None => metrics::cluster_report(pred, labels, k)?,
    })
}

pub fn gen(cfg: &mut RunConfig) -> Result<()> {
    let n = cfg.get_or("n", 2000usize)?;
    let dim = cfg.get_or("dim", 32usize)?;
    let k = cfg.get_or("classes", 10usize)?;
    let separation = cfg.get_or("sep", 6.0f64)?;
    let seed = cfg.get_or("seed", 0u64)?;
    let labeled_fraction = cfg.get_or("labeled_frac", 0.0f64)?;
    let old_class_fraction = cfg.get_or("old_frac", 0.0f64)?;
    let params = MixtureParams { k, dim, n, separation, seed, labeled_fraction, old_class_fraction };
    params.validate()?;

    // `--out x.emb` names the embedding file itself
    let out: String = cfg.get_or("out", ".".to_string())?;
    let (dir, emb, split_path) = if out.ends_with(".emb") {
        let emb = PathBuf::from(&out);
        let dir = emb.parent().filter(|p| !p.as_os_str().is_empty()).map_or(PathBuf::from("."), Path::to_path_buf);
        let split = emb.with_extension("split.json");
        (dir, emb, split)
    } else {
        let dir = PathBuf::from(&out);
        (dir.clone(), dir.join("embeddings.emb"), dir.join("split.json"))
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let (set, split) = embed_store::generate_gaussian_mixture(&params)?;
    embed_store::write_embeddings(&set, &emb).with_context(|| format!("writing {}", emb.display()))?;
    split.write_json(&split_path).with_context(|| format!("writing {}", split_path.display()))?;

    let mut summary = format!("n={n} dim={dim} k={k}");
    if n > DEFAULT_TAU1 {
        let nbs = knn::compute_neighborhoods(&set, DEFAULT_TAU1, n)?;
        let purity = knn::positive_purity(&nbs, set.labels().expect("generated sets are labeled"));
        summary.push_str(&format!(" purity@{DEFAULT_TAU1}={purity:.4}"));
    }
    if split.labeled_count() > 0 {
        summary.push_str(&format!(" old_classes={} labeled={}", split.old_classes.len(), split.labeled_count()));
    }
    println!("{summary} embeddings={} split={}", emb.display(), split_path.display());
    echo(cfg, &dir, "gen")
}

pub fn mine(cfg: &mut RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let set = load_input(cfg, &out)?;
    let (tau1, tau2, eta) = mining_params(cfg, set.n())?;
    let index = NeighborIndex::build(&set, tau1, tau2, eta)?;
    let path = path_or(cfg, "neighbors", &out, "neighbors.nbr")?;
    neighbor_graph::write_index(&index, &path).with_context(|| format!("writing {}", path.display()))?;

    let mut summary = format!("tau1={tau1} tau2={tau2} eta={eta} removed_fraction={:.4}", index.removed_fraction());
    if let Some(labels) = set.labels() {
        let at_eta = neighbor_graph::neighbor_stats(&index, labels, &[eta])?;
        let row = &at_eta.rows[0];
        summary.push_str(&format!(" retained_purity={:.4} removed_purity={:.4}", row.retained_purity, row.removed_purity));
        let sweep = neighbor_graph::neighbor_stats(&index, labels, &neighbor_graph::eta_sweep(tau1, 10))?;
        write_text(&out.join("neighbor_stats.csv"), &sweep.to_csv())?;
        write_text(&out.join("union_hist.csv"), &sweep.histogram_csv())?;
    }
    println!("{summary} neighbors={}", path.display());
    echo(cfg, &out, "mine")
}

fn supervision(cfg: &mut RunConfig, mode: Mode) -> Result<SupervisionConfig> {
    let base = match mode {
        Mode::Cluster => SupervisionConfig::clustering(),
        Mode::Gcd => SupervisionConfig::gcd_mined_negatives(),
    };
    let sup = SupervisionConfig {
        mode,
        positive_source_labeled: cfg.get_or::<PositiveSource>("pos_labeled", base.positive_source_labeled)?,
        positive_source_unlabeled: cfg.get_or::<PositiveSource>("pos_unlabeled", base.positive_source_unlabeled)?,
        negative_source_labeled: cfg.get_or::<NegativeSource>("neg_labeled", base.negative_source_labeled)?,
        negative_source_unlabeled: cfg.get_or::<NegativeSource>("neg_unlabeled", base.negative_source_unlabeled)?,
        labeled_negative_fraction: cfg.get_or("alpha", base.labeled_negative_fraction)?,
    };
    sup.validate()?;
    Ok(sup)
}

pub fn train(cfg: &mut RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let set = load_input(cfg, &out)?;
    let mode = cfg.get_or("mode", Mode::Cluster)?;
    let split = match mode {
        Mode::Gcd => Some(load_split(cfg, &set)?),
        Mode::Cluster => None,
    };
    let nbr_path = path_or(cfg, "neighbors", &out, "neighbors.nbr")?;
    let index = neighbor_graph::read_index_for(&nbr_path, &set).with_context(|| format!("reading {}", nbr_path.display()))?;

    let head_kind: HeadKind = cfg.get_or("head", "mlp".to_string())?.parse()?;
    let k = cluster_count(cfg, &set)?;
    let defaults = TrainConfig::new(k);
    let tc = TrainConfig {
        epochs: cfg.get_or("epochs", defaults.epochs)?,
        batch_size: cfg.get_or("batch", defaults.batch_size)?,
        lr0: cfg.get_or("lr", defaults.lr0)?,
        weights: LossWeights::new(
            cfg.get_or("lambda_pos", defaults.weights.lambda_pos)?,
            cfg.get_or("lambda_neg", defaults.weights.lambda_neg)?,
            cfg.get_or("lambda_ent", defaults.weights.lambda_ent)?,
        ),
        seed: cfg.get_or("seed", 0u64)?,
        supervision: supervision(cfg, mode)?,
        head_kind,
        hidden: cfg.get_or("hidden", defaults.hidden)?,
        eval_each_epoch: cfg.get_flag("eval_each_epoch")?,
        ..defaults
    };

    let (params, history) = trainer::train(&set, &index, split.as_ref(), &tc)?;
    let model = path_or(cfg, "model", &out, "model.head")?;
    head::write_head(&params, &model).with_context(|| format!("writing {}", model.display()))?;
    write_text(&out.join("history.csv"), &history.to_csv())?;

    let pred = head::predict(&params, &set)?;
    let concentration = head::argmax_concentration(&pred, k);
    if concentration > COLLAPSE_THRESHOLD {
        eprintln!("warning: collapse: {:.1}% of samples share one cluster", 100.0 * concentration);
    }
    let last = history.epochs.last().expect("at least one epoch");
    let mut summary = format!("epochs={} final_loss={:.6} model={}", history.epochs.len(), last.loss.total, model.display());
    if set.labels().is_some() {
        let report = report_for(&pred, &set, split.as_ref(), k)?;
        summary.push_str(&format!(" metrics={}", report.to_json()));
    }
    println!("{summary}");
    echo(cfg, &out, "train")
}

pub fn eval(cfg: &mut RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let set = load_input(cfg, &out)?;
    let protocol = cfg.get_or("protocol", Mode::Cluster)?;
    let (pred, model_k) = match cfg.get::<String>("pred")? {
        Some(path) => {
            let pred = baselines::read_assignments_csv(&path).with_context(|| format!("reading {path}"))?;
            if pred.len() != set.n() {
                return Err(unic_core::Error::CountMismatch { expected: set.n(), found: pred.len() }.into());
            }
            let k = pred.iter().max().map_or(0, |m| m + 1);
            (pred, k)
        }
        None => {
            let path = path_or(cfg, "model", &out, "model.head")?;
            let params = head::read_head(&path).with_context(|| format!("reading {}", path.display()))?;
            (head::predict(&params, &set)?, params.k)
        }
    };
    let k = match cfg.get::<usize>("k")? {
        Some(k) => k,
        None => cfg.get_or("k", model_k.max(set.class_count()))?,
    };
    let split = match protocol {
        Mode::Gcd => Some(load_split(cfg, &set)?),
        Mode::Cluster => None,
    };
    let report = report_for(&pred, &set, split.as_ref(), k)?;
    let path = path_or(cfg, "report", &out, "report.json")?;
    report.write_json(&path).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", report.to_json());
    echo(cfg, &out, "eval")
}

pub fn kmeans(cfg: &mut RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let set = load_input(cfg, &out)?;
    let k = cluster_count(cfg, &set)?;
    let defaults = KMeansConfig::new(k, 0);
    let kc = KMeansConfig {
        k,
        seed: cfg.get_or("seed", 0u64)?,
        restarts: cfg.get_or("restarts", defaults.restarts)?,
        max_iter: cfg.get_or("max_iter", defaults.max_iter)?,
        tol: cfg.get_or("tol", defaults.tol)?,
    };
    let result = baselines::kmeans(&set, &kc)?;
    baselines::write_assignments_csv(&result.assignments, out.join("kmeans_assignments.csv"))?;
    let json = if set.labels().is_some() {
        let report = report_for(&result.assignments, &set, None, k)?;
        report.write_json(out.join("kmeans_report.json"))?;
        report.to_json()
    } else {
        serde_json::json!({ "inertia": result.inertia, "iterations": result.iterations }).to_string()
    };
    println!("{json}");
    echo(cfg, &out, "kmeans")
}

pub fn stats(cfg: &mut RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let set = load_input(cfg, &out)?;
    let labels = set.require_labels()?;
    let index = match cfg.get::<String>("neighbors")? {
        Some(path) => neighbor_graph::read_index_for(&path, &set).with_context(|| format!("reading {path}"))?,
        None => {
            let (tau1, tau2, eta) = mining_params(cfg, set.n())?;
            NeighborIndex::build(&set, tau1, tau2, eta)?
        }
    };
    let steps = cfg.get_or("steps", 10usize)?;
    let report = neighbor_graph::neighbor_stats(&index, labels, &neighbor_graph::eta_sweep(index.tau1, steps))?;
    write_text(&out.join("neighbor_stats.csv"), &report.to_csv())?;
    write_text(&out.join("union_hist.csv"), &report.histogram_csv())?;

    let stride = cfg.get_or("curve_stride", (set.n() / 100).max(1))?;
    let curve = knn::neighbor_accuracy_curve(&set, stride)?;
    let mut csv = String::from("rank_fraction,same_class_rate\n");
    for (r, rate) in &curve {
        csv.push_str(&format!("{r},{rate}\n"));
    }
    write_text(&out.join("neighbor_curve.csv"), &csv)?;
    println!(
        "tau1={} tau2={} eta={} removed_fraction={:.4} thresholds={} curve_points={}",
        index.tau1,
        index.tau2,
        index.eta,
        index.removed_fraction(),
        report.rows.len(),
        curve.len()
    );
    echo(cfg, &out, "stats")
}

//! `unic`: generate, mine, train, evaluate and compare against k-means from
//! the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Bad flags, config keys or argument values. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "unic", version, about = "Neighbor-mined clustering heads on precomputed embeddings")]
pub struct Cli {
    /// Flat `key = value` file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for mining and k-means restarts.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Input {
    /// UNICEMB1 embedding file [default: <out>/embeddings.emb]
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Headerless CSV, one sample per row.
    #[arg(long, conflicts_with_all = ["embeddings", "csv_labels"])]
    csv: Option<PathBuf>,
    /// Headerless CSV whose last column is an integer label.
    #[arg(long, conflicts_with = "embeddings")]
    csv_labels: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a synthetic Gaussian mixture and its labeled/unlabeled split.
    Gen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Minimum distance between component means.
        #[arg(long)]
        sep: Option<f64>,
        /// Share of each Old class that is labeled.
        #[arg(long)]
        labeled_frac: Option<f64>,
        /// Share of classes that are Old.
        #[arg(long)]
        old_frac: Option<f64>,
    },
    /// Mine positive neighbors and negative cutoffs, then clean.
    Mine {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        tau1: Option<usize>,
        /// [default: n/2]
        #[arg(long)]
        tau2: Option<usize>,
        #[arg(long)]
        eta: Option<usize>,
        /// [default: <out>/neighbors.nbr]
        #[arg(long)]
        neighbors: Option<PathBuf>,
    },
    /// Train a clustering head.
    Train(TrainArgs),
    /// Score a model or a prediction CSV against known labels.
    Eval {
        #[command(flatten)]
        input: Input,
        /// cluster or gcd.
        #[arg(long)]
        protocol: Option<String>,
        /// [default: <out>/model.head]
        #[arg(long)]
        model: Option<PathBuf>,
        /// `index,cluster` predictions instead of a model.
        #[arg(long, conflicts_with = "model")]
        pred: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// [default: <out>/report.json]
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// k-means++ / Lloyd baseline.
    Kmeans {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Union-size histogram, cleaning sweep and neighbor-accuracy curve.
    Stats {
        #[command(flatten)]
        input: Input,
        /// Existing index; mined from the embeddings when absent.
        #[arg(long)]
        neighbors: Option<PathBuf>,
        #[arg(long)]
        tau1: Option<usize>,
        #[arg(long)]
        tau2: Option<usize>,
        #[arg(long)]
        eta: Option<usize>,
        /// Number of eta values in the sweep.
        #[arg(long)]
        steps: Option<usize>,
        /// Rank stride of the neighbor-accuracy curve.
        #[arg(long)]
        curve_stride: Option<usize>,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    input: Input,
    /// cluster or gcd.
    #[arg(long)]
    mode: Option<String>,
    /// Split file (required in gcd mode).
    #[arg(long)]
    split: Option<PathBuf>,
    /// [default: <out>/neighbors.nbr]
    #[arg(long)]
    neighbors: Option<PathBuf>,
    /// [default: <out>/model.head]
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of clusters [default: number of classes in the labels]
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_pos: Option<f64>,
    #[arg(long)]
    lambda_neg: Option<f64>,
    #[arg(long)]
    lambda_ent: Option<f64>,
    /// mlp or linear.
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Labeled-negative share for labeled anchors.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    pos_labeled: Option<String>,
    #[arg(long)]
    pos_unlabeled: Option<String>,
    #[arg(long)]
    neg_labeled: Option<String>,
    #[arg(long)]
    neg_unlabeled: Option<String>,
    /// Record accuracy/NMI/ARI in the history after every epoch.
    #[arg(long)]
    eval_each_epoch: bool,
}

fn display(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl Input {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.set("embeddings", display(&self.embeddings));
        cfg.set("csv", display(&self.csv));
        cfg.set("csv_labels", display(&self.csv_labels));
    }
}

/// Merges the config file with the flags of this invocation.
fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.set("seed", cli.seed);
    cfg.set("threads", cli.threads);
    cfg.set("out", display(&cli.out));
    match &cli.command {
        Command::Gen { n, dim, classes, sep, labeled_frac, old_frac } => {
            cfg.set("n", *n);
            cfg.set("dim", *dim);
            cfg.set("classes", *classes);
            cfg.set("sep", *sep);
            cfg.set("labeled_frac", *labeled_frac);
            cfg.set("old_frac", *old_frac);
        }
        Command::Mine { input, tau1, tau2, eta, neighbors } => {
            input.apply(&mut cfg);
            cfg.set("tau1", *tau1);
            cfg.set("tau2", *tau2);
            cfg.set("eta", *eta);
            cfg.set("neighbors", display(neighbors));
        }
        Command::Train(a) => {
            a.input.apply(&mut cfg);
            cfg.set("mode", a.mode.as_ref());
            cfg.set("split", display(&a.split));
            cfg.set("neighbors", display(&a.neighbors));
            cfg.set("model", display(&a.model));
            cfg.set("k", a.k);
            cfg.set("epochs", a.epochs);
            cfg.set("batch", a.batch);
            cfg.set("lr", a.lr);
            cfg.set("lambda_pos", a.lambda_pos);
            cfg.set("lambda_neg", a.lambda_neg);
            cfg.set("lambda_ent", a.lambda_ent);
            cfg.set("head", a.head.as_ref());
            cfg.set("hidden", a.hidden);
            cfg.set("alpha", a.alpha);
            cfg.set("pos_labeled", a.pos_labeled.as_ref());
            cfg.set("pos_unlabeled", a.pos_unlabeled.as_ref());
            cfg.set("neg_labeled", a.neg_labeled.as_ref());
            cfg.set("neg_unlabeled", a.neg_unlabeled.as_ref());
            cfg.set("eval_each_epoch", a.eval_each_epoch.then_some(true));
        }
        Command::Eval { input, protocol, model, pred, split, k, report } => {
            input.apply(&mut cfg);
            cfg.set("protocol", protocol.as_ref());
            cfg.set("model", display(model));
            cfg.set("pred", display(pred));
            cfg.set("split", display(split));
            cfg.set("k", *k);
            cfg.set("report", display(report));
        }
        Command::Kmeans { input, k, restarts, max_iter, tol } => {
            input.apply(&mut cfg);
            cfg.set("k", *k);
            cfg.set("restarts", *restarts);
            cfg.set("max_iter", *max_iter);
            cfg.set("tol", *tol);
        }
        Command::Stats { input, neighbors, tau1, tau2, eta, steps, curve_stride } => {
            input.apply(&mut cfg);
            cfg.set("neighbors", display(neighbors));
            cfg.set("tau1", *tau1);
            cfg.set("tau2", *tau2);
            cfg.set("eta", *eta);
            cfg.set("steps", *steps);
            cfg.set("curve_stride", *curve_stride);
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve(&cli)?;
    if let Some(threads) = cfg.get::<usize>("threads")? {
        if threads == 0 {
            return Err(UsageError("threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    match cli.command {
        Command::Gen { .. } => commands::gen(&mut cfg),
        Command::Mine { .. } => commands::mine(&mut cfg),
        Command::Train(_) => commands::train(&mut cfg),
        Command::Eval { .. } => commands::eval(&mut cfg),
        Command::Kmeans { .. } => commands::kmeans(&mut cfg),
        Command::Stats { .. } => commands::stats(&mut cfg),
    }
}

/// Usage errors exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<unic_core::Error>() {
        Some(unic_core::Error::InvalidArgument(_) | unic_core::Error::TauOrder) => 2,
        _ => 1,
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                e.exit();
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let kind = if code == 2 { "usage" } else { "runtime" };
            eprintln!("error: {kind}: {}", one_line(&format!("{err:#}")));
            ExitCode::from(code)
        }
    }
}

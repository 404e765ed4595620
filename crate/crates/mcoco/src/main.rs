//! Command-line front end: dataset synthesis, training, evaluation, and 2-D
//! embedding export. Exit codes: 0 success, 1 usage/config error, 2 runtime
//! error (including divergence).

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mcoco::data::{generate_synthetic, load_dataset, save_dataset, MultiViewDataset, SynthSpec};
use mcoco::error::{McocoError, Result};
use mcoco::metrics::MetricsReport;
use mcoco::projection::{project_2d, ProjectionMethod};
use mcoco::trainer::{
    evaluate, fit_observed, latents, load_checkpoint, save_checkpoint, AblationFlags,
    TrainingConfig,
};

#[derive(Parser)]
#[command(
    name = "mcoco",
    version,
    about = "Multi-level consistency collaborative multi-view clustering"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblationArg {
    /// All loss terms active.
    Full,
    /// Drop the cluster-level contrastive loss.
    NoSe,
    /// Drop the sharpened-semantic half of the multi-level loss.
    NoMl,
}

impl AblationArg {
    fn flags(self) -> AblationFlags {
        match self {
            AblationArg::Full => AblationFlags {
                use_semantic_loss: true,
                use_multilevel_semantic_term: true,
            },
            AblationArg::NoSe => AblationFlags {
                use_semantic_loss: false,
                use_multilevel_semantic_term: true,
            },
            AblationArg::NoMl => AblationFlags {
                use_semantic_loss: true,
                use_multilevel_semantic_term: false,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Pca,
    Tsne,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset directory.
    Synth {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Number of clusters.
        #[arg(long)]
        k: usize,
        /// Number of views (at least 2).
        #[arg(long)]
        views: usize,
        /// Dimension of the shared latent space the views are generated from.
        #[arg(long, default_value_t = 5)]
        latent_dim: usize,
        /// Comma-separated per-view feature dimensions (default: 10 each).
        #[arg(long, value_delimiter = ',')]
        view_dims: Option<Vec<usize>>,
        /// Comma-separated per-view noise standard deviations (default: 0.05).
        #[arg(long, value_delimiter = ',')]
        noise: Option<Vec<f64>>,
        /// Minimum distance between cluster centers in latent space.
        #[arg(long, default_value_t = 8.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a key=value config file.
    Train {
        /// Config file (see `train --help-config` keys in the README).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's dataset directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's ablation setting.
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Cluster a dataset with a trained checkpoint and report metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for metrics.json and labels.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a 2-D embedding of one view's latent codes as CSV.
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// View index to embed.
        #[arg(long)]
        view: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::Pca)]
        method: MethodArg,
        /// Neighbor-embedding perplexity (tsne only).
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        /// Neighbor-embedding gradient steps (tsne only).
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config parsed from a flat key=value file.
struct RunConfigFile {
    dataset: PathBuf,
    out: PathBuf,
    training: TrainingConfig,
}

fn parse_usize_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| McocoError::Config(format!("invalid integer list entry: {s:?}")))
        })
        .collect()
}

fn parse_config_file(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| McocoError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut dataset: Option<PathBuf> = None;
    let mut out = PathBuf::from(".");
    let mut cfg = TrainingConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            McocoError::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| McocoError::Config(format!("line {}: invalid {what}: {value:?}", lineno + 1));
        match key {
            "dataset" => dataset = Some(PathBuf::from(value)),
            "out" => out = PathBuf::from(value),
            "k" => cfg.k = value.parse().map_err(|_| bad("k"))?,
            "latent_dim" => cfg.latent_dim = value.parse().map_err(|_| bad("latent_dim"))?,
            "encoder_hidden" => cfg.encoder_hidden = parse_usize_list(value)?,
            "generator_hidden" => cfg.generator_hidden = parse_usize_list(value)?,
            "tau" => cfg.tau = value.parse().map_err(|_| bad("tau"))?,
            "lambda1" => cfg.lambda1 = value.parse().map_err(|_| bad("lambda1"))?,
            "lambda2" => cfg.lambda2 = value.parse().map_err(|_| bad("lambda2"))?,
            "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?,
            "adam_beta1" => cfg.adam_beta1 = value.parse().map_err(|_| bad("adam_beta1"))?,
            "adam_beta2" => cfg.adam_beta2 = value.parse().map_err(|_| bad("adam_beta2"))?,
            "adam_eps" => cfg.adam_eps = value.parse().map_err(|_| bad("adam_eps"))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "pretrain_epochs" => cfg.pretrain_epochs = value.parse().map_err(|_| bad("pretrain_epochs"))?,
            "train_epochs" => cfg.train_epochs = value.parse().map_err(|_| bad("train_epochs"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
            "full_dataset_targets" => {
                cfg.full_dataset_targets = value.parse().map_err(|_| bad("full_dataset_targets"))?
            }
            "ablation" => {
                cfg.ablation = match value {
                    "full" => AblationArg::Full.flags(),
                    "no_se" | "no-se" => AblationArg::NoSe.flags(),
                    "no_ml" | "no-ml" => AblationArg::NoMl.flags(),
                    _ => return Err(bad("ablation (full|no_se|no_ml)")),
                }
            }
            other => {
                return Err(McocoError::Config(format!(
                    "line {}: unknown config key {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    cfg.validate()?;
    let dataset = dataset
        .ok_or_else(|| McocoError::Config("config file is missing the `dataset` key".into()))?;
    Ok(RunConfigFile {
        dataset,
        out,
        training: cfg,
    })
}

fn metrics_json(metrics: Option<&MetricsReport>, ds: &MultiViewDataset, k: usize, seed: u64) -> serde_json::Value {
    let field = |f: fn(&MetricsReport) -> f64| -> serde_json::Value {
        match metrics {
            Some(m) => serde_json::json!(f(m)),
            None => serde_json::Value::Null,
        }
    };
    serde_json::json!({
        "acc": field(|m| m.acc),
        "nmi": field(|m| m.nmi),
        "rand_index": field(|m| m.rand_index),
        "fscore": field(|m| m.fscore),
        "n": ds.n_samples(),
        "k": k,
        "m": ds.n_views(),
        "seed": seed,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| McocoError::io(path.display().to_string(), e))
}

fn cmd_synth(
    n: usize,
    k: usize,
    views: usize,
    latent_dim: usize,
    view_dims: Option<Vec<usize>>,
    noise: Option<Vec<f64>>,
    separation: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if views < 2 {
        return Err(McocoError::Config("at least 2 views are required".into()));
    }
    let view_dims = view_dims.unwrap_or_else(|| vec![10; views]);
    let noise_sigmas = noise.unwrap_or_else(|| vec![0.05; views]);
    if view_dims.len() != views || noise_sigmas.len() != views {
        return Err(McocoError::Config(format!(
            "--view-dims and --noise must have {} entries",
            views
        )));
    }
    let spec = SynthSpec {
        n_samples: n,
        n_clusters: k,
        n_views: views,
        latent_dim,
        view_dims: view_dims.clone(),
        noise_sigmas,
        cluster_separation: separation,
        seed,
    };
    let ds = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| McocoError::io(out.display().to_string(), e))?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {}: n={} k={} views={} dims={:?}",
        out.display(),
        n,
        k,
        views,
        view_dims
    );
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    dataset_override: Option<PathBuf>,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
    ablation_override: Option<AblationArg>,
) -> Result<()> {
    let mut run = parse_config_file(config_path)?;
    if let Some(d) = dataset_override {
        run.dataset = d;
    }
    if let Some(s) = seed_override {
        run.training.seed = s;
    }
    if let Some(o) = out_override {
        run.out = o;
    }
    if let Some(a) = ablation_override {
        run.training.ablation = a.flags();
    }
    let ds = load_dataset(&run.dataset)?;
    std::fs::create_dir_all(&run.out)
        .map_err(|e| McocoError::io(run.out.display().to_string(), e))?;

    let trace_path = run.out.join("trace.ndjson");
    let mut trace_file = File::create(&trace_path)
        .map_err(|e| McocoError::io(trace_path.display().to_string(), e))?;
    let mut sink_err: Option<std::io::Error> = None;
    let outcome = fit_observed(&ds, &run.training, &mut |record| {
        // one JSON object per line, flushed so a crash keeps the prefix
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = writeln!(trace_file, "{line}").and_then(|_| trace_file.flush()) {
            sink_err.get_or_insert(e);
        }
    });
    if let Some(e) = sink_err {
        return Err(McocoError::io(trace_path.display().to_string(), e));
    }
    let outcome = outcome?;

    let ckpt_path = run.out.join("model.ckpt");
    save_checkpoint(&ckpt_path, &outcome.params, &outcome.centroids, &run.training)?;

    let final_metrics = outcome
        .trace
        .records
        .iter()
        .rev()
        .find_map(|r| r.metrics.as_ref());
    let json = metrics_json(final_metrics, &ds, run.training.k, run.training.seed);
    write_file(
        &run.out.join("metrics.json"),
        serde_json::to_string_pretty(&json)?.as_bytes(),
    )?;
    println!(
        "trained {} epochs; outputs in {}",
        outcome.trace.records.len(),
        run.out.display()
    );
    if let Some(m) = final_metrics {
        println!(
            "final metrics: acc={:.4} nmi={:.4} ri={:.4} fscore={:.4}",
            m.acc, m.nmi, m.rand_index, m.fscore
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let (params, centroids, config) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let (result, metrics) = evaluate(&params, &centroids, &ds)?;
    std::fs::create_dir_all(out).map_err(|e| McocoError::io(out.display().to_string(), e))?;
    let json = metrics_json(metrics.as_ref(), &ds, config.k, config.seed);
    write_file(
        &out.join("metrics.json"),
        serde_json::to_string_pretty(&json)?.as_bytes(),
    )?;
    let labels: String = result
        .fused_labels
        .iter()
        .map(|l| format!("{l}\n"))
        .collect();
    write_file(&out.join("labels.txt"), labels.as_bytes())?;
    println!("{}", serde_json::to_string(&json)?);
    Ok(())
}

fn cmd_project(
    checkpoint: &Path,
    dataset: &Path,
    view: usize,
    method: MethodArg,
    perplexity: f64,
    iters: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (params, centroids, _config) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    if view >= ds.n_views() {
        return Err(McocoError::InvalidInput(format!(
            "view index {} out of range (dataset has {} views)",
            view,
            ds.n_views()
        )));
    }
    let zs = latents(&params, &ds)?;
    let (result, _) = evaluate(&params, &centroids, &ds)?;
    let embedding = project_2d(
        &zs[view].view(),
        match method {
            MethodArg::Pca => ProjectionMethod::Pca,
            MethodArg::Tsne => ProjectionMethod::Tsne {
                perplexity,
                iters,
                seed,
            },
        },
    )?;
    let mut csv = String::new();
    if ds.labels.is_some() {
        csv.push_str("x,y,fused_label,true_label\n");
    } else {
        csv.push_str("x,y,fused_label\n");
    }
    for i in 0..ds.n_samples() {
        csv.push_str(&format!(
            "{},{},{}",
            embedding[[i, 0]],
            embedding[[i, 1]],
            result.fused_labels[i]
        ));
        if let Some(labels) = &ds.labels {
            csv.push_str(&format!(",{}", labels[i]));
        }
        csv.push('\n');
    }
    write_file(out, csv.as_bytes())?;
    println!("wrote {} ({} rows)", out.display(), ds.n_samples());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Synth {
            n,
            k,
            views,
            latent_dim,
            view_dims,
            noise,
            separation,
            seed,
            out,
        } => cmd_synth(n, k, views, latent_dim, view_dims, noise, separation, seed, &out),
        Command::Train {
            config,
            dataset,
            seed,
            out,
            ablation,
        } => cmd_train(&config, dataset, seed, out, ablation),
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => cmd_eval(&checkpoint, &dataset, &out),
        Command::Project {
            checkpoint,
            dataset,
            view,
            method,
            perplexity,
            iters,
            seed,
            out,
        } => cmd_project(&checkpoint, &dataset, view, method, perplexity, iters, seed, &out),
    }
}

/// 1 for usage/config problems, 2 for runtime failures.
fn exit_code_for(err: &McocoError) -> u8 {
    match err {
        McocoError::Config(_)
        | McocoError::InvalidInput(_)
        | McocoError::DimensionMismatch(_)
        | McocoError::MalformedFile { .. }
        | McocoError::FormatVersion(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

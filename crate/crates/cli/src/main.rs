//! `sheafrec`: train, evaluate and sweep sheaf diffusion recommenders.

use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sheafrec::experiment::{generate_synthetic, run_evaluation, run_experiment, run_sweep, write_tsv, ExperimentConfig, SweepAxis};
use sheafrec::model::load_checkpoint;

#[derive(Parser)]
#[command(name = "sheafrec", version, about = "Sheaf neural diffusion recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a rating file, evaluate on its test split and write a run directory.
    Train(RunArgs),
    /// Evaluate a saved checkpoint on the test split of a rating file.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One run per value of an ablation axis, summarised in sweep.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// latent_dim, layers, stalks or loss.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; stalk pairs are written `1x8`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Run the sweep points concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Write a planted-cluster rating file.
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, env = "SHEAFREC_SEED", default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's config and tensor summary as JSON.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Experiment flags. Anything given here overrides `--config`.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// tsv or movielens-1m.
    #[arg(long)]
    format: Option<String>,
    #[arg(long, env = "SHEAFREC_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    node_stalk: Option<usize>,
    #[arg(long)]
    edge_stalk: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// elu, relu, tanh or identity.
    #[arg(long)]
    activation: Option<String>,
    /// bpr, rmse or bce.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated cutoffs.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// off or co-engagement[:τ].
    #[arg(long)]
    projection: Option<String>,
    /// pairwise or summed.
    #[arg(long)]
    bpr: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    /// Skip recommendation-time measurement.
    #[arg(long)]
    no_timing: bool,
    /// Also write split.json with every record's split assignment.
    #[arg(long)]
    split_manifest: bool,
}

type AnyResult<T> = Result<T, Box<dyn Error>>;

impl RunArgs {
    fn resolve(&self, fallback_config: Option<&Path>) -> AnyResult<ExperimentConfig> {
        let mut cfg = match self.config.as_deref().or(fallback_config.filter(|p| p.exists())) {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let display = |p: &PathBuf| p.display().to_string();
        let overrides: [(&str, Option<String>); 19] = [
            ("data", self.data.as_ref().map(display)),
            ("format", self.format.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("latent_dim", self.latent_dim.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("node_stalk", self.node_stalk.map(|v| v.to_string())),
            ("edge_stalk", self.edge_stalk.map(|v| v.to_string())),
            ("hidden_dim", self.hidden_dim.map(|v| v.to_string())),
            ("activation", self.activation.clone()),
            ("loss", self.loss.clone()),
            ("lr", self.lr.map(|v| v.to_string())),
            ("weight_decay", self.weight_decay.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("k", self.k.clone()),
            ("out", self.out.as_ref().map(display)),
            ("projection", self.projection.clone()),
            ("bpr", self.bpr.clone()),
            ("threads", self.threads.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if self.no_timing {
            cfg.timing = false;
        }
        if self.split_manifest {
            cfg.split_manifest = true;
        }
        Ok(cfg)
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("value serializes"));
}

fn run(cli: Cli) -> AnyResult<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve(None)?;
            let outcome = run_experiment(&cfg)?;
            eprintln!("wrote {} files to {}", outcome.files.len(), cfg.out.display());
            print!("{}", outcome.report.to_json());
        }
        Command::Evaluate { run, checkpoint } => {
            let beside = checkpoint.parent().map(|d| d.join("config.txt"));
            let cfg = run.resolve(beside.as_deref())?;
            print!("{}", run_evaluation(&cfg, &checkpoint)?.to_json());
        }
        Command::Sweep { run, axis, values, parallel } => {
            let cfg = run.resolve(None)?;
            let axis: SweepAxis = axis.parse()?;
            let rows = run_sweep(&cfg, axis, &values, parallel)?;
            for row in &rows {
                match &row.result {
                    Ok(o) => eprintln!("{}={}: ok ({:.1}s)", axis.name(), row.value, o.wall_s),
                    Err(e) => eprintln!("{}={}: {e}", axis.name(), row.value),
                }
            }
            println!("{}", cfg.out.join("sweep.csv").display());
        }
        Command::Synth {
            users,
            items,
            clusters,
            noise,
            seed,
            out,
        } => {
            let set = generate_synthetic(users, items, clusters, noise, seed)?;
            write_tsv(&set, &out)?;
            eprintln!("{} interactions written to {}", set.len(), out.display());
        }
        Command::InspectCheckpoint { checkpoint } => {
            let state = load_checkpoint(&checkpoint)?;
            let tensors: Vec<serde_json::Value> = state
                .parameters()
                .into_iter()
                .map(|(name, t)| {
                    let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                    serde_json::json!({ "name": name, "shape": t.shape(), "l2_norm": norm })
                })
                .collect();
            print_json(&serde_json::json!({
                "config": state.config(),
                "n_users": state.n_users(),
                "n_items": state.n_items(),
                "parameter_count": state.parameter_count(),
                "tensors": tensors,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

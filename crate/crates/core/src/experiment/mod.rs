//! End-to-end runs: dataset to metrics on disk, ablation sweeps and the
//! synthetic cluster generator.

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::eval::{evaluate, measure_rec_time, EvalError, MetricsReport, MonotonicClock};
use crate::graph::{
    adapt_bipartite, build_bipartite, parse_ratings, split_interactions, split_manifest, DataError, Interaction, InteractionSet, SplitSet,
};
use crate::model::{init_model, load_checkpoint, save_checkpoint, DiffusionGraph, ModelConfig, ModelError, ModelState};
use crate::sheaf::StalkConfig;
use crate::training::{train, EpochRecord, LossKind, TrainError};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const REC_TIME_ATTEMPTS: usize = 10;
pub const REC_TIME_K: usize = 100;

/// File names written by [`run_experiment`], without the optional split manifest.
pub const RUN_FILES: [&str; 6] = ["config.txt", "history.jsonl", "checkpoint.json", "checkpoint.bin", "metrics.json", "manifest.json"];

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub parameter_count: usize,
    /// Every file written, relative to the output directory, sorted.
    pub files: Vec<String>,
    pub wall_s: f64,
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    loss_name: LossKind,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Tracks every file written into one directory.
struct OutputDir {
    root: PathBuf,
    files: BTreeSet<String>,
}

impl OutputDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeSet::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.insert(name.to_string());
        self.root.join(name)
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).map_err(io_err(&path))
    }

    fn finish(mut self) -> Result<Vec<String>> {
        self.files.insert("manifest.json".into());
        let files: Vec<String> = self.files.iter().cloned().collect();
        let text = serde_json::to_string_pretty(&serde_json::json!({ "files": files })).expect("manifest serializes") + "\n";
        let path = self.root.join("manifest.json");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(files)
    }
}

/// Runs `f` on a dedicated pool when `threads > 0`.
fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ExperimentError::Config(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(f))
}

/// Parsed and split dataset plus the training graph.
pub struct PreparedData {
    pub split: SplitSet,
    pub graph: DiffusionGraph,
    pub bipartite: crate::graph::BipartiteGraph,
    pub manifest: Option<serde_json::Value>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let path = cfg.data.as_ref().ok_or_else(|| ExperimentError::Config("no dataset given".into()))?;
    let parsed = parse_ratings(path, cfg.format)?;
    let split = split_interactions(&parsed.interactions, cfg.seed);
    let bipartite = adapt_bipartite(&build_bipartite(&split.train), cfg.projection);
    let manifest = cfg.split_manifest.then(|| split_manifest(&parsed, cfg.seed));
    Ok(PreparedData {
        graph: DiffusionGraph::new(&bipartite),
        split,
        bipartite,
        manifest,
    })
}

fn attach_timing(report: &mut MetricsReport, state: &ModelState, data: &PreparedData) -> Result<()> {
    let exclude = data.split.train.item_sets();
    let relevant = data.split.test.item_sets();
    let Some(user) = (0..relevant.len()).find(|&u| !relevant[u].is_empty()) else {
        return Ok(());
    };
    let t = measure_rec_time(state, &data.graph, user, &exclude[user], REC_TIME_K, REC_TIME_ATTEMPTS, &MonotonicClock::default())?;
    report.rec_time = Some(t.summary());
    Ok(())
}

/// parse → split → build → adapt → init → train → evaluate, writing every
/// artifact into `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    with_threads(cfg.threads, || run_inner(cfg, cfg.model_config()))?
}

fn run_inner(cfg: &ExperimentConfig, model_cfg: ModelConfig) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    model_cfg.validate()?;
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(ExperimentError::Config(format!("cutoffs must be positive, got {:?}", cfg.ks)));
    }
    let data = prepare_data(cfg)?;
    let mut out = OutputDir::create(&cfg.out)?;
    out.write("config.txt", cfg.to_kv_string().as_bytes())?;
    if let Some(m) = &data.manifest {
        out.write("split.json", (serde_json::to_string_pretty(m).expect("manifest serializes") + "\n").as_bytes())?;
    }

    let state = init_model(&model_cfg, &data.bipartite)?;
    let parameter_count = state.parameter_count();
    let history_path = out.path("history.jsonl");
    let mut history_file = fs::File::create(&history_path).map_err(io_err(&history_path))?;
    let mut write_err = None;
    let outcome = train(state, &data.split, &data.graph, &cfg.train_config(), |r| {
        let line = serde_json::to_string(&HistoryLine { loss_name: cfg.loss, record: r }).expect("history serializes");
        if let Err(e) = writeln!(history_file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(source) = write_err {
        return Err(ExperimentError::Io { path: history_path, source });
    }

    let ckpt = out.path("checkpoint.json");
    out.path("checkpoint.bin");
    save_checkpoint(&outcome.best, &ckpt)?;

    let mut report = evaluate(&outcome.best, &data.graph, &data.split.train, &data.split.test, &cfg.ks)?;
    if cfg.timing {
        attach_timing(&mut report, &outcome.best, &data)?;
    }
    out.write("metrics.json", report.to_json().as_bytes())?;
    let files = out.finish()?;
    Ok(ExperimentOutcome {
        report,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        parameter_count,
        files,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Evaluates a saved checkpoint on the test part of `cfg`'s dataset and split.
pub fn run_evaluation(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MetricsReport> {
    with_threads(cfg.threads, || {
        let state = load_checkpoint(checkpoint)?;
        let data = prepare_data(cfg)?;
        let mut report = evaluate(&state, &data.graph, &data.split.train, &data.split.test, &cfg.ks)?;
        if cfg.timing {
            attach_timing(&mut report, &state, &data)?;
        }
        Ok(report)
    })?
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LatentDim,
    Layers,
    Stalks,
    Loss,
}

impl FromStr for SweepAxis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "latent_dim" | "l" => Ok(SweepAxis::LatentDim),
            "layers" | "n" => Ok(SweepAxis::Layers),
            "stalks" => Ok(SweepAxis::Stalks),
            "loss" => Ok(SweepAxis::Loss),
            other => Err(ExperimentError::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LatentDim => "latent_dim",
            SweepAxis::Layers => "layers",
            SweepAxis::Stalks => "stalks",
            SweepAxis::Loss => "loss",
        }
    }
}

/// `"1x8"`, `"1,8"` or `"(1,8)"` as `(node_dim, edge_dim)`.
pub fn parse_stalk_pair(s: &str) -> Result<StalkConfig> {
    let t = s.trim().trim_start_matches('(').trim_end_matches(')');
    let (a, b) = t
        .split_once(['x', ',', ':'])
        .ok_or_else(|| ExperimentError::Config(format!("stalk pair `{s}` must look like 1x8")))?;
    let dim = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| ExperimentError::Config(format!("invalid stalk dimension in `{s}`")))
    };
    Ok(StalkConfig {
        node_dim: dim(a)?,
        edge_dim: dim(b)?,
    })
}

/// Config of one sweep point, output going to a subdirectory of `base.out`.
pub fn sweep_point(base: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<(ExperimentConfig, ModelConfig)> {
    let mut cfg = base.clone();
    let slug: String = value.trim().chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect();
    cfg.out = base.out.join(format!("{}-{slug}", axis.name()));
    match axis {
        SweepAxis::LatentDim => cfg.set("latent_dim", value)?,
        SweepAxis::Layers => cfg.set("layers", value)?,
        SweepAxis::Loss => cfg.set("loss", value)?,
        SweepAxis::Stalks => {
            let s = parse_stalk_pair(value)?;
            cfg.node_stalk = Some(s.node_dim);
            cfg.edge_stalk = Some(s.edge_dim);
        }
    }
    let mut model = cfg.model_config();
    if axis == SweepAxis::Stalks {
        let data = prepare_data(&cfg)?;
        let (n, m) = (data.bipartite.n_users(), data.bipartite.n_items());
        let full = model.stalks.node_dim.max(model.stalks.edge_dim);
        let reference = ModelConfig {
            stalks: StalkConfig { node_dim: full, edge_dim: full },
            ..model.clone()
        };
        model.hidden_dim = model.equalized_hidden_dim(reference.parameter_count(n, m), n, m);
        cfg.hidden_dim = Some(model.hidden_dim);
    }
    Ok((cfg, model))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub config: Option<ExperimentConfig>,
    pub result: std::result::Result<ExperimentOutcome, String>,
}

/// One run per value, in order; failures are recorded and the sweep goes on.
/// Writes `sweep.csv` and a manifest into `base.out`.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String], parallel: bool) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(ExperimentError::Config("sweep needs at least one value".into()));
    }
    let one = |value: &String| -> SweepRow {
        match sweep_point(base, axis, value) {
            Ok((cfg, model)) => {
                let result = run_inner(&cfg, model).map_err(|e| e.to_string());
                SweepRow {
                    value: value.clone(),
                    config: Some(cfg),
                    result,
                }
            }
            Err(e) => SweepRow {
                value: value.clone(),
                config: None,
                result: Err(e.to_string()),
            },
        }
    };
    let rows: Vec<SweepRow> = with_threads(base.threads, || {
        if parallel {
            values.par_iter().map(one).collect()
        } else {
            values.iter().map(one).collect()
        }
    })?;

    let mut out = OutputDir::create(&base.out)?;
    let csv_path = out.path("sweep.csv");
    write_sweep_csv(&csv_path, axis, &base.ks, &rows)?;
    for row in &rows {
        if let Some(cfg) = &row.config {
            if let Ok(rel) = cfg.out.strip_prefix(&base.out) {
                if cfg.out.exists() {
                    out.files.insert(format!("{}/", rel.display()));
                }
            }
        }
    }
    out.finish()?;
    Ok(rows)
}

fn write_sweep_csv(path: &Path, axis: SweepAxis, ks: &[usize], rows: &[SweepRow]) -> Result<()> {
    let csv_err = |e: csv::Error| ExperimentError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = [axis.name(), "status", "error", "node_stalk", "edge_stalk", "hidden_dim", "parameters", "best_epoch"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for k in ks {
        for m in ["precision", "recall", "f1", "ndcg", "mrr"] {
            header.push(format!("{m}@{k}"));
        }
    }
    header.extend(["rec_time_mean_s", "rec_time_std_s", "wall_s"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;

    for row in rows {
        let mut rec = vec![row.value.clone()];
        let stalks = row.config.as_ref().map(|c| (c.stalks(), c.hidden_dim.unwrap_or(c.latent_dim)));
        match &row.result {
            Ok(o) => {
                rec.extend(["ok".into(), String::new()]);
                let (s, h) = stalks.expect("successful runs have a config");
                rec.extend([s.node_dim.to_string(), s.edge_dim.to_string(), h.to_string(), o.parameter_count.to_string()]);
                rec.push(o.best_epoch.map(|e| e.to_string()).unwrap_or_default());
                for k in ks {
                    let m = o.report.at(*k).copied().unwrap_or_default();
                    rec.extend([m.precision, m.recall, m.f1, m.ndcg, m.mrr].map(|v| v.to_string()));
                }
                match o.report.rec_time {
                    Some(t) => rec.extend([t.mean_s.to_string(), t.std_s.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
                rec.push(o.wall_s.to_string());
            }
            Err(e) => {
                rec.extend(["error".into(), e.clone()]);
                rec.resize(header.len(), String::new());
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Planted-cluster interactions: block `c` users see block `c` items with
/// probability 0.8 and every other item with probability `noise`.
pub fn generate_synthetic(n_users: usize, n_items: usize, clusters: usize, noise: f64, seed: u64) -> Result<InteractionSet> {
    if clusters == 0 || n_users == 0 || n_items == 0 || !n_users.is_multiple_of(clusters) || !n_items.is_multiple_of(clusters) {
        return Err(ExperimentError::Config(format!(
            "{clusters} clusters must evenly divide {n_users} users and {n_items} items"
        )));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(ExperimentError::Config(format!("noise {noise} outside [0, 1)")));
    }
    let (ub, ib) = (n_users / clusters, n_items / clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            let p = if u / ub == i / ib { 0.8 } else { noise };
            if rng.gen_bool(p) {
                records.push(Interaction { user: u, item: i, rating: 1.0 });
            }
        }
    }
    Ok(InteractionSet::new(n_users, n_items, records)?)
}

/// Writes `user<TAB>item<TAB>rating` lines with a header.
pub fn write_tsv(set: &InteractionSet, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = String::from("user\titem\trating\n");
    for r in set.records() {
        text.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.rating));
    }
    fs::write(path, text).map_err(io_err(path))
}

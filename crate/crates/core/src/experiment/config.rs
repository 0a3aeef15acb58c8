use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::activation::Activation;
use crate::graph::{Projection, RatingFormat};
use crate::model::ModelConfig;
use crate::sheaf::StalkConfig;
use crate::training::{BprMode, LossKind, TrainConfig};

use super::ExperimentError;

/// Everything one run needs, readable from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: Option<PathBuf>,
    pub format: RatingFormat,
    pub seed: u64,
    pub latent_dim: usize,
    pub layers: usize,
    /// `None` means `latent_dim`.
    pub node_stalk: Option<usize>,
    /// `None` means `latent_dim`.
    pub edge_stalk: Option<usize>,
    /// Restriction-map generator width, `None` means `latent_dim`.
    pub hidden_dim: Option<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    pub bpr: BprMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ks: Vec<usize>,
    pub out: PathBuf,
    pub projection: Projection,
    /// Worker threads, 0 for the rayon default.
    pub threads: usize,
    /// Measure recommendation time; off makes `metrics.json` reproducible byte for byte.
    pub timing: bool,
    /// Also write the per-record split assignment.
    pub split_manifest: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        Self {
            data: None,
            format: RatingFormat::Tsv,
            seed: 0,
            latent_dim: m.latent_dim,
            layers: m.layers,
            node_stalk: None,
            edge_stalk: None,
            hidden_dim: None,
            activation: m.activation,
            loss: t.loss,
            bpr: t.bpr,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            ks: vec![10, 20],
            out: PathBuf::from("runs/default"),
            projection: Projection::Off,
            threads: 0,
            timing: true,
            split_manifest: false,
        }
    }
}

const FORMAT_VERSION: &str = "1";

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ExperimentError> {
    value.parse().map_err(|_| ExperimentError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>, ExperimentError> {
    if value.is_empty() || value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".into(), |v| v.to_string())
}

impl ExperimentConfig {
    /// Sets one key. Keys use underscores; dashes are accepted too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let value = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "format" => self.format = value.parse().map_err(|e: crate::graph::DataError| ExperimentError::Config(e.to_string()))?,
            "seed" => self.seed = parse("seed", value)?,
            "latent_dim" => self.latent_dim = parse("latent_dim", value)?,
            "layers" => self.layers = parse("layers", value)?,
            "node_stalk" => self.node_stalk = parse_auto("node_stalk", value)?,
            "edge_stalk" => self.edge_stalk = parse_auto("edge_stalk", value)?,
            "hidden_dim" => self.hidden_dim = parse_auto("hidden_dim", value)?,
            "activation" => self.activation = parse("activation", value)?,
            "loss" => self.loss = parse("loss", value)?,
            "bpr" => self.bpr = parse("bpr", value)?,
            "lr" => self.lr = parse("lr", value)?,
            "weight_decay" => self.weight_decay = parse("weight_decay", value)?,
            "epochs" => self.epochs = parse("epochs", value)?,
            "batch_size" => self.batch_size = parse("batch_size", value)?,
            "k" | "ks" => {
                self.ks = value
                    .split(',')
                    .map(|k| parse("k", k.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "out" => self.out = PathBuf::from(value),
            "projection" => self.projection = value.parse().map_err(ExperimentError::Config)?,
            "threads" => self.threads = parse("threads", value)?,
            "timing" => self.timing = parse("timing", value)?,
            "split_manifest" => self.split_manifest = parse("split_manifest", value)?,
            "version" => {
                if value != FORMAT_VERSION {
                    return Err(ExperimentError::Config(format!("unsupported config version {value}")));
                }
            }
            other => return Err(ExperimentError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key, value)
                .map_err(|e| ExperimentError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_kv_str(&text)
    }

    /// Every key in a fixed order; [`ExperimentConfig::from_kv_str`] reads it back unchanged.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("version", FORMAT_VERSION.into());
        put("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put("format", self.format.to_string());
        put("seed", self.seed.to_string());
        put("latent_dim", self.latent_dim.to_string());
        put("layers", self.layers.to_string());
        put("node_stalk", auto(self.node_stalk));
        put("edge_stalk", auto(self.edge_stalk));
        put("hidden_dim", auto(self.hidden_dim));
        put("activation", self.activation.to_string());
        put("loss", self.loss.to_string());
        put("bpr", self.bpr.to_string());
        put("lr", format!("{:?}", self.lr));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("k", self.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
        put("out", self.out.display().to_string());
        put("projection", self.projection.to_string());
        put("threads", self.threads.to_string());
        put("timing", self.timing.to_string());
        put("split_manifest", self.split_manifest.to_string());
        s
    }

    pub fn stalks(&self) -> StalkConfig {
        StalkConfig {
            node_dim: self.node_stalk.unwrap_or(self.latent_dim),
            edge_dim: self.edge_stalk.unwrap_or(self.latent_dim),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            latent_dim: self.latent_dim,
            layers: self.layers,
            stalks: self.stalks(),
            hidden_dim: self.hidden_dim.unwrap_or(self.latent_dim),
            activation: self.activation,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            loss: self.loss,
            bpr: self.bpr,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

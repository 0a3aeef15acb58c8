//! The recommender network: embedding tables, a stack of learned sheaf
//! diffusion layers, and scoring/ranking of items for each user.
//!
//! Users and items share one vertex set (items offset by `n_users`). Every
//! node carries an `l`-dimensional embedding, viewed as a
//! `node_dim × (l / node_dim)` block of a 0-cochain. Each layer
//!
//! 1. generates a tail and a head restriction map for every edge from the
//!    concatenated features of its two endpoints,
//! 2. assembles the normalized sheaf Laplacian `Δ` of that sheaf,
//! 3. applies `X ↦ X - σ(Δ (I ⊗ W1) X W2)`.
//!
//! Scores are inner products of the final user and item vectors.

mod checkpoint;

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::autodiff::{kernels, AutodiffError, EdgeTopology, Tape, Tensor, Var};
use crate::graph::BipartiteGraph;
use crate::linalg::DEFAULT_EPS;
use crate::sheaf::StalkConfig;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("user {user} out of range ({n_users} users)")]
    UnknownUser { user: usize, n_users: usize },
    #[error("graph has no users or no items")]
    EmptyGraph,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding size `l`.
    pub latent_dim: usize,
    /// Number of diffusion layers `N`.
    pub layers: usize,
    pub stalks: StalkConfig,
    /// Inner width of each restriction-map generator.
    pub hidden_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(64, 5)
    }
}

impl ModelConfig {
    /// Full sheaf stalks `(l, l)`, generator width `l`, ELU, seed 0.
    pub fn new(latent_dim: usize, layers: usize) -> Self {
        Self {
            latent_dim,
            layers,
            stalks: StalkConfig {
                node_dim: latent_dim,
                edge_dim: latent_dim,
            },
            hidden_dim: latent_dim,
            activation: Activation::Elu,
            seed: 0,
        }
    }

    /// Feature channels per node, `l / node_dim`.
    pub fn channels(&self) -> usize {
        self.latent_dim / self.stalks.node_dim.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(ModelError::Config("latent_dim must be positive".into()));
        }
        if self.layers == 0 {
            return Err(ModelError::Config("layers must be positive".into()));
        }
        if self.hidden_dim == 0 {
            return Err(ModelError::Config("hidden_dim must be positive".into()));
        }
        let StalkConfig { node_dim, edge_dim } = self.stalks;
        if node_dim == 0 || edge_dim == 0 {
            return Err(ModelError::Config(format!("stalk dimensions must be positive, got {}", self.stalks)));
        }
        if !self.latent_dim.is_multiple_of(node_dim) {
            return Err(ModelError::Config(format!(
                "node stalk dimension {node_dim} must divide latent_dim {}",
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Trainable scalars in one diffusion layer.
    pub fn layer_parameter_count(&self) -> usize {
        let (l, h) = (self.latent_dim, self.hidden_dim);
        let map = self.stalks.node_dim * self.stalks.edge_dim;
        let f = self.channels();
        2 * (2 * l * h + h * map + map) + self.stalks.node_dim.pow(2) + f * f
    }

    /// Trainable scalars of the whole model on a graph of the given size.
    pub fn parameter_count(&self, n_users: usize, n_items: usize) -> usize {
        (n_users + n_items) * self.latent_dim + self.layers * self.layer_parameter_count()
    }

    /// Generator width whose total parameter count is closest to `target`.
    pub fn equalized_hidden_dim(&self, target: usize, n_users: usize, n_items: usize) -> usize {
        let map = self.stalks.node_dim * self.stalks.edge_dim;
        let per_h = (self.layers * 2 * (2 * self.latent_dim + map)) as f64;
        let fixed = Self {
            hidden_dim: 0,
            ..self.clone()
        }
        .parameter_count(n_users, n_items) as f64;
        let h = ((target as f64 - fixed) / per_h).round();
        if h < 1.0 {
            1
        } else {
            h as usize
        }
    }
}

/// Parameters of one diffusion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[2l, h]`, first stage of the tail-map generator.
    pub tail_in: Tensor,
    /// `[h, edge_dim * node_dim]`.
    pub tail_out: Tensor,
    /// `[1, edge_dim * node_dim]`.
    pub tail_bias: Tensor,
    pub head_in: Tensor,
    pub head_out: Tensor,
    pub head_bias: Tensor,
    /// `[node_dim, node_dim]`, applied inside every stalk.
    pub w1: Tensor,
    /// `[f, f]`, mixes feature channels.
    pub w2: Tensor,
}

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.tail_in,
            &self.tail_out,
            &self.tail_bias,
            &self.head_in,
            &self.head_out,
            &self.head_bias,
            &self.w1,
            &self.w2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.tail_in,
            &mut self.tail_out,
            &mut self.tail_bias,
            &mut self.head_in,
            &mut self.head_out,
            &mut self.head_bias,
            &mut self.w1,
            &mut self.w2,
        ]
    }
}

const LAYER_TENSORS: [&str; 8] = ["tail_in", "tail_out", "tail_bias", "head_in", "head_out", "head_bias", "w1", "w2"];

/// Names and shapes of every trainable tensor, in checkpoint order.
pub fn parameter_layout(config: &ModelConfig, n_users: usize, n_items: usize) -> Vec<(String, Vec<usize>)> {
    let l = config.latent_dim;
    let h = config.hidden_dim;
    let map = config.stalks.node_dim * config.stalks.edge_dim;
    let dn = config.stalks.node_dim;
    let f = config.channels();
    let mut out = vec![
        ("user_table".to_string(), vec![n_users, l]),
        ("item_table".to_string(), vec![n_items, l]),
    ];
    for t in 0..config.layers {
        let shapes = [
            vec![2 * l, h],
            vec![h, map],
            vec![1, map],
            vec![2 * l, h],
            vec![h, map],
            vec![1, map],
            vec![dn, dn],
            vec![f, f],
        ];
        for (name, shape) in LAYER_TENSORS.iter().zip(shapes) {
            out.push((format!("layers.{t}.{name}"), shape));
        }
    }
    out
}

/// All trainable parameters of a model bound to a graph size.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    n_users: usize,
    n_items: usize,
    /// `[n_users, l]`.
    pub user_table: Tensor,
    /// `[n_items, l]`.
    pub item_table: Tensor,
    pub layers: Vec<LayerParams>,
}

#[inline]
pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl ModelState {
    /// Assembles a state from tensors in [`parameter_layout`] order.
    pub fn from_tensors(config: ModelConfig, n_users: usize, n_items: usize, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config, n_users, n_items);
        if layout.len() != tensors.len() {
            return Err(ModelError::Dimension {
                context: "parameter tensors",
                expected: layout.len().to_string(),
                actual: tensors.len().to_string(),
            });
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Dimension {
                    context: "parameter shape",
                    expected: format!("{name} {shape:?}"),
                    actual: format!("{:?}", t.shape()),
                });
            }
        }
        let mut it = tensors.into_iter();
        let user_table = it.next().unwrap();
        let item_table = it.next().unwrap();
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut next = || it.next().unwrap();
            layers.push(LayerParams {
                tail_in: next(),
                tail_out: next(),
                tail_bias: next(),
                head_in: next(),
                head_out: next(),
                head_bias: next(),
                w1: next(),
                w2: next(),
            });
        }
        Ok(Self {
            config,
            n_users,
            n_items,
            user_table,
            item_table,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Named parameters in checkpoint order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("user_table".to_string(), &self.user_table),
            ("item_table".to_string(), &self.item_table),
        ];
        for (t, layer) in self.layers.iter().enumerate() {
            for (name, tensor) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{t}.{name}"), tensor));
            }
        }
        out
    }

    /// Mutable parameters in the same order as [`ModelState::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.user_table, &mut self.item_table];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out
    }

    /// Exact count of trainable scalars, taken from the stored tensors.
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rounds every parameter to the nearest `f32`, so checkpoints are lossless.
    pub fn round_to_f32(&mut self) {
        for t in self.parameters_mut() {
            for v in t.data_mut() {
                *v = round_f32(*v);
            }
        }
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        let user_table = tape.leaf(self.user_table.clone(), requires_grad);
        let item_table = tape.leaf(self.item_table.clone(), requires_grad);
        let layers = self
            .layers
            .iter()
            .map(|p| {
                let [tail_in, tail_out, tail_bias, head_in, head_out, head_bias, w1, w2] =
                    p.tensors().map(|t| tape.leaf(t.clone(), requires_grad));
                LayerVars {
                    tail_in,
                    tail_out,
                    tail_bias,
                    head_in,
                    head_out,
                    head_bias,
                    w1,
                    w2,
                }
            })
            .collect();
        ParamVars {
            user_table,
            item_table,
            layers,
        }
    }
}

/// Tape handles of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub tail_in: Var,
    pub tail_out: Var,
    pub tail_bias: Var,
    pub head_in: Var,
    pub head_out: Var,
    pub head_bias: Var,
    pub w1: Var,
    pub w2: Var,
}

/// Tape handles of a whole [`ModelState`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub user_table: Var,
    pub item_table: Var,
    pub layers: Vec<LayerVars>,
}

impl ParamVars {
    /// Handles in [`ModelState::parameters`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.user_table, self.item_table];
        for l in &self.layers {
            out.extend([l.tail_in, l.tail_out, l.tail_bias, l.head_in, l.head_out, l.head_bias, l.w1, l.w2]);
        }
        out
    }
}

/// Initializes parameters for `graph`.
///
/// Embeddings are drawn from `U(-1/√l, 1/√l)`, generator weights from
/// `U(-1/√fan_in, 1/√fan_in)`, and `W1`, `W2` are identities plus
/// `U(-0.01, 0.01)` noise. Every value is rounded to `f32`.
pub fn init_model(config: &ModelConfig, graph: &BipartiteGraph) -> Result<ModelState> {
    config.validate()?;
    if graph.n_users() == 0 || graph.n_items() == 0 {
        return Err(ModelError::EmptyGraph);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout = parameter_layout(config, graph.n_users(), graph.n_items());
    let emb = 1.0 / (config.latent_dim as f64).sqrt();
    let tensors = layout
        .iter()
        .map(|(name, shape)| {
            let kind = name.rsplit('.').next().unwrap_or(name);
            match kind {
                "user_table" | "item_table" => Tensor::from_fn(shape, |_| rng.gen_range(-emb..emb)),
                "tail_in" | "head_in" | "tail_out" | "head_out" => {
                    let a = 1.0 / (shape[0] as f64).sqrt();
                    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
                }
                "tail_bias" | "head_bias" => {
                    let a = 1.0 / (config.hidden_dim as f64).sqrt();
                    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
                }
                _ => {
                    let d = shape[0];
                    Tensor::from_fn(shape, |i| {
                        let noise = rng.gen_range(-0.01..0.01);
                        if i / d == i % d {
                            1.0 + noise
                        } else {
                            noise
                        }
                    })
                }
            }
        })
        .collect();
    let mut state = ModelState::from_tensors(config.clone(), graph.n_users(), graph.n_items(), tensors)?;
    state.round_to_f32();
    Ok(state)
}

/// Edge structure the diffusion layers run on: `user → item` edges followed
/// by any user–user links, over the unified vertex set.
#[derive(Debug, Clone)]
pub struct DiffusionGraph {
    n_users: usize,
    n_items: usize,
    topology: Arc<EdgeTopology>,
    tails: Arc<[usize]>,
    heads: Arc<[usize]>,
}

impl DiffusionGraph {
    pub fn new(graph: &BipartiteGraph) -> Self {
        let edges = graph.oriented_edges();
        let topology = Arc::new(EdgeTopology::new(graph.n_nodes(), &edges));
        Self {
            n_users: graph.n_users(),
            n_items: graph.n_items(),
            tails: edges.iter().map(|e| e.0).collect(),
            heads: edges.iter().map(|e| e.1).collect(),
            topology,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn n_edges(&self) -> usize {
        self.tails.len()
    }
}

/// Intermediate handles of one recorded layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// `[E, edge_dim * node_dim]`, row-major `edge_dim × node_dim` per edge.
    pub tail_maps: Var,
    pub head_maps: Var,
    /// `[n_nodes, l]`.
    pub output: Var,
}

fn generator(tape: &mut Tape, ends: Var, ones: Var, w_in: Var, w_out: Var, bias: Var) -> Result<Var> {
    let hidden = tape.matmul(ends, w_in)?;
    let maps = tape.matmul(hidden, w_out)?;
    let shift = tape.matmul(ones, bias)?;
    Ok(tape.add(maps, shift)?)
}

/// Records one diffusion layer acting on node features `feats` (`[n_nodes, l]`).
pub fn record_layer(tape: &mut Tape, config: &ModelConfig, layer: &LayerVars, feats: Var, graph: &DiffusionGraph) -> Result<LayerTrace> {
    let l = config.latent_dim;
    let StalkConfig { node_dim: dn, edge_dim: de } = config.stalks;
    let f = config.channels();
    let n = graph.n_nodes();

    let x = tape.reshape(feats, vec![n * dn, f])?;
    let tail_feats = tape.gather_rows(feats, graph.tails.clone())?;
    let head_feats = tape.gather_rows(feats, graph.heads.clone())?;
    let ends = tape.concat(tail_feats, head_feats, 1)?;
    let ones = tape.constant(Tensor::full(&[graph.n_edges(), 1], 1.0));
    let tail_maps = generator(tape, ends, ones, layer.tail_in, layer.tail_out, layer.tail_bias)?;
    let head_maps = generator(tape, ends, ones, layer.head_in, layer.head_out, layer.head_bias)?;

    let degree = tape.degree_blocks(tail_maps, head_maps, graph.topology.clone(), de, dn)?;
    let scale = tape.block_inv_sqrt(degree, DEFAULT_EPS)?;
    let mixed = tape.kron_apply(layer.w1, x)?;
    let mixed = tape.matmul(mixed, layer.w2)?;
    let z = tape.block_diag_apply(scale, mixed)?;
    let r = tape.coboundary(tail_maps, head_maps, z, graph.topology.clone(), de, dn)?;
    let lz = tape.coboundary_transpose(tail_maps, head_maps, r, graph.topology.clone(), de, dn)?;
    let diffused = tape.block_diag_apply(scale, lz)?;
    let update = tape.activation(diffused, config.activation)?;
    let next = tape.sub(x, update)?;
    let output = tape.reshape(next, vec![n, l])?;
    Ok(LayerTrace {
        tail_maps,
        head_maps,
        output,
    })
}

/// Records the full forward pass and returns the final node features `[n_nodes, l]`.
pub fn record_forward(tape: &mut Tape, state: &ModelState, vars: &ParamVars, graph: &DiffusionGraph) -> Result<Var> {
    if graph.n_users() != state.n_users || graph.n_items() != state.n_items {
        return Err(ModelError::Dimension {
            context: "graph size",
            expected: format!("{} users, {} items", state.n_users, state.n_items),
            actual: format!("{} users, {} items", graph.n_users(), graph.n_items()),
        });
    }
    let mut feats = tape.concat(vars.user_table, vars.item_table, 0)?;
    for layer in &vars.layers {
        feats = record_layer(tape, &state.config, layer, feats, graph)?.output;
    }
    Ok(feats)
}

/// Final user and item vectors, row-major `[n, l]` and `[m, l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalRepresentations {
    dim: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl FinalRepresentations {
    pub fn new(dim: usize, users: Vec<f64>, items: Vec<f64>) -> Result<Self> {
        if dim == 0 || !users.len().is_multiple_of(dim) || !items.len().is_multiple_of(dim) {
            return Err(ModelError::Dimension {
                context: "representations",
                expected: format!("multiples of {dim}"),
                actual: format!("{} and {} values", users.len(), items.len()),
            });
        }
        Ok(Self { dim, users, items })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_users(&self) -> usize {
        self.users.len() / self.dim
    }

    pub fn n_items(&self) -> usize {
        self.items.len() / self.dim
    }

    pub fn user(&self, i: usize) -> &[f64] {
        &self.users[i * self.dim..(i + 1) * self.dim]
    }

    pub fn item(&self, j: usize) -> &[f64] {
        &self.items[j * self.dim..(j + 1) * self.dim]
    }

    pub fn all_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|v| v.is_finite())
    }
}

/// Runs the network on `graph` without recording gradients.
pub fn forward(state: &ModelState, graph: &DiffusionGraph) -> Result<FinalRepresentations> {
    let mut tape = Tape::new();
    let vars = state.register(&mut tape, false);
    let out = record_forward(&mut tape, state, &vars, graph)?;
    let data = tape.value(out).data();
    let split = state.n_users * state.config.latent_dim;
    FinalRepresentations::new(state.config.latent_dim, data[..split].to_vec(), data[split..].to_vec())
}

/// Dense `n_users × n_items` relevance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n_users: usize,
    n_items: usize,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n_users: usize, n_items: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != n_users * n_items {
            return Err(ModelError::Dimension {
                context: "score matrix",
                expected: format!("{} values", n_users * n_items),
                actual: scores.len().to_string(),
            });
        }
        Ok(Self { n_users, n_items, scores })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn get(&self, user: usize, item: usize) -> f64 {
        self.scores[user * self.n_items + item]
    }

    pub fn row(&self, user: usize) -> Result<&[f64]> {
        if user >= self.n_users {
            return Err(ModelError::UnknownUser {
                user,
                n_users: self.n_users,
            });
        }
        Ok(&self.scores[user * self.n_items..(user + 1) * self.n_items])
    }

    pub fn all_finite(&self) -> bool {
        self.scores.iter().all(|v| v.is_finite())
    }
}

/// `s_ij = <user_i, item_j>` for every pair.
pub fn score_all(repr: &FinalRepresentations) -> ScoreMatrix {
    let (n, m, l) = (repr.n_users(), repr.n_items(), repr.dim);
    let mut scores = vec![0.0; n * m];
    kernels::gemm(n, l, m, &repr.users, false, &repr.items, true, &mut scores, 0.0);
    ScoreMatrix {
        n_users: n,
        n_items: m,
        scores,
    }
}

/// Scores of one user against every item.
pub fn score_user(repr: &FinalRepresentations, user: usize) -> Result<Vec<f64>> {
    if user >= repr.n_users() {
        return Err(ModelError::UnknownUser {
            user,
            n_users: repr.n_users(),
        });
    }
    let u = repr.user(user);
    Ok((0..repr.n_items()).map(|j| u.iter().zip(repr.item(j)).map(|(a, b)| a * b).sum()).collect())
}

/// The `k` best items of a score row: descending score, ties by ascending
/// item id, `exclude` never returned.
pub fn rank_row(row: &[f64], k: usize, exclude: &HashSet<usize>) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..row.len()).filter(|j| !exclude.contains(j)).collect();
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    candidates
}

pub fn top_k(scores: &ScoreMatrix, user: usize, k: usize, exclude: &HashSet<usize>) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(ModelError::Config("k must be at least 1".into()));
    }
    Ok(rank_row(scores.row(user)?, k, exclude))
}

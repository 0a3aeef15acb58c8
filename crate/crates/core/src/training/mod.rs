//! Losses, triplet sampling, the AdamW optimizer and the epoch loop.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Tensor, Var};
use crate::eval::{evaluate, EvalError};
use crate::graph::{InteractionSet, SplitSet};
use crate::model::{record_forward, round_f32, DiffusionGraph, ModelError, ModelState};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Contract(&'static str),
    #[error("could not sample a negative item for user {user} after {attempts} attempts")]
    Sampling { user: usize, attempts: usize },
    #[error("training set has no interactions")]
    EmptyTrainingSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("unknown {what} `{value}`")]
    UnknownTag { what: &'static str, value: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Bpr,
    Rmse,
    Bce,
}

impl FromStr for LossKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpr" => Ok(Self::Bpr),
            "rmse" => Ok(Self::Rmse),
            "bce" => Ok(Self::Bce),
            _ => Err(TrainError::UnknownTag {
                what: "loss",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bpr => "bpr",
            Self::Rmse => "rmse",
            Self::Bce => "bce",
        })
    }
}

/// How BPR aggregates a batch of triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BprMode {
    /// Mean over triplets of `-ln σ(s_pos - s_neg)`.
    #[default]
    Pairwise,
    /// `-ln σ(Σ s_pos - Σ s_neg)` over the whole batch.
    Summed,
}

impl FromStr for BprMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pairwise" => Ok(Self::Pairwise),
            "summed" => Ok(Self::Summed),
            _ => Err(TrainError::UnknownTag {
                what: "bpr mode",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for BprMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pairwise => "pairwise",
            Self::Summed => "summed",
        })
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(TrainError::Contract("loss inputs must be non-empty and of equal length"));
    }
    Ok(())
}

pub fn bpr_loss(pos: &[f64], neg: &[f64], mode: BprMode) -> Result<f64> {
    check_pair(pos, neg)?;
    Ok(match mode {
        BprMode::Pairwise => pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum::<f64>() / pos.len() as f64,
        BprMode::Summed => softplus(neg.iter().sum::<f64>() - pos.iter().sum::<f64>()),
    })
}

pub fn rmse_loss(predicted: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(predicted, targets)?;
    let mse = predicted.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / predicted.len() as f64;
    Ok(mse.sqrt())
}

pub fn bce_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(TrainError::Contract("loss inputs must be non-empty"));
    }
    let p = pos.iter().map(|s| softplus(-s)).sum::<f64>() / pos.len() as f64;
    let n = neg.iter().map(|s| softplus(*s)).sum::<f64>() / neg.len() as f64;
    Ok(p + n)
}

/// Records `kind` on the tape. `pos`, `neg` and `targets` are `[B]` vectors.
pub fn record_loss(tape: &mut Tape, kind: LossKind, mode: BprMode, pos: Var, neg: Var, targets: Var) -> Result<Var> {
    let out = match kind {
        LossKind::Bpr => match mode {
            BprMode::Pairwise => {
                let d = tape.sub(neg, pos).map_err(ModelError::from)?;
                let s = tape.softplus(d).map_err(ModelError::from)?;
                tape.mean(s)
            }
            BprMode::Summed => {
                let sp = tape.sum(pos).map_err(ModelError::from)?;
                let sn = tape.sum(neg).map_err(ModelError::from)?;
                let d = tape.sub(sn, sp).map_err(ModelError::from)?;
                tape.softplus(d)
            }
        },
        LossKind::Rmse => {
            let d = tape.sub(pos, targets).map_err(ModelError::from)?;
            let sq = tape.square(d).map_err(ModelError::from)?;
            let m = tape.mean(sq).map_err(ModelError::from)?;
            tape.sqrt(m)
        }
        LossKind::Bce => {
            let flipped = tape.scale(pos, -1.0).map_err(ModelError::from)?;
            let lp = tape.softplus(flipped).map_err(ModelError::from)?;
            let lp = tape.mean(lp).map_err(ModelError::from)?;
            let ln = tape.softplus(neg).map_err(ModelError::from)?;
            let ln = tape.mean(ln).map_err(ModelError::from)?;
            tape.add(lp, ln)
        }
    };
    Ok(out.map_err(ModelError::from)?)
}

/// Users with one sampled positive and one sampled negative each.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub users: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Rating of each `(user, positive)` edge, the RMSE target.
    pub ratings: Vec<f64>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

pub const NEGATIVE_ATTEMPTS: usize = 1000;

/// Precomputed lookup tables for [`TripletBatch`] sampling.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    n_items: usize,
    active_users: Vec<usize>,
    positives: Vec<Vec<(usize, f64)>>,
    seen: Vec<HashSet<usize>>,
}

impl TripletSampler {
    pub fn new(train: &InteractionSet) -> Self {
        let mut positives = vec![Vec::new(); train.n_users()];
        for r in train.records() {
            positives[r.user].push((r.item, r.rating));
        }
        Self {
            n_items: train.n_items(),
            active_users: (0..train.n_users()).filter(|&u| !positives[u].is_empty()).collect(),
            seen: train.item_sets(),
            positives,
        }
    }

    /// Users uniformly with replacement, a uniform positive per user, and a
    /// negative by rejection sampling over all items.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<TripletBatch> {
        if self.active_users.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        let mut batch = TripletBatch {
            users: Vec::with_capacity(batch_size),
            positives: Vec::with_capacity(batch_size),
            negatives: Vec::with_capacity(batch_size),
            ratings: Vec::with_capacity(batch_size),
        };
        for _ in 0..batch_size {
            let user = self.active_users[rng.gen_range(0..self.active_users.len())];
            let pos = &self.positives[user];
            let (item, rating) = pos[rng.gen_range(0..pos.len())];
            let negative = (0..NEGATIVE_ATTEMPTS)
                .map(|_| rng.gen_range(0..self.n_items))
                .find(|j| !self.seen[user].contains(j))
                .ok_or(TrainError::Sampling {
                    user,
                    attempts: NEGATIVE_ATTEMPTS,
                })?;
            batch.users.push(user);
            batch.positives.push(item);
            batch.negatives.push(negative);
            batch.ratings.push(rating);
        }
        Ok(batch)
    }
}

pub fn sample_batch<R: Rng>(train: &InteractionSet, batch_size: usize, rng: &mut R) -> Result<TripletBatch> {
    TripletSampler::new(train).sample(batch_size, rng)
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub bpr: BprMode,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seed of the sampling stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 1024,
            epochs: 100,
            loss: LossKind::Bpr,
            bpr: BprMode::Pairwise,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

/// AdamW moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: &TrainConfig, state: &ModelState) -> Self {
        let zeros: Vec<Vec<f64>> = state.parameters().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr: config.lr,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One AdamW update with decoupled weight decay on every parameter.
    /// Results are rounded to `f32`.
    pub fn apply(&mut self, state: &mut ModelState, grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in state.parameters_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps) + self.weight_decay * *p;
                *p = round_f32(*p - self.lr * update);
            }
        }
    }
}

/// Per-triplet scores recorded on a tape.
pub struct TripletScores {
    pub pos: Var,
    pub neg: Var,
    pub targets: Var,
}

/// Records `<user, item>` scores of a batch against final node features.
pub fn record_triplet_scores(tape: &mut Tape, feats: Var, n_users: usize, batch: &TripletBatch) -> Result<TripletScores> {
    let idx = |v: Vec<usize>| -> Arc<[usize]> { Arc::from(v) };
    let users = idx(batch.users.clone());
    let pos = idx(batch.positives.iter().map(|j| n_users + j).collect());
    let neg = idx(batch.negatives.iter().map(|j| n_users + j).collect());
    let go = || -> std::result::Result<TripletScores, crate::autodiff::AutodiffError> {
        let u = tape.gather_rows(feats, users)?;
        let p = tape.gather_rows(feats, pos)?;
        let n = tape.gather_rows(feats, neg)?;
        let up = tape.mul(u, p)?;
        let un = tape.mul(u, n)?;
        let targets = tape.constant(Tensor::new(vec![batch.len()], batch.ratings.clone())?);
        Ok(TripletScores {
            pos: tape.row_sum(up)?,
            neg: tape.row_sum(un)?,
            targets,
        })
    };
    go().map_err(|e| ModelError::from(e).into())
}

/// Loss of one batch and the gradient of every parameter, in
/// [`ModelState::parameters`] order.
pub fn batch_gradients(state: &ModelState, graph: &DiffusionGraph, batch: &TripletBatch, config: &TrainConfig) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(TrainError::Contract("empty batch"));
    }
    let mut tape = Tape::new();
    let vars = state.register(&mut tape, true);
    let feats = record_forward(&mut tape, state, &vars, graph)?;
    let s = record_triplet_scores(&mut tape, feats, state.n_users(), batch)?;
    let loss = record_loss(&mut tape, config.loss, config.bpr, s.pos, s.neg, s.targets)?;
    let mut grads = tape.backward(loss).map_err(ModelError::from)?;
    let out = vars.all().into_iter().map(|v| grads.take(v).expect("parameter gradient")).collect();
    Ok((tape.value(loss).item(), out))
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "val_ndcg@10")]
    pub val_ndcg_at_10: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation NDCG@10 (the last
    /// epoch when there is no validation data).
    pub best: ModelState,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Batches per epoch, `⌈|E_train| / batch_size⌉`.
pub fn batches_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size.max(1))
}

/// Trains `state` on `data.train`, diffusing over `graph`.
///
/// `on_epoch` sees every history record as soon as it is produced.
pub fn train(
    mut state: ModelState,
    data: &SplitSet,
    graph: &DiffusionGraph,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if config.batch_size == 0 {
        return Err(TrainError::Contract("batch size must be positive"));
    }
    let sampler = TripletSampler::new(&data.train);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut opt = OptimizerState::new(config, &state);
    let n_batches = batches_per_epoch(data.train.len(), config.batch_size);
    let has_validation = !data.validation.is_empty();

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelState)> = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        for b in 0..n_batches {
            let batch = sampler.sample(config.batch_size, &mut rng)?;
            let (loss, grads) = batch_gradients(&state, graph, &batch, config)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: b + 1 });
            }
            opt.apply(&mut state, &grads);
            total += loss;
        }
        let val = if has_validation {
            let report = evaluate(&state, graph, &data.train, &data.validation, &[10])?;
            Some(report.at(10).expect("k=10 requested").ndcg)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss: total / n_batches as f64,
            val_ndcg_at_10: val,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!("epoch {epoch}: loss {:.6} val ndcg@10 {:?}", record.loss, record.val_ndcg_at_10);
        on_epoch(&record);
        history.push(record);

        let score = val.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s || !has_validation) {
            best = Some((score, epoch, state.clone()));
        }
    }
    Ok(match best {
        Some((_, epoch, best)) => TrainOutcome {
            best,
            best_epoch: Some(epoch),
            history,
        },
        None => TrainOutcome {
            best: state,
            best_epoch: None,
            history,
        },
    })
}

//! Top-K ranking metrics, per-user aggregation and recommendation latency.
//!
//! Relevance is binary. Users without relevant items are skipped rather than
//! scored as zero, and every metric is computed per user and then averaged.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::InteractionSet;
use crate::model::{forward, rank_row, score_user, DiffusionGraph, FinalRepresentations, ModelError, ModelState};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no user has relevant items to evaluate against")]
    NoEvaluableUsers,
    #[error("cutoffs must be positive, got {0:?}")]
    InvalidK(Vec<usize>),
    #[error("evaluation data covers {actual} users/items, model has {expected}")]
    SizeMismatch { expected: String, actual: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, EvalError>;

fn hits(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> usize {
    ranked.iter().take(k).filter(|i| relevant.contains(i)).count()
}

/// `(|top-k ∩ rel| / k, |top-k ∩ rel| / |rel|)`, `None` when `relevant` is empty.
pub fn precision_recall_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<(f64, f64)> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    let h = hits(ranked, relevant, k) as f64;
    Some((h / k as f64, h / relevant.len() as f64))
}

/// Harmonic mean, zero when both inputs are zero.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[inline]
fn discount(position: usize) -> f64 {
    1.0 / ((position + 2) as f64).log2()
}

pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(p, _)| discount(p))
        .sum();
    let ideal: f64 = (0..relevant.len().min(k)).map(discount).sum();
    Some(dcg / ideal)
}

pub fn mrr_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    Some(
        ranked
            .iter()
            .take(k)
            .position(|i| relevant.contains(i))
            .map_or(0.0, |p| 1.0 / (p + 1) as f64),
    )
}

/// All metrics at one cutoff, for one user or averaged over users.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

impl MetricsAtK {
    pub fn for_user(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<Self> {
        let (precision, recall) = precision_recall_at_k(ranked, relevant, k)?;
        Some(Self {
            precision,
            recall,
            f1: f1(precision, recall),
            ndcg: ndcg_at_k(ranked, relevant, k)?,
            mrr: mrr_at_k(ranked, relevant, k)?,
        })
    }

    fn add(&mut self, o: &Self) {
        self.precision += o.precision;
        self.recall += o.recall;
        self.f1 += o.f1;
        self.ndcg += o.ndcg;
        self.mrr += o.mrr;
    }

    fn scale(&mut self, c: f64) {
        self.precision *= c;
        self.recall *= c;
        self.f1 *= c;
        self.ndcg *= c;
        self.mrr *= c;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecTime {
    pub mean_s: f64,
    pub std_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Averaged metrics keyed by cutoff.
    pub k: BTreeMap<usize, MetricsAtK>,
    /// `None` when timing was switched off.
    pub rec_time: Option<RecTime>,
    pub users_evaluated: usize,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&MetricsAtK> {
        self.k.get(&k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Averages per-user metrics over users with at least one relevant item.
///
/// `score_row(u)` returns user `u`'s scores over all items; `exclude[u]` are
/// removed from the ranking. Per-user work runs in parallel, the reduction is
/// sequential in user order so the result does not depend on thread count.
pub fn evaluate_with<F>(score_row: F, exclude: &[HashSet<usize>], relevant: &[HashSet<usize>], ks: &[usize]) -> Result<MetricsReport>
where
    F: Fn(usize) -> Vec<f64> + Sync,
{
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::InvalidK(ks.to_vec()));
    }
    let max_k = *ks.iter().max().unwrap();
    let users: Vec<usize> = (0..relevant.len()).filter(|&u| !relevant[u].is_empty()).collect();
    if users.is_empty() {
        return Err(EvalError::NoEvaluableUsers);
    }
    let per_user: Vec<Vec<MetricsAtK>> = users
        .par_iter()
        .map(|&u| {
            let ranked = rank_row(&score_row(u), max_k, &exclude[u]);
            ks.iter()
                .map(|&k| MetricsAtK::for_user(&ranked, &relevant[u], k).expect("relevant is non-empty"))
                .collect()
        })
        .collect();
    let mut k = BTreeMap::new();
    for (idx, &cut) in ks.iter().enumerate() {
        let mut total = MetricsAtK::default();
        for m in &per_user {
            total.add(&m[idx]);
        }
        total.scale(1.0 / users.len() as f64);
        k.insert(cut, total);
    }
    Ok(MetricsReport {
        k,
        rec_time: None,
        users_evaluated: users.len(),
    })
}

/// Metrics of precomputed representations against `target`, excluding `train` items.
pub fn evaluate_representations(repr: &FinalRepresentations, train: &InteractionSet, target: &InteractionSet, ks: &[usize]) -> Result<MetricsReport> {
    if repr.n_users() != target.n_users() || repr.n_items() != target.n_items() || train.n_users() != target.n_users() {
        return Err(EvalError::SizeMismatch {
            expected: format!("{}x{}", repr.n_users(), repr.n_items()),
            actual: format!("{}x{}", target.n_users(), target.n_items()),
        });
    }
    let exclude = train.item_sets();
    let relevant = target.item_sets();
    evaluate_with(|u| score_user(repr, u).expect("user in range"), &exclude, &relevant, ks)
}

/// Runs the model on `graph` and evaluates against `target`.
pub fn evaluate(state: &ModelState, graph: &DiffusionGraph, train: &InteractionSet, target: &InteractionSet, ks: &[usize]) -> Result<MetricsReport> {
    let repr = forward(state, graph)?;
    evaluate_representations(&repr, train, target, ks)
}

/// Expected averaged NDCG@k of a uniformly random ranking, estimated with
/// `shuffles` independent permutations per user.
pub fn monte_carlo_random_ndcg<R: Rng>(
    n_items: usize,
    exclude: &[HashSet<usize>],
    relevant: &[HashSet<usize>],
    k: usize,
    shuffles: usize,
    rng: &mut R,
) -> Option<f64> {
    let mut total = 0.0;
    let mut users = 0usize;
    for (u, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            continue;
        }
        let mut candidates: Vec<usize> = (0..n_items).filter(|i| !exclude[u].contains(i)).collect();
        let mut sum = 0.0;
        for _ in 0..shuffles {
            let (top, _) = candidates.partial_shuffle(rng, k);
            sum += ndcg_at_k(top, rel, k)?;
        }
        total += sum / shuffles as f64;
        users += 1;
    }
    (users > 0).then(|| total / users as f64)
}

/// Time source for [`measure_rec_time`].
pub trait Clock {
    /// Seconds since an arbitrary fixed origin.
    fn now(&self) -> f64;
}

/// Monotonic wall clock.
#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecTiming {
    pub samples: Vec<f64>,
    pub mean_s: f64,
    /// Sample standard deviation.
    pub std_s: f64,
}

impl RecTiming {
    pub fn summary(&self) -> RecTime {
        RecTime {
            mean_s: self.mean_s,
            std_s: self.std_s,
        }
    }
}

pub const WARMUP_RUNS: usize = 2;

/// Times forward + score row + top-`k` ranking for one user, `attempts`
/// times after [`WARMUP_RUNS`] untimed runs.
pub fn measure_rec_time(
    state: &ModelState,
    graph: &DiffusionGraph,
    user: usize,
    exclude: &HashSet<usize>,
    k: usize,
    attempts: usize,
    clock: &dyn Clock,
) -> Result<RecTiming> {
    let run = || -> Result<Vec<usize>> {
        let repr = forward(state, graph)?;
        let row = score_user(&repr, user)?;
        Ok(rank_row(&row, k, exclude))
    };
    for _ in 0..WARMUP_RUNS {
        run()?;
    }
    let mut samples = Vec::with_capacity(attempts);
    for _ in 0..attempts {
        let start = clock.now();
        std::hint::black_box(run()?);
        samples.push(clock.now() - start);
    }
    let n = samples.len() as f64;
    let mean_s = if samples.is_empty() { 0.0 } else { samples.iter().sum::<f64>() / n };
    let std_s = if samples.len() < 2 {
        0.0
    } else {
        (samples.iter().map(|s| (s - mean_s).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RecTiming { samples, mean_s, std_s })
}

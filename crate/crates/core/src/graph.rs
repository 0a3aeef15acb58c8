//! Rating datasets, the user–item interaction graph and per-user splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record ({user}, {item}) out of range for {n_users} users x {n_items} items")]
    OutOfRange {
        user: usize,
        item: usize,
        n_users: usize,
        n_items: usize,
    },
    #[error("duplicate interaction ({user}, {item})")]
    Duplicate { user: usize, item: usize },
    #[error("unknown rating format `{0}` (expected movielens-1m or tsv)")]
    UnknownFormat(String),
}

/// One observed `(user, item, rating)` triple with dense 0-based ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// A set of interactions over `n_users` users and `n_items` items, free of
/// duplicate `(user, item)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionSet {
    n_users: usize,
    n_items: usize,
    records: Vec<Interaction>,
}

impl InteractionSet {
    pub fn new(n_users: usize, n_items: usize, records: Vec<Interaction>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.user >= n_users || r.item >= n_items {
                return Err(DataError::OutOfRange {
                    user: r.user,
                    item: r.item,
                    n_users,
                    n_items,
                });
            }
            if !seen.insert((r.user, r.item)) {
                return Err(DataError::Duplicate { user: r.user, item: r.item });
            }
        }
        Ok(Self {
            n_users,
            n_items,
            records,
        })
    }

    pub fn empty(n_users: usize, n_items: usize) -> Self {
        Self {
            n_users,
            n_items,
            records: Vec::new(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Item ids per user, in record order.
    pub fn items_by_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for r in &self.records {
            out[r.user].push(r.item);
        }
        out
    }

    /// Item sets per user, for membership queries.
    pub fn item_sets(&self) -> Vec<HashSet<usize>> {
        let mut out = vec![HashSet::new(); self.n_users];
        for r in &self.records {
            out[r.user].insert(r.item);
        }
        out
    }
}

/// Supported rating file layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatingFormat {
    /// `UserID::MovieID::Rating::Timestamp`; the timestamp is ignored.
    #[serde(rename = "movielens-1m")]
    MovieLens1m,
    /// `user<TAB>item<TAB>rating`, optional header line.
    #[serde(rename = "tsv")]
    Tsv,
}

impl FromStr for RatingFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "movielens-1m" | "ml-1m" | "movielens" => Ok(RatingFormat::MovieLens1m),
            "tsv" => Ok(RatingFormat::Tsv),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatingFormat::MovieLens1m => "movielens-1m",
            RatingFormat::Tsv => "tsv",
        })
    }
}

/// A parsed rating file: re-indexed interactions plus the raw-id tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRatings {
    pub interactions: InteractionSet,
    /// `user_ids[u]` is the raw id of dense user `u`.
    pub user_ids: Vec<u64>,
    /// `item_ids[i]` is the raw id of dense item `i`.
    pub item_ids: Vec<u64>,
    /// Number of repeated `(user, item)` lines dropped (first occurrence wins).
    pub duplicates: usize,
}

pub fn parse_ratings(path: &Path, format: RatingFormat) -> Result<ParsedRatings, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_ratings_str(&text, format)
}

/// Parses rating text. Raw ids are mapped to dense ids in order of first appearance.
pub fn parse_ratings_str(text: &str, format: RatingFormat) -> Result<ParsedRatings, DataError> {
    let mut users: HashMap<u64, usize> = HashMap::new();
    let mut items: HashMap<u64, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut duplicates = 0;
    let mut first_content_line = true;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            RatingFormat::MovieLens1m => line.split("::").collect(),
            RatingFormat::Tsv => line.split('\t').collect(),
        };
        let is_header = first_content_line
            && format == RatingFormat::Tsv
            && fields[0].trim().parse::<u64>().is_err();
        first_content_line = false;
        if is_header {
            continue;
        }
        let (min, max) = match format {
            RatingFormat::MovieLens1m => (3, 4),
            RatingFormat::Tsv => (3, 3),
        };
        if fields.len() < min || fields.len() > max {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected {min}..={max} fields, found {}", fields.len()),
            });
        }
        let parse_id = |s: &str, what: &str| {
            s.trim().parse::<u64>().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("invalid {what} id `{s}`"),
            })
        };
        let raw_user = parse_id(fields[0], "user")?;
        let raw_item = parse_id(fields[1], "item")?;
        let rating = fields[2]
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|r| r.is_finite())
            .ok_or_else(|| DataError::Parse {
                line: line_no,
                message: format!("invalid rating `{}`", fields[2]),
            })?;

        let user = *users.entry(raw_user).or_insert_with(|| {
            user_ids.push(raw_user);
            user_ids.len() - 1
        });
        let item = *items.entry(raw_item).or_insert_with(|| {
            item_ids.push(raw_item);
            item_ids.len() - 1
        });
        if !seen.insert((user, item)) {
            duplicates += 1;
            continue;
        }
        records.push(Interaction { user, item, rating });
    }
    if duplicates > 0 {
        log::warn!("dropped {duplicates} duplicate (user, item) lines");
    }
    let interactions = InteractionSet {
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        records,
    };
    Ok(ParsedRatings {
        interactions,
        user_ids,
        item_ids,
        duplicates,
    })
}

/// A user–item edge; the rating is carried along but training only uses presence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub user: usize,
    pub item: usize,
    pub rating: Option<f64>,
}

/// The interaction graph over the unified vertex set: users occupy vertices
/// `0..n_users`, item `j` is vertex `n_users + j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BipartiteGraph {
    n_users: usize,
    n_items: usize,
    edges: Vec<GraphEdge>,
    /// Extra user–user edges added by a projection, `(a, b)` with `a < b`.
    user_links: Vec<(usize, usize)>,
}

impl BipartiteGraph {
    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn user_links(&self) -> &[(usize, usize)] {
        &self.user_links
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.n_users + item
    }

    /// Total edge count, user–item edges plus projected links.
    pub fn n_edges(&self) -> usize {
        self.edges.len() + self.user_links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_edges() == 0
    }

    /// True when no user–user or item–item edge is present.
    pub fn is_bipartite(&self) -> bool {
        self.user_links.is_empty() && self.edges.iter().all(|e| e.user < self.n_users && e.item < self.n_items)
    }

    /// Oriented edges over unified vertex ids: user → item for every
    /// interaction, then lower → higher user id for projected links.
    pub fn oriented_edges(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .map(|e| (e.user, self.n_users + e.item))
            .chain(self.user_links.iter().copied())
            .collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes()];
        for (t, h) in self.oriented_edges() {
            deg[t] += 1;
            deg[h] += 1;
        }
        deg
    }
}

pub fn build_bipartite(interactions: &InteractionSet) -> BipartiteGraph {
    BipartiteGraph {
        n_users: interactions.n_users,
        n_items: interactions.n_items,
        edges: interactions
            .records
            .iter()
            .map(|r| GraphEdge {
                user: r.user,
                item: r.item,
                rating: Some(r.rating),
            })
            .collect(),
        user_links: Vec::new(),
    }
}

/// How the bipartite graph is adapted before the sheaf layers see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Projection {
    /// Identity: the sheaf Laplacian runs over the user–item edges of the unified vertex set.
    #[default]
    Off,
    /// Adds a user–user edge between every pair of users sharing at least
    /// `min_common` items.
    CoEngagement { min_common: usize },
}

impl FromStr for Projection {
    type Err = String;

    /// Accepts `off`, `co-engagement` (threshold 1) or `co-engagement:<τ>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        if s == "off" || s == "none" {
            return Ok(Projection::Off);
        }
        match s.strip_prefix("co-engagement") {
            Some("") => Ok(Projection::CoEngagement { min_common: 1 }),
            Some(rest) => rest
                .strip_prefix(':')
                .and_then(|t| t.parse::<usize>().ok())
                .filter(|&t| t >= 1)
                .map(|min_common| Projection::CoEngagement { min_common })
                .ok_or_else(|| format!("invalid projection threshold in `{s}`")),
            None => Err(format!("unknown projection `{s}` (expected off or co-engagement[:τ])")),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Projection::Off => f.write_str("off"),
            Projection::CoEngagement { min_common } => write!(f, "co-engagement:{min_common}"),
        }
    }
}

pub fn adapt_bipartite(graph: &BipartiteGraph, projection: Projection) -> BipartiteGraph {
    let mut out = graph.clone();
    if let Projection::CoEngagement { min_common } = projection {
        let mut by_item: Vec<Vec<usize>> = vec![Vec::new(); graph.n_items];
        for e in &graph.edges {
            by_item[e.item].push(e.user);
        }
        let mut common: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for users in &mut by_item {
            users.sort_unstable();
            users.dedup();
            for (i, &a) in users.iter().enumerate() {
                for &b in &users[i + 1..] {
                    *common.entry((a, b)).or_default() += 1;
                }
            }
        }
        let mut links: Vec<(usize, usize)> = common
            .into_iter()
            .filter(|&(_, c)| c >= min_common.max(1))
            .map(|(pair, _)| pair)
            .collect();
        out.user_links.append(&mut links);
        out.user_links.sort_unstable();
        out.user_links.dedup();
    }
    out
}

/// Train / validation / test partition of an interaction set.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub test: InteractionSet,
    pub seed: u64,
}

/// Which part of a split a record landed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

/// `(train, validation, test)` sizes for a user with `k` records.
pub fn split_sizes(k: usize) -> (usize, usize, usize) {
    if k < 3 {
        return (k, 0, 0);
    }
    let train = (4 * k) / 5;
    let rest = k - train;
    let validation = rest.div_ceil(2);
    (train, validation, rest - validation)
}

/// Per-user 80/10/10 split. Each user's records are shuffled by a ChaCha
/// stream keyed by `(seed, user)`, so the result does not depend on record
/// order across users or on thread count. Each part keeps input record order.
pub fn split_interactions(interactions: &InteractionSet, seed: u64) -> SplitSet {
    let assignment = split_assignment(interactions, seed);
    let pick = |part: SplitPart| InteractionSet {
        n_users: interactions.n_users,
        n_items: interactions.n_items,
        records: interactions
            .records
            .iter()
            .zip(&assignment)
            .filter(|(_, &p)| p == part)
            .map(|(r, _)| *r)
            .collect(),
    };
    SplitSet {
        train: pick(SplitPart::Train),
        validation: pick(SplitPart::Validation),
        test: pick(SplitPart::Test),
        seed,
    }
}

/// The part assigned to each input record, aligned with `interactions.records()`.
pub fn split_assignment(interactions: &InteractionSet, seed: u64) -> Vec<SplitPart> {
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); interactions.n_users];
    for (idx, r) in interactions.records.iter().enumerate() {
        by_user[r.user].push(idx);
    }
    let mut out = vec![SplitPart::Train; interactions.records.len()];
    for (user, mut idxs) in by_user.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(user as u64);
        idxs.shuffle(&mut rng);
        let (train, validation, _) = split_sizes(idxs.len());
        for (pos, idx) in idxs.into_iter().enumerate() {
            out[idx] = if pos < train {
                SplitPart::Train
            } else if pos < train + validation {
                SplitPart::Validation
            } else {
                SplitPart::Test
            };
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct ManifestRow {
    user: u64,
    item: u64,
    part: SplitPart,
}

/// JSON audit listing of every record's split assignment, using raw ids.
pub fn split_manifest(parsed: &ParsedRatings, seed: u64) -> serde_json::Value {
    let assignment = split_assignment(&parsed.interactions, seed);
    let rows: Vec<ManifestRow> = parsed
        .interactions
        .records
        .iter()
        .zip(assignment)
        .map(|(r, part)| ManifestRow {
            user: parsed.user_ids[r.user],
            item: parsed.item_ids[r.item],
            part,
        })
        .collect();
    serde_json::json!({ "seed": seed, "records": rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(records: &[(usize, usize, f64)]) -> InteractionSet {
        let n = records.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let m = records.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        InteractionSet::new(
            n,
            m,
            records
                .iter()
                .map(|&(user, item, rating)| Interaction { user, item, rating })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn movielens_line() {
        let parsed = parse_ratings_str("1::1193::5::978300760\n", RatingFormat::MovieLens1m).unwrap();
        assert_eq!(parsed.user_ids, vec![1]);
        assert_eq!(parsed.item_ids, vec![1193]);
        assert_eq!(
            parsed.interactions.records(),
            &[Interaction { user: 0, item: 0, rating: 5.0 }]
        );
    }

    #[test]
    fn half_star_ratings_accepted() {
        let parsed = parse_ratings_str("4::2::3.5::0", RatingFormat::MovieLens1m).unwrap();
        assert_eq!(parsed.interactions.records()[0].rating, 3.5);
    }

    #[test]
    fn empty_file() {
        for fmt in [RatingFormat::MovieLens1m, RatingFormat::Tsv] {
            let parsed = parse_ratings_str("", fmt).unwrap();
            assert_eq!(parsed.interactions.n_users(), 0);
            assert_eq!(parsed.interactions.n_items(), 0);
            assert!(parsed.interactions.is_empty());
        }
    }

    #[test]
    fn tsv_with_and_without_header() {
        let plain = parse_ratings_str("3\t7\t4.0\n", RatingFormat::Tsv).unwrap();
        assert_eq!(plain.user_ids, vec![3]);
        assert_eq!(plain.item_ids, vec![7]);
        assert_eq!(plain.interactions.records()[0], Interaction { user: 0, item: 0, rating: 4.0 });
        let headed = parse_ratings_str("user\titem\trating\n3\t7\t4.0\n", RatingFormat::Tsv).unwrap();
        assert_eq!(headed, plain);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_ratings_str("1\t2\t3\n1\tx\t3\n", RatingFormat::Tsv).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
        let err = parse_ratings_str("1::2\n", RatingFormat::MovieLens1m).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }));
        let err = parse_ratings_str("1::2::nan::0\n", RatingFormat::MovieLens1m).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }));
    }

    #[test]
    fn duplicates_keep_first() {
        let parsed = parse_ratings_str("1\t2\t3\n1\t2\t5\n2\t2\t1\n", RatingFormat::Tsv).unwrap();
        assert_eq!(parsed.duplicates, 1);
        assert_eq!(parsed.interactions.len(), 2);
        assert_eq!(parsed.interactions.records()[0].rating, 3.0);
    }

    #[test]
    fn interaction_set_validates() {
        let r = |user, item| Interaction { user, item, rating: 1.0 };
        assert!(matches!(
            InteractionSet::new(1, 1, vec![r(0, 1)]),
            Err(DataError::OutOfRange { .. })
        ));
        assert!(matches!(
            InteractionSet::new(1, 1, vec![r(0, 0), r(0, 0)]),
            Err(DataError::Duplicate { .. })
        ));
    }

    #[test]
    fn bipartite_construction() {
        let g = build_bipartite(&set(&[(0, 0, 5.0), (0, 1, 3.0), (1, 1, 4.0)]));
        assert_eq!(g.n_nodes(), 4);
        assert_eq!(g.n_edges(), 3);
        assert_eq!(g.oriented_edges(), vec![(0, 2), (0, 3), (1, 3)]);
        assert!(g.is_bipartite());

        let empty = build_bipartite(&InteractionSet::default());
        assert!(empty.is_empty());
        assert_eq!(empty.n_nodes(), 0);

        let single = build_bipartite(&set(&[(0, 0, 1.0)]));
        assert_eq!(single.degrees(), vec![1, 1]);
    }

    #[test]
    fn projection_off_is_identity() {
        let g = build_bipartite(&set(&[(0, 0, 5.0), (1, 0, 3.0), (1, 1, 4.0)]));
        assert_eq!(adapt_bipartite(&g, Projection::Off), g);
    }

    #[test]
    fn co_engagement_links_users() {
        let g = build_bipartite(&set(&[(0, 0, 5.0), (1, 0, 3.0)]));
        let p = adapt_bipartite(&g, Projection::CoEngagement { min_common: 1 });
        assert_eq!(p.user_links(), &[(0, 1)]);
        assert!(!p.is_bipartite());
        assert_eq!(p.oriented_edges().last(), Some(&(0, 1)));

        let disjoint = build_bipartite(&set(&[(0, 0, 5.0), (1, 1, 3.0)]));
        assert!(adapt_bipartite(&disjoint, Projection::CoEngagement { min_common: 1 })
            .user_links()
            .is_empty());
        let strict = adapt_bipartite(&g, Projection::CoEngagement { min_common: 2 });
        assert!(strict.user_links().is_empty());
    }

    #[test]
    fn projection_parse() {
        assert_eq!("off".parse::<Projection>().unwrap(), Projection::Off);
        assert_eq!(
            "co-engagement".parse::<Projection>().unwrap(),
            Projection::CoEngagement { min_common: 1 }
        );
        assert_eq!(
            "co-engagement:3".parse::<Projection>().unwrap(),
            Projection::CoEngagement { min_common: 3 }
        );
        assert!("co-engagement:0".parse::<Projection>().is_err());
        assert!("bogus".parse::<Projection>().is_err());
        let p = Projection::CoEngagement { min_common: 2 };
        assert_eq!(p.to_string().parse::<Projection>().unwrap(), p);
    }

    #[test]
    fn split_sizes_rule() {
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(2), (2, 0, 0));
        assert_eq!(split_sizes(3), (2, 1, 0));
        assert_eq!(split_sizes(7), (5, 1, 1));
        assert_eq!(split_sizes(9), (7, 1, 1));
        assert_eq!(split_sizes(20), (16, 2, 2));
        assert_eq!(split_sizes(13), (10, 2, 1));
    }

    #[test]
    fn split_counts_per_user() {
        let mut records: Vec<(usize, usize, f64)> = (0..10).map(|i| (0, i, 1.0)).collect();
        records.push((1, 0, 1.0));
        records.push((1, 1, 1.0));
        let s = split_interactions(&set(&records), 11);
        let count = |p: &InteractionSet, u| p.records().iter().filter(|r| r.user == u).count();
        assert_eq!((count(&s.train, 0), count(&s.validation, 0), count(&s.test, 0)), (8, 1, 1));
        assert_eq!((count(&s.train, 1), count(&s.validation, 1), count(&s.test, 1)), (2, 0, 0));
        assert_eq!(split_interactions(&set(&records), 11), s);
    }

    #[test]
    fn manifest_lists_every_record() {
        let parsed = parse_ratings_str("5\t1\t1\n5\t2\t1\n5\t3\t1\n9\t1\t2\n", RatingFormat::Tsv).unwrap();
        let m = split_manifest(&parsed, 3);
        let rows = m["records"].as_array().unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0]["user"], 5);
        assert_eq!(rows[3]["part"], "train");
    }
}

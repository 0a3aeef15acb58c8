//! Cellular sheaves on graphs: coboundary, sheaf Laplacian, normalization and
//! the diffusion update.
//!
//! Everything here works on plain `f64` matrices and is independent of the
//! autodiff engine. The model module re-derives the same operators through
//! differentiable kernels, and tests cross-check the two routes.
//!
//! Conventions:
//! * node `v` owns rows `v*d .. (v+1)*d` of a 0-cochain, edge `e` owns rows
//!   `e*d_e .. (e+1)*d_e` of a 1-cochain;
//! * each edge is oriented `(tail, head)` and the coboundary is
//!   `(δx)_e = F_{head ⊴ e} x_head - F_{tail ⊴ e} x_tail`.

mod operator;

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::linalg::{self, DEFAULT_EPS};

pub use operator::BlockSparseOperator;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SheafError {
    #[error("stalk dimensions must be positive (node_dim={node_dim}, edge_dim={edge_dim})")]
    InvalidStalks { node_dim: usize, edge_dim: usize },
    #[error("node {node} out of range for a graph with {n_nodes} nodes")]
    NodeOutOfRange { node: usize, n_nodes: usize },
    #[error("edge {edge} is a self-loop on node {node}")]
    SelfLoop { edge: usize, node: usize },
    #[error("edge {edge} out of range ({n_edges} edges)")]
    EdgeOutOfRange { edge: usize, n_edges: usize },
    #[error("node {node} is not incident to edge {edge}")]
    NotIncident { node: usize, edge: usize },
    #[error("missing restriction map for incidence node {node} ⊴ edge {edge}")]
    MissingRestriction { node: usize, edge: usize },
    #[error("{context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("degree block of node {node} is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    Normalization { node: usize, min_eigenvalue: f64 },
}

/// Dimensions of vertex and edge stalks, shared by every node and edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StalkConfig {
    pub node_dim: usize,
    pub edge_dim: usize,
}

impl StalkConfig {
    pub fn new(node_dim: usize, edge_dim: usize) -> Result<Self, SheafError> {
        if node_dim == 0 || edge_dim == 0 {
            return Err(SheafError::InvalidStalks { node_dim, edge_dim });
        }
        Ok(Self { node_dim, edge_dim })
    }

    /// `(n, n)`: full sheaf.
    pub fn sheaf(n: usize) -> Result<Self, SheafError> {
        Self::new(n, n)
    }

    /// `(n, 1)`: one-dimensional edge stalks, the GCN-equivalent configuration.
    pub fn gcn_like(n: usize) -> Result<Self, SheafError> {
        Self::new(n, 1)
    }

    /// `(1, n)`: one-dimensional node stalks, the GAT-equivalent configuration.
    pub fn gat_like(n: usize) -> Result<Self, SheafError> {
        Self::new(1, n)
    }
}

impl fmt::Display for StalkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.node_dim, self.edge_dim)
    }
}

/// An oriented edge. `tail` and `head` index nodes of the underlying graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrientedEdge {
    pub tail: usize,
    pub head: usize,
}

/// Borrowed view of one restriction map `F_{node ⊴ edge}`.
#[derive(Debug, Clone, Copy)]
pub struct RestrictionMap<'a> {
    pub node: usize,
    pub edge: usize,
    /// `edge_dim × node_dim`.
    pub matrix: &'a DMatrix<f64>,
}

/// A cellular sheaf on an undirected graph with a fixed edge orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct SheafStructure {
    n_nodes: usize,
    stalks: StalkConfig,
    edges: Vec<OrientedEdge>,
    /// `[tail map, head map]` per edge.
    maps: Vec<[Option<DMatrix<f64>>; 2]>,
}

impl SheafStructure {
    /// Creates a sheaf skeleton with no restriction maps yet.
    pub fn new(
        n_nodes: usize,
        stalks: StalkConfig,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, SheafError> {
        StalkConfig::new(stalks.node_dim, stalks.edge_dim)?;
        let mut out = Vec::new();
        for (idx, (tail, head)) in edges.into_iter().enumerate() {
            for node in [tail, head] {
                if node >= n_nodes {
                    return Err(SheafError::NodeOutOfRange { node, n_nodes });
                }
            }
            if tail == head {
                return Err(SheafError::SelfLoop { edge: idx, node: tail });
            }
            out.push(OrientedEdge { tail, head });
        }
        let maps = vec![[None, None]; out.len()];
        Ok(Self {
            n_nodes,
            stalks,
            edges: out,
            maps,
        })
    }

    /// Sheaf whose every restriction map is the `d × d` identity.
    pub fn identity(n_nodes: usize, dim: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, SheafError> {
        let mut sheaf = Self::new(n_nodes, StalkConfig::sheaf(dim)?, edges)?;
        for slot in &mut sheaf.maps {
            *slot = [Some(DMatrix::identity(dim, dim)), Some(DMatrix::identity(dim, dim))];
        }
        Ok(sheaf)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn stalks(&self) -> StalkConfig {
        self.stalks
    }

    pub fn edges(&self) -> &[OrientedEdge] {
        &self.edges
    }

    pub fn set_restriction(&mut self, edge: usize, node: usize, matrix: DMatrix<f64>) -> Result<(), SheafError> {
        let e = *self.edges.get(edge).ok_or(SheafError::EdgeOutOfRange {
            edge,
            n_edges: self.edges.len(),
        })?;
        let want = (self.stalks.edge_dim, self.stalks.node_dim);
        if matrix.shape() != want {
            return Err(SheafError::Dimension {
                context: "restriction map",
                expected: format!("{}x{}", want.0, want.1),
                actual: format!("{}x{}", matrix.nrows(), matrix.ncols()),
            });
        }
        let slot = if node == e.tail {
            0
        } else if node == e.head {
            1
        } else {
            return Err(SheafError::NotIncident { node, edge });
        };
        self.maps[edge][slot] = Some(matrix);
        Ok(())
    }

    pub fn restriction(&self, edge: usize, node: usize) -> Option<&DMatrix<f64>> {
        let e = self.edges.get(edge)?;
        if node == e.tail {
            self.maps[edge][0].as_ref()
        } else if node == e.head {
            self.maps[edge][1].as_ref()
        } else {
            None
        }
    }

    /// All restriction maps currently set, tail map before head map per edge.
    pub fn restrictions(&self) -> impl Iterator<Item = RestrictionMap<'_>> {
        self.edges.iter().zip(&self.maps).enumerate().flat_map(|(edge, (e, maps))| {
            [(e.tail, &maps[0]), (e.head, &maps[1])]
                .into_iter()
                .filter_map(move |(node, m)| m.as_ref().map(|matrix| RestrictionMap { node, edge, matrix }))
        })
    }

    /// Same sheaf with edge `edge` oriented the other way; restriction maps
    /// stay attached to their nodes.
    pub fn with_flipped(&self, edge: usize) -> Result<Self, SheafError> {
        if edge >= self.edges.len() {
            return Err(SheafError::EdgeOutOfRange {
                edge,
                n_edges: self.edges.len(),
            });
        }
        let mut out = self.clone();
        let e = out.edges[edge];
        out.edges[edge] = OrientedEdge { tail: e.head, head: e.tail };
        out.maps[edge].swap(0, 1);
        Ok(out)
    }
}

/// A 0-cochain with `f` feature channels: `n` stacked blocks of `node_dim` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Cochain0 {
    data: DMatrix<f64>,
    node_dim: usize,
}

impl Cochain0 {
    pub fn new(data: DMatrix<f64>, node_dim: usize) -> Result<Self, SheafError> {
        if node_dim == 0 || !data.nrows().is_multiple_of(node_dim) {
            return Err(SheafError::Dimension {
                context: "0-cochain rows",
                expected: format!("a multiple of node_dim={node_dim}"),
                actual: format!("{}", data.nrows()),
            });
        }
        Ok(Self { data, node_dim })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    pub fn n_nodes(&self) -> usize {
        self.data.nrows() / self.node_dim
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn node_block(&self, v: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.data.rows(v * self.node_dim, self.node_dim)
    }
}

/// A 1-cochain: `m` stacked blocks of `edge_dim` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Cochain1 {
    data: DMatrix<f64>,
    edge_dim: usize,
}

impl Cochain1 {
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    pub fn n_edges(&self) -> usize {
        self.data.nrows() / self.edge_dim
    }
}

/// Builds the coboundary `δ : C⁰ → C¹` of a sheaf.
///
/// Edge row block `e` holds `+F_{head ⊴ e}` in the head column and
/// `-F_{tail ⊴ e}` in the tail column.
pub fn build_coboundary(sheaf: &SheafStructure) -> Result<BlockSparseOperator, SheafError> {
    let StalkConfig { node_dim, edge_dim } = sheaf.stalks;
    let mut delta = BlockSparseOperator::zeros(vec![edge_dim; sheaf.n_edges()], vec![node_dim; sheaf.n_nodes]);
    for (idx, (e, maps)) in sheaf.edges.iter().zip(&sheaf.maps).enumerate() {
        let tail = maps[0]
            .as_ref()
            .ok_or(SheafError::MissingRestriction { node: e.tail, edge: idx })?;
        let head = maps[1]
            .as_ref()
            .ok_or(SheafError::MissingRestriction { node: e.head, edge: idx })?;
        delta.add_block(idx, e.head, head.clone())?;
        delta.add_block(idx, e.tail, -tail)?;
    }
    Ok(delta)
}

/// Applies `δ` to a 0-cochain, returning the 1-cochain of edge disagreements.
pub fn coboundary_apply(delta: &BlockSparseOperator, x: &Cochain0) -> Result<Cochain1, SheafError> {
    let data = delta.apply(x.data())?;
    let edge_dim = delta.row_dims().first().copied().unwrap_or(1);
    Ok(Cochain1 { data, edge_dim })
}

/// Sheaf Laplacian `L = δᵀδ`, assembled block-wise from the coboundary.
pub fn sheaf_laplacian(delta: &BlockSparseOperator) -> BlockSparseOperator {
    delta.gram()
}

/// Normalized Laplacian `D^{-1/2} L D^{-1/2}` with `D` the block diagonal of
/// `L`, each block regularized by `DEFAULT_EPS · I`.
pub fn normalized_sheaf_laplacian(laplacian: &BlockSparseOperator) -> Result<BlockSparseOperator, SheafError> {
    normalized_sheaf_laplacian_with(laplacian, DEFAULT_EPS)
}

/// As [`normalized_sheaf_laplacian`] with an explicit ridge `eps`. With
/// `eps = 0` a singular degree block (for example an isolated node) is an error.
pub fn normalized_sheaf_laplacian_with(
    laplacian: &BlockSparseOperator,
    eps: f64,
) -> Result<BlockSparseOperator, SheafError> {
    if laplacian.row_dims() != laplacian.col_dims() {
        return Err(SheafError::Dimension {
            context: "normalization",
            expected: "a square block layout".into(),
            actual: format!("{} x {} blocks", laplacian.row_blocks(), laplacian.col_blocks()),
        });
    }
    let scales = degree_inv_sqrt(laplacian, eps)?;
    Ok(laplacian.map_blocks(|r, c, block| &scales[r] * block * &scales[c]))
}

/// `(D_v + εI)^{-1/2}` for every diagonal block of `laplacian`.
pub fn degree_inv_sqrt(laplacian: &BlockSparseOperator, eps: f64) -> Result<Vec<DMatrix<f64>>, SheafError> {
    (0..laplacian.row_blocks())
        .map(|v| {
            let d = laplacian.row_dims()[v];
            let zero = DMatrix::zeros(d, d);
            let block = laplacian.block(v, v).unwrap_or(&zero);
            linalg::inv_sqrt_sym(block, eps)
                .map(|r| r.value)
                .map_err(|min_eigenvalue| SheafError::Normalization { node: v, min_eigenvalue })
        })
        .collect()
}

/// Applies the same `d × d` matrix to every node block: `(I_n ⊗ W) X`.
pub fn kron_identity_apply(w: &DMatrix<f64>, x: &Cochain0) -> Result<Cochain0, SheafError> {
    let d = x.node_dim();
    if w.shape() != (d, d) {
        return Err(SheafError::Dimension {
            context: "W1",
            expected: format!("{d}x{d}"),
            actual: format!("{}x{}", w.nrows(), w.ncols()),
        });
    }
    let mut out = DMatrix::zeros(x.data.nrows(), x.channels());
    for v in 0..x.n_nodes() {
        let block = w * x.node_block(v);
        out.rows_mut(v * d, d).copy_from(&block);
    }
    Cochain0::new(out, d)
}

/// One learned diffusion update
/// `X ↦ X - σ(Δ (I_n ⊗ W1) X W2)`.
///
/// When `W2` changes the channel count the residual term is only kept if a
/// `residual` projection (`f1 × f2`) is supplied; otherwise the update
/// returns `-σ(Δ (I_n ⊗ W1) X W2)` alone.
pub fn diffusion_step(
    x: &Cochain0,
    normalized_laplacian: &BlockSparseOperator,
    w1: &DMatrix<f64>,
    w2: &DMatrix<f64>,
    activation: Activation,
    residual: Option<&DMatrix<f64>>,
) -> Result<Cochain0, SheafError> {
    if normalized_laplacian.ncols() != x.data.nrows() || normalized_laplacian.nrows() != x.data.nrows() {
        return Err(SheafError::Dimension {
            context: "diffusion operator",
            expected: format!("{0}x{0}", x.data.nrows()),
            actual: format!("{}x{}", normalized_laplacian.nrows(), normalized_laplacian.ncols()),
        });
    }
    if w2.nrows() != x.channels() {
        return Err(SheafError::Dimension {
            context: "W2",
            expected: format!("{} rows", x.channels()),
            actual: format!("{}x{}", w2.nrows(), w2.ncols()),
        });
    }
    let mixed = kron_identity_apply(w1, x)?.into_data() * w2;
    let diffused = normalized_laplacian.apply(&mixed)?.map(|v| activation.apply(v));
    let out = if w2.ncols() == x.channels() {
        x.data() - diffused
    } else if let Some(p) = residual {
        if p.shape() != w2.shape() {
            return Err(SheafError::Dimension {
                context: "residual projection",
                expected: format!("{}x{}", w2.nrows(), w2.ncols()),
                actual: format!("{}x{}", p.nrows(), p.ncols()),
            });
        }
        x.data() * p - diffused
    } else {
        -diffused
    };
    Cochain0::new(out, x.node_dim())
}

/// Plain unit-step Euler update `X ↦ (I - Δ) X`.
pub fn unit_euler_step(x: &Cochain0, laplacian: &BlockSparseOperator) -> Result<Cochain0, SheafError> {
    let lx = laplacian.apply(x.data())?;
    Cochain0::new(x.data() - lx, x.node_dim())
}

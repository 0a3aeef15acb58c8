//! A small tape-based reverse-mode differentiation engine.
//!
//! The engine supports a closed set of primitives: the dense operations needed
//! by the losses and embedding lookups, plus block-structured sheaf kernels
//! (coboundary, its adjoint, degree blocks, block inverse square roots and
//! block-diagonal products) whose vector–Jacobian products are written by hand.
//!
//! ```
//! use sheafrec::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap(), true);
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0, 8.0]);
//! ```
//!
//! Every node keeps its value until the tape is dropped; a fresh tape is
//! built for each forward pass.

#[cfg(test)]
mod gradcheck;
pub(crate) mod kernels;
mod tensor;

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::activation::Activation;
use crate::linalg::{self, InvSqrt};

pub use kernels::EdgeTopology;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("unsupported primitive `{0}`")]
    UnsupportedOp(String),
    #[error("{op} takes {expected} inputs, got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("degree block of node {node} is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    Normalization { node: usize, min_eigenvalue: f64 },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive tags accepted by [`Tape::record`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sum,
    Mean,
    Square,
    Sqrt,
    Log,
    Sigmoid,
    Softplus,
    Activation(Activation),
    /// Concatenate two 2-D tensors along `axis` (0 = rows, 1 = columns).
    Concat(usize),
    Reshape(Vec<usize>),
    /// Block gather: pick rows of a 2-D tensor.
    GatherRows(Arc<[usize]>),
    /// Block scatter: add row `k` of the input into output row `index[k]`.
    ScatterRows { index: Arc<[usize]>, n_rows: usize },
    /// Sum each row of a 2-D tensor.
    RowSum,
    /// Inputs `(tail_maps, head_maps)`; output `[n, dn, dn]` degree blocks.
    DegreeBlocks { topology: Arc<EdgeTopology>, edge_dim: usize, node_dim: usize },
    /// `(A_v + εI)^{-1/2}` for each `[n, d, d]` block.
    BlockInvSqrt { eps: f64 },
    /// Inputs `(blocks [n, d, d], x [n*d, f])`; output `S_v x_v`.
    BlockDiagApply,
    /// Inputs `(w [d, d], x [n*d, f])`; output `(I_n ⊗ W) x`.
    KronApply,
    /// Inputs `(tail_maps, head_maps, x)`; output `δx`.
    Coboundary { topology: Arc<EdgeTopology>, edge_dim: usize, node_dim: usize },
    /// Inputs `(tail_maps, head_maps, r)`; output `δᵀr`.
    CoboundaryTranspose { topology: Arc<EdgeTopology>, edge_dim: usize, node_dim: usize },
}

impl FromStr for Primitive {
    type Err = AutodiffError;

    /// Parses the tag of a parameter-free primitive.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "square" => Primitive::Square,
            "sqrt" => Primitive::Sqrt,
            "log" => Primitive::Log,
            "sigmoid" => Primitive::Sigmoid,
            "softplus" => Primitive::Softplus,
            "row-sum" => Primitive::RowSum,
            "block-diag-apply" => Primitive::BlockDiagApply,
            "kron-apply" => Primitive::KronApply,
            other => match other.parse::<Activation>() {
                Ok(act) => Primitive::Activation(act),
                Err(_) => return Err(AutodiffError::UnsupportedOp(other.to_string())),
            },
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Activation(Var, Activation),
    Concat { a: Var, b: Var, axis: usize },
    Reshape(Var),
    GatherRows { src: Var, index: Arc<[usize]> },
    ScatterRows { src: Var, index: Arc<[usize]> },
    RowSum(Var),
    DegreeBlocks { tail: Var, head: Var, topology: Arc<EdgeTopology>, de: usize, dn: usize },
    BlockInvSqrt { src: Var, factors: Vec<InvSqrt> },
    BlockDiagApply { blocks: Var, x: Var },
    KronApply { w: Var, x: Var },
    Coboundary { tail: Var, head: Var, x: Var, topology: Arc<EdgeTopology>, de: usize, dn: usize },
    CoboundaryTranspose { tail: Var, head: Var, r: Var, topology: Arc<EdgeTopology>, de: usize, dn: usize },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _) | Sum(a) | Mean(a) | Square(a) | Sqrt(a) | Log(a) | Sigmoid(a) | Softplus(a) | Activation(a, _) | Reshape(a) | RowSum(a) => {
                vec![*a]
            }
            Concat { a, b, .. } => vec![*a, *b],
            GatherRows { src, .. } | ScatterRows { src, .. } | BlockInvSqrt { src, .. } => vec![*src],
            DegreeBlocks { tail, head, .. } => vec![*tail, *head],
            BlockDiagApply { blocks, x } => vec![*blocks, *x],
            KronApply { w, x } => vec![*w, *x],
            Coboundary { tail, head, x, .. } => vec![*tail, *head, *x],
            CoboundaryTranspose { tail, head, r, .. } => vec![*tail, *head, *r],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// True when any path from a `requires_grad` leaf reaches this node.
    needs_grad: bool,
}

/// Records primitive applications in execution order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Always present for leaves
    /// created with `requires_grad`, zero when the loss does not depend on them.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow; `softplus(-x) = -ln σ(x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are reported only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Generic entry point: applies `primitive` to `inputs` and records it.
    pub fn record(&mut self, primitive: Primitive, inputs: &[Var]) -> Result<Var> {
        fn arity(op: &'static str, inputs: &[Var], n: usize) -> Result<()> {
            if inputs.len() != n {
                return Err(AutodiffError::Arity {
                    op,
                    expected: n,
                    actual: inputs.len(),
                });
            }
            Ok(())
        }
        use Primitive as P;
        match primitive {
            P::MatMul => arity("matmul", inputs, 2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            P::Add => arity("add", inputs, 2).and_then(|_| self.add(inputs[0], inputs[1])),
            P::Sub => arity("sub", inputs, 2).and_then(|_| self.sub(inputs[0], inputs[1])),
            P::Mul => arity("mul", inputs, 2).and_then(|_| self.mul(inputs[0], inputs[1])),
            P::Scale(c) => arity("scale", inputs, 1).and_then(|_| self.scale(inputs[0], c)),
            P::Sum => arity("sum", inputs, 1).and_then(|_| self.sum(inputs[0])),
            P::Mean => arity("mean", inputs, 1).and_then(|_| self.mean(inputs[0])),
            P::Square => arity("square", inputs, 1).and_then(|_| self.square(inputs[0])),
            P::Sqrt => arity("sqrt", inputs, 1).and_then(|_| self.sqrt(inputs[0])),
            P::Log => arity("log", inputs, 1).and_then(|_| self.log(inputs[0])),
            P::Sigmoid => arity("sigmoid", inputs, 1).and_then(|_| self.sigmoid(inputs[0])),
            P::Softplus => arity("softplus", inputs, 1).and_then(|_| self.softplus(inputs[0])),
            P::Activation(act) => arity("activation", inputs, 1).and_then(|_| self.activation(inputs[0], act)),
            P::Concat(axis) => arity("concat", inputs, 2).and_then(|_| self.concat(inputs[0], inputs[1], axis)),
            P::Reshape(shape) => arity("reshape", inputs, 1).and_then(|_| self.reshape(inputs[0], shape)),
            P::GatherRows(index) => arity("gather-rows", inputs, 1).and_then(|_| self.gather_rows(inputs[0], index)),
            P::ScatterRows { index, n_rows } => {
                arity("scatter-rows", inputs, 1).and_then(|_| self.scatter_rows(inputs[0], index, n_rows))
            }
            P::RowSum => arity("row-sum", inputs, 1).and_then(|_| self.row_sum(inputs[0])),
            P::DegreeBlocks {
                topology,
                edge_dim,
                node_dim,
            } => arity("degree-blocks", inputs, 2)
                .and_then(|_| self.degree_blocks(inputs[0], inputs[1], topology, edge_dim, node_dim)),
            P::BlockInvSqrt { eps } => arity("block-inv-sqrt", inputs, 1).and_then(|_| self.block_inv_sqrt(inputs[0], eps)),
            P::BlockDiagApply => arity("block-diag-apply", inputs, 2).and_then(|_| self.block_diag_apply(inputs[0], inputs[1])),
            P::KronApply => arity("kron-apply", inputs, 2).and_then(|_| self.kron_apply(inputs[0], inputs[1])),
            P::Coboundary {
                topology,
                edge_dim,
                node_dim,
            } => arity("coboundary", inputs, 3)
                .and_then(|_| self.coboundary(inputs[0], inputs[1], inputs[2], topology, edge_dim, node_dim)),
            P::CoboundaryTranspose {
                topology,
                edge_dim,
                node_dim,
            } => arity("coboundary-transpose", inputs, 3).and_then(|_| {
                self.coboundary_transpose(inputs[0], inputs[1], inputs[2], topology, edge_dim, node_dim)
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions {m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| c * x);
        Ok(self.push(v, Op::Scale(a, c)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        if av.numel() == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| x * x);
        Ok(self.push(v, Op::Square(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(sigmoid);
        Ok(self.push(v, Op::Sigmoid(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(softplus);
        Ok(self.push(v, Op::Softplus(a)))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| act.apply(x));
        Ok(self.push(v, Op::Activation(a, act)))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (ra, ca) = av.dims2("concat")?;
        let (rb, cb) = bv.dims2("concat")?;
        let value = match axis {
            0 => {
                if ca != cb {
                    return Err(shape_err("concat", format!("column counts {ca} and {cb} differ")));
                }
                let mut data = av.data().to_vec();
                data.extend_from_slice(bv.data());
                Tensor::matrix(ra + rb, ca, data)?
            }
            1 => {
                if ra != rb {
                    return Err(shape_err("concat", format!("row counts {ra} and {rb} differ")));
                }
                let mut data = Vec::with_capacity(ra * (ca + cb));
                for r in 0..ra {
                    data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
                    data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
                }
                Tensor::matrix(ra, ca + cb, data)?
            }
            _ => return Err(shape_err("concat", format!("axis {axis} out of range for 2-D tensors"))),
        };
        Ok(self.push(value, Op::Concat { a, b, axis }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = &self.node(a)?.value;
        if shape.iter().product::<usize>() != av.numel() {
            return Err(shape_err("reshape", format!("cannot view {:?} as {shape:?}", av.shape())));
        }
        let value = av.clone().reshaped(shape);
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn gather_rows(&mut self, src: Var, index: Arc<[usize]>) -> Result<Var> {
        let sv = &self.node(src)?.value;
        let (r, c) = sv.dims2("gather-rows")?;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= r {
                return Err(shape_err("gather-rows", format!("row {i} out of range ({r} rows)")));
            }
            data.extend_from_slice(&sv.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(index.len(), c, data)?;
        Ok(self.push(value, Op::GatherRows { src, index }))
    }

    pub fn scatter_rows(&mut self, src: Var, index: Arc<[usize]>, n_rows: usize) -> Result<Var> {
        let sv = &self.node(src)?.value;
        let (r, c) = sv.dims2("scatter-rows")?;
        if r != index.len() {
            return Err(shape_err("scatter-rows", format!("{r} rows but {} indices", index.len())));
        }
        let mut data = vec![0.0; n_rows * c];
        for (k, &i) in index.iter().enumerate() {
            if i >= n_rows {
                return Err(shape_err("scatter-rows", format!("target row {i} out of range ({n_rows} rows)")));
            }
            for j in 0..c {
                data[i * c + j] += sv.data()[k * c + j];
            }
        }
        let value = Tensor::matrix(n_rows, c, data)?;
        Ok(self.push(value, Op::ScatterRows { src, index }))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        let (r, c) = av.dims2("row-sum")?;
        let data = (0..r).map(|i| av.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let value = Tensor::new(vec![r], data)?;
        Ok(self.push(value, Op::RowSum(a)))
    }

    fn check_maps(&self, op: &'static str, tail: Var, head: Var, topo: &EdgeTopology, de: usize, dn: usize) -> Result<()> {
        for m in [tail, head] {
            let mv = &self.node(m)?.value;
            let (e, w) = mv.dims2(op)?;
            if e != topo.n_edges() || w != de * dn {
                return Err(shape_err(
                    op,
                    format!("maps must be [{}, {}], got {:?}", topo.n_edges(), de * dn, mv.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn degree_blocks(&mut self, tail: Var, head: Var, topology: Arc<EdgeTopology>, de: usize, dn: usize) -> Result<Var> {
        self.check_maps("degree-blocks", tail, head, &topology, de, dn)?;
        let data = kernels::degree_blocks(&topology, self.value(tail).data(), self.value(head).data(), de, dn);
        let value = Tensor::new(vec![topology.n_nodes(), dn, dn], data)?;
        Ok(self.push(value, Op::DegreeBlocks { tail, head, topology, de, dn }))
    }

    pub fn block_inv_sqrt(&mut self, src: Var, eps: f64) -> Result<Var> {
        let sv = &self.node(src)?.value;
        let (n, d) = match sv.shape() {
            &[n, d, d2] if d == d2 => (n, d),
            other => return Err(shape_err("block-inv-sqrt", format!("expected [n, d, d], got {other:?}"))),
        };
        let factors: Vec<InvSqrt> = sv
            .data()
            .par_chunks(d * d.max(1))
            .take(n)
            .enumerate()
            .map(|(v, block)| {
                linalg::inv_sqrt_sym(&DMatrix::from_row_slice(d, d, block), eps)
                    .map_err(|min_eigenvalue| AutodiffError::Normalization { node: v, min_eigenvalue })
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(n * d * d);
        for f in &factors {
            // symmetric, so column-major storage doubles as row-major
            data.extend_from_slice(f.value.as_slice());
        }
        let value = Tensor::new(vec![n, d, d], data)?;
        Ok(self.push(value, Op::BlockInvSqrt { src, factors }))
    }

    fn block_layout(&self, op: &'static str, blocks: Var, x: Var) -> Result<(usize, usize, usize)> {
        let bv = &self.node(blocks)?.value;
        let (rows, f) = self.node(x)?.value.dims2(op)?;
        let (n, d) = match bv.shape() {
            &[n, d, d2] if d == d2 => (n, d),
            &[d, d2] if d == d2 => (usize::MAX, d),
            other => return Err(shape_err(op, format!("expected square blocks, got {other:?}"))),
        };
        if d == 0 || rows % d != 0 || (n != usize::MAX && rows != n * d) {
            return Err(shape_err(op, format!("x has {rows} rows, incompatible with blocks {:?}", bv.shape())));
        }
        Ok((rows / d, d, f))
    }

    pub fn block_diag_apply(&mut self, blocks: Var, x: Var) -> Result<Var> {
        if self.node(blocks)?.value.shape().len() != 3 {
            return Err(shape_err("block-diag-apply", "blocks must be [n, d, d]".into()));
        }
        let (n, d, f) = self.block_layout("block-diag-apply", blocks, x)?;
        let data = kernels::block_diag_apply(self.value(blocks).data(), self.value(x).data(), n, d, f);
        let value = Tensor::matrix(n * d, f, data)?;
        Ok(self.push(value, Op::BlockDiagApply { blocks, x }))
    }

    pub fn kron_apply(&mut self, w: Var, x: Var) -> Result<Var> {
        if self.node(w)?.value.shape().len() != 2 {
            return Err(shape_err("kron-apply", "w must be [d, d]".into()));
        }
        let (n, d, f) = self.block_layout("kron-apply", w, x)?;
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        let mut data = vec![0.0; n * d * f];
        for v in 0..n {
            kernels::mm_acc(&mut data[v * d * f..(v + 1) * d * f], wv, &xv[v * d * f..(v + 1) * d * f], d, d, f, 1.0);
        }
        let value = Tensor::matrix(n * d, f, data)?;
        Ok(self.push(value, Op::KronApply { w, x }))
    }

    pub fn coboundary(&mut self, tail: Var, head: Var, x: Var, topology: Arc<EdgeTopology>, de: usize, dn: usize) -> Result<Var> {
        self.check_maps("coboundary", tail, head, &topology, de, dn)?;
        let (rows, f) = self.node(x)?.value.dims2("coboundary")?;
        if rows != topology.n_nodes() * dn {
            return Err(shape_err("coboundary", format!("x has {rows} rows, expected {}", topology.n_nodes() * dn)));
        }
        let data = kernels::coboundary(&topology, self.value(tail).data(), self.value(head).data(), self.value(x).data(), de, dn, f);
        let value = Tensor::matrix(topology.n_edges() * de, f, data)?;
        Ok(self.push(value, Op::Coboundary { tail, head, x, topology, de, dn }))
    }

    pub fn coboundary_transpose(&mut self, tail: Var, head: Var, r: Var, topology: Arc<EdgeTopology>, de: usize, dn: usize) -> Result<Var> {
        self.check_maps("coboundary-transpose", tail, head, &topology, de, dn)?;
        let (rows, f) = self.node(r)?.value.dims2("coboundary-transpose")?;
        if rows != topology.n_edges() * de {
            return Err(shape_err(
                "coboundary-transpose",
                format!("r has {rows} rows, expected {}", topology.n_edges() * de),
            ));
        }
        let data =
            kernels::coboundary_transpose(&topology, self.value(tail).data(), self.value(head).data(), self.value(r).data(), de, dn, f);
        let value = Tensor::matrix(topology.n_nodes() * dn, f, data)?;
        Ok(self.push(value, Op::CoboundaryTranspose { tail, head, r, topology, de, dn }))
    }

    /// Reverse sweep from a scalar `loss`. Visits nodes in exact reverse
    /// recording order; fan-out gradients accumulate by addition.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss)?;
        if !ln.value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(ln.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(ln.value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if node.requires_grad {
                grads[idx] = Some(g);
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            } else if !node.requires_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).expect("gradient shape");
        let unary = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let x = val(a).data();
            let y = node.value.data();
            like(a, x.iter().zip(y).zip(g.data()).map(|((&x, &y), &g)| f(x, y, g)).collect())
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul").unwrap();
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut ga, 0.0);
                    acc(*a, like(*a, ga), grads);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut gb, 0.0);
                    acc(*b, like(*b, gb), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    acc(*a, like(*a, d), grads);
                }
                if wants(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    acc(*b, like(*b, d), grads);
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x), grads),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item()), grads),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, Tensor::full(val(*a).shape(), g.item() / n), grads)
            }
            Op::Square(a) => acc(*a, unary(*a, &|x, _, g| 2.0 * x * g), grads),
            Op::Sqrt(a) => acc(*a, unary(*a, &|_, y, g| 0.5 * g / y), grads),
            Op::Log(a) => acc(*a, unary(*a, &|x, _, g| g / x), grads),
            Op::Sigmoid(a) => acc(*a, unary(*a, &|_, y, g| g * y * (1.0 - y)), grads),
            Op::Softplus(a) => acc(*a, unary(*a, &|x, _, g| g * sigmoid(x)), grads),
            Op::Activation(a, act) => acc(*a, unary(*a, &|x, y, g| g * act.derivative(x, y)), grads),
            Op::Concat { a, b, axis } => {
                let (ra, ca) = val(*a).dims2("concat").unwrap();
                let (rb, cb) = val(*b).dims2("concat").unwrap();
                let (ga, gb) = if *axis == 0 {
                    let (x, y) = g.data().split_at(ra * ca);
                    (x.to_vec(), y.to_vec())
                } else {
                    let w = ca + cb;
                    let mut x = Vec::with_capacity(ra * ca);
                    let mut y = Vec::with_capacity(rb * cb);
                    for r in 0..ra {
                        x.extend_from_slice(&g.data()[r * w..r * w + ca]);
                        y.extend_from_slice(&g.data()[r * w + ca..(r + 1) * w]);
                    }
                    (x, y)
                };
                acc(*a, like(*a, ga), grads);
                acc(*b, like(*b, gb), grads);
            }
            Op::Reshape(a) => acc(*a, like(*a, g.data().to_vec()), grads),
            Op::GatherRows { src, index } => {
                let (r, c) = val(*src).dims2("gather-rows").unwrap();
                let mut d = vec![0.0; r * c];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data()[k * c + j];
                    }
                }
                acc(*src, like(*src, d), grads);
            }
            Op::ScatterRows { src, index } => {
                let c = val(*src).shape()[1];
                let mut d = Vec::with_capacity(index.len() * c);
                for &i in index.iter() {
                    d.extend_from_slice(&g.data()[i * c..(i + 1) * c]);
                }
                acc(*src, like(*src, d), grads);
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).dims2("row-sum").unwrap();
                let d = (0..r * c).map(|i| g.data()[i / c]).collect();
                acc(*a, like(*a, d), grads);
            }
            Op::DegreeBlocks { tail, head, topology, de, dn } => {
                let (gt, gh) = kernels::degree_blocks_backward(topology, val(*tail).data(), val(*head).data(), g.data(), *de, *dn);
                acc(*tail, like(*tail, gt), grads);
                acc(*head, like(*head, gh), grads);
            }
            Op::BlockInvSqrt { src, factors } => {
                let d = val(*src).shape()[1];
                let mut out = Vec::with_capacity(factors.len() * d * d);
                let parts: Vec<Vec<f64>> = factors
                    .par_iter()
                    .enumerate()
                    .map(|(v, fac)| {
                        let gb = DMatrix::from_row_slice(d, d, &g.data()[v * d * d..(v + 1) * d * d]);
                        let q = &fac.eigenvectors;
                        let inner = q.transpose() * gb * q;
                        let lam = &fac.eigenvalues;
                        let k = DMatrix::from_fn(d, d, |i, j| linalg::inv_sqrt_divided_difference(lam[i], lam[j]));
                        let m = q * inner.component_mul(&k) * q.transpose();
                        let sym = (&m + m.transpose()) * 0.5;
                        sym.as_slice().to_vec()
                    })
                    .collect();
                for p in parts {
                    out.extend(p);
                }
                acc(*src, like(*src, out), grads);
            }
            Op::BlockDiagApply { blocks, x } => {
                let (n, d, f) = self.block_layout("block-diag-apply", *blocks, *x).unwrap();
                if wants(*x) {
                    let gx = kernels::block_diag_apply_transposed(val(*blocks).data(), g.data(), n, d, f);
                    acc(*x, like(*x, gx), grads);
                }
                if wants(*blocks) {
                    let gb = kernels::block_outer(g.data(), val(*x).data(), n, d, f);
                    acc(*blocks, like(*blocks, gb), grads);
                }
            }
            Op::KronApply { w, x } => {
                let (n, d, f) = self.block_layout("kron-apply", *w, *x).unwrap();
                let wv = val(*w).data();
                let xv = val(*x).data();
                if wants(*x) {
                    let mut gx = vec![0.0; n * d * f];
                    for v in 0..n {
                        kernels::mm_tn_acc(&mut gx[v * d * f..(v + 1) * d * f], wv, &g.data()[v * d * f..(v + 1) * d * f], d, d, f, 1.0);
                    }
                    acc(*x, like(*x, gx), grads);
                }
                if wants(*w) {
                    let mut gw = vec![0.0; d * d];
                    for v in 0..n {
                        kernels::mm_nt_acc(&mut gw, &g.data()[v * d * f..(v + 1) * d * f], &xv[v * d * f..(v + 1) * d * f], d, f, d, 1.0);
                    }
                    acc(*w, like(*w, gw), grads);
                }
            }
            Op::Coboundary { tail, head, x, topology, de, dn } => {
                let f = val(*x).shape()[1];
                if wants(*x) {
                    let gx = kernels::coboundary_transpose(topology, val(*tail).data(), val(*head).data(), g.data(), *de, *dn, f);
                    acc(*x, like(*x, gx), grads);
                }
                if wants(*tail) || wants(*head) {
                    let (gt, gh) = kernels::edge_outer(topology, g.data(), val(*x).data(), *de, *dn, f);
                    acc(*tail, like(*tail, gt), grads);
                    acc(*head, like(*head, gh), grads);
                }
            }
            Op::CoboundaryTranspose { tail, head, r, topology, de, dn } => {
                let f = val(*r).shape()[1];
                if wants(*r) {
                    let gr = kernels::coboundary(topology, val(*tail).data(), val(*head).data(), g.data(), *de, *dn, f);
                    acc(*r, like(*r, gr), grads);
                }
                if wants(*tail) || wants(*head) {
                    let (gt, gh) = kernels::edge_outer(topology, val(*r).data(), g.data(), *de, *dn, f);
                    acc(*tail, like(*tail, gt), grads);
                    acc(*head, like(*head, gh), grads);
                }
            }
        }
    }
}

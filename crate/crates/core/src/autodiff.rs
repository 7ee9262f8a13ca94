//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only tape of nodes; every operation records its
//! inputs and enough context to replay the chain rule backwards. Tensors are
//! cheap handles (graph pointer + node id). The op set is exactly what the
//! forecasting pipeline needs: 2-D matrix products, axis-wise flip/cumsum/
//! narrow/concat for the patched solver, row softmax/layernorm for the
//! encoder, and a differentiable symmetric positive-definite solve for the
//! closed-form ridge decoder.
//!
//! Gradients accumulate into leaf nodes with `+=` semantics; call
//! [`Graph::zero_grad`] between backward passes that should not accumulate.
//! Evaluation is deterministic: identical inputs produce bit-identical
//! outputs, including under the parallel matmul path (each output element is
//! reduced in a fixed sequential order regardless of thread count).

use std::cell::RefCell;
use std::rc::Rc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;

/// Minimum `m·k·n` volume before a matrix product is parallelized.
const PAR_MM_VOLUME: usize = 250_000;

/// Minimum element count before an elementwise map or row-wise normalizer
/// is parallelized. Parallel and sequential paths are bit-identical (pure
/// per-element/per-row work, no cross-thread reduction).
const PAR_ELEM_LEN: usize = 1 << 15;

const LAYERNORM_EPS: f64 = 1e-12;

/// out[i] = f(x[i]), parallel above the size threshold.
fn map_into(out: &mut [f64], x: &[f64], f: impl Fn(f64) -> f64 + Sync) {
    if x.len() >= PAR_ELEM_LEN {
        out.par_chunks_mut(4096)
            .zip(x.par_chunks(4096))
            .for_each(|(o, xs)| {
                for (oi, &xi) in o.iter_mut().zip(xs) {
                    *oi = f(xi);
                }
            });
    } else {
        for (oi, &xi) in out.iter_mut().zip(x) {
            *oi = f(xi);
        }
    }
}

/// acc[i] += f(g[i], x[i]), parallel above the size threshold.
fn accumulate2(acc: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) {
    if acc.len() >= PAR_ELEM_LEN {
        acc.par_chunks_mut(4096)
            .zip(g.par_chunks(4096))
            .zip(x.par_chunks(4096))
            .for_each(|((a, gs), xs)| {
                for i in 0..a.len() {
                    a[i] += f(gs[i], xs[i]);
                }
            });
    } else {
        for i in 0..acc.len() {
            acc[i] += f(g[i], x[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Matmul kernels. All three accumulate (`c +=`), and all three sum each
// output element in a fixed index order so the parallel and sequential
// paths are bit-identical.
// ---------------------------------------------------------------------------

/// c[m,n] += a[m,k] · b[k,n]
fn mm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let row = |c_row: &mut [f64], i: usize| {
        for l in 0..k {
            let av = a[i * k + l];
            if av != 0.0 {
                let b_row = &b[l * n..(l + 1) * n];
                for (cj, bj) in c_row.iter_mut().zip(b_row) {
                    *cj += av * bj;
                }
            }
        }
    };
    if m * k * n >= PAR_MM_VOLUME && m > 1 {
        c.par_chunks_mut(n)
            .with_min_len(8)
            .enumerate()
            .for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

/// c[m,k] += a[m,n] · b[k,n]ᵀ  (both operands row-major, b indexed by rows)
fn mm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    let row = |c_row: &mut [f64], i: usize| {
        let a_row = &a[i * n..(i + 1) * n];
        for (l, cl) in c_row.iter_mut().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            let mut s = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *cl += s;
        }
    };
    if m * k * n >= PAR_MM_VOLUME && m > 1 {
        c.par_chunks_mut(k)
            .with_min_len(8)
            .enumerate()
            .for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(k).enumerate() {
            row(c_row, i);
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
fn mm_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let row = |c_row: &mut [f64], l: usize| {
        for i in 0..m {
            let av = a[i * k + l];
            if av != 0.0 {
                let b_row = &b[i * n..(i + 1) * n];
                for (cj, bj) in c_row.iter_mut().zip(b_row) {
                    *cj += av * bj;
                }
            }
        }
    };
    if m * k * n >= PAR_MM_VOLUME && k > 1 {
        c.par_chunks_mut(n)
            .with_min_len(8)
            .enumerate()
            .for_each(|(l, c_row)| row(c_row, l));
    } else {
        for (l, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, l);
        }
    }
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn smooth_l1_scalar(e: f64, beta: f64) -> f64 {
    if e.abs() < beta {
        0.5 * e * e / beta
    } else {
        e.abs() - 0.5 * beta
    }
}

fn smooth_l1_grad_scalar(e: f64, beta: f64) -> f64 {
    if e.abs() < beta {
        e / beta
    } else {
        e.signum()
    }
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

// ---------------------------------------------------------------------------
// Graph and nodes
// ---------------------------------------------------------------------------

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Cat { parts: Vec<usize>, axis: usize },
    Flip { x: usize, axis: usize },
    Cumsum { x: usize, axis: usize },
    TileRows { x: usize, reps: usize },
    Neg { x: usize },
    Sin { x: usize },
    Cos { x: usize },
    Gelu { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    MulRow { x: usize, row: usize },
    Scale { x: usize, c: f64 },
    SoftmaxRows { x: usize },
    LayerNormRows { x: usize, inv_std: Vec<f64> },
    SumAll { x: usize },
    MeanAll { x: usize },
    SmoothL1 { a: usize, b: usize, beta: f64 },
    SolveSpd { a: usize, b: usize, chol: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// An append-only computation tape. Cloning is cheap (shared reference).
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// A handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
    shape: Vec<usize>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            data,
            grad: None,
            requires_grad,
            op,
        });
        Tensor {
            graph: self.clone(),
            id,
            shape,
        }
    }

    /// A trainable or constant input node.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::contract(format!(
                "leaf: shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// A non-trainable input node.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize], requires_grad: bool) -> Tensor {
        let n: usize = shape.iter().product();
        self.push(shape.to_vec(), vec![0.0; n], requires_grad, Op::Leaf)
    }

    /// Clears the accumulated gradient buffers of every node.
    pub fn zero_grad(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Copies the node's value out of the graph.
    pub fn value(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].data.clone()
    }

    /// Reads the node's value without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.graph.inner.borrow().nodes[self.id].data)
    }

    /// The scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.graph.inner.borrow().nodes[self.id].data[0]
    }

    /// The accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    fn unary(&self, op: &'static str) -> (Graph, usize) {
        let _ = op;
        (self.graph.clone(), self.id)
    }

    fn check_same_graph(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if !self.graph.same_graph(&other.graph) {
            return Err(Error::contract(format!("{op}: tensors from different graphs")));
        }
        Ok(())
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange {
                op,
                axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    // -- structural ops -----------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_graph(rhs, "matmul")?;
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; m * n];
        {
            let inner = self.graph.inner.borrow();
            mm_nn(
                &mut out,
                &inner.nodes[self.id].data,
                &inner.nodes[rhs.id].data,
                m,
                k,
                n,
            );
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.graph.push(
            vec![m, n],
            out,
            rg,
            Op::Matmul {
                a: self.id,
                b: rhs.id,
            },
        ))
    }

    /// 2-D transpose (materialized).
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract(format!(
                "transpose: expected rank 2, got shape {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        self.with_data(|x| {
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x[i * n + j];
                }
            }
        });
        let rg = self.requires_grad();
        Ok(self
            .graph
            .push(vec![n, m], out, rg, Op::Transpose { x: self.id }))
    }

    /// Reinterprets the (row-major, contiguous) data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let rg = self.requires_grad();
        Ok(self
            .graph
            .push(shape.to_vec(), self.value(), rg, Op::Reshape { x: self.id }))
    }

    /// Slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(axis, "narrow")?;
        let (outer, alen, inner_w) = axis_dims(&self.shape, axis);
        if start + len > alen {
            return Err(Error::contract(format!(
                "narrow: range {start}..{} exceeds axis length {alen}",
                start + len
            )));
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner_w];
        self.with_data(|x| {
            for o in 0..outer {
                let src = (o * alen + start) * inner_w;
                let dst = o * len * inner_w;
                out[dst..dst + len * inner_w].copy_from_slice(&x[src..src + len * inner_w]);
            }
        });
        let rg = self.requires_grad();
        Ok(self.graph.push(
            shape,
            out,
            rg,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Concatenation along `axis`.
    pub fn cat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("cat: empty input list"))?;
        first.check_axis(axis, "cat")?;
        for p in &parts[1..] {
            first.check_same_graph(p, "cat")?;
            if p.rank() != first.rank()
                || (0..first.rank()).any(|d| d != axis && p.shape[d] != first.shape[d])
            {
                return Err(Error::ShapeMismatch {
                    op: "cat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let (outer, _, inner_w) = axis_dims(&first.shape, axis);
        let total_len: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut shape = first.shape.clone();
        shape[axis] = total_len;
        let mut out = vec![0.0; outer * total_len * inner_w];
        {
            let inner = first.graph.inner.borrow();
            let mut offset = 0;
            for p in parts {
                let plen = p.shape[axis];
                let x = &inner.nodes[p.id].data;
                for o in 0..outer {
                    let src = o * plen * inner_w;
                    let dst = (o * total_len + offset) * inner_w;
                    out[dst..dst + plen * inner_w].copy_from_slice(&x[src..src + plen * inner_w]);
                }
                offset += plen;
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.graph.push(
            shape,
            out,
            rg,
            Op::Cat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Reverses the order of elements along `axis`. Self-inverse.
    pub fn flip(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "flip")?;
        let (outer, len, inner_w) = axis_dims(&self.shape, axis);
        let mut out = vec![0.0; self.len()];
        self.with_data(|x| {
            for o in 0..outer {
                for j in 0..len {
                    let src = (o * len + (len - 1 - j)) * inner_w;
                    let dst = (o * len + j) * inner_w;
                    out[dst..dst + inner_w].copy_from_slice(&x[src..src + inner_w]);
                }
            }
        });
        let rg = self.requires_grad();
        Ok(self
            .graph
            .push(self.shape.clone(), out, rg, Op::Flip { x: self.id, axis }))
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "cumsum")?;
        let (outer, len, inner_w) = axis_dims(&self.shape, axis);
        let mut out = vec![0.0; self.len()];
        self.with_data(|x| {
            for o in 0..outer {
                let base = o * len * inner_w;
                out[base..base + inner_w].copy_from_slice(&x[base..base + inner_w]);
                for j in 1..len {
                    for i in 0..inner_w {
                        out[base + j * inner_w + i] =
                            out[base + (j - 1) * inner_w + i] + x[base + j * inner_w + i];
                    }
                }
            }
        });
        let rg = self.requires_grad();
        Ok(self
            .graph
            .push(self.shape.clone(), out, rg, Op::Cumsum { x: self.id, axis }))
    }

    /// Repeats a 2-D tensor `reps` times along the row axis.
    pub fn tile_rows(&self, reps: usize) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract(format!(
                "tile_rows: expected rank 2, got shape {:?}",
                self.shape
            )));
        }
        if reps == 0 {
            return Err(Error::contract("tile_rows: reps must be >= 1"));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(m * n * reps);
        self.with_data(|x| {
            for _ in 0..reps {
                out.extend_from_slice(x);
            }
        });
        let rg = self.requires_grad();
        Ok(self.graph.push(
            vec![m * reps, n],
            out,
            rg,
            Op::TileRows {
                x: self.id,
                reps,
            },
        ))
    }

    // -- elementwise ops ----------------------------------------------------

    fn map_unary(&self, f: impl Fn(f64) -> f64 + Sync, op: Op) -> Tensor {
        let mut out = vec![0.0; self.len()];
        self.with_data(|x| map_into(&mut out, x, f));
        let rg = self.requires_grad();
        self.graph.push(self.shape.clone(), out, rg, op)
    }

    pub fn neg(&self) -> Tensor {
        let (_, id) = self.unary("neg");
        self.map_unary(|v| -v, Op::Neg { x: id })
    }

    pub fn sin(&self) -> Tensor {
        let (_, id) = self.unary("sin");
        self.map_unary(f64::sin, Op::Sin { x: id })
    }

    pub fn cos(&self) -> Tensor {
        let (_, id) = self.unary("cos");
        self.map_unary(f64::cos, Op::Cos { x: id })
    }

    /// GeLU under the tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let (_, id) = self.unary("gelu");
        self.map_unary(gelu_scalar, Op::Gelu { x: id })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let (_, id) = self.unary("scale");
        self.map_unary(|v| c * v, Op::Scale { x: id, c })
    }

    fn binary_same_shape(
        &self,
        rhs: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.check_same_graph(rhs, op_name)?;
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let out = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[rhs.id].data;
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>()
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self
            .graph
            .push(self.shape.clone(), out, rg, op(self.id, rhs.id)))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(rhs, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(rhs, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(rhs, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn row_broadcast(
        &self,
        row: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.check_same_graph(row, op_name)?;
        if self.rank() != 2 || row.rank() != 1 || row.shape[0] != self.shape[1] {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let n = self.shape[1];
        let out = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id].data;
            let r = &inner.nodes[row.id].data;
            x.iter()
                .enumerate()
                .map(|(i, &v)| f(v, r[i % n]))
                .collect::<Vec<f64>>()
        };
        let rg = self.requires_grad() || row.requires_grad();
        Ok(self
            .graph
            .push(self.shape.clone(), out, rg, op(self.id, row.id)))
    }

    /// Adds a length-n vector to every row of an m×n tensor.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.row_broadcast(row, "add_row", |x, r| x + r, |x, row| Op::AddRow { x, row })
    }

    /// Multiplies every row of an m×n tensor elementwise by a length-n vector.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        self.row_broadcast(row, "mul_row", |x, r| x * r, |x, row| Op::MulRow { x, row })
    }

    // -- row-wise normalizers -----------------------------------------------

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract(format!(
                "softmax_rows: expected rank 2, got shape {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        let softmax_row = |o: &mut [f64], row: &[f64]| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                o[j] = e;
                denom += e;
            }
            for v in o.iter_mut() {
                *v /= denom;
            }
        };
        self.with_data(|x| {
            if m * n >= PAR_ELEM_LEN {
                out.par_chunks_mut(n)
                    .zip(x.par_chunks(n))
                    .for_each(|(o, row)| softmax_row(o, row));
            } else {
                for (o, row) in out.chunks_mut(n).zip(x.chunks(n)) {
                    softmax_row(o, row);
                }
            }
        });
        let rg = self.requires_grad();
        Ok(self
            .graph
            .push(self.shape.clone(), out, rg, Op::SoftmaxRows { x: self.id }))
    }

    /// Per-row standardization (zero mean, unit variance) over the last axis
    /// of a 2-D tensor. No learned affine; compose with `mul_row`/`add_row`.
    pub fn layernorm_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract(format!(
                "layernorm_rows: expected rank 2, got shape {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let norm_row = |o: &mut [f64], is_slot: &mut f64, row: &[f64]| {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            *is_slot = is;
            for (oj, &rj) in o.iter_mut().zip(row) {
                *oj = (rj - mean) * is;
            }
        };
        self.with_data(|x| {
            if m * n >= PAR_ELEM_LEN {
                out.par_chunks_mut(n)
                    .zip(inv_std.par_iter_mut())
                    .zip(x.par_chunks(n))
                    .for_each(|((o, is), row)| norm_row(o, is, row));
            } else {
                for ((o, is), row) in out.chunks_mut(n).zip(inv_std.iter_mut()).zip(x.chunks(n)) {
                    norm_row(o, is, row);
                }
            }
        });
        let rg = self.requires_grad();
        Ok(self.graph.push(
            self.shape.clone(),
            out,
            rg,
            Op::LayerNormRows {
                x: self.id,
                inv_std,
            },
        ))
    }

    // -- reductions -----------------------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let s = self.with_data(|x| x.iter().sum::<f64>());
        let rg = self.requires_grad();
        self.graph.push(vec![1], vec![s], rg, Op::SumAll { x: self.id })
    }

    pub fn mean_all(&self) -> Tensor {
        let s = self.with_data(|x| x.iter().sum::<f64>()) / self.len() as f64;
        let rg = self.requires_grad();
        self.graph
            .push(vec![1], vec![s], rg, Op::MeanAll { x: self.id })
    }

    /// Elementwise smooth-L1 core: 0.5e²/β for |e|<β else |e|−0.5β, e = a−b.
    /// Gradients flow into both operands.
    pub fn smooth_l1_core(&self, rhs: &Tensor, beta: f64) -> Result<Tensor> {
        if beta <= 0.0 {
            return Err(Error::contract("smooth_l1_core: beta must be positive"));
        }
        self.check_same_graph(rhs, "smooth_l1_core")?;
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op: "smooth_l1_core",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let out = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[rhs.id].data;
            a.iter()
                .zip(b)
                .map(|(&x, &y)| smooth_l1_scalar(x - y, beta))
                .collect::<Vec<f64>>()
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.graph.push(
            self.shape.clone(),
            out,
            rg,
            Op::SmoothL1 {
                a: self.id,
                b: rhs.id,
                beta,
            },
        ))
    }

    // -- linear solve ---------------------------------------------------------

    /// Solves A·X = B for symmetric positive-definite A (n×n), B n×m.
    ///
    /// Differentiable in both A and B via the adjoint system: with upstream
    /// gradient G, S = A⁻¹G gives ∂B = S and ∂A = −S·Xᵀ.
    pub fn solve_spd(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_graph(rhs, "solve_spd")?;
        if self.rank() != 2
            || self.shape[0] != self.shape[1]
            || rhs.rank() != 2
            || rhs.shape[0] != self.shape[0]
        {
            return Err(Error::ShapeMismatch {
                op: "solve_spd",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let n = self.shape[0];
        let m = rhs.shape[1];
        let (chol, x) = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].data;
            let b = &inner.nodes[rhs.id].data;
            if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("solve_spd: non-finite input"));
            }
            let chol = linalg::cholesky(a, n)?;
            let x = linalg::cholesky_solve(&chol, n, b, m);
            (chol, x)
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.graph.push(
            vec![n, m],
            x,
            rg,
            Op::SolveSpd {
                a: self.id,
                b: rhs.id,
                chol,
            },
        ))
    }

    // -- backward ---------------------------------------------------------------

    /// Runs reverse-mode differentiation from this scalar node, accumulating
    /// gradients into every `requires_grad` leaf reachable from it.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape
            )));
        }
        let mut leaf_updates: Vec<(usize, Vec<f64>)> = Vec::new();
        {
            let inner = self.graph.inner.borrow();
            let nodes = &inner.nodes;
            if !nodes[self.id].requires_grad {
                return Ok(());
            }
            let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
            adj[self.id] = Some(vec![1.0]);

            // Adds `g` (or a transformation of it) into a parent's adjoint.
            fn acc(adj: &mut [Option<Vec<f64>>], nodes: &[Node], pid: usize, f: impl FnOnce(&mut [f64])) {
                if !nodes[pid].requires_grad {
                    return;
                }
                let buf = adj[pid].get_or_insert_with(|| vec![0.0; nodes[pid].data.len()]);
                f(buf);
            }

            for id in (0..=self.id).rev() {
                let Some(g) = adj[id].take() else { continue };
                let node = &nodes[id];
                match &node.op {
                    Op::Leaf => {
                        leaf_updates.push((id, g));
                    }
                    Op::Matmul { a, b } => {
                        let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                        let n = nodes[*b].shape[1];
                        acc(&mut adj, nodes, *a, |ga| {
                            mm_nt(ga, &g, &nodes[*b].data, m, n, k);
                        });
                        acc(&mut adj, nodes, *b, |gb| {
                            mm_tn(gb, &nodes[*a].data, &g, m, k, n);
                        });
                    }
                    Op::Transpose { x } => {
                        let (n, m) = (node.shape[0], node.shape[1]);
                        acc(&mut adj, nodes, *x, |gx| {
                            for i in 0..n {
                                for j in 0..m {
                                    gx[j * n + i] += g[i * m + j];
                                }
                            }
                        });
                    }
                    Op::Reshape { x } => {
                        acc(&mut adj, nodes, *x, |gx| {
                            for (gi, &gv) in gx.iter_mut().zip(&g) {
                                *gi += gv;
                            }
                        });
                    }
                    Op::Narrow { x, axis, start } => {
                        let (outer, alen, inner_w) = axis_dims(&nodes[*x].shape, *axis);
                        let len = node.shape[*axis];
                        acc(&mut adj, nodes, *x, |gx| {
                            for o in 0..outer {
                                for j in 0..len {
                                    let dst = (o * alen + start + j) * inner_w;
                                    let src = (o * len + j) * inner_w;
                                    for i in 0..inner_w {
                                        gx[dst + i] += g[src + i];
                                    }
                                }
                            }
                        });
                    }
                    Op::Cat { parts, axis } => {
                        let (outer, total_len, inner_w) = axis_dims(&node.shape, *axis);
                        let mut offset = 0;
                        for &pid in parts {
                            let plen = nodes[pid].shape[*axis];
                            acc(&mut adj, nodes, pid, |gp| {
                                for o in 0..outer {
                                    let src = (o * total_len + offset) * inner_w;
                                    let dst = o * plen * inner_w;
                                    for i in 0..plen * inner_w {
                                        gp[dst + i] += g[src + i];
                                    }
                                }
                            });
                            offset += plen;
                        }
                    }
                    Op::Flip { x, axis } => {
                        let (outer, len, inner_w) = axis_dims(&node.shape, *axis);
                        acc(&mut adj, nodes, *x, |gx| {
                            for o in 0..outer {
                                for j in 0..len {
                                    let src = (o * len + j) * inner_w;
                                    let dst = (o * len + (len - 1 - j)) * inner_w;
                                    for i in 0..inner_w {
                                        gx[dst + i] += g[src + i];
                                    }
                                }
                            }
                        });
                    }
                    Op::Cumsum { x, axis } => {
                        // d/dx[j] = sum_{j' >= j} g[j']: a reverse cumsum.
                        let (outer, len, inner_w) = axis_dims(&node.shape, *axis);
                        acc(&mut adj, nodes, *x, |gx| {
                            for o in 0..outer {
                                let base = o * len * inner_w;
                                let mut running = vec![0.0; inner_w];
                                for j in (0..len).rev() {
                                    for i in 0..inner_w {
                                        running[i] += g[base + j * inner_w + i];
                                        gx[base + j * inner_w + i] += running[i];
                                    }
                                }
                            }
                        });
                    }
                    Op::TileRows { x, reps } => {
                        let block = nodes[*x].data.len();
                        acc(&mut adj, nodes, *x, |gx| {
                            for r in 0..*reps {
                                for i in 0..block {
                                    gx[i] += g[r * block + i];
                                }
                            }
                        });
                    }
                    Op::Neg { x } => {
                        acc(&mut adj, nodes, *x, |gx| {
                            for (gi, &gv) in gx.iter_mut().zip(&g) {
                                *gi -= gv;
                            }
                        });
                    }
                    Op::Sin { x } => {
                        acc(&mut adj, nodes, *x, |gx| {
                            accumulate2(gx, &g, &nodes[*x].data, |gv, xv| gv * xv.cos());
                        });
                    }
                    Op::Cos { x } => {
                        acc(&mut adj, nodes, *x, |gx| {
                            accumulate2(gx, &g, &nodes[*x].data, |gv, xv| -gv * xv.sin());
                        });
                    }
                    Op::Gelu { x } => {
                        acc(&mut adj, nodes, *x, |gx| {
                            accumulate2(gx, &g, &nodes[*x].data, |gv, xv| {
                                gv * gelu_grad_scalar(xv)
                            });
                        });
                    }
                    Op::Scale { x, c } => {
                        let c = *c;
                        acc(&mut adj, nodes, *x, |gx| {
                            for (gi, &gv) in gx.iter_mut().zip(&g) {
                                *gi += c * gv;
                            }
                        });
                    }
                    Op::Add { a, b } => {
                        acc(&mut adj, nodes, *a, |ga| {
                            for (gi, &gv) in ga.iter_mut().zip(&g) {
                                *gi += gv;
                            }
                        });
                        acc(&mut adj, nodes, *b, |gb| {
                            for (gi, &gv) in gb.iter_mut().zip(&g) {
                                *gi += gv;
                            }
                        });
                    }
                    Op::Sub { a, b } => {
                        acc(&mut adj, nodes, *a, |ga| {
                            for (gi, &gv) in ga.iter_mut().zip(&g) {
                                *gi += gv;
                            }
                        });
                        acc(&mut adj, nodes, *b, |gb| {
                            for (gi, &gv) in gb.iter_mut().zip(&g) {
                                *gi -= gv;
                            }
                        });
                    }
                    Op::Mul { a, b } => {
                        acc(&mut adj, nodes, *a, |ga| {
                            accumulate2(ga, &g, &nodes[*b].data, |gv, bv| gv * bv);
                        });
                        acc(&mut adj, nodes, *b, |gb| {
                            accumulate2(gb, &g, &nodes[*a].data, |gv, av| gv * av);
                        });
                    }
                    Op::AddRow { x, row } => {
                        let n = node.shape[1];
                        acc(&mut adj, nodes, *x, |gx| {
                            for (gi, &gv) in gx.iter_mut().zip(&g) {
                                *gi += gv;
                            }
                        });
                        acc(&mut adj, nodes, *row, |gr| {
                            for (i, &gv) in g.iter().enumerate() {
                                gr[i % n] += gv;
                            }
                        });
                    }
                    Op::MulRow { x, row } => {
                        let n = node.shape[1];
                        acc(&mut adj, nodes, *x, |gx| {
                            for (i, gi) in gx.iter_mut().enumerate() {
                                *gi += g[i] * nodes[*row].data[i % n];
                            }
                        });
                        acc(&mut adj, nodes, *row, |gr| {
                            for (i, &gv) in g.iter().enumerate() {
                                gr[i % n] += gv * nodes[*x].data[i];
                            }
                        });
                    }
                    Op::SoftmaxRows { x } => {
                        let (m, n) = (node.shape[0], node.shape[1]);
                        let y = &node.data;
                        let row_bwd = |gx: &mut [f64], gr: &[f64], yr: &[f64]| {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                gx[j] += yr[j] * (gr[j] - dot);
                            }
                        };
                        acc(&mut adj, nodes, *x, |gx| {
                            if m * n >= PAR_ELEM_LEN {
                                gx.par_chunks_mut(n)
                                    .zip(g.par_chunks(n))
                                    .zip(y.par_chunks(n))
                                    .for_each(|((gx, gr), yr)| row_bwd(gx, gr, yr));
                            } else {
                                for ((gx, gr), yr) in
                                    gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n))
                                {
                                    row_bwd(gx, gr, yr);
                                }
                            }
                        });
                    }
                    Op::LayerNormRows { x, inv_std } => {
                        let (m, n) = (node.shape[0], node.shape[1]);
                        let y = &node.data;
                        let row_bwd = |gx: &mut [f64], gr: &[f64], yr: &[f64], is: f64| {
                            let gmean: f64 = gr.iter().sum::<f64>() / n as f64;
                            let gy: f64 =
                                gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for j in 0..n {
                                gx[j] += is * (gr[j] - gmean - yr[j] * gy);
                            }
                        };
                        acc(&mut adj, nodes, *x, |gx| {
                            if m * n >= PAR_ELEM_LEN {
                                gx.par_chunks_mut(n)
                                    .zip(g.par_chunks(n))
                                    .zip(y.par_chunks(n))
                                    .zip(inv_std.par_iter())
                                    .for_each(|(((gx, gr), yr), &is)| row_bwd(gx, gr, yr, is));
                            } else {
                                for (i, (gx, gr)) in
                                    gx.chunks_mut(n).zip(g.chunks(n)).enumerate()
                                {
                                    row_bwd(gx, gr, &y[i * n..(i + 1) * n], inv_std[i]);
                                }
                            }
                        });
                    }
                    Op::SumAll { x } => {
                        let gv = g[0];
                        acc(&mut adj, nodes, *x, |gx| {
                            for gi in gx.iter_mut() {
                                *gi += gv;
                            }
                        });
                    }
                    Op::MeanAll { x } => {
                        let gv = g[0] / nodes[*x].data.len() as f64;
                        acc(&mut adj, nodes, *x, |gx| {
                            for gi in gx.iter_mut() {
                                *gi += gv;
                            }
                        });
                    }
                    Op::SmoothL1 { a, b, beta } => {
                        let beta = *beta;
                        acc(&mut adj, nodes, *a, |ga| {
                            for (i, gi) in ga.iter_mut().enumerate() {
                                let e = nodes[*a].data[i] - nodes[*b].data[i];
                                *gi += g[i] * smooth_l1_grad_scalar(e, beta);
                            }
                        });
                        acc(&mut adj, nodes, *b, |gb| {
                            for (i, gi) in gb.iter_mut().enumerate() {
                                let e = nodes[*a].data[i] - nodes[*b].data[i];
                                *gi -= g[i] * smooth_l1_grad_scalar(e, beta);
                            }
                        });
                    }
                    Op::SolveSpd { a, b, chol } => {
                        let n = node.shape[0];
                        let m = node.shape[1];
                        // S = A^{-1} G (A symmetric, reuse the factorization).
                        let s = linalg::cholesky_solve(chol, n, &g, m);
                        acc(&mut adj, nodes, *b, |gb| {
                            for (gi, &sv) in gb.iter_mut().zip(&s) {
                                *gi += sv;
                            }
                        });
                        acc(&mut adj, nodes, *a, |ga| {
                            // dA = -S · Xᵀ
                            let x = &node.data;
                            for i in 0..n {
                                for j in 0..n {
                                    let mut acc_v = 0.0;
                                    for c in 0..m {
                                        acc_v += s[i * m + c] * x[j * m + c];
                                    }
                                    ga[i * n + j] -= acc_v;
                                }
                            }
                        });
                    }
                }
            }
        }
        let mut inner = self.graph.inner.borrow_mut();
        for (id, g) in leaf_updates {
            let node = &mut inner.nodes[id];
            let buf = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            for (gi, gv) in buf.iter_mut().zip(g) {
                *gi += gv;
            }
        }
        Ok(())
    }
}

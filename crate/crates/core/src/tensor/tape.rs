//! Computation tape: records forward operations, replays them backward.
//!
//! A [`Tape`] owns an append-only list of nodes. Recording order is a
//! topological order of the dataflow graph, so the backward pass walks
//! the node list in reverse. Gradients are accumulated additively into
//! per-node buffers; buffers are only allocated for nodes that can
//! reach a `requires_grad` leaf, so frozen parameters never grow an
//! accumulator.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Result, Tensor, TensorError};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014326779; // 1/sqrt(2*pi)

/// Standard normal CDF via the exact erf formulation.
fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Row-major matmul: a[m×k] * b[k×n] -> out[m×n].
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    Scale { a: usize, c: f64 },
    /// Broadcast-multiply tensor `a` by scalar node `s`.
    MulScalar { a: usize, s: usize },
    /// Broadcast-add row vector `b[d]` to every row of `a[n×d]`.
    AddRow { a: usize, b: usize, rows: usize, cols: usize },
    Gelu { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    Sqrt { a: usize },
    /// Softmax along `axis` of a 1-D or 2-D tensor.
    Softmax { a: usize, axis: usize },
    LogSoftmaxRows { a: usize, rows: usize, cols: usize },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
        rows: usize,
        cols: usize,
    },
    GatherRows { a: usize, indices: Vec<usize>, cols: usize },
    ConcatRows { parts: Vec<(usize, usize)>, cols: usize },
    SliceRows { a: usize, start: usize, len: usize, cols: usize },
    ConcatCols { parts: Vec<(usize, usize)>, rows: usize },
    SliceCols { a: usize, start: usize, len: usize, rows: usize, src_cols: usize },
    MeanRows { a: usize, rows: usize, cols: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    /// Row-wise L2 normalization; saved per-row norms of the input.
    NormalizeRows { a: usize, rows: usize, cols: usize, norms: Vec<f64> },
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        rows: usize,
        cols: usize,
        /// Per-row (mean, inverse std) from the forward pass.
        stats: Vec<(f64, f64)>,
    },
    Reshape { a: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    /// True when this node can reach a requires_grad leaf.
    tracked: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) struct TapeInner {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl TapeInner {
    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> usize {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value out of {:?}",
            op
        );
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            op,
            tracked,
            grad: None,
        });
        id
    }

    fn grad_buf(&mut self, id: usize) -> &mut Vec<f64> {
        let node = &mut self.nodes[id];
        if node.grad.is_none() {
            node.grad = Some(vec![0.0; node.data.len()]);
        }
        node.grad.as_mut().unwrap()
    }

    /// Adds `delta` into the gradient accumulator of `id` if tracked.
    fn accumulate(&mut self, id: usize, delta: &[f64]) {
        if !self.nodes[id].tracked {
            return;
        }
        let buf = self.grad_buf(id);
        for (g, d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn take_out_grad(&self, id: usize) -> Option<Vec<f64>> {
        self.nodes[id].grad.clone()
    }
}

/// Reverse-mode tape over dense tensors. Single-threaded by design;
/// independent tapes may run on separate threads. Cloning is shallow:
/// clones share the same node arena.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                backward_done: false,
            })),
        }
    }

    /// Records a leaf from a tensor, honoring its `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor) -> Var {
        let id = self.inner.borrow_mut().push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        Var { tape: Rc::clone(&self.inner), id }
    }

    /// Records a non-differentiable constant leaf.
    pub fn constant(&self, t: &Tensor) -> Var {
        let id = self.inner.borrow_mut().push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            false,
        );
        Var { tape: Rc::clone(&self.inner), id }
    }

    pub fn scalar_leaf(&self, v: f64, requires_grad: bool) -> Var {
        self.leaf(&Tensor::scalar(v).with_requires_grad(requires_grad))
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears every gradient accumulator so backward may run again.
    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in &mut inner.nodes {
            node.grad = None;
        }
        inner.backward_done = false;
    }

    /// Propagates d(root)/d(node) into every tracked node.
    ///
    /// `root` must be a scalar. A second call without `zero_grads` in
    /// between is an error: accumulators are additive and silent reuse
    /// would double-count.
    pub fn backward(&self, root: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &root.tape) {
            return Err(TensorError::TapeMismatch);
        }
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let root_node = &inner.nodes[root.id];
        if root_node.data.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                got: root_node.shape.clone(),
            });
        }
        inner.backward_done = true;
        if !inner.nodes[root.id].tracked {
            return Ok(());
        }
        inner.grad_buf(root.id)[0] = 1.0;

        for id in (0..=root.id).rev() {
            if !inner.nodes[id].tracked {
                continue;
            }
            let Some(out_grad) = inner.take_out_grad(id) else {
                continue;
            };
            backprop_one(&mut inner, id, &out_grad);
        }
        Ok(())
    }

    /// Accumulated gradient of a variable, if any.
    pub fn grad(&self, v: &Var) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.id];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.shape.clone(), g.clone()).expect("grad shape consistent")
        })
    }
}

/// Handle to one node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Rc<RefCell<TapeInner>>,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Var {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.borrow().nodes[self.id].data.len()
    }

    /// Snapshot of the forward value.
    pub fn value(&self) -> Tensor {
        let inner = self.tape.borrow();
        let node = &inner.nodes[self.id];
        Tensor::new(node.shape.clone(), node.data.clone()).expect("node shape consistent")
    }

    /// Scalar forward value.
    pub fn item(&self) -> f64 {
        let inner = self.tape.borrow();
        let node = &inner.nodes[self.id];
        assert!(node.data.len() == 1, "item() on shape {:?}", node.shape);
        node.data[0]
    }

    fn same_tape(&self, other: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    /// Pushes a non-differentiable constant onto this variable's tape.
    pub fn constant_like(&self, t: &Tensor) -> Var {
        let id = self
            .tape
            .borrow_mut()
            .push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false);
        Var { tape: Rc::clone(&self.tape), id }
    }


    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Var {
        let id = self.tape.borrow_mut().push(shape, data, op, tracked);
        Var { tape: Rc::clone(&self.tape), id }
    }

    fn tracked(&self) -> bool {
        self.tape.borrow().nodes[self.id].tracked
    }

    // ───────────────────────── elementwise / arithmetic ─────────────────────

    fn binary_same_shape(
        &self,
        other: &Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        self.same_tape(other)?;
        let (shape, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            if a.shape != b.shape {
                return Err(TensorError::ShapeMismatch {
                    op: op_name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
            (a.shape.clone(), data)
        };
        let tracked = self.tracked() || other.tracked();
        Ok(self.push(shape, data, make(self.id, other.id), tracked))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary_same_shape(other, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary_same_shape(other, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary_same_shape(other, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary_same_shape(other, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(usize) -> Op,
    ) -> Var {
        let (shape, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            (a.shape.clone(), a.data.iter().map(|x| f(*x)).collect())
        };
        self.push(shape, data, make(self.id), self.tracked())
    }

    pub fn neg(&self) -> Var {
        self.unary(|x| -x, |a| Op::Neg { a })
    }

    /// Multiplies every element by a compile-time constant.
    pub fn scale(&self, c: f64) -> Var {
        self.unary(|x| c * x, |a| Op::Scale { a, c })
    }

    /// Exact-CDF GELU: x * Phi(x).
    pub fn gelu(&self) -> Var {
        self.unary(|x| x * norm_cdf(x), |a| Op::Gelu { a })
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |a| Op::Exp { a })
    }

    /// Natural log; domain x > 0.
    pub fn ln(&self) -> Var {
        self.unary(f64::ln, |a| Op::Ln { a })
    }

    /// Square root; domain x > 0 for a defined gradient.
    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, |a| Op::Sqrt { a })
    }

    /// Broadcast-multiplies by a scalar node (e.g. a learnable temperature).
    pub fn mul_scalar(&self, s: &Var) -> Result<Var> {
        self.same_tape(s)?;
        let s_shape = s.shape();
        if s.numel() != 1 {
            return Err(TensorError::BadRank {
                op: "mul_scalar",
                expected: "a scalar multiplier",
                got: s_shape,
            });
        }
        let sv = s.item();
        let (shape, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            (a.shape.clone(), a.data.iter().map(|x| x * sv).collect())
        };
        let tracked = self.tracked() || s.tracked();
        Ok(self.push(shape, data, Op::MulScalar { a: self.id, s: s.id }, tracked))
    }

    /// Adds a row vector to every row of a matrix (bias add).
    pub fn add_row(&self, bias: &Var) -> Result<Var> {
        self.same_tape(bias)?;
        let (shape, data, rows, cols) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[bias.id];
            if a.shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "add_row",
                    expected: "a 2-D left operand",
                    got: a.shape.clone(),
                });
            }
            if b.shape != [a.shape[1]] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut data = a.data.clone();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += b.data[c];
                }
            }
            (a.shape.clone(), data, rows, cols)
        };
        let tracked = self.tracked() || bias.tracked();
        Ok(self.push(
            shape,
            data,
            Op::AddRow { a: self.id, b: bias.id, rows, cols },
            tracked,
        ))
    }

    // ─────────────────────────── linear algebra ─────────────────────────────

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let (m, k, n, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = vec![0.0; m * n];
            matmul_raw(&a.data, &b.data, m, k, n, &mut data);
            (m, k, n, data)
        };
        let tracked = self.tracked() || other.tracked();
        Ok(self.push(
            vec![m, n],
            data,
            Op::MatMul { a: self.id, b: other.id, m, k, n },
            tracked,
        ))
    }

    pub fn transpose(&self) -> Result<Var> {
        let (rows, cols, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "transpose",
                    expected: "a 2-D tensor",
                    got: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    data[c * rows + r] = a.data[r * cols + c];
                }
            }
            (rows, cols, data)
        };
        Ok(self.push(
            vec![cols, rows],
            data,
            Op::Transpose { a: self.id, rows, cols },
            self.tracked(),
        ))
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Var> {
        let (data, numel) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            (a.data.clone(), a.data.len())
        };
        let new_numel: usize = new_shape.iter().product();
        if new_numel != numel {
            return Err(TensorError::DataLength {
                shape: new_shape,
                len: numel,
                numel: new_numel,
            });
        }
        Ok(self.push(new_shape, data, Op::Reshape { a: self.id }, self.tracked()))
    }

    // ───────────────────────── softmax family ───────────────────────────────

    /// Numerically stabilized softmax along `axis` (max subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let (shape, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            let rank = a.shape.len();
            if !(rank == 1 && axis == 0 || rank == 2 && axis < 2) {
                return Err(TensorError::BadRank {
                    op: "softmax",
                    expected: "axis 0 of a vector or axis 0/1 of a matrix",
                    got: a.shape.clone(),
                });
            }
            let mut data = vec![0.0; a.data.len()];
            let (lanes, lane_len, stride, base_step) = lane_layout(&a.shape, axis);
            for lane in 0..lanes {
                let base = lane * base_step;
                let mut max = f64::NEG_INFINITY;
                for i in 0..lane_len {
                    max = max.max(a.data[base + i * stride]);
                }
                let mut sum = 0.0;
                for i in 0..lane_len {
                    let e = (a.data[base + i * stride] - max).exp();
                    data[base + i * stride] = e;
                    sum += e;
                }
                for i in 0..lane_len {
                    data[base + i * stride] /= sum;
                }
            }
            (a.shape.clone(), data)
        };
        Ok(self.push(shape, data, Op::Softmax { a: self.id, axis }, self.tracked()))
    }

    /// Row-wise log-softmax of a matrix, max-stabilized.
    pub fn log_softmax_rows(&self) -> Result<Var> {
        let (rows, cols, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "log_softmax_rows",
                    expected: "a 2-D tensor",
                    got: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &a.data[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for c in 0..cols {
                    data[r * cols + c] = row[c] - lse;
                }
            }
            (rows, cols, data)
        };
        Ok(self.push(
            vec![rows, cols],
            data,
            Op::LogSoftmaxRows { a: self.id, rows, cols },
            self.tracked(),
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise
    /// log-softmax of `self`, restricted to unmasked positions.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, cols, loss, count) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "cross_entropy",
                    expected: "2-D logits",
                    got: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            if targets.len() != rows || mask.len() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    left: vec![rows],
                    right: vec![targets.len(), mask.len()],
                });
            }
            let count = mask.iter().filter(|m| **m).count();
            if count == 0 {
                return Err(TensorError::EmptyLoss);
            }
            let mut total = 0.0;
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                if targets[r] >= cols {
                    return Err(TensorError::IndexOutOfBounds {
                        op: "cross_entropy",
                        index: targets[r],
                        size: cols,
                    });
                }
                let row = &a.data[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total -= row[targets[r]] - lse;
            }
            (rows, cols, total / count as f64, count)
        };
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
                rows,
                cols,
            },
            self.tracked(),
        ))
    }

    // ───────────────────── gather / concat / slice ──────────────────────────

    /// Selects rows by index (embedding lookup, content-token gather).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        let (cols, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "gather_rows",
                    expected: "a 2-D tensor",
                    got: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &idx in indices {
                if idx >= rows {
                    return Err(TensorError::IndexOutOfBounds {
                        op: "gather_rows",
                        index: idx,
                        size: rows,
                    });
                }
                data.extend_from_slice(&a.data[idx * cols..(idx + 1) * cols]);
            }
            (cols, data)
        };
        Ok(self.push(
            vec![indices.len(), cols],
            data,
            Op::GatherRows { a: self.id, indices: indices.to_vec(), cols },
            self.tracked(),
        ))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::EmptyInput { op: "concat_rows" })?;
        let mut meta = Vec::with_capacity(parts.len());
        let (cols, data, tracked) = {
            let inner = first.tape.borrow();
            let first_shape = &inner.nodes[first.id].shape;
            if first_shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "concat_rows",
                    expected: "2-D parts",
                    got: first_shape.clone(),
                });
            }
            let cols = first_shape[1];
            let mut data = Vec::new();
            let mut tracked = false;
            for p in parts {
                if !Rc::ptr_eq(&p.tape, &first.tape) {
                    return Err(TensorError::TapeMismatch);
                }
                let node = &inner.nodes[p.id];
                if node.shape.len() != 2 || node.shape[1] != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        left: first_shape.clone(),
                        right: node.shape.clone(),
                    });
                }
                meta.push((p.id, node.shape[0]));
                data.extend_from_slice(&node.data);
                tracked |= node.tracked;
            }
            (cols, data, tracked)
        };
        let total_rows: usize = meta.iter().map(|(_, r)| r).sum();
        Ok(first.push(
            vec![total_rows, cols],
            data,
            Op::ConcatRows { parts: meta, cols },
            tracked,
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let (cols, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "slice_rows",
                    expected: "a 2-D tensor",
                    got: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            if start + len > rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "slice_rows",
                    index: start + len,
                    size: rows,
                });
            }
            (cols, a.data[start * cols..(start + len) * cols].to_vec())
        };
        Ok(self.push(
            vec![len, cols],
            data,
            Op::SliceRows { a: self.id, start, len, cols },
            self.tracked(),
        ))
    }

    /// Stacks matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::EmptyInput { op: "concat_cols" })?;
        let mut meta = Vec::with_capacity(parts.len());
        let (rows, data, tracked) = {
            let inner = first.tape.borrow();
            let first_shape = &inner.nodes[first.id].shape;
            if first_shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "concat_cols",
                    expected: "2-D parts",
                    got: first_shape.clone(),
                });
            }
            let rows = first_shape[0];
            let mut tracked = false;
            let mut total_cols = 0;
            for p in parts {
                if !Rc::ptr_eq(&p.tape, &first.tape) {
                    return Err(TensorError::TapeMismatch);
                }
                let node = &inner.nodes[p.id];
                if node.shape.len() != 2 || node.shape[0] != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        left: first_shape.clone(),
                        right: node.shape.clone(),
                    });
                }
                meta.push((p.id, node.shape[1]));
                total_cols += node.shape[1];
                tracked |= node.tracked;
            }
            let mut data = vec![0.0; rows * total_cols];
            let mut col_off = 0;
            for &(pid, pcols) in &meta {
                let node = &inner.nodes[pid];
                for r in 0..rows {
                    data[r * total_cols + col_off..r * total_cols + col_off + pcols]
                        .copy_from_slice(&node.data[r * pcols..(r + 1) * pcols]);
                }
                col_off += pcols;
            }
            (rows, data, tracked)
        };
        let total_cols: usize = meta.iter().map(|(_, c)| c).sum();
        Ok(first.push(
            vec![rows, total_cols],
            data,
            Op::ConcatCols { parts: meta, rows },
            tracked,
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        let (rows, src_cols, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "slice_cols",
                    expected: "a 2-D tensor",
                    got: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            if start + len > cols {
                return Err(TensorError::IndexOutOfBounds {
                    op: "slice_cols",
                    index: start + len,
                    size: cols,
                });
            }
            let mut data = vec![0.0; rows * len];
            for r in 0..rows {
                data[r * len..(r + 1) * len]
                    .copy_from_slice(&a.data[r * cols + start..r * cols + start + len]);
            }
            (rows, cols, data)
        };
        Ok(self.push(
            vec![rows, len],
            data,
            Op::SliceCols { a: self.id, start, len, rows, src_cols },
            self.tracked(),
        ))
    }

    // ───────────────────────── reductions ───────────────────────────────────

    /// Arithmetic mean over rows of a matrix, yielding a vector.
    ///
    /// Each column is summed in value-sorted order, so the result is
    /// bit-identical under any permutation of the input rows.
    pub fn mean_rows(&self) -> Result<Var> {
        let (rows, cols, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "mean_rows",
                    expected: "a 2-D tensor",
                    got: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            if rows == 0 {
                return Err(TensorError::EmptyInput { op: "mean_rows" });
            }
            let mut data = vec![0.0; cols];
            let mut column = vec![0.0; rows];
            for c in 0..cols {
                for r in 0..rows {
                    column[r] = a.data[r * cols + c];
                }
                column.sort_by(f64::total_cmp);
                data[c] = column.iter().sum::<f64>() / rows as f64;
            }
            (rows, cols, data)
        };
        Ok(self.push(
            vec![cols],
            data,
            Op::MeanRows { a: self.id, rows, cols },
            self.tracked(),
        ))
    }

    pub fn sum_all(&self) -> Var {
        let total: f64 = self.tape.borrow().nodes[self.id].data.iter().sum();
        self.push(vec![], vec![total], Op::SumAll { a: self.id }, self.tracked())
    }

    pub fn mean_all(&self) -> Result<Var> {
        let (total, n) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            if a.data.is_empty() {
                return Err(TensorError::EmptyInput { op: "mean_all" });
            }
            (a.data.iter().sum::<f64>(), a.data.len())
        };
        Ok(self.push(
            vec![],
            vec![total / n as f64],
            Op::MeanAll { a: self.id },
            self.tracked(),
        ))
    }

    // ───────────────────── normalization ────────────────────────────────────

    /// L2-normalizes every row; errors on a zero-norm row.
    pub fn normalize_rows(&self) -> Result<Var> {
        let (rows, cols, norms, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "normalize_rows",
                    expected: "a 2-D tensor",
                    got: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut norms = Vec::with_capacity(rows);
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &a.data[r * cols..(r + 1) * cols];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(TensorError::DegenerateInput {
                        op: "normalize_rows",
                        what: format!("row {r} has zero norm"),
                    });
                }
                for c in 0..cols {
                    data[r * cols + c] = row[c] / norm;
                }
                norms.push(norm);
            }
            (rows, cols, norms, data)
        };
        Ok(self.push(
            vec![rows, cols],
            data,
            Op::NormalizeRows { a: self.id, rows, cols, norms },
            self.tracked(),
        ))
    }

    /// Row-wise layer normalization with learnable gain and shift.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let (rows, cols, stats, data) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.id];
            let g = &inner.nodes[gamma.id];
            let b = &inner.nodes[beta.id];
            if a.shape.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "layer_norm",
                    expected: "a 2-D tensor",
                    got: a.shape.clone(),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            if g.shape != [cols] || b.shape != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: a.shape.clone(),
                    right: g.shape.clone(),
                });
            }
            let mut stats = Vec::with_capacity(rows);
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &a.data[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    let xhat = (row[c] - mean) * inv_std;
                    data[r * cols + c] = xhat * g.data[c] + b.data[c];
                }
                stats.push((mean, inv_std));
            }
            (rows, cols, stats, data)
        };
        let tracked = self.tracked() || gamma.tracked() || beta.tracked();
        Ok(self.push(
            vec![rows, cols],
            data,
            Op::LayerNorm {
                a: self.id,
                gamma: gamma.id,
                beta: beta.id,
                rows,
                cols,
                stats,
            },
            tracked,
        ))
    }
}

/// (lane count, lane length, stride within lane, base step between lanes)
/// for iterating a 1-D/2-D tensor along `axis`.
fn lane_layout(shape: &[usize], axis: usize) -> (usize, usize, usize, usize) {
    match (shape.len(), axis) {
        (1, 0) => (1, shape[0], 1, 0),
        (2, 1) => (shape[0], shape[1], 1, shape[1]),
        (2, 0) => (shape[1], shape[0], shape[1], 1),
        _ => unreachable!("validated by caller"),
    }
}

fn backprop_one(inner: &mut TapeInner, id: usize, out_grad: &[f64]) {
    // Safety note: ops reference only strictly earlier node ids, so the
    // reverse sweep sees each node's full accumulated gradient before
    // propagating it.
    let op = std::mem::replace(&mut inner.nodes[id].op, Op::Leaf);
    match &op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if inner.nodes[*a].tracked {
                // dA = G * B^T
                let mut da = vec![0.0; m * k];
                {
                    let b_data = &inner.nodes[*b].data;
                    for i in 0..m {
                        for j in 0..n {
                            let g = out_grad[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += g * b_data[p * n + j];
                            }
                        }
                    }
                }
                inner.accumulate(*a, &da);
            }
            if inner.nodes[*b].tracked {
                // dB = A^T * G
                let mut db = vec![0.0; k * n];
                {
                    let a_data = &inner.nodes[*a].data;
                    for i in 0..m {
                        for p in 0..k {
                            let av = a_data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * out_grad[i * n + j];
                            }
                        }
                    }
                }
                inner.accumulate(*b, &db);
            }
        }
        Op::Transpose { a, rows, cols } => {
            let mut da = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    da[r * cols + c] = out_grad[c * rows + r];
                }
            }
            inner.accumulate(*a, &da);
        }
        Op::Add { a, b } => {
            inner.accumulate(*a, out_grad);
            inner.accumulate(*b, out_grad);
        }
        Op::Sub { a, b } => {
            inner.accumulate(*a, out_grad);
            let neg: Vec<f64> = out_grad.iter().map(|g| -g).collect();
            inner.accumulate(*b, &neg);
        }
        Op::Mul { a, b } => {
            if inner.nodes[*a].tracked {
                let da: Vec<f64> = {
                    let b_data = &inner.nodes[*b].data;
                    out_grad.iter().zip(b_data).map(|(g, y)| g * y).collect()
                };
                inner.accumulate(*a, &da);
            }
            if inner.nodes[*b].tracked {
                let db: Vec<f64> = {
                    let a_data = &inner.nodes[*a].data;
                    out_grad.iter().zip(a_data).map(|(g, x)| g * x).collect()
                };
                inner.accumulate(*b, &db);
            }
        }
        Op::Div { a, b } => {
            if inner.nodes[*a].tracked {
                let da: Vec<f64> = {
                    let b_data = &inner.nodes[*b].data;
                    out_grad.iter().zip(b_data).map(|(g, y)| g / y).collect()
                };
                inner.accumulate(*a, &da);
            }
            if inner.nodes[*b].tracked {
                let db: Vec<f64> = {
                    let a_data = &inner.nodes[*a].data;
                    let b_data = &inner.nodes[*b].data;
                    out_grad
                        .iter()
                        .zip(a_data.iter().zip(b_data))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect()
                };
                inner.accumulate(*b, &db);
            }
        }
        Op::Neg { a } => {
            let da: Vec<f64> = out_grad.iter().map(|g| -g).collect();
            inner.accumulate(*a, &da);
        }
        Op::Scale { a, c } => {
            let da: Vec<f64> = out_grad.iter().map(|g| g * c).collect();
            inner.accumulate(*a, &da);
        }
        Op::MulScalar { a, s } => {
            let sv = inner.nodes[*s].data[0];
            if inner.nodes[*a].tracked {
                let da: Vec<f64> = out_grad.iter().map(|g| g * sv).collect();
                inner.accumulate(*a, &da);
            }
            if inner.nodes[*s].tracked {
                let ds: f64 = {
                    let a_data = &inner.nodes[*a].data;
                    out_grad.iter().zip(a_data).map(|(g, x)| g * x).sum()
                };
                inner.accumulate(*s, &[ds]);
            }
        }
        Op::AddRow { a, b, rows, cols } => {
            inner.accumulate(*a, out_grad);
            if inner.nodes[*b].tracked {
                let mut db = vec![0.0; *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        db[c] += out_grad[r * cols + c];
                    }
                }
                inner.accumulate(*b, &db);
            }
        }
        Op::Gelu { a } => {
            let da: Vec<f64> = {
                let a_data = &inner.nodes[*a].data;
                out_grad
                    .iter()
                    .zip(a_data)
                    .map(|(g, x)| g * (norm_cdf(*x) + x * norm_pdf(*x)))
                    .collect()
            };
            inner.accumulate(*a, &da);
        }
        Op::Exp { a } => {
            let da: Vec<f64> = {
                let out = &inner.nodes[id].data;
                out_grad.iter().zip(out).map(|(g, y)| g * y).collect()
            };
            inner.accumulate(*a, &da);
        }
        Op::Ln { a } => {
            let da: Vec<f64> = {
                let a_data = &inner.nodes[*a].data;
                out_grad.iter().zip(a_data).map(|(g, x)| g / x).collect()
            };
            inner.accumulate(*a, &da);
        }
        Op::Sqrt { a } => {
            let da: Vec<f64> = {
                let out = &inner.nodes[id].data;
                out_grad.iter().zip(out).map(|(g, y)| g / (2.0 * y)).collect()
            };
            inner.accumulate(*a, &da);
        }
        Op::Softmax { a, axis } => {
            let da: Vec<f64> = {
                let out = &inner.nodes[id].data;
                let shape = &inner.nodes[id].shape;
                let (lanes, lane_len, stride, base_step) = lane_layout(shape, *axis);
                let mut da = vec![0.0; out.len()];
                for lane in 0..lanes {
                    let base = lane * base_step;
                    let mut dot = 0.0;
                    for i in 0..lane_len {
                        let idx = base + i * stride;
                        dot += out_grad[idx] * out[idx];
                    }
                    for i in 0..lane_len {
                        let idx = base + i * stride;
                        da[idx] = out[idx] * (out_grad[idx] - dot);
                    }
                }
                da
            };
            inner.accumulate(*a, &da);
        }
        Op::LogSoftmaxRows { a, rows, cols } => {
            let da: Vec<f64> = {
                let out = &inner.nodes[id].data;
                let mut da = vec![0.0; out.len()];
                for r in 0..*rows {
                    let gsum: f64 = out_grad[r * cols..(r + 1) * cols].iter().sum();
                    for c in 0..*cols {
                        let idx = r * cols + c;
                        da[idx] = out_grad[idx] - out[idx].exp() * gsum;
                    }
                }
                da
            };
            inner.accumulate(*a, &da);
        }
        Op::CrossEntropy { logits, targets, mask, count, rows, cols } => {
            let go = out_grad[0] / *count as f64;
            let da: Vec<f64> = {
                let x = &inner.nodes[*logits].data;
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    if !mask[r] {
                        continue;
                    }
                    let row = &x[r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for c in 0..*cols {
                        let p = (row[c] - max).exp() / sum;
                        let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                        da[r * cols + c] = go * (p - indicator);
                    }
                }
                da
            };
            inner.accumulate(*logits, &da);
        }
        Op::GatherRows { a, indices, cols } => {
            let mut da = vec![0.0; inner.nodes[*a].data.len()];
            for (out_r, &src_r) in indices.iter().enumerate() {
                for c in 0..*cols {
                    da[src_r * cols + c] += out_grad[out_r * cols + c];
                }
            }
            inner.accumulate(*a, &da);
        }
        Op::ConcatRows { parts, cols } => {
            let mut row_off = 0;
            for &(pid, prows) in parts {
                if inner.nodes[pid].tracked {
                    let slice = &out_grad[row_off * cols..(row_off + prows) * cols];
                    inner.accumulate(pid, slice);
                }
                row_off += prows;
            }
        }
        Op::SliceRows { a, start, len, cols } => {
            let mut da = vec![0.0; inner.nodes[*a].data.len()];
            da[start * cols..(start + len) * cols].copy_from_slice(out_grad);
            inner.accumulate(*a, &da);
        }
        Op::ConcatCols { parts, rows } => {
            let total_cols: usize = parts.iter().map(|(_, c)| c).sum();
            let mut col_off = 0;
            for &(pid, pcols) in parts {
                if inner.nodes[pid].tracked {
                    let mut dp = vec![0.0; rows * pcols];
                    for r in 0..*rows {
                        dp[r * pcols..(r + 1) * pcols].copy_from_slice(
                            &out_grad[r * total_cols + col_off..r * total_cols + col_off + pcols],
                        );
                    }
                    inner.accumulate(pid, &dp);
                }
                col_off += pcols;
            }
        }
        Op::SliceCols { a, start, len, rows, src_cols } => {
            let mut da = vec![0.0; inner.nodes[*a].data.len()];
            for r in 0..*rows {
                da[r * src_cols + start..r * src_cols + start + len]
                    .copy_from_slice(&out_grad[r * len..(r + 1) * len]);
            }
            inner.accumulate(*a, &da);
        }
        Op::MeanRows { a, rows, cols } => {
            let inv = 1.0 / *rows as f64;
            let mut da = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    da[r * cols + c] = out_grad[c] * inv;
                }
            }
            inner.accumulate(*a, &da);
        }
        Op::SumAll { a } => {
            let da = vec![out_grad[0]; inner.nodes[*a].data.len()];
            inner.accumulate(*a, &da);
        }
        Op::MeanAll { a } => {
            let n = inner.nodes[*a].data.len();
            let da = vec![out_grad[0] / n as f64; n];
            inner.accumulate(*a, &da);
        }
        Op::NormalizeRows { a, rows, cols, norms } => {
            let da: Vec<f64> = {
                let out = &inner.nodes[id].data;
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let g = &out_grad[r * cols..(r + 1) * cols];
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for c in 0..*cols {
                        da[r * cols + c] = (g[c] - dot * y[c]) / norms[r];
                    }
                }
                da
            };
            inner.accumulate(*a, &da);
        }
        Op::LayerNorm { a, gamma, beta, rows, cols, stats } => {
            let (da, dgamma, dbeta) = {
                let x = &inner.nodes[*a].data;
                let g_data = &inner.nodes[*gamma].data;
                let mut da = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; *cols];
                let mut dbeta = vec![0.0; *cols];
                let nf = *cols as f64;
                for r in 0..*rows {
                    let (mean, inv_std) = stats[r];
                    let row = &x[r * cols..(r + 1) * cols];
                    let go = &out_grad[r * cols..(r + 1) * cols];
                    // dxhat = go * gamma; then the standard layer-norm input rule
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..*cols {
                        let xhat = (row[c] - mean) * inv_std;
                        let dxhat = go[c] * g_data[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[c] += go[c] * xhat;
                        dbeta[c] += go[c];
                    }
                    for c in 0..*cols {
                        let xhat = (row[c] - mean) * inv_std;
                        let dxhat = go[c] * g_data[c];
                        da[r * cols + c] =
                            inv_std * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                    }
                }
                (da, dgamma, dbeta)
            };
            inner.accumulate(*a, &da);
            inner.accumulate(*gamma, &dgamma);
            inner.accumulate(*beta, &dbeta);
        }
        Op::Reshape { a } => {
            inner.accumulate(*a, out_grad);
        }
    }
    inner.nodes[id].op = op;
}

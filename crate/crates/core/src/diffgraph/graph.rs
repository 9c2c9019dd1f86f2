//! Tape of dense tensor operations with reverse-mode accumulation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order: every parent id is smaller than its child's id.
//! Shapes must match exactly; the only implicit expansion is a one-element
//! operand in a binary op. Row/column expansion is explicit
//! (`broadcast_rows`, `broadcast_cols`).

use super::tensor::{matmul_into, sigmoid, softplus, tanh, Tensor};
use super::GraphError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Softplus,
    Sigmoid,
    Elu,
    Square,
    Sqrt,
    Scale(f64),
    Offset(f64),
    ClampMin(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BroadcastRows(Var, usize),
    BroadcastCols(Var, usize),
    SumAll(Var),
    SumLast(Var),
    MaxLast {
        x: Var,
        argmax: Vec<usize>,
    },
    LogSumExpLast(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    IndexRows {
        x: Var,
        index: Vec<usize>,
    },
    GatherLast {
        x: Var,
        index: Vec<usize>,
    },
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Select {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the loss does not depend on `var`.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.get(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

/// A single-threaded computation graph. Build a fresh one per evaluation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn is_unit(t: &Tensor) -> bool {
    t.numel() == 1
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

fn leading(shape: &[usize]) -> Result<(usize, usize), GraphError> {
    match shape.first() {
        Some(&d0) => {
            let n: usize = shape.iter().product();
            Ok((d0, n.checked_div(d0).unwrap_or(0)))
        }
        None => Err(GraphError::InvalidArgument {
            op: "rows",
            reason: "scalar has no leading axis".into(),
        }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(
        &mut self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        op: &'static str,
    ) -> Result<Var, GraphError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || is_unit(tb) {
            ta.shape().to_vec()
        } else if is_unit(ta) {
            tb.shape().to_vec()
        } else {
            return Err(GraphError::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        let n: usize = shape.iter().product();
        let (va, vb) = (ta.values(), tb.values());
        let ia = |i: usize| if va.len() == 1 { va[0] } else { va[i] };
        let ib = |i: usize| if vb.len() == 1 { vb[0] } else { vb[i] };
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let values = (0..n).map(|i| f(ia(i), ib(i))).collect();
        let out = Tensor::new(shape, values)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Binary(kind, a, b), out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let t = self.value(x);
        let f = |v: f64| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Tanh => tanh(v),
            UnaryKind::Softplus => softplus(v),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Elu => {
                if v > 0.0 {
                    v
                } else {
                    v.exp_m1()
                }
            }
            UnaryKind::Square => v * v,
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Scale(c) => c * v,
            UnaryKind::Offset(c) => v + c,
            UnaryKind::ClampMin(c) => v.max(c),
        };
        let values = t.values().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), values).expect("unary shape");
        let needs = self.needs(&[x]);
        self.push(Op::Unary(kind, x), out, needs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Elu, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Offset(c), x)
    }
    /// Elementwise `max(x, floor)`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(UnaryKind::ClampMin(floor), x)
    }

    /// `ln σ(x)`, computed as `-softplus(-x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        let s = self.softplus(n);
        self.neg(s)
    }

    // ---- linear algebra and expansion -----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).values(),
            self.value(b).values(),
            &mut out,
            m,
            k,
            n,
        );
        let out = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, out, needs))
    }

    /// Repeats `v` along a new leading axis of size `m`.
    pub fn broadcast_rows(&mut self, v: Var, m: usize) -> Var {
        let t = self.value(v);
        let mut shape = vec![m];
        shape.extend_from_slice(t.shape());
        let mut values = Vec::with_capacity(m * t.numel());
        for _ in 0..m {
            values.extend_from_slice(t.values());
        }
        let out = Tensor::new(shape, values).expect("broadcast_rows");
        let needs = self.needs(&[v]);
        self.push(Op::BroadcastRows(v, m), out, needs)
    }

    /// Repeats every element of `v` along a new trailing axis of size `n`.
    pub fn broadcast_cols(&mut self, v: Var, n: usize) -> Var {
        let t = self.value(v);
        let mut shape = t.shape().to_vec();
        shape.push(n);
        let values = t
            .values()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, n))
            .collect();
        let out = Tensor::new(shape, values).expect("broadcast_cols");
        let needs = self.needs(&[v]);
        self.push(Op::BroadcastCols(v, n), out, needs)
    }

    // ---- reductions -----------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Op::SumAll(x), Tensor::scalar(s), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    fn reduce_last(&mut self, x: Var, f: impl Fn(&[f64]) -> f64) -> (Vec<usize>, Vec<f64>) {
        let t = self.value(x);
        let c = t.last_dim();
        let values = if c == 0 {
            vec![f(&[]); t.rows()]
        } else {
            t.values().chunks(c).map(f).collect()
        };
        (drop_last(t.shape()), values)
    }

    pub fn sum_last(&mut self, x: Var) -> Var {
        let (shape, values) = self.reduce_last(x, |r| r.iter().sum());
        let needs = self.needs(&[x]);
        self.push(
            Op::SumLast(x),
            Tensor::new(shape, values).expect("sum_last"),
            needs,
        )
    }

    pub fn max_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        let mut argmax = Vec::with_capacity(t.rows());
        let mut values = Vec::with_capacity(t.rows());
        for row in t.values().chunks(c.max(1)) {
            let (i, m) =
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, &v)| {
                        if v > bm {
                            (i, v)
                        } else {
                            (bi, bm)
                        }
                    });
            argmax.push(i);
            values.push(m);
        }
        let out = Tensor::new(drop_last(t.shape()), values).expect("max_last");
        let needs = self.needs(&[x]);
        self.push(Op::MaxLast { x, argmax }, out, needs)
    }

    /// Overflow-safe `ln Σ exp` over the last axis.
    pub fn log_sum_exp_last(&mut self, x: Var) -> Var {
        let (shape, values) = self.reduce_last(x, super::tensor::log_sum_exp);
        let needs = self.needs(&[x]);
        self.push(
            Op::LogSumExpLast(x),
            Tensor::new(shape, values).expect("log_sum_exp_last"),
            needs,
        )
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.last_dim().max(1);
        let values = t
            .values()
            .chunks(c)
            .flat_map(super::tensor::softmax)
            .collect();
        let out = Tensor::new(t.shape().to_vec(), values).expect("softmax_last");
        let needs = self.needs(&[x]);
        self.push(Op::SoftmaxLast(x), out, needs)
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.last_dim().max(1);
        let mut values = Vec::with_capacity(t.numel());
        for row in t.values().chunks(c) {
            let lse = super::tensor::log_sum_exp(row);
            values.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), values).expect("log_softmax_last");
        let needs = self.needs(&[x]);
        self.push(Op::LogSoftmaxLast(x), out, needs)
    }

    // ---- indexing and structure ----------------------------------------------

    /// Index-select along the leading axis (rows may repeat).
    pub fn index_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, GraphError> {
        let t = self.value(x);
        let (d0, row) = leading(t.shape())?;
        if let Some(&bad) = index.iter().find(|&&i| i >= d0) {
            return Err(GraphError::IndexOutOfRange {
                op: "index_rows",
                index: bad,
                bound: d0,
            });
        }
        let mut values = Vec::with_capacity(index.len() * row);
        for &i in index {
            values.extend_from_slice(&t.values()[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(shape, values)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            Op::IndexRows {
                x,
                index: index.to_vec(),
            },
            out,
            needs,
        ))
    }

    /// Picks one element of the last axis per row: `out[r] = x[r, index[r]]`.
    pub fn gather_last(&mut self, x: Var, index: &[usize]) -> Result<Var, GraphError> {
        let t = self.value(x);
        let c = t.last_dim();
        if index.len() != t.rows() {
            return Err(GraphError::ShapeMismatch {
                op: "gather_last",
                left: t.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(GraphError::IndexOutOfRange {
                op: "gather_last",
                index: bad,
                bound: c,
            });
        }
        let values = index
            .iter()
            .enumerate()
            .map(|(r, &i)| t.values()[r * c + i])
            .collect();
        let out = Tensor::new(drop_last(t.shape()), values)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            Op::GatherLast {
                x,
                index: index.to_vec(),
            },
            out,
            needs,
        ))
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, GraphError> {
        let first = parts.first().ok_or(GraphError::InvalidArgument {
            op: "concat_last",
            reason: "no inputs".into(),
        })?;
        let lead = drop_last(self.shape(*first));
        let rows = self.value(*first).rows();
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if drop_last(s) != lead || s.is_empty() {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_last",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            width += self.value(*p).last_dim();
        }
        let mut values = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                values.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let out = Tensor::new(shape, values)?;
        let needs = self.needs(parts);
        Ok(self.push(Op::ConcatLast(parts.to_vec()), out, needs))
    }

    /// Stacks equally shaped tensors along a new trailing axis.
    pub fn stack_last(&mut self, parts: &[Var]) -> Result<Var, GraphError> {
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = self.shape(p).to_vec();
            s.push(1);
            expanded.push(self.reshape(p, &s)?);
        }
        self.concat_last(&expanded)
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        let t = self.value(x);
        let c = t.last_dim();
        if t.shape().is_empty() || start + len > c {
            return Err(GraphError::IndexOutOfRange {
                op: "slice_last",
                index: start + len,
                bound: c,
            });
        }
        let values = t
            .values()
            .chunks(c)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = len;
        let out = Tensor::new(shape, values)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::SliceLast { x, start }, out, needs))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GraphError> {
        let first = parts.first().ok_or(GraphError::InvalidArgument {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let tail = self
            .shape(*first)
            .get(1..)
            .map(|s| s.to_vec())
            .unwrap_or_default();
        let mut d0 = 0;
        let mut values = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            d0 += s[0];
            values.extend_from_slice(self.value(*p).values());
        }
        let mut shape = vec![d0];
        shape.extend(tail);
        let out = Tensor::new(shape, values)?;
        let needs = self.needs(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        let t = self.value(x);
        let (d0, row) = leading(t.shape())?;
        if start + len > d0 {
            return Err(GraphError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: d0,
            });
        }
        let values = t.values()[start * row..(start + len) * row].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(shape, values)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::SliceRows { x, start }, out, needs))
    }

    /// Elementwise `mask ? a : b`.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var, GraphError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || mask.len() != ta.numel() {
            return Err(GraphError::ShapeMismatch {
                op: "select",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let values = mask
            .iter()
            .zip(ta.values().iter().zip(tb.values()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), values)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Op::Select {
                mask: mask.to_vec(),
                a,
                b,
            },
            out,
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GraphError> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), out, needs))
    }

    // ---- reverse pass ---------------------------------------------------------

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GraphError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(GraphError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.values();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let va = self.value(*a).values();
                let vb = self.value(*b).values();
                let xa = |i: usize| if va.len() == 1 { va[0] } else { va[i] };
                let xb = |i: usize| if vb.len() == 1 { vb[0] } else { vb[i] };
                let (da, db): (Box<dyn Fn(usize) -> f64>, Box<dyn Fn(usize) -> f64>) = match kind {
                    BinaryKind::Add => (Box::new(|i| g[i]), Box::new(|i| g[i])),
                    BinaryKind::Sub => (Box::new(|i| g[i]), Box::new(|i| -g[i])),
                    BinaryKind::Mul => (Box::new(|i| g[i] * xb(i)), Box::new(|i| g[i] * xa(i))),
                    BinaryKind::Div => (
                        Box::new(|i| g[i] / xb(i)),
                        Box::new(|i| -g[i] * xa(i) / (xb(i) * xb(i))),
                    ),
                };
                for (v, d) in [(*a, &da), (*b, &db)] {
                    acc(v, &mut |slot: &mut [f64]| {
                        if slot.len() == 1 && g.len() != 1 {
                            slot[0] += (0..g.len()).map(d.as_ref()).sum::<f64>();
                        } else {
                            for (i, s) in slot.iter_mut().enumerate() {
                                *s += d(i);
                            }
                        }
                    });
                }
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x).values();
                acc(*x, &mut |slot: &mut [f64]| {
                    for i in 0..slot.len() {
                        let d = match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / xv[i],
                            UnaryKind::Tanh => 1.0 - y[i] * y[i],
                            UnaryKind::Softplus => sigmoid(xv[i]),
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Elu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    y[i] + 1.0
                                }
                            }
                            UnaryKind::Square => 2.0 * xv[i],
                            UnaryKind::Sqrt => 0.5 / y[i],
                            UnaryKind::Scale(c) => *c,
                            UnaryKind::Offset(_) => 1.0,
                            UnaryKind::ClampMin(c) => {
                                if xv[i] > *c {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        if g[i] != 0.0 {
                            slot[i] += g[i] * d;
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let va = self.value(*a).values();
                let vb = self.value(*b).values();
                // dA = g · Bᵀ
                acc(*a, &mut |slot: &mut [f64]| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &vb[p * n..(p + 1) * n];
                            slot[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · g
                acc(*b, &mut |slot: &mut [f64]| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = va[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (s, &gv) in slot[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *s += a_ip * gv;
                            }
                        }
                    }
                });
            }
            Op::BroadcastRows(v, m) => {
                acc(*v, &mut |slot: &mut [f64]| {
                    let w = slot.len();
                    for r in 0..*m {
                        for (s, &gv) in slot.iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *s += gv;
                        }
                    }
                });
            }
            Op::BroadcastCols(v, n) => {
                acc(*v, &mut |slot: &mut [f64]| {
                    for (i, s) in slot.iter_mut().enumerate() {
                        *s += g[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |slot: &mut [f64]| {
                    slot.iter_mut().for_each(|s| *s += g[0])
                });
            }
            Op::SumLast(x) => {
                let c = self.value(*x).last_dim();
                acc(*x, &mut |slot: &mut [f64]| {
                    for (i, s) in slot.iter_mut().enumerate() {
                        *s += g[i / c];
                    }
                });
            }
            Op::MaxLast { x, argmax } => {
                let c = self.value(*x).last_dim();
                acc(*x, &mut |slot: &mut [f64]| {
                    for (r, &j) in argmax.iter().enumerate() {
                        slot[r * c + j] += g[r];
                    }
                });
            }
            Op::LogSumExpLast(x) => {
                let xv = self.value(*x).values();
                let c = self.value(*x).last_dim();
                acc(*x, &mut |slot: &mut [f64]| {
                    for (i, s) in slot.iter_mut().enumerate() {
                        let r = i / c;
                        if y[r] == f64::NEG_INFINITY || g[r] == 0.0 {
                            continue;
                        }
                        *s += g[r] * (xv[i] - y[r]).exp();
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let c = node.value.last_dim();
                acc(*x, &mut |slot: &mut [f64]| {
                    for r in 0..slot.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            slot[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxLast(x) => {
                let c = node.value.last_dim();
                acc(*x, &mut |slot: &mut [f64]| {
                    for r in 0..slot.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            slot[r * c + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::IndexRows { x, index } => {
                let row = if index.is_empty() {
                    0
                } else {
                    g.len() / index.len()
                };
                acc(*x, &mut |slot: &mut [f64]| {
                    for (k, &i) in index.iter().enumerate() {
                        for (s, &gv) in slot[i * row..(i + 1) * row]
                            .iter_mut()
                            .zip(&g[k * row..(k + 1) * row])
                        {
                            *s += gv;
                        }
                    }
                });
            }
            Op::GatherLast { x, index } => {
                let c = self.value(*x).last_dim();
                acc(*x, &mut |slot: &mut [f64]| {
                    for (r, &i) in index.iter().enumerate() {
                        slot[r * c + i] += g[r];
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let width = node.value.last_dim();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    acc(*p, &mut |slot: &mut [f64]| {
                        for r in 0..slot.len() / w.max(1) {
                            for j in 0..w {
                                slot[r * w + j] += g[r * width + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let c = self.value(*x).last_dim();
                let len = node.value.last_dim();
                acc(*x, &mut |slot: &mut [f64]| {
                    for r in 0..g.len() / len.max(1) {
                        for j in 0..len {
                            slot[r * c + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    acc(*p, &mut |slot: &mut [f64]| {
                        for (s, &gv) in slot.iter_mut().zip(&g[offset..offset + n]) {
                            *s += gv;
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let row = if node.value.shape()[0] == 0 {
                    0
                } else {
                    node.value.numel() / node.value.shape()[0]
                };
                acc(*x, &mut |slot: &mut [f64]| {
                    for (s, &gv) in slot[start * row..start * row + g.len()].iter_mut().zip(g) {
                        *s += gv;
                    }
                });
            }
            Op::Select { mask, a, b } => {
                acc(*a, &mut |slot: &mut [f64]| {
                    for (i, s) in slot.iter_mut().enumerate() {
                        if mask[i] {
                            *s += g[i];
                        }
                    }
                });
                acc(*b, &mut |slot: &mut [f64]| {
                    for (i, s) in slot.iter_mut().enumerate() {
                        if !mask[i] {
                            *s += g[i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |slot: &mut [f64]| {
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                });
            }
        }
    }
}

//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers. Parameter leaves read their values straight
//! from a borrowed [`ParamTable`] and their gradients are accumulated directly
//! into the caller's gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamTable};
use crate::numerics::tensor::{Real, Tensor};

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Slot<T> {
    Param(ParamId),
    Owned(Tensor<T>),
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, T),
    MatVec(Var, Var),
    VecMat(Var, Var),
    MatMulT(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Tanh(Var),
    Sigmoid(Var),
    Selu(Var),
    MaskedSoftmax(Var),
    NegLogAt(Var, usize),
    Sum(Vec<Var>),
    Dropout(Var, Vec<T>),
    Conv1dMax {
        input: Var,
        filters: Var,
        bias: Var,
        width: usize,
        argmax: Vec<usize>,
    },
    GradScale(Var, T),
}

struct Node<T> {
    slot: Slot<T>,
    op: Op<T>,
    needs_grad: bool,
}

struct DropoutState {
    rate: f64,
    rng: ChaCha8Rng,
}

/// One forward pass worth of recorded computation.
pub struct Graph<'p, T: Real> {
    table: &'p ParamTable<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    dropout: Option<DropoutState>,
    stochastic: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(table: &'p ParamTable<T>) -> Self {
        Graph {
            table,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            dropout: None,
            stochastic: false,
        }
    }

    /// A graph whose [`Graph::dropout`] calls are active.
    pub fn with_dropout(table: &'p ParamTable<T>, rate: f64, seed: u64) -> Self {
        let mut g = Graph::new(table);
        g.set_dropout(rate, seed);
        g
    }

    pub fn set_dropout(&mut self, rate: f64, seed: u64) {
        self.dropout = if rate > 0.0 {
            Some(DropoutState {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            })
        } else {
            None
        };
    }

    /// True once any random dropout mask has been drawn on this graph.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn table(&self) -> &'p ParamTable<T> {
        self.table
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].slot {
            Slot::Param(id) => self.table.value(*id),
            Slot::Owned(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            slot: Slot::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            slot: Slot::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            slot: Slot::Param(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        Tensor::from_vec(ta.shape(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push("sub", out, Op::Sub(a, b), needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul(a, b), needs)
    }

    /// Adds a one-element tensor `s` to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("add_scalar", format!("{:?} is not a scalar", self.shape(s))));
        }
        let k = self.value(s).data()[0];
        let out = self.map(a, |x| x + k);
        let needs = self.needs(a) || self.needs(s);
        self.push("add_scalar", out, Op::AddScalar(a, s), needs)
    }

    /// Adds vector `v` (length c) to every row of matrix `m` (n x c).
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let c = self.value(m).cols();
        if self.value(v).len() != c {
            return Err(Error::shape("add_row", format!("{:?} vs {:?}", self.shape(m), self.shape(v))));
        }
        let mut out = self.value(m).clone();
        let vv = self.value(v).data();
        for i in 0..out.rows() {
            for (o, &x) in out.row_mut(i).iter_mut().zip(vv) {
                *o += x;
            }
        }
        let needs = self.needs(m) || self.needs(v);
        self.push("add_row", out, Op::AddRow(m, v), needs)
    }

    /// Multiplies row i of `m` by `s[i]`.
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let n = self.value(m).rows();
        if self.value(s).len() != n {
            return Err(Error::shape("scale_rows", format!("{:?} vs {:?}", self.shape(m), self.shape(s))));
        }
        let mut out = self.value(m).clone();
        let sv = self.value(s).data().to_vec();
        for (i, &k) in sv.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        let needs = self.needs(m) || self.needs(s);
        self.push("scale_rows", out, Op::ScaleRows(m, s), needs)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let out = self.map(a, |x| x * k);
        let needs = self.needs(a);
        self.push("scale", out, Op::Scale(a, k), needs)
    }

    /// Matrix (r x c) times vector (c) giving a vector (r).
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        let (r, c) = (tw.rows(), tw.cols());
        if tx.len() != c {
            return Err(Error::shape("matvec", format!("{:?} x {:?}", tw.shape(), tx.shape())));
        }
        let xd = tx.data();
        let out: Vec<T> = (0..r)
            .map(|i| tw.row(i).iter().zip(xd).map(|(&a, &b)| a * b).sum())
            .collect();
        let needs = self.needs(w) || self.needs(x);
        self.push("matvec", Tensor::vector(out), Op::MatVec(w, x), needs)
    }

    /// Row vector (n) times matrix (n x c) giving a vector (c): the
    /// `a`-weighted sum of the rows of `m`.
    pub fn vecmat(&mut self, a: Var, m: Var) -> Result<Var> {
        let (ta, tm) = (self.value(a), self.value(m));
        let (n, c) = (tm.rows(), tm.cols());
        if ta.len() != n {
            return Err(Error::shape("vecmat", format!("{:?} x {:?}", ta.shape(), tm.shape())));
        }
        let mut out = vec![T::zero(); c];
        for (i, &w) in ta.data().iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(tm.row(i)) {
                *o += w * x;
            }
        }
        let needs = self.needs(a) || self.needs(m);
        self.push("vecmat", Tensor::vector(out), Op::VecMat(a, m), needs)
    }

    /// `x` (n x c) times the transpose of `w` (r x c): applies the linear map
    /// `w` to every row of `x`, giving (n x r).
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, c, r) = (tx.rows(), tx.cols(), tw.rows());
        if tw.cols() != c {
            return Err(Error::shape("matmul_t", format!("{:?} x {:?}^T", tx.shape(), tw.shape())));
        }
        let mut out = Vec::with_capacity(n * r);
        for k in 0..n {
            let xr = tx.row(k);
            for j in 0..r {
                out.push(xr.iter().zip(tw.row(j)).map(|(&a, &b)| a * b).sum());
            }
        }
        let out = Tensor::from_vec(&[n, r], out)?;
        let needs = self.needs(x) || self.needs(w);
        self.push("matmul_t", out, Op::MatMulT(x, w), needs)
    }

    /// Concatenates the flattened values of `parts` into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat", Tensor::vector(out), Op::Concat(parts.to_vec()), needs)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.len() {
            return Err(Error::shape("slice", format!("[{}, {}) of {:?}", start, start + len, ta.shape())));
        }
        let out = Tensor::vector(ta.data()[start..start + len].to_vec());
        let needs = self.needs(a);
        self.push("slice", out, Op::Slice(a, start), needs)
    }

    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let tm = self.value(m);
        if i >= tm.rows() {
            return Err(Error::shape("row", format!("row {} of {:?}", i, tm.shape())));
        }
        let out = Tensor::vector(tm.row(i).to_vec());
        let needs = self.needs(m);
        self.push("row", out, Op::Row(m, i), needs)
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::shape("stack_rows", "no rows"));
        };
        let c = self.value(first).len();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if self.value(r).len() != c {
                return Err(Error::shape("stack_rows", format!("row width {} vs {}", self.value(r).len(), c)));
            }
            out.extend_from_slice(self.value(r).data());
        }
        let out = Tensor::from_vec(&[rows.len(), c], out)?;
        let needs = rows.iter().any(|&r| self.needs(r));
        self.push("stack_rows", out, Op::StackRows(rows.to_vec()), needs)
    }

    /// Embedding lookup: selects rows of `table`, giving (ids.len() x c).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (r, c) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::shape("gather", format!("id {} out of {} rows", id, r)));
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::from_vec(&[ids.len(), c], out)?;
        let needs = self.needs(table);
        self.push("gather", out, Op::Gather(table, ids.to_vec()), needs)
    }

    /// Single-row embedding lookup returned as a vector.
    pub fn lookup(&mut self, table: Var, id: usize) -> Result<Var> {
        self.row(table, id)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.tanh());
        let needs = self.needs(a);
        self.push("tanh", out, Op::Tanh(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| T::one() / (T::one() + (-x).exp()));
        let needs = self.needs(a);
        self.push("sigmoid", out, Op::Sigmoid(a), needs)
    }

    pub fn selu(&mut self, a: Var) -> Result<Var> {
        let (alpha, scale) = (T::of(SELU_ALPHA), T::of(SELU_SCALE));
        let out = self.map(a, |x| {
            if x > T::zero() {
                scale * x
            } else {
                scale * alpha * (x.exp() - T::one())
            }
        });
        let needs = self.needs(a);
        self.push("selu", out, Op::Selu(a), needs)
    }

    /// Softmax restricted to entries where `admissible` is true.
    ///
    /// Excluded entries behave as if an additive negative infinity had been
    /// applied to their score: their probability is exactly zero.
    pub fn masked_softmax(&mut self, a: Var, admissible: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if admissible.len() != ta.len() {
            return Err(Error::shape("masked_softmax", format!("mask {} vs {:?}", admissible.len(), ta.shape())));
        }
        let max = ta
            .data()
            .iter()
            .zip(admissible)
            .filter(|(_, &keep)| keep)
            .map(|(&x, _)| x)
            .fold(None, |m: Option<T>, x| Some(m.map_or(x, |m| m.max(x))));
        let Some(max) = max else {
            return Err(Error::shape("masked_softmax", "every entry is masked"));
        };
        let mut out: Vec<T> = ta
            .data()
            .iter()
            .zip(admissible)
            .map(|(&x, &keep)| if keep { (x - max).exp() } else { T::zero() })
            .collect();
        let z: T = out.iter().copied().sum();
        out.iter_mut().for_each(|p| *p = *p / z);
        let out = Tensor::from_vec(ta.shape(), out)?;
        let needs = self.needs(a);
        self.push("masked_softmax", out, Op::MaskedSoftmax(a), needs)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let keep = vec![true; self.value(a).len()];
        self.masked_softmax(a, &keep)
    }

    /// `-ln p[index]` as a one-element tensor.
    pub fn neg_log_at(&mut self, p: Var, index: usize) -> Result<Var> {
        let tp = self.value(p);
        if index >= tp.len() {
            return Err(Error::shape("neg_log_at", format!("index {} of {:?}", index, tp.shape())));
        }
        let out = Tensor::scalar(-tp.data()[index].ln());
        let needs = self.needs(p);
        self.push("neg_log_at", out, Op::NegLogAt(p, index), needs)
    }

    /// Sum of one-element tensors.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut total = T::zero();
        for &t in terms {
            if self.value(t).len() != 1 {
                return Err(Error::shape("sum_scalars", format!("{:?} is not a scalar", self.shape(t))));
            }
            total += self.value(t).data()[0];
        }
        let needs = terms.iter().any(|&t| self.needs(t));
        self.push("sum_scalars", Tensor::scalar(total), Op::Sum(terms.to_vec()), needs)
    }

    /// Inverted dropout. Identity unless the graph was created with dropout.
    pub fn dropout(&mut self, a: Var) -> Result<Var> {
        let Some(state) = self.dropout.as_mut() else {
            return Ok(a);
        };
        let keep = 1.0 - state.rate;
        let scale = T::of(1.0 / keep);
        let n = match &self.nodes[a.0].slot {
            Slot::Param(id) => self.table.value(*id).len(),
            Slot::Owned(t) => t.len(),
        };
        let mask: Vec<T> = (0..n)
            .map(|_| if state.rng.gen::<f64>() < keep { scale } else { T::zero() })
            .collect();
        self.stochastic = true;
        let ta = self.value(a);
        let out = Tensor::from_vec(
            ta.shape(),
            ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        )?;
        let needs = self.needs(a);
        self.push("dropout", out, Op::Dropout(a, mask), needs)
    }

    /// Valid 1-D convolution over the rows of `input` (L x d) with `filters`
    /// (F x width*d) and `bias` (F), followed by max pooling over positions.
    pub fn conv1d_max(&mut self, input: Var, filters: Var, bias: Var, width: usize) -> Result<Var> {
        let (ti, tf, tb) = (self.value(input), self.value(filters), self.value(bias));
        let (len, d) = (ti.rows(), ti.cols());
        let nf = tf.rows();
        if len < width || tf.cols() != width * d || tb.len() != nf {
            return Err(Error::shape(
                "conv1d_max",
                format!("input {:?}, filters {:?}, bias {:?}, width {}", ti.shape(), tf.shape(), tb.shape(), width),
            ));
        }
        let mut out = Vec::with_capacity(nf);
        let mut argmax = Vec::with_capacity(nf);
        for f in 0..nf {
            let w = tf.row(f);
            let mut best = T::neg_infinity();
            let mut best_j = 0;
            for j in 0..=len - width {
                let window = &ti.data()[j * d..(j + width) * d];
                let s: T = window.iter().zip(w).map(|(&a, &b)| a * b).sum::<T>() + tb.data()[f];
                if s > best {
                    best = s;
                    best_j = j;
                }
            }
            out.push(best);
            argmax.push(best_j);
        }
        let needs = self.needs(input) || self.needs(filters) || self.needs(bias);
        self.push(
            "conv1d_max",
            Tensor::vector(out),
            Op::Conv1dMax {
                input,
                filters,
                bias,
                width,
                argmax,
            },
            needs,
        )
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass. Only useful as a negative control for
    /// gradient checking.
    pub fn scale_gradient(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).clone();
        let needs = self.needs(a);
        self.push("scale_gradient", out, Op::GradScale(a, factor), needs)
    }

    /// Propagates `seed * d(root)` back through the tape, adding parameter
    /// gradients into `param_grads` (indexed by [`ParamId`]).
    pub fn backward(&self, root: Var, seed: T, param_grads: &mut [Tensor<T>]) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", format!("root {:?} is not a scalar", self.shape(root))));
        }
        if param_grads.len() != self.table.len() {
            return Err(Error::shape(
                "backward",
                format!("{} gradient buffers for {} parameters", param_grads.len(), self.table.len()),
            ));
        }
        let mut acc = Accumulator {
            graph: self,
            node_grads: (0..=root.0).map(|_| None).collect(),
            param_grads,
        };
        acc.node_grads[root.0] = Some(Tensor::scalar(seed));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = acc.node_grads[i].take() else {
                continue;
            };
            let gy = gy.data();
            let y = Var(i);
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Add(a, b) => {
                    acc.add(*a, |g| axpy(g, gy, T::one()));
                    acc.add(*b, |g| axpy(g, gy, T::one()));
                }
                Op::Sub(a, b) => {
                    acc.add(*a, |g| axpy(g, gy, T::one()));
                    acc.add(*b, |g| axpy(g, gy, -T::one()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    acc.add(*a, |g| {
                        for ((gi, &d), &x) in g.iter_mut().zip(gy).zip(vb) {
                            *gi += d * x;
                        }
                    });
                    acc.add(*b, |g| {
                        for ((gi, &d), &x) in g.iter_mut().zip(gy).zip(va) {
                            *gi += d * x;
                        }
                    });
                }
                Op::AddScalar(a, s) => {
                    acc.add(*a, |g| axpy(g, gy, T::one()));
                    let total: T = gy.iter().copied().sum();
                    acc.add(*s, |g| g[0] += total);
                }
                Op::AddRow(m, v) => {
                    acc.add(*m, |g| axpy(g, gy, T::one()));
                    let c = self.value(*v).len();
                    acc.add(*v, |g| {
                        for row in gy.chunks(c) {
                            axpy(g, row, T::one());
                        }
                    });
                }
                Op::ScaleRows(m, s) => {
                    let tm = self.value(*m);
                    let c = tm.cols();
                    let sv = self.value(*s).data();
                    acc.add(*m, |g| {
                        for (i, k) in sv.iter().enumerate() {
                            for (gi, &d) in g[i * c..(i + 1) * c].iter_mut().zip(&gy[i * c..(i + 1) * c]) {
                                *gi += d * *k;
                            }
                        }
                    });
                    acc.add(*s, |g| {
                        for (i, gi) in g.iter_mut().enumerate() {
                            *gi += dot(&gy[i * c..(i + 1) * c], tm.row(i));
                        }
                    });
                }
                Op::Scale(a, k) => acc.add(*a, |g| axpy(g, gy, *k)),
                Op::MatVec(w, x) => {
                    let (tw, tx) = (self.value(*w), self.value(*x));
                    let c = tw.cols();
                    acc.add(*w, |g| {
                        for (i, &d) in gy.iter().enumerate() {
                            if d != T::zero() {
                                axpy(&mut g[i * c..(i + 1) * c], tx.data(), d);
                            }
                        }
                    });
                    acc.add(*x, |g| {
                        for (i, &d) in gy.iter().enumerate() {
                            if d != T::zero() {
                                axpy(g, tw.row(i), d);
                            }
                        }
                    });
                }
                Op::VecMat(a, m) => {
                    let (ta, tm) = (self.value(*a), self.value(*m));
                    let c = tm.cols();
                    acc.add(*a, |g| {
                        for (i, gi) in g.iter_mut().enumerate() {
                            *gi += dot(gy, tm.row(i));
                        }
                    });
                    acc.add(*m, |g| {
                        for (i, &w) in ta.data().iter().enumerate() {
                            axpy(&mut g[i * c..(i + 1) * c], gy, w);
                        }
                    });
                }
                Op::MatMulT(x, w) => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (n, c, r) = (tx.rows(), tx.cols(), tw.rows());
                    acc.add(*x, |g| {
                        for k in 0..n {
                            let gk = &mut g[k * c..(k + 1) * c];
                            for j in 0..r {
                                axpy(gk, tw.row(j), gy[k * r + j]);
                            }
                        }
                    });
                    acc.add(*w, |g| {
                        for k in 0..n {
                            for j in 0..r {
                                axpy(&mut g[j * c..(j + 1) * c], tx.row(k), gy[k * r + j]);
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let l = self.value(p).len();
                        acc.add(p, |g| axpy(g, &gy[off..off + l], T::one()));
                        off += l;
                    }
                }
                Op::Slice(a, start) => {
                    let l = gy.len();
                    acc.add(*a, |g| axpy(&mut g[*start..*start + l], gy, T::one()));
                }
                Op::Row(m, i) => {
                    let c = gy.len();
                    acc.add(*m, |g| axpy(&mut g[i * c..(i + 1) * c], gy, T::one()));
                }
                Op::StackRows(rows) => {
                    let c = self.value(y).cols();
                    for (k, &r) in rows.iter().enumerate() {
                        acc.add(r, |g| axpy(g, &gy[k * c..(k + 1) * c], T::one()));
                    }
                }
                Op::Gather(table, ids) => {
                    let c = self.value(*table).cols();
                    acc.add(*table, |g| {
                        for (k, &id) in ids.iter().enumerate() {
                            axpy(&mut g[id * c..(id + 1) * c], &gy[k * c..(k + 1) * c], T::one());
                        }
                    });
                }
                Op::Tanh(a) => {
                    let out = self.value(y).data();
                    acc.add(*a, |g| {
                        for ((gi, &d), &t) in g.iter_mut().zip(gy).zip(out) {
                            *gi += d * (T::one() - t * t);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let out = self.value(y).data();
                    acc.add(*a, |g| {
                        for ((gi, &d), &s) in g.iter_mut().zip(gy).zip(out) {
                            *gi += d * s * (T::one() - s);
                        }
                    });
                }
                Op::Selu(a) => {
                    let (alpha, scale) = (T::of(SELU_ALPHA), T::of(SELU_SCALE));
                    let (inp, out) = (self.value(*a).data(), self.value(y).data());
                    acc.add(*a, |g| {
                        for (((gi, &d), &x), &o) in g.iter_mut().zip(gy).zip(inp).zip(out) {
                            let dydx = if x > T::zero() { scale } else { o + scale * alpha };
                            *gi += d * dydx;
                        }
                    });
                }
                Op::MaskedSoftmax(a) => {
                    let p = self.value(y).data();
                    let inner = dot(gy, p);
                    acc.add(*a, |g| {
                        for ((gi, &d), &pi) in g.iter_mut().zip(gy).zip(p) {
                            *gi += pi * (d - inner);
                        }
                    });
                }
                Op::NegLogAt(p, idx) => {
                    let pk = self.value(*p).data()[*idx];
                    if pk == T::zero() {
                        return Err(Error::NonFinite { op: "neg_log_at backward" });
                    }
                    acc.add(*p, |g| g[*idx] += -gy[0] / pk);
                }
                Op::Sum(terms) => {
                    for &t in terms {
                        acc.add(t, |g| g[0] += gy[0]);
                    }
                }
                Op::Dropout(a, mask) => {
                    acc.add(*a, |g| {
                        for ((gi, &d), &m) in g.iter_mut().zip(gy).zip(mask) {
                            *gi += d * m;
                        }
                    });
                }
                Op::Conv1dMax {
                    input,
                    filters,
                    bias,
                    width,
                    argmax,
                } => {
                    let (ti, tf) = (self.value(*input), self.value(*filters));
                    let d = ti.cols();
                    let span = width * d;
                    acc.add(*filters, |g| {
                        for (f, &j) in argmax.iter().enumerate() {
                            axpy(&mut g[f * span..(f + 1) * span], &ti.data()[j * d..j * d + span], gy[f]);
                        }
                    });
                    acc.add(*input, |g| {
                        for (f, &j) in argmax.iter().enumerate() {
                            axpy(&mut g[j * d..j * d + span], tf.row(f), gy[f]);
                        }
                    });
                    acc.add(*bias, |g| axpy(g, gy, T::one()));
                }
                Op::GradScale(a, k) => acc.add(*a, |g| axpy(g, gy, *k)),
            }
        }
        Ok(())
    }
}

struct Accumulator<'a, 'p, T: Real> {
    graph: &'a Graph<'p, T>,
    node_grads: Vec<Option<Tensor<T>>>,
    param_grads: &'a mut [Tensor<T>],
}

impl<T: Real> Accumulator<'_, '_, T> {
    fn add(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.graph.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &node.slot {
            Slot::Param(id) => f(self.param_grads[id.index()].data_mut()),
            Slot::Owned(t) => {
                let g = self.node_grads[v.0].get_or_insert_with(|| Tensor::zeros(t.shape()));
                f(g.data_mut());
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], x: &[T], a: T) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

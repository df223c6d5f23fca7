//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a flat arena of nodes created in topological order; a
//! [`Value`] is an index into it. Graphs are built fresh for every update
//! step and dropped afterwards - there is no cross-step taping.
//!
//! Determinism contract: backward walks nodes in descending creation order
//! and accumulates gradients in that fixed order, so two runs over the same
//! graph produce bit-identical gradients.

use crate::scalar::Real;
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, log_softmax_row, Tensor};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("clip bounds inverted: lo {lo} > hi {hi}")]
    ClipBounds { lo: f64, hi: f64 },
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

impl Value {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Neg(Value),
    AddConst(Value, F),
    Scale(Value, F),
    Exp(Value),
    Tanh(Value),
    Matmul(Value, Value),
    /// matrix [m,n] + row vector [n], broadcast over rows
    AddRow(Value, Value),
    /// row vector [n] tiled to [m,n]
    RepeatRow(Value, usize),
    /// column-wise concatenation of rank-2 tensors with equal row counts
    HConcat(Vec<Value>),
    /// row-wise log-softmax of [m,n]; `masked` column is excluded from the
    /// support (output -inf, zero gradient)
    LogSoftmaxRows(Value, Option<usize>),
    /// out[i] = input[i, idx[i]]
    GatherPerRow(Value, Vec<usize>),
    Sum(Value),
    Mean(Value),
    /// elementwise min; an exact tie splits the gradient evenly
    MinElem(Value, Value),
    /// elementwise clamp; boundary counts as inside (gradient 1)
    Clip(Value, F, F),
    /// identity value, blocked gradient; the input id is recorded for
    /// graph structure even though backward never visits it
    Detach(#[allow(dead_code)] Value),
    /// ordered sum of scalar nodes
    SumN(Vec<Value>),
}

#[derive(Debug, Clone)]
struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Reverse-mode tape. Single-threaded per graph; independent graphs may be
/// evaluated concurrently.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by [`Graph::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the root with respect to the given node, if it was
    /// reached during backward.
    pub fn get(&self, v: Value) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the leaf was never reached.
    pub fn of_leaf(&self, v: Value, shape: &[usize]) -> Tensor<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Graph { nodes: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Value {
        self.nodes.push(Node { op, value, requires_grad });
        Value(self.nodes.len() - 1)
    }

    /// Trainable or constant leaf. Leaf tensors are validated (finite) by
    /// `Tensor::new` at the call site.
    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Value {
        self.push(Op::Leaf, t, requires_grad)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor<F>) -> Value {
        self.leaf(t, false)
    }

    pub fn constant_scalar(&mut self, v: F) -> Value {
        self.leaf(Tensor::scalar(v), false)
    }

    fn unary(&mut self, a: Value, op: Op<F>, value: Tensor<F>) -> Value {
        let rg = self.nodes[a.0].requires_grad;
        self.push(op, value, rg)
    }

    fn binary(&mut self, a: Value, b: Value, op: Op<F>, value: Tensor<F>) -> Value {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        let t = self.zip(a, b, |x, y| x + y);
        self.binary(a, b, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        let t = self.zip(a, b, |x, y| x - y);
        self.binary(a, b, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        let t = self.zip(a, b, |x, y| x * y);
        self.binary(a, b, Op::Mul(a, b), t)
    }

    pub fn neg(&mut self, a: Value) -> Value {
        let t = self.nodes[a.0].value.map(|x| -x);
        self.unary(a, Op::Neg(a), t)
    }

    pub fn add_const(&mut self, a: Value, c: F) -> Value {
        let t = self.nodes[a.0].value.map(|x| x + c);
        self.unary(a, Op::AddConst(a, c), t)
    }

    pub fn scale(&mut self, a: Value, c: F) -> Value {
        let t = self.nodes[a.0].value.map(|x| x * c);
        self.unary(a, Op::Scale(a, c), t)
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let t = self.nodes[a.0].value.map(|x| x.exp());
        self.unary(a, Op::Exp(a), t)
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        let t = self.nodes[a.0].value.map(|x| x.tanh());
        self.unary(a, Op::Tanh(a), t)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let t = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.binary(a, b, Op::Matmul(a, b), t)
    }

    pub fn add_row(&mut self, a: Value, bias: Value) -> Value {
        let m = self.nodes[a.0].value.rows();
        let n = self.nodes[a.0].value.cols();
        let bv = &self.nodes[bias.0].value;
        assert_eq!(bv.numel(), n, "add_row bias length");
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = self.nodes[a.0].value.row(i);
            for j in 0..n {
                data.push(row[j] + bv.data()[j]);
            }
        }
        let t = Tensor::from_op(vec![m, n], data);
        self.binary(a, bias, Op::AddRow(a, bias), t)
    }

    pub fn repeat_row(&mut self, a: Value, m: usize) -> Value {
        let av = &self.nodes[a.0].value;
        let n = av.numel();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(av.data());
        }
        let t = Tensor::from_op(vec![m, n], data);
        self.unary(a, Op::RepeatRow(a, m), t)
    }

    pub fn hconcat(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let pv = &self.nodes[p.0].value;
                assert_eq!(pv.rows(), m, "hconcat row mismatch");
                data.extend_from_slice(pv.row(i));
            }
        }
        let t = Tensor::from_op(vec![m, total], data);
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Op::HConcat(parts.to_vec()), t, rg)
    }

    pub fn log_softmax_rows(&mut self, a: Value, masked: Option<usize>) -> Value {
        let av = &self.nodes[a.0].value;
        let (m, n) = (av.rows(), av.cols());
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            log_softmax_row(av.row(i), masked, &mut data[i * n..(i + 1) * n]);
        }
        let t = Tensor::from_op(vec![m, n], data);
        self.unary(a, Op::LogSoftmaxRows(a, masked), t)
    }

    pub fn gather_per_row(&mut self, a: Value, indices: Vec<usize>) -> Value {
        let av = &self.nodes[a.0].value;
        let m = av.rows();
        assert_eq!(indices.len(), m, "gather index count");
        let mut data = Vec::with_capacity(m);
        for (i, &j) in indices.iter().enumerate() {
            data.push(av.row(i)[j]);
        }
        let t = Tensor::from_op(vec![m], data);
        self.unary(a, Op::GatherPerRow(a, indices), t)
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let mut acc = F::zero();
        for &v in self.nodes[a.0].value.data() {
            acc = acc + v;
        }
        self.unary(a, Op::Sum(a), Tensor::scalar(acc))
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let n = self.nodes[a.0].value.numel();
        assert!(n > 0, "mean of empty tensor");
        let mut acc = F::zero();
        for &v in self.nodes[a.0].value.data() {
            acc = acc + v;
        }
        let t = Tensor::scalar(acc / F::from_usize(n).unwrap());
        self.unary(a, Op::Mean(a), t)
    }

    pub fn min_elem(&mut self, a: Value, b: Value) -> Value {
        let t = self.zip(a, b, |x, y| if x < y { x } else { y });
        self.binary(a, b, Op::MinElem(a, b), t)
    }

    pub fn clip(&mut self, a: Value, lo: F, hi: F) -> Result<Value, GraphError> {
        if lo > hi {
            return Err(GraphError::ClipBounds {
                lo: lo.to_f64().unwrap(),
                hi: hi.to_f64().unwrap(),
            });
        }
        let t = self.nodes[a.0].value.map(|x| {
            if x < lo {
                lo
            } else if x > hi {
                hi
            } else {
                x
            }
        });
        Ok(self.unary(a, Op::Clip(a, lo, hi), t))
    }

    /// Value passes through; gradient is blocked.
    pub fn detach(&mut self, a: Value) -> Value {
        let t = self.nodes[a.0].value.clone();
        self.push(Op::Detach(a), t, false)
    }

    /// Ordered sum of scalar-valued nodes.
    pub fn sum_nodes(&mut self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty());
        let mut acc = F::zero();
        for p in parts {
            debug_assert!(self.nodes[p.0].value.is_scalar());
            acc = acc + self.nodes[p.0].value.item();
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Op::SumN(parts.to_vec()), Tensor::scalar(acc), rg)
    }

    fn zip(&self, a: Value, b: Value, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_op(av.shape().to_vec(), data)
    }

    /// Reverse pass from a scalar root. Returns gradients for every reached
    /// node that requires grad; leaves can be read out via [`Gradients`].
    pub fn backward(&self, root: Value) -> Result<Gradients<F>, GraphError> {
        let root_t = &self.nodes[root.0].value;
        if !root_t.is_scalar() {
            return Err(GraphError::NonScalarRoot(root_t.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(F::one()));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate_inputs(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, g.clone(), grads);
                self.add_grad(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, g.clone(), grads);
                self.add_grad(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let ga = Tensor::from_op(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
                );
                let gb = Tensor::from_op(
                    g.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect(),
                );
                self.add_grad(*a, ga, grads);
                self.add_grad(*b, gb, grads);
            }
            Op::Neg(a) => self.add_grad(*a, g.map(|x| -x), grads),
            Op::AddConst(a, _) => self.add_grad(*a, g.clone(), grads),
            Op::Scale(a, c) => {
                let c = *c;
                self.add_grad(*a, g.map(|x| x * c), grads)
            }
            Op::Exp(a) => {
                let out = &node.value;
                let ga = Tensor::from_op(
                    g.shape().to_vec(),
                    g.data().iter().zip(out.data()).map(|(&x, &y)| x * y).collect(),
                );
                self.add_grad(*a, ga, grads);
            }
            Op::Tanh(a) => {
                let out = &node.value;
                let ga = Tensor::from_op(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&x, &y)| x * (F::one() - y * y))
                        .collect(),
                );
                self.add_grad(*a, ga, grads);
            }
            Op::Matmul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.nodes[a.0].requires_grad {
                    self.add_grad(*a, matmul_a_bt(g, bv), grads);
                }
                if self.nodes[b.0].requires_grad {
                    self.add_grad(*b, matmul_at_b(av, g), grads);
                }
            }
            Op::AddRow(a, bias) => {
                if self.nodes[a.0].requires_grad {
                    self.add_grad(*a, g.clone(), grads);
                }
                if self.nodes[bias.0].requires_grad {
                    let n = self.nodes[bias.0].value.numel();
                    let m = g.rows();
                    let mut col = vec![F::zero(); n];
                    for i in 0..m {
                        let row = g.row(i);
                        for j in 0..n {
                            col[j] = col[j] + row[j];
                        }
                    }
                    let shape = self.nodes[bias.0].value.shape().to_vec();
                    self.add_grad(*bias, Tensor::from_op(shape, col), grads);
                }
            }
            Op::RepeatRow(a, m) => {
                let n = self.nodes[a.0].value.numel();
                let mut acc = vec![F::zero(); n];
                for i in 0..*m {
                    let row = g.row(i);
                    for j in 0..n {
                        acc[j] = acc[j] + row[j];
                    }
                }
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.add_grad(*a, Tensor::from_op(shape, acc), grads);
            }
            Op::HConcat(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.cols();
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(m * n);
                        for i in 0..m {
                            let row = g.row(i);
                            data.extend_from_slice(&row[offset..offset + n]);
                        }
                        self.add_grad(*p, Tensor::from_op(vec![m, n], data), grads);
                    }
                    offset += n;
                }
            }
            Op::LogSoftmaxRows(a, masked) => {
                let out = &node.value;
                let (m, n) = (out.rows(), out.cols());
                let mut data = vec![F::zero(); m * n];
                for i in 0..m {
                    let grow = g.row(i);
                    let orow = out.row(i);
                    let mut gsum = F::zero();
                    for j in 0..n {
                        if Some(j) == *masked {
                            continue;
                        }
                        gsum = gsum + grow[j];
                    }
                    let drow = &mut data[i * n..(i + 1) * n];
                    for j in 0..n {
                        if Some(j) == *masked {
                            drow[j] = F::zero();
                        } else {
                            drow[j] = grow[j] - orow[j].exp() * gsum;
                        }
                    }
                }
                self.add_grad(*a, Tensor::from_op(vec![m, n], data), grads);
            }
            Op::GatherPerRow(a, indices) => {
                let av = &self.nodes[a.0].value;
                let (m, n) = (av.rows(), av.cols());
                let mut data = vec![F::zero(); m * n];
                for (i, &j) in indices.iter().enumerate() {
                    data[i * n + j] = g.data()[i];
                }
                self.add_grad(*a, Tensor::from_op(vec![m, n], data), grads);
            }
            Op::Sum(a) => {
                let gi = g.item();
                let shape = self.nodes[a.0].value.shape().to_vec();
                let n = self.nodes[a.0].value.numel();
                self.add_grad(*a, Tensor::from_op(shape, vec![gi; n]), grads);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let gi = g.item() / F::from_usize(n).unwrap();
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.add_grad(*a, Tensor::from_op(shape, vec![gi; n]), grads);
            }
            Op::MinElem(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let half = F::from_f64_c(0.5);
                let mut ga = vec![F::zero(); g.numel()];
                let mut gb = vec![F::zero(); g.numel()];
                for (i, &gv) in g.data().iter().enumerate() {
                    let (x, y) = (av.data()[i], bv.data()[i]);
                    if x < y {
                        ga[i] = gv;
                    } else if y < x {
                        gb[i] = gv;
                    } else {
                        ga[i] = gv * half;
                        gb[i] = gv * half;
                    }
                }
                self.add_grad(*a, Tensor::from_op(g.shape().to_vec(), ga), grads);
                self.add_grad(*b, Tensor::from_op(g.shape().to_vec(), gb), grads);
            }
            Op::Clip(a, lo, hi) => {
                let av = &self.nodes[a.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| if x >= *lo && x <= *hi { gv } else { F::zero() })
                    .collect();
                self.add_grad(*a, Tensor::from_op(g.shape().to_vec(), data), grads);
            }
            Op::Detach(_) => {}
            Op::SumN(parts) => {
                for p in parts {
                    self.add_grad(*p, g.clone(), grads);
                }
            }
        }
    }

    fn add_grad(&self, v: Value, g: Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                let data = acc.data_mut();
                for (d, &s) in data.iter_mut().zip(g.data()) {
                    *d = *d + s;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

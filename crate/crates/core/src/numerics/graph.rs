//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede it
//! and the backward pass is a single reverse sweep over the node list.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::{Gradients, NumericsError, Scalar, Tensor};

/// Index of a node within its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability floor used inside the log of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Pointwise binary operation for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Hadamard,
    Scale,
}

/// Right-hand side of [`Graph::elementwise`]: another node or a scalar.
#[derive(Clone, Copy, Debug)]
pub enum Operand<T> {
    Node(NodeId),
    Scalar(T),
}

/// Deliberate gradient-rule corruptions, used to prove that the gradient
/// checker actually detects broken backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the sigmoid derivative (breaks every GRU gate).
    SigmoidSignFlip,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// `mul * a + add`, pointwise.
    Affine { a: NodeId, mul: T },
    Sigmoid(NodeId),
    Elu(NodeId),
    Softmax(NodeId),
    CrossEntropy { q: NodeId, target: usize },
    Concat(Vec<NodeId>),
    Lookup { table: NodeId, index: usize },
    Sum(NodeId),
}

struct Node<'a, T: Scalar> {
    op: Op<T>,
    value: Cow<'a, Tensor<T>>,
}

/// A single-owner tape. Parameters and frozen tables are borrowed for `'a`
/// instead of copied, so building a graph per sentence stays cheap.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    params: BTreeMap<String, NodeId>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    // Branching keeps exp() from overflowing for large |x|.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn elu<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    fn push(&mut self, op: Op<T>, value: Cow<'a, Tensor<T>>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiated input owned by the graph.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Cow::Owned(value))
    }

    /// Non-differentiated input borrowed from the caller (e.g. a frozen table).
    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Cow::Borrowed(value))
    }

    /// Registers a trainable parameter; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, name: &str, value: &'a Tensor<T>) -> Result<NodeId, NumericsError> {
        if self.params.contains_key(name) {
            return Err(NumericsError::Contract(format!(
                "parameter {name} registered twice"
            )));
        }
        let id = self.push(Op::Param, Cow::Borrowed(value));
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`; a rank-1 right operand is a
    /// column vector and yields a rank-1 result.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape_err = || NumericsError::Shape {
            op: "matmul",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        };
        if av.rank() != 2 || !(bv.rank() == 1 || bv.rank() == 2) {
            return Err(shape_err());
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        if bv.shape()[0] != k {
            return Err(shape_err());
        }
        let n = if bv.rank() == 2 { bv.shape()[1] } else { 1 };
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let shape = if bv.rank() == 2 { vec![m, n] } else { vec![m] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MatMul(a, b), Cow::Owned(value)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumericsError::Shape {
                op: name,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), Cow::Owned(v)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), Cow::Owned(v)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.binary("hadamard", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Hadamard(a, b), Cow::Owned(v)))
    }

    /// Pointwise `mul * a + add`.
    pub fn affine(&mut self, a: NodeId, mul: T, add: T) -> NodeId {
        let v = self.value(a).map(|x| mul * x + add);
        self.push(Op::Affine { a, mul }, Cow::Owned(v))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        self.affine(a, factor, T::zero())
    }

    /// `1 - a`, pointwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -T::one(), T::one())
    }

    /// Dispatches a pointwise operation. Scalars broadcast; tensors must
    /// have identical shapes.
    pub fn elementwise(
        &mut self,
        op: ElementwiseOp,
        a: NodeId,
        b: Operand<T>,
    ) -> Result<NodeId, NumericsError> {
        match (op, b) {
            (ElementwiseOp::Add, Operand::Node(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Operand::Node(b)) => self.sub(a, b),
            (ElementwiseOp::Hadamard, Operand::Node(b)) => self.hadamard(a, b),
            (ElementwiseOp::Add, Operand::Scalar(c)) => Ok(self.affine(a, T::one(), c)),
            (ElementwiseOp::Sub, Operand::Scalar(c)) => Ok(self.affine(a, T::one(), -c)),
            (ElementwiseOp::Hadamard | ElementwiseOp::Scale, Operand::Scalar(c)) => {
                Ok(self.scale(a, c))
            }
            (ElementwiseOp::Scale, Operand::Node(_)) => Err(NumericsError::Contract(
                "scale expects a scalar operand".into(),
            )),
        }
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), Cow::Owned(v))
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(elu);
        self.push(Op::Elu(a), Cow::Owned(v))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let av = self.value(a);
        if av.rank() != 1 || av.is_empty() {
            return Err(NumericsError::Shape {
                op: "softmax",
                left: av.shape().to_vec(),
                right: vec![],
            });
        }
        let max = av.data().iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = av.data().iter().map(|&x| (x - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let v = Tensor::vector(exps.into_iter().map(|e| e / total).collect());
        Ok(self.push(Op::Softmax(a), Cow::Owned(v)))
    }

    /// `-ln(max(q[target], 1e-12))` for a probability vector `q`.
    pub fn cross_entropy(&mut self, q: NodeId, target: usize) -> Result<NodeId, NumericsError> {
        let qv = self.value(q);
        if qv.rank() != 1 {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                left: qv.shape().to_vec(),
                right: vec![],
            });
        }
        if target >= qv.len() {
            return Err(NumericsError::Index {
                op: "cross_entropy",
                index: target,
                bound: qv.len(),
            });
        }
        let p = qv.data()[target].max(T::from_f64(PROB_FLOOR));
        let v = Tensor::scalar(-p.ln());
        Ok(self.push(Op::CrossEntropy { q, target }, Cow::Owned(v)))
    }

    /// Concatenates along the last axis; all parts share rank and leading dims.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Contract("concat of zero tensors".into()));
        };
        let lead_shape = self.value(first).shape().to_vec();
        if lead_shape.is_empty() {
            return Err(NumericsError::Shape {
                op: "concat",
                left: lead_shape,
                right: vec![],
            });
        }
        let lead = &lead_shape[..lead_shape.len() - 1];
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead_shape.len() || &s[..s.len() - 1] != lead {
                return Err(NumericsError::Shape {
                    op: "concat",
                    left: lead_shape.clone(),
                    right: s.to_vec(),
                });
            }
        }
        let outer: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| *self.value(p).shape().last().unwrap())
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), Cow::Owned(v)))
    }

    /// Column `index` of a `[d, V]` table, as a length-`d` vector.
    pub fn lookup(&mut self, table: NodeId, index: usize) -> Result<NodeId, NumericsError> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(NumericsError::Shape {
                op: "lookup",
                left: tv.shape().to_vec(),
                right: vec![],
            });
        }
        let cols = tv.shape()[1];
        if index >= cols {
            return Err(NumericsError::Index {
                op: "lookup",
                index,
                bound: cols,
            });
        }
        let v = Tensor::vector(tv.column(index));
        Ok(self.push(Op::Lookup { table, index }, Cow::Owned(v)))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: T = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Cow::Owned(Tensor::scalar(total)))
    }

    /// Reverse sweep from a scalar `loss`. Returns a gradient for every
    /// registered parameter (zeros when the parameter did not influence the
    /// loss); plain leaves are skipped.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut Vec<T> {
            grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        let mut param_grads: BTreeMap<NodeId, Vec<T>> = BTreeMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    param_grads.insert(NodeId(idx), g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = if bv.rank() == 2 { bv.shape()[1] } else { 1 };
                    let (ad, bd) = (av.data(), bv.data());
                    {
                        let ga = slot(&mut grads, *a, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let mut acc = T::zero();
                                for (&gij, &bpj) in grow.iter().zip(brow) {
                                    acc += gij * bpj;
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    let gb = slot(&mut grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for (o, &gij) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gij;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    for (o, &x) in slot(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *o -= x;
                    }
                }
                Op::Hadamard(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    for ((o, &x), &y) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(bv) {
                        *o += x * y;
                    }
                    for ((o, &x), &y) in slot(&mut grads, *b, g.len()).iter_mut().zip(&g).zip(av) {
                        *o += x * y;
                    }
                }
                Op::Affine { a, mul, .. } => {
                    for (o, &x) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += *mul * x;
                    }
                }
                Op::Sigmoid(a) => {
                    let sign = match self.fault {
                        Some(Fault::SigmoidSignFlip) => -T::one(),
                        None => T::one(),
                    };
                    for ((o, &x), &y) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(out.data()) {
                        *o += sign * x * y * (T::one() - y);
                    }
                }
                Op::Elu(a) => {
                    let input = self.value(*a).data();
                    for (((o, &x), &y), &u) in slot(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .zip(out.data())
                        .zip(input)
                    {
                        let d = if u >= T::zero() { T::one() } else { y + T::one() };
                        *o += x * d;
                    }
                }
                Op::Softmax(a) => {
                    let q = out.data();
                    let dot: T = g.iter().zip(q).map(|(&x, &y)| x * y).sum();
                    for ((o, &x), &y) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(q) {
                        *o += y * (x - dot);
                    }
                }
                Op::CrossEntropy { q, target } => {
                    let qv = self.value(*q).data();
                    let p = qv[*target];
                    let gq = slot(&mut grads, *q, qv.len());
                    // Inside the clamped region the loss is flat.
                    if p >= T::from_f64(PROB_FLOOR) {
                        gq[*target] -= g[0] / p;
                    }
                }
                Op::Concat(parts) => {
                    let last = *out.shape().last().unwrap();
                    let outer = out.len().checked_div(last).unwrap_or(0);
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = *pv.shape().last().unwrap();
                        let gp = slot(&mut grads, p, pv.len());
                        for o in 0..outer {
                            add_into(
                                &mut gp[o * w..(o + 1) * w],
                                &g[o * last + offset..o * last + offset + w],
                            );
                        }
                        offset += w;
                    }
                }
                Op::Lookup { table, index } => {
                    let tv = self.value(*table);
                    let cols = tv.shape()[1];
                    let gt = slot(&mut grads, *table, tv.len());
                    for (row, &x) in g.iter().enumerate() {
                        gt[row * cols + index] += x;
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    for o in slot(&mut grads, *a, n).iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }

        let mut result = Gradients::new();
        for (name, &id) in &self.params {
            let value = self.value(id);
            let data = param_grads
                .remove(&id)
                .unwrap_or_else(|| vec![T::zero(); value.len()]);
            result.insert(name.clone(), Tensor::new(value.shape().to_vec(), data)?);
        }
        Ok(result)
    }
}

/// Free-function form of [`Graph::backward`].
pub fn backward<T: Scalar>(graph: &Graph<'_, T>, loss: NodeId) -> Result<Gradients<T>, NumericsError> {
    graph.backward(loss)
}

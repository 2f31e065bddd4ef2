//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] computes its value eagerly and appends a
//! node; [`Tape::backward`] walks the nodes once in reverse order. Inputs
//! always precede their consumers, so the node order is topological.

use crate::error::{shape_err, Error, Result};
use crate::ops::{activation, conv, linear, loss, pool, ConvSpec, PoolSpec, ResizePlan};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    ChannelL2(Var),
    SpatialSigmoid(Var),
    Conv3d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Resize { x: Var, plan: ResizePlan },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, ta: bool, b: Var, tb: bool },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Sum(a) | Mean(a) | Reshape(a) | Relu(a) | Sigmoid(a) | ChannelL2(a)
            | SpatialSigmoid(a) | GlobalAvgPool(a) => vec![*a],
            Conv3d { x, w, b, .. } | Linear { x, w, b } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            MaxPool { x, .. } | Resize { x, .. } => vec![*x],
            Bmm { a, b, .. } => vec![*a, *b],
            SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread of execution.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaves, indexed by node.
    leaf_grads: Vec<Option<Vec<f64>>>,
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

    /// Register an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Internal(format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let inputs = op.inputs();
        for &i in &inputs {
            self.check(i)?;
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{}: shapes {:?} and {:?} differ", what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), activation::relu_forward(t.data()))?;
        self.push(v, Op::Relu(a), "relu")
    }

    /// Logistic sigmoid; also the mixed attention activation.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), activation::mixed_attention_forward(t.data()))?;
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn channel_attention(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), activation::channel_attention_forward(t.data(), t.shape())?)?;
        self.push(v, Op::ChannelL2(a), "channel attention")
    }

    pub fn spatial_attention(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let v = Tensor::new(t.shape().to_vec(), activation::spatial_attention_forward(t.data(), t.shape())?)?;
        self.push(v, Op::SpatialSigmoid(a), "spatial attention")
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        conv::check_params(spec, self.shape(w), b.map(|b| self.shape(b)))?;
        let xt = self.value(x);
        let (data, shape) = conv::conv3d_forward(
            xt.data(),
            xt.shape(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            spec,
        )?;
        self.push(Tensor::new(shape, data)?, Op::Conv3d { x, w, b, spec: *spec }, "conv3d")
    }

    pub fn maxpool3d(&mut self, x: Var, spec: &PoolSpec) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (data, shape, argmax) = pool::maxpool3d_forward(t.data(), t.shape(), spec)?;
        self.push(Tensor::new(shape, data)?, Op::MaxPool { x, argmax }, "maxpool3d")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (data, shape) = pool::global_avg_pool_forward(t.data(), t.shape())?;
        self.push(Tensor::new(shape, data)?, Op::GlobalAvgPool(x), "global average pool")
    }

    pub fn resize(&mut self, x: Var, plan: ResizePlan) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (data, shape) = plan.forward(t.data(), t.shape())?;
        self.push(Tensor::new(shape, data)?, Op::Resize { x, plan }, "resize")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let (xt, wt) = (self.value(x), self.value(w));
        let (data, shape) = linear::linear_forward(xt.data(), xt.shape(), wt.data(), wt.shape(), b.map(|b| self.value(b).data()))?;
        self.push(Tensor::new(shape, data)?, Op::Linear { x, w, b }, "fully connected")
    }

    /// Batched product `op(a) op(b)` over rank-3 operands.
    pub fn bmm(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let (data, shape) = linear::bmm_forward(at.data(), at.shape(), ta, bt.data(), bt.shape(), tb)?;
        self.push(Tensor::new(shape, data)?, Op::Bmm { a, ta, b, tb }, "bmm")
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let t = self.value(logits);
        let (l, probs) = loss::softmax_cross_entropy_forward(t.data(), t.shape(), labels)?;
        self.push(
            Tensor::scalar(l),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
            "cross-entropy",
        )
    }

    /// Accumulate `d root / d leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.value(root).len() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient {} at node {} (flat {})", g[bad], i, bad)));
            }
            if matches!(node.op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(Error::Internal(format!("node {} consumes later node {}: cycle", i, input.0)));
                }
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Lazily allocated, zero-initialised accumulator for input `v`.
        fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if wants(*b) {
                    slot(adj, nodes, *b).iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    slot(adj, nodes, *a).iter_mut().zip(g).zip(other).for_each(|((d, g), o)| *d += g * o);
                }
                if wants(*b) {
                    let other = val(*a).data();
                    slot(adj, nodes, *b).iter_mut().zip(g).zip(other).for_each(|((d, g), o)| *d += g * o);
                }
            }
            Op::Scale(a, k) => {
                if wants(*a) {
                    slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(d, g)| *d += k * g);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if wants(*a) {
                    slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    slot(adj, nodes, *a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let k = g[0] / val(*a).len() as f64;
                    slot(adj, nodes, *a).iter_mut().for_each(|d| *d += k);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    activation::relu_backward(x, g, slot(adj, nodes, *a));
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    activation::sigmoid_backward(out.data(), g, slot(adj, nodes, *a));
                }
            }
            Op::ChannelL2(a) => {
                if wants(*a) {
                    let x = val(*a);
                    activation::channel_attention_backward(x.data(), out.data(), x.shape(), g, slot(adj, nodes, *a))?;
                }
            }
            Op::SpatialSigmoid(a) => {
                if wants(*a) {
                    let x = val(*a);
                    activation::spatial_attention_backward(x.data(), out.data(), x.shape(), g, slot(adj, nodes, *a))?;
                }
            }
            Op::Conv3d { x, w, b, spec } => {
                let (xt, wt) = (val(*x), val(*w));
                // Take the accumulators out so several may be borrowed at once.
                let mut dx = wants(*x).then(|| slot(adj, nodes, *x).split_off(0));
                let mut dw = wants(*w).then(|| slot(adj, nodes, *w).split_off(0));
                let mut db = b.filter(|b| wants(*b)).map(|b| slot(adj, nodes, b).split_off(0));
                conv::conv3d_backward(
                    xt.data(),
                    xt.shape(),
                    wt.data(),
                    spec,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                )?;
                if let Some(d) = dx {
                    adj[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    adj[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    adj[b.0] = Some(d);
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    pool::maxpool3d_backward(argmax, g, slot(adj, nodes, *x));
                }
            }
            Op::GlobalAvgPool(x) => {
                if wants(*x) {
                    let shape = val(*x).shape();
                    pool::global_avg_pool_backward(shape, g, slot(adj, nodes, *x));
                }
            }
            Op::Resize { x, plan } => {
                if wants(*x) {
                    let s = val(*x).shape();
                    plan.backward(s[0] * s[1], g, slot(adj, nodes, *x));
                }
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (val(*x), val(*w));
                let mut dx = wants(*x).then(|| slot(adj, nodes, *x).split_off(0));
                let mut dw = wants(*w).then(|| slot(adj, nodes, *w).split_off(0));
                let mut db = b.filter(|b| wants(*b)).map(|b| slot(adj, nodes, b).split_off(0));
                linear::linear_backward(
                    xt.data(),
                    xt.shape(),
                    wt.data(),
                    wt.shape(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                )?;
                if let Some(d) = dx {
                    adj[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    adj[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    adj[b.0] = Some(d);
                }
            }
            Op::Bmm { a, ta, b, tb } => {
                let (at, bt) = (val(*a), val(*b));
                let mut da = wants(*a).then(|| slot(adj, nodes, *a).split_off(0));
                let mut db = wants(*b).then(|| slot(adj, nodes, *b).split_off(0));
                if a == b {
                    // Same operand on both sides: accumulate the two contributions separately.
                    let mut second = da.as_ref().map(|d| vec![0.0; d.len()]);
                    linear::bmm_backward(at.data(), at.shape(), *ta, bt.data(), bt.shape(), *tb, g, da.as_deref_mut(), second.as_deref_mut())?;
                    if let (Some(d), Some(s)) = (da.as_mut(), second) {
                        d.iter_mut().zip(s).for_each(|(d, s)| *d += s);
                    }
                    db = None;
                } else {
                    linear::bmm_backward(at.data(), at.shape(), *ta, bt.data(), bt.shape(), *tb, g, da.as_deref_mut(), db.as_deref_mut())?;
                }
                if let Some(d) = da {
                    adj[a.0] = Some(d);
                }
                if let Some(d) = db {
                    adj[b.0] = Some(d);
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                if wants(*logits) {
                    let k = val(*logits).shape()[1];
                    loss::softmax_cross_entropy_backward(probs, k, labels, g[0], slot(adj, nodes, *logits));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_values_and_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let b = t.leaf(Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap(), false);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0, 22.0, 33.0]);
        let d = t.leaf(Tensor::ones(&[2]), false);
        assert!(matches!(t.add(a, d), Err(Error::Shape(_))));
        let ones = t.constant(Tensor::ones(&[3]));
        let e = t.mul(a, ones).unwrap();
        assert_eq!(t.value(e), t.value(a));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = t.sum(a).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(3.0), true);
        let sq = t.mul(a, a).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[6.0]);
    }

    #[test]
    fn fan_out_accumulates_and_repeat_doubles() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_fn(&[4], |i| i as f64 - 1.5), true);
        let b = t.add(a, a).unwrap();
        let s = t.sum(b).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[2.0; 4]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[4.0; 4]);
        t.zero_grad();
        assert!(t.grad(a).is_none());
    }

    #[test]
    fn non_scalar_root_is_rank_error() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(t.backward(a), Err(Error::Rank(_))));
    }

    #[test]
    fn non_finite_forward_aborts() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(f64::MAX), true);
        assert!(matches!(t.scale(a, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn bmm_with_shared_operand() {
        // f = sum(A^T A) for A 2x2 -> df/dA = 2 * A * (ones)
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let g = t.bmm(a, true, a, false).unwrap();
        let s = t.sum(g).unwrap();
        t.backward(s).unwrap();
        // d/dA_ij sum_{kl} sum_p A_pk A_pl = 2 * sum_l A_il
        assert_eq!(t.grad(a).unwrap(), &[6.0, 6.0, 14.0, 14.0]);
    }
}

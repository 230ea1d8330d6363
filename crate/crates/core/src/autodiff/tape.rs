//! Reverse-mode differentiation over a per-step operation tape.
//!
//! The graph is rebuilt for every training step and dropped after
//! `backward`; parameter arrays enter as shared leaves so that repeated
//! forwards on one tape accumulate their gradients in a single slot.

use std::sync::Arc;

use super::array::{self, Array};
use super::AdError;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Primitive tag. Attributes that are not differentiated (scale factors,
/// clip bounds, gather indices, target shapes) ride along with the tag.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    /// `[m,k] @ [k,n]`.
    MatMul,
    /// Elementwise addition; one operand may be scalar-shaped.
    Add,
    /// Elementwise multiplication; one operand may be scalar-shaped.
    Mul,
    /// Multiplication by a compile-time constant.
    Scale(f64),
    Exp,
    /// Natural log; rejects non-positive inputs.
    Log,
    /// Softmax along the last axis.
    Softmax,
    /// Log-softmax along the last axis.
    LogSoftmax,
    /// Picks one entry per row along the last axis.
    Gather(Vec<usize>),
    /// Sum of all entries, producing a scalar.
    Sum,
    /// Mean of all entries, producing a scalar.
    Mean,
    /// Unit L2 norm along the last axis; rejects zero-norm rows.
    L2Normalize,
    /// Clamp to `[lo, hi]`. The subgradient is 1 on the closed interval
    /// (pass-through at the exact boundary) and 0 outside.
    Clip { lo: f64, hi: f64 },
    /// Full inner product of two same-shape arrays, producing a scalar.
    InnerProduct,
    Tanh,
    /// 2-D transpose.
    Transpose,
    /// Same data, new shape with equal element count.
    Reshape(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "elementwise-multiply",
            Op::Scale(_) => "scalar-scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softmax => "softmax-last-axis",
            Op::LogSoftmax => "log-softmax-last-axis",
            Op::Gather(_) => "gather-index",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::L2Normalize => "l2-normalize-last-axis",
            Op::Clip { .. } => "clip",
            Op::InnerProduct => "inner-product",
            Op::Tanh => "tanh",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    value: Arc<Array>,
    grad: Option<Array>,
    op: Op,
    parents: Vec<NodeId>,
}

/// Wengert-list tape. Single-threaded by construction; build one per
/// thread for evaluation-only workloads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers a shared array as a leaf. Cloning the `Arc` is cheap, so
    /// parameters can be bound to many tapes without copying.
    pub fn leaf(&mut self, value: Arc<Array>) -> NodeId {
        self.push(value, Op::Leaf, vec![])
    }

    /// Registers an owned array as a leaf.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.leaf(Arc::new(value))
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn value_arc(&self, id: NodeId) -> Arc<Array> {
        Arc::clone(&self.nodes[id.0].value)
    }

    /// Accumulated gradient of a node; `None` means no backward pass has
    /// touched it (identically zero).
    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Arc<Array>, op: Op, parents: Vec<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            parents,
        });
        id
    }

    fn shape_err(op: &Op, detail: String) -> AdError {
        AdError::ShapeMismatch {
            op: op.name(),
            detail,
        }
    }

    /// Applies a primitive to the given inputs, recording the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, AdError> {
        let arity = match op {
            Op::MatMul | Op::Add | Op::Mul | Op::InnerProduct => 2,
            Op::Leaf => {
                return Err(Self::shape_err(&op, "leaf takes no inputs; use leaf()".into()))
            }
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Self::shape_err(
                &op,
                format!("expected {arity} inputs, got {}", inputs.len()),
            ));
        }
        let value = self.eval(&op, inputs)?;
        Ok(self.push(Arc::new(value), op, inputs.to_vec()))
    }

    fn eval(&self, op: &Op, inputs: &[NodeId]) -> Result<Array, AdError> {
        let v = |i: usize| self.value(inputs[i]);
        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul => {
                let (a, b) = (v(0), v(1));
                if a.shape().len() != 2 || b.shape().len() != 2 {
                    return Err(Self::shape_err(
                        op,
                        format!("need rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
                    ));
                }
                if a.shape()[1] != b.shape()[0] {
                    return Err(Self::shape_err(
                        op,
                        format!("inner dims differ: {:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                Ok(array::mm_nn(a, b))
            }
            Op::Add | Op::Mul => {
                let (a, b) = (v(0), v(1));
                let ok = a.shape() == b.shape() || a.is_scalar() || b.is_scalar();
                if !ok {
                    return Err(Self::shape_err(
                        op,
                        format!(
                            "shapes {:?} and {:?} must match or one must be scalar",
                            a.shape(),
                            b.shape()
                        ),
                    ));
                }
                let f = |x: f64, y: f64| match op {
                    Op::Add => x + y,
                    _ => x * y,
                };
                Ok(if a.shape() == b.shape() {
                    array::ew_binary(a, b, f)
                } else if b.is_scalar() {
                    array::ew_scalar(a, b.item(), f)
                } else {
                    array::ew_scalar(b, a.item(), |x, s| f(s, x))
                })
            }
            Op::Scale(c) => Ok(array::ew_unary(v(0), |x| c * x)),
            Op::Exp => Ok(array::ew_unary(v(0), f64::exp)),
            Op::Log => {
                let a = v(0);
                if a.data().iter().any(|&x| x <= 0.0) {
                    return Err(AdError::NonPositiveInput { op: "log" });
                }
                Ok(array::ew_unary(a, f64::ln))
            }
            Op::Softmax => Ok(array::softmax_last(v(0))),
            Op::LogSoftmax => Ok(array::log_softmax_last(v(0))),
            Op::Gather(idx) => {
                let a = v(0);
                if a.shape().is_empty() {
                    return Err(Self::shape_err(op, "gather needs rank >= 1".into()));
                }
                if idx.len() != a.rows() {
                    return Err(Self::shape_err(
                        op,
                        format!("{} indices for {} rows", idx.len(), a.rows()),
                    ));
                }
                array::gather_last(a, idx)
            }
            Op::Sum => Ok(Array::scalar(array::sum_all(v(0)))),
            Op::Mean => {
                let a = v(0);
                if a.is_empty() {
                    return Err(Self::shape_err(op, "mean of empty array".into()));
                }
                Ok(Array::scalar(array::sum_all(a) / a.len() as f64))
            }
            Op::L2Normalize => array::l2_normalize_last(v(0)),
            Op::Clip { lo, hi } => {
                if lo > hi {
                    return Err(Self::shape_err(op, format!("lo {lo} > hi {hi}")));
                }
                Ok(array::clip_vals(v(0), *lo, *hi))
            }
            Op::InnerProduct => {
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return Err(Self::shape_err(
                        op,
                        format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
                    ));
                }
                Ok(Array::scalar(array::inner(a, b)))
            }
            Op::Tanh => Ok(array::ew_unary(v(0), f64::tanh)),
            Op::Transpose => {
                let a = v(0);
                if a.shape().len() != 2 {
                    return Err(Self::shape_err(
                        op,
                        format!("need rank-2 operand, got {:?}", a.shape()),
                    ));
                }
                Ok(array::transpose(a))
            }
            Op::Reshape(shape) => {
                let a = v(0);
                if shape.iter().product::<usize>() != a.len() {
                    return Err(Self::shape_err(
                        op,
                        format!("cannot reshape {:?} to {:?}", a.shape(), shape),
                    ));
                }
                Ok(Array::from_parts(shape.clone(), a.data().to_vec()))
            }
        }
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AdError> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::Log, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::LogSoftmax, &[a])
    }

    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId, AdError> {
        self.apply(Op::Gather(idx), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::Mean, &[a])
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::L2Normalize, &[a])
    }

    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, AdError> {
        self.apply(Op::Clip { lo, hi }, &[a])
    }

    pub fn inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::InnerProduct, &[a, b])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, AdError> {
        self.apply(Op::Reshape(shape), &[a])
    }

    /// Subtraction helper built from the primitive set.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Propagates `d loss / d node` to every node reachable from `loss` and
    /// adds the result into each node's persistent gradient. Calling twice
    /// without re-tracing accumulates a second, bit-identical contribution.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AdError> {
        if !self.value(loss).is_scalar() {
            return Err(AdError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut adj: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Array::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
            let slot = &mut self.nodes[i].grad;
            match slot {
                Some(acc) => array::add_assign(acc, &g),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Routes the adjoint `g` of node `i` to its parents.
    fn propagate(&self, i: usize, g: &Array, adj: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let parent = |k: usize| &*self.nodes[node.parents[k].0].value;
        let acc = |k: usize, contrib: Array, adj: &mut [Option<Array>]| {
            let pid = node.parents[k].0;
            match &mut adj[pid] {
                Some(a) => array::add_assign(a, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                acc(0, array::mm_nt(g, parent(1)), adj);
                acc(1, array::mm_tn(parent(0), g), adj);
            }
            Op::Add => {
                for k in 0..2 {
                    let p = parent(k);
                    if p.shape() == g.shape() {
                        acc(k, g.clone(), adj);
                    } else {
                        acc(k, Array::scalar(array::sum_all(g)), adj);
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (parent(0), parent(1));
                if a.shape() == b.shape() {
                    acc(0, array::ew_binary(g, b, |x, y| x * y), adj);
                    acc(1, array::ew_binary(g, a, |x, y| x * y), adj);
                } else if b.is_scalar() {
                    acc(0, array::ew_scalar(g, b.item(), |x, s| x * s), adj);
                    acc(1, Array::scalar(array::inner(g, a)), adj);
                } else {
                    acc(0, Array::scalar(array::inner(g, b)), adj);
                    acc(1, array::ew_scalar(g, a.item(), |x, s| x * s), adj);
                }
            }
            Op::Scale(c) => acc(0, array::ew_scalar(g, *c, |x, s| x * s), adj),
            Op::Exp => acc(0, array::ew_binary(g, &node.value, |x, y| x * y), adj),
            Op::Log => acc(0, array::ew_binary(g, parent(0), |x, y| x / y), adj),
            Op::Softmax => {
                // dx = y * (g - <g, y>) per row, y = softmax(x).
                let y = &*node.value;
                let cols = y.last_dim();
                let mut out = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, &yv), &gv) in out[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(yr)
                        .zip(gr)
                    {
                        *o = yv * (gv - s);
                    }
                }
                acc(0, Array::from_parts(y.shape().to_vec(), out), adj);
            }
            Op::LogSoftmax => {
                // dx = g - softmax(x) * sum(g) per row; softmax = exp(value).
                let y = &*node.value;
                let cols = y.last_dim();
                let mut out = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let s: f64 = gr.iter().sum();
                    for ((o, &yv), &gv) in out[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(yr)
                        .zip(gr)
                    {
                        *o = gv - yv.exp() * s;
                    }
                }
                acc(0, Array::from_parts(y.shape().to_vec(), out), adj);
            }
            Op::Gather(idx) => {
                let p = parent(0);
                let cols = p.last_dim();
                let mut out = Array::zeros(p.shape());
                for (r, &i) in idx.iter().enumerate() {
                    out.data_mut()[r * cols + i] += g.data()[r];
                }
                acc(0, out, adj);
            }
            Op::Sum => {
                let p = parent(0);
                let gs = g.item();
                acc(0, array::ew_unary(p, |_| gs), adj);
            }
            Op::Mean => {
                let p = parent(0);
                let gs = g.item() / p.len() as f64;
                acc(0, array::ew_unary(p, |_| gs), adj);
            }
            Op::L2Normalize => {
                // dx = (g - <g, y> y) / |x| per row, y = x / |x|.
                let y = &*node.value;
                let norms = array::row_norms(parent(0));
                let cols = y.last_dim();
                let mut out = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, &yv), &gv) in out[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(yr)
                        .zip(gr)
                    {
                        *o = (gv - s * yv) / norms[r];
                    }
                }
                acc(0, Array::from_parts(y.shape().to_vec(), out), adj);
            }
            Op::Clip { lo, hi } => {
                let contrib = array::ew_binary(g, parent(0), |gv, x| {
                    if x >= *lo && x <= *hi {
                        gv
                    } else {
                        0.0
                    }
                });
                acc(0, contrib, adj);
            }
            Op::InnerProduct => {
                let gs = g.item();
                acc(0, array::ew_scalar(parent(1), gs, |x, s| x * s), adj);
                acc(1, array::ew_scalar(parent(0), gs, |x, s| x * s), adj);
            }
            Op::Tanh => {
                acc(
                    0,
                    array::ew_binary(g, &node.value, |gv, y| gv * (1.0 - y * y)),
                    adj,
                );
            }
            Op::Transpose => acc(0, array::transpose(g), adj),
            Op::Reshape(_) => {
                let p = parent(0);
                acc(
                    0,
                    Array::from_parts(p.shape().to_vec(), g.data().to_vec()),
                    adj,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        tape.constant(Array::new(shape, data).unwrap())
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_saturated_clip_is_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![], vec![2.0]);
        let c = tape.clip(x, 0.0, 1.0).unwrap();
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 0.0);
    }

    #[test]
    fn clip_boundary_passes_gradient_through() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![], vec![1.0]);
        let c = tape.clip(x, 0.0, 1.0).unwrap();
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(AdError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn backward_twice_accumulates_exactly_double() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.3, -1.2, 2.0]);
        let e = tape.exp(x).unwrap();
        let n = tape.l2_normalize(e).unwrap();
        let loss = tape.sum(n).unwrap();
        tape.backward(loss).unwrap();
        let once = tape.grad(x).unwrap().clone();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 0.0]);
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn matmul_shape_mismatch_is_diagnosed() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn add_broadcasts_scalar_only() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0; 4]);
        let s = leaf(&mut tape, vec![], vec![2.0]);
        let b = leaf(&mut tape, vec![4], vec![1.0; 4]);
        let out = tape.add(a, s).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0; 4]);
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn gather_checks_range() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = tape.gather(a, vec![2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0]);
        assert!(tape.gather(a, vec![3, 0]).is_err());
    }

    #[test]
    fn gather_backward_scatters() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let g = tape.gather(a, vec![1, 1]).unwrap();
        let loss = tape.sum(g).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}

//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records a program as a vector of nodes in construction order,
//! which is already a topological order, so the backward pass is a single
//! reverse sweep. Values are computed eagerly at recording time; calling
//! [`Tape::backward`] on a scalar node returns the gradient of that scalar
//! with respect to every trainable leaf.
//!
//! Gradients only flow where they are needed: a node is marked `needs_grad`
//! if any of its inputs is, and the backward rules skip gradient computation
//! into constant subtrees. With a frozen backbone this saves roughly a third
//! of the backward arithmetic.
//!
//! Shape misuse panics immediately at recording time with the offending
//! dimensions; a non-scalar backward target is a recoverable contract error
//! because it is a plausible caller mistake rather than a corrupted program.

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a · b`
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product of same-shaped tensors.
    Mul(NodeId, NodeId),
    /// `a[m x n] * v[1 x n]`, broadcast over rows.
    MulRowVec(NodeId, NodeId),
    /// `a[m x n] + v[1 x n]`, broadcast over rows.
    AddRowVec(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    /// `ln(max(x, LOG_CLAMP))`; zero gradient below the clamp.
    Log(NodeId),
    SoftmaxRows(NodeId),
    /// Column means: `[m x n] -> [1 x n]`.
    MeanRows(NodeId),
    /// Sum of all entries: `-> [1 x 1]`.
    SumAll(NodeId),
    /// Sum of squared entries: `-> [1 x 1]`.
    SquaredL2(NodeId),
    /// Rows of `a` stacked above rows of `b`.
    ConcatRows(NodeId, NodeId),
    /// Row selection, possibly with repeats; backward scatter-adds.
    GatherRows(NodeId, Vec<usize>),
    /// Cosine similarity of two same-shaped tensors viewed as flat vectors.
    Cosine(NodeId, NodeId),
}

/// Values below this are clamped inside [`Tape::log`].
pub const LOG_CLAMP: f64 = 1e-12;

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of one backward pass, addressable by leaf id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    trainable: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to a trainable leaf.
    ///
    /// Returns `None` for constants, non-leaf nodes, and trainable leaves the
    /// loss does not depend on.
    #[must_use]
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        if self.trainable[id.0] {
            self.grads[id.0].as_ref()
        } else {
            None
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[must_use]
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1 x 1` node.
    #[must_use]
    pub fn item(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// A trainable leaf; [`Gradients::get`] will report its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::Matmul(a, b), value, self.needs(a) || self.needs(b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value, self.needs(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut value = va.clone();
        value.axpy(1.0, vb);
        self.push(Op::Add(a, b), value, self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let mut value = va.clone();
        value.axpy(-1.0, vb);
        self.push(Op::Sub(a, b), value, self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let mut value = va.clone();
        for (x, y) in value.data_mut().iter_mut().zip(vb.data()) {
            *x *= y;
        }
        self.push(Op::Mul(a, b), value, self.needs(a) || self.needs(b))
    }

    pub fn mul_rowvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (va, vv) = (self.value(a), self.value(v));
        assert_eq!(vv.rows(), 1, "mul_rowvec: v must be a row vector");
        assert_eq!(va.cols(), vv.cols(), "mul_rowvec width mismatch");
        let mut value = va.clone();
        let cols = vv.cols();
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            for (x, y) in row.iter_mut().zip(&vv.data()[..cols]) {
                *x *= y;
            }
        }
        self.push(Op::MulRowVec(a, v), value, self.needs(a) || self.needs(v))
    }

    pub fn add_rowvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (va, vv) = (self.value(a), self.value(v));
        assert_eq!(vv.rows(), 1, "add_rowvec: v must be a row vector");
        assert_eq!(va.cols(), vv.cols(), "add_rowvec width mismatch");
        let mut value = va.clone();
        let cols = vv.cols();
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            for (x, y) in row.iter_mut().zip(&vv.data()[..cols]) {
                *x += y;
            }
        }
        self.push(Op::AddRowVec(a, v), value, self.needs(a) || self.needs(v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        assert!(c.is_finite(), "scale factor must be finite");
        let mut value = self.value(a).clone();
        value.scale_in_place(c);
        self.push(Op::Scale(a, c), value, self.needs(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = v.tanh();
        }
        self.push(Op::Tanh(a), value, self.needs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = sigmoid(*v);
        }
        self.push(Op::Sigmoid(a), value, self.needs(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = v.exp();
        }
        self.push(Op::Exp(a), value, self.needs(a))
    }

    /// Natural log with the argument clamped at [`LOG_CLAMP`].
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = v.max(LOG_CLAMP).ln();
        }
        self.push(Op::Log(a), value, self.needs(a))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), value, self.needs(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (m, n) = va.shape();
        assert!(m > 0, "mean_rows of empty tensor");
        let mut out = Tensor::zeros(1, n);
        for i in 0..m {
            out.axpy(1.0, &Tensor::new(1, n, va.row_slice(i).to_vec()).expect("finite row"));
        }
        out.scale_in_place(1.0 / m as f64);
        self.push(Op::MeanRows(a), out, self.needs(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s), self.needs(a))
    }

    pub fn squared_l2(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Op::SquaredL2(a), Tensor::scalar(s), self.needs(a))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = Tensor::vstack(&[self.value(a), self.value(b)])
            .expect("concat_rows column mismatch");
        self.push(Op::ConcatRows(a, b), value, self.needs(a) || self.needs(b))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let (m, n) = va.shape();
        let mut out = Tensor::zeros(indices.len(), n);
        for (r, &idx) in indices.iter().enumerate() {
            assert!(idx < m, "gather_rows index {idx} out of bounds for {m} rows");
            out.row_slice_mut(r).copy_from_slice(va.row_slice(idx));
        }
        self.push(Op::GatherRows(a, indices), out, self.needs(a))
    }

    /// Cosine similarity; panics if either input has norm below `1e-12`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "cosine shape mismatch");
        let c = crate::tensor::cosine(va.data(), vb.data())
            .expect("cosine of degenerate vector on tape");
        self.push(Op::Cosine(a, b), Tensor::scalar(c), self.needs(a) || self.needs(b))
    }

    /// Reverse sweep from a scalar node.
    ///
    /// Errors if `loss` is not `1 x 1` or its value is not finite.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        lv.validate_finite("backward target")?;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            // Leaf gradients stay; interior gradients were consumed above.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let trainable = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.needs_grad)
            .collect();
        Ok(Gradients { grads, trainable })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.needs(*b) {
                    accum(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    accum(grads, *a, g.transpose());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let mut gb = g.clone();
                    gb.scale_in_place(-1.0);
                    accum(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *x *= y;
                    }
                    accum(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = g.clone();
                    for (x, y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= y;
                    }
                    accum(grads, *b, gb);
                }
            }
            Op::MulRowVec(a, v) => {
                let vv = self.value(*v);
                let cols = vv.cols();
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let row = ga.row_slice_mut(r);
                        for (x, y) in row.iter_mut().zip(&vv.data()[..cols]) {
                            *x *= y;
                        }
                    }
                    accum(grads, *a, ga);
                }
                if self.needs(*v) {
                    let va = self.value(*a);
                    let mut gv = Tensor::zeros(1, cols);
                    for r in 0..va.rows() {
                        for (j, out) in gv.data_mut().iter_mut().enumerate() {
                            *out += g.at(r, j) * va.at(r, j);
                        }
                    }
                    accum(grads, *v, gv);
                }
            }
            Op::AddRowVec(a, v) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*v) {
                    let cols = g.cols();
                    let mut gv = Tensor::zeros(1, cols);
                    for r in 0..g.rows() {
                        for (j, out) in gv.data_mut().iter_mut().enumerate() {
                            *out += g.at(r, j);
                        }
                    }
                    accum(grads, *v, gv);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let mut ga = g.clone();
                    ga.scale_in_place(*c);
                    accum(grads, *a, ga);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= 1.0 - y * y;
                    }
                    accum(grads, *a, ga);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (x, s) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= s * (1.0 - s);
                    }
                    accum(grads, *a, ga);
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= y;
                    }
                    accum(grads, *a, ga);
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x = if *y > LOG_CLAMP { *x / *y } else { 0.0 };
                    }
                    accum(grads, *a, ga);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let out = ga.row_slice_mut(r);
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accum(grads, *a, ga);
                }
            }
            Op::MeanRows(a) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    let inv = 1.0 / m as f64;
                    let mut ga = Tensor::zeros(m, n);
                    for r in 0..m {
                        let row = ga.row_slice_mut(r);
                        for (x, y) in row.iter_mut().zip(g.data()) {
                            *x = y * inv;
                        }
                    }
                    accum(grads, *a, ga);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    accum(grads, *a, Tensor::filled(m, n, g.item()));
                }
            }
            Op::SquaredL2(a) => {
                if self.needs(*a) {
                    let mut ga = self.value(*a).clone();
                    ga.scale_in_place(2.0 * g.item());
                    accum(grads, *a, ga);
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows();
                let n = g.cols();
                if self.needs(*a) {
                    let ga = Tensor::new(ra, n, g.data()[..ra * n].to_vec()).expect("finite grad");
                    accum(grads, *a, ga);
                }
                if self.needs(*b) {
                    let rb = self.value(*b).rows();
                    let gb =
                        Tensor::new(rb, n, g.data()[ra * n..].to_vec()).expect("finite grad");
                    accum(grads, *b, gb);
                }
            }
            Op::GatherRows(a, indices) => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(m, n);
                    for (r, &idx) in indices.iter().enumerate() {
                        let row = ga.row_slice_mut(idx);
                        for (x, y) in row.iter_mut().zip(g.row_slice(r)) {
                            *x += y;
                        }
                    }
                    accum(grads, *a, ga);
                }
            }
            Op::Cosine(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let na = va.norm();
                let nb = vb.norm();
                let c = node.value.item();
                let gs = g.item();
                if self.needs(*a) {
                    let mut ga = vb.clone();
                    ga.scale_in_place(gs / (na * nb));
                    ga.axpy(-gs * c / (na * na), va);
                    accum(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = va.clone();
                    gb.scale_in_place(gs / (na * nb));
                    gb.axpy(-gs * c / (nb * nb), vb);
                    accum(grads, *b, gb);
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(t) => t.axpy(1.0, &delta),
        slot @ None => *slot = Some(delta),
    }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::{fd_gradient, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn gradient_of_untouched_param_is_none() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let unused = tape.param(Tensor::scalar(1.0));
        let y = tape.mul(x, x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn log_clamps_and_zeroes_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![0.0, 1.0]).unwrap());
        let l = tape.log(x);
        let s = tape.sum_all(l);
        assert!((tape.value(l).at(0, 0) - LOG_CLAMP.ln()).abs() < 1e-12);
        let grads = tape.backward(s).unwrap();
        let g = grads.get(x).unwrap();
        assert_eq!(g.at(0, 0), 0.0);
        assert!((g.at(0, 1) - 1.0).abs() < 1e-12);
    }

    /// Runs the finite-difference oracle against one tape program.
    fn check_program(
        params: Vec<Tensor>,
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    ) {
        let eval = |ps: &[Tensor]| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = ps.iter().map(|p| tape.param(p.clone())).collect();
            let loss = build(&mut tape, &ids);
            tape.item(loss)
        };
        let fd = fd_gradient(&eval, &params, 1e-5);

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        for (id, fd_g) in ids.iter().zip(&fd) {
            let zero = Tensor::zeros(fd_g.rows(), fd_g.cols());
            let g = grads.get(*id).unwrap_or(&zero);
            let err = max_rel_err(g, fd_g);
            assert!(err < 1e-6, "gradient mismatch: rel err {err:.3e}");
        }
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = Tensor::randn(3, 4, 1.0, &mut rng);
        let b = Tensor::randn(4, 2, 1.0, &mut rng);
        check_program(vec![a, b], |tape, ids| {
            let m = tape.matmul(ids[0], ids[1]);
            let t = tape.tanh(m);
            tape.sum_all(t)
        });
    }

    #[test]
    fn softmax_rows_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Tensor::randn(3, 5, 1.0, &mut rng);
        let w = Tensor::randn(5, 1, 1.0, &mut rng);
        check_program(vec![x, w], |tape, ids| {
            let s = tape.softmax_rows(ids[0]);
            let p = tape.matmul(s, ids[1]);
            let sq = tape.squared_l2(p);
            tape.scale(sq, 0.5)
        });
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = Tensor::randn(4, 3, 1.0, &mut rng);
        let v = Tensor::randn(1, 3, 1.0, &mut rng);
        let w = Tensor::randn(1, 3, 1.0, &mut rng);
        check_program(vec![a, v, w], |tape, ids| {
            let e = tape.exp(ids[2]);
            let m = tape.mul_rowvec(ids[0], e);
            let s = tape.add_rowvec(m, ids[1]);
            let t = tape.sigmoid(s);
            tape.sum_all(t)
        });
    }

    #[test]
    fn gather_concat_cosine_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let pool = Tensor::randn(5, 4, 1.0, &mut rng);
        let q = Tensor::randn(1, 4, 1.0, &mut rng);
        check_program(vec![pool, q], |tape, ids| {
            let picked = tape.gather_rows(ids[0], vec![3, 0, 3]);
            let m = tape.mean_rows(picked);
            let c = tape.cosine(m, ids[1]);
            let one = tape.constant(Tensor::scalar(1.0));
            tape.sub(one, c)
        });
    }

    #[test]
    fn mean_and_log_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = Tensor::randn(4, 3, 0.5, &mut rng);
        check_program(vec![x], |tape, ids| {
            let e = tape.exp(ids[0]);
            let m = tape.mean_rows(e);
            let l = tape.log(m);
            tape.sum_all(l)
        });
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let a = Tensor::randn(2, 3, 1.0, &mut rng);
        let b = Tensor::randn(3, 3, 1.0, &mut rng);
        let w = Tensor::randn(3, 2, 1.0, &mut rng);
        check_program(vec![a, b, w], |tape, ids| {
            let c = tape.concat_rows(ids[0], ids[1]);
            let m = tape.matmul(c, ids[2]);
            let t = tape.tanh(m);
            tape.squared_l2(t)
        });
    }
}

//! Minimal reverse-mode differentiation on dense tensors.
//!
//! A [`Tape`] is a define-by-run graph: each operation eagerly computes its
//! value and appends a node recording the operation and its inputs; a single
//! [`Tape::backward`] sweep then fills per-node gradients in reverse order.
//! The operation set is exactly what the toolkit's models and transforms
//! need — dense layers, convolutions, recurrent-cell arithmetic, softmax
//! losses, and three group-specific operations:
//!
//! * [`Tape::map`] — arbitrary index remapping `out[i] = in[src[i]]`, which
//!   realizes every group action (rotations, flips, vocabulary
//!   permutations), embedding-row gathers, and slicing; its backward is a
//!   deterministic scatter-add.
//! * [`Tape::group_mean_axis0`] — the Reynolds mean over a leading group
//!   dimension. Each output coordinate sums its |G| contributions in
//!   ascending total order, so the result depends only on the *multiset* of
//!   slot values. Transformed inputs produce the same slot values at permuted
//!   slots, hence bitwise-identical means — equivariance holds exactly, not
//!   just to rounding.
//! * [`Tape::group_conv`] — a slot convolution over group-indexed features
//!   (one weight matrix per group element), the regular-to-regular layer used
//!   for stacked equivariant heads; it accumulates over slots with the same
//!   sorted summation.
//!
//! Shapes are validated with panics: a malformed graph is a programming
//! error, and the model-level APIs check user-facing shapes before touching
//! the tape. With debug assertions on, every node also asserts that finite
//! inputs produced finite outputs.

use crate::scalar::{sorted_sum, Scalar};
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    /// `a[..., n] + b[n]`, broadcasting `b` over leading axes.
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Softmax over the last axis, row-wise.
    Softmax(NodeId),
    Log(NodeId),
    /// Elementwise `max(a, c)`.
    MaxConst(NodeId, S),
    AddN(Vec<NodeId>),
    /// Stack same-shape inputs along a new leading axis.
    Stack(Vec<NodeId>),
    /// Sorted-sum mean over the leading axis (see module docs).
    GroupMeanAxis0(NodeId),
    /// `out[i] = in[src[i]]`.
    Map {
        input: NodeId,
        src: Vec<usize>,
    },
    Reshape(NodeId),
    /// `x: [B,C,H,W]`, `k: [O,C,kh,kw]`, `b: [O]`; valid convolution with
    /// the given stride and zero padding.
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    /// Slot convolution: `out[g] = Σ_h ws[widx[g][h]] · x[h]` with sorted
    /// accumulation over `h`.
    GroupConv {
        x: NodeId,
        ws: Vec<NodeId>,
        widx: Vec<Vec<usize>>,
    },
    /// Mean softmax cross-entropy over rows of logits against class targets.
    CrossEntropyLogits {
        x: NodeId,
        targets: Vec<usize>,
    },
    /// Mean of all entries.
    MeanAll(NodeId),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
}

/// Reverse-mode differentiation tape. Build one per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

/// Numerically stable logistic function.
fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Row-wise stable softmax into a fresh buffer.
fn softmax_rows<S: Scalar>(data: &[S], width: usize) -> Vec<S> {
    assert!(width > 0 && data.len() % width == 0, "softmax needs rows");
    let mut out = vec![S::zero(); data.len()];
    for (row_in, row_out) in data.chunks(width).zip(out.chunks_mut(width)) {
        let m = row_in.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut z = S::zero();
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = (v - m).exp();
            z = z + *o;
        }
        for o in row_out.iter_mut() {
            *o = *o / z;
        }
    }
    out
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    /// Gradient at `id` from the last [`Self::backward`] call, if any path
    /// reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Insert a constant/parameter/input node.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .zip_with(self.value(b), |x, y| x + y)
            .expect("add shapes");
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .zip_with(self.value(b), |x, y| x - y)
            .expect("sub shapes");
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .zip_with(self.value(b), |x, y| x * y)
            .expect("mul shapes");
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -S::one())
    }

    /// Broadcast-add a bias vector over the last axis.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let n = *av.shape().last().expect("add_bias needs rank ≥ 1");
        assert_eq!(bv.shape(), &[n], "bias must be [last-axis]");
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, &bias) in chunk.iter_mut().zip(bv.data()) {
                *d = *d + bias;
            }
        }
        let v = Tensor::from_vec(av.shape().to_vec(), data).expect("same shape");
        self.push(Op::AddBias(a, b), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(Op::MatMul(a, b), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid_stable);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), v)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let width = *av.shape().last().expect("softmax needs rank ≥ 1");
        let data = softmax_rows(av.data(), width);
        let v = Tensor::from_vec(av.shape().to_vec(), data).expect("same shape");
        self.push(Op::Softmax(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.ln());
        self.push(Op::Log(a), v)
    }

    /// Elementwise `max(a, c)`; used to floor probabilities before `log`.
    pub fn max_const(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).map(|x| x.max(c));
        self.push(Op::MaxConst(a, c), v)
    }

    /// Sum of same-shape nodes.
    pub fn add_n(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "add_n needs at least one input");
        let mut v = self.value(ids[0]).clone();
        for &id in &ids[1..] {
            v = v
                .zip_with(self.value(id), |x, y| x + y)
                .expect("add_n shapes");
        }
        self.push(Op::AddN(ids.to_vec()), v)
    }

    /// Stack same-shape nodes along a new leading axis.
    pub fn stack(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "stack needs at least one input");
        let inner = self.value(ids[0]).shape().to_vec();
        let mut data = Vec::with_capacity(ids.len() * self.value(ids[0]).len());
        for &id in ids {
            assert_eq!(
                self.value(id).shape(),
                &inner[..],
                "stack shapes must match"
            );
            data.extend_from_slice(self.value(id).data());
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&inner);
        let v = Tensor::from_vec(shape, data).expect("stack length");
        self.push(Op::Stack(ids.to_vec()), v)
    }

    /// Mean over the leading axis with order-independent (sorted) summation
    /// per coordinate. See the module docs for why this is sorted.
    pub fn group_mean_axis0(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let shape = av.shape();
        assert!(
            !shape.is_empty() && shape[0] > 0,
            "group mean needs a leading axis"
        );
        let slots = shape[0];
        let rest: usize = shape[1..].iter().product();
        let inv = S::one() / S::from_f64(slots as f64);
        let mut out = vec![S::zero(); rest];
        let mut contributions = vec![S::zero(); slots];
        for (c, o) in out.iter_mut().enumerate() {
            for (s, contrib) in contributions.iter_mut().enumerate() {
                *contrib = av.data()[s * rest + c];
            }
            *o = sorted_sum(&mut contributions) * inv;
        }
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[1..].to_vec()
        };
        let v = Tensor::from_vec(out_shape, out).expect("group mean length");
        self.push(Op::GroupMeanAxis0(a), v)
    }

    /// Index remap `out[i] = in[src[i]]` with an explicit output shape.
    pub fn map(&mut self, input: NodeId, src: Vec<usize>, out_shape: &[usize]) -> NodeId {
        let expected: usize = out_shape.iter().product();
        assert_eq!(
            src.len(),
            expected,
            "map source length must match out shape"
        );
        let in_data = self.value(input).data();
        let data: Vec<S> = src.iter().map(|&p| in_data[p]).collect();
        let v = Tensor::from_vec(out_shape.to_vec(), data).expect("map length");
        self.push(Op::Map { input, src }, v)
    }

    /// Gather one row of a matrix node as a `[1, width]` node.
    pub fn row(&mut self, matrix: NodeId, row: usize) -> NodeId {
        let shape = self.value(matrix).shape().to_vec();
        assert_eq!(shape.len(), 2, "row() needs a matrix");
        let width = shape[1];
        let src = (row * width..(row + 1) * width).collect();
        self.map(matrix, src, &[1, width])
    }

    /// Gather a single entry of a flattened node as a `[1]` scalar node.
    pub fn gather1(&mut self, input: NodeId, index: usize) -> NodeId {
        self.map(input, vec![index], &[1])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a).reshaped(shape).expect("reshape length");
        self.push(Op::Reshape(a), v)
    }

    /// Valid 2-D convolution over `[B,C,H,W]` with kernel `[O,C,kh,kw]`,
    /// per-channel bias `[O]`, stride and zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        assert!(stride >= 1, "stride must be ≥ 1");
        let xv = self.value(x);
        let kv = self.value(k);
        let bv = self.value(b);
        let (bs, c, h, w) = match *xv.shape() {
            [bs, c, h, w] => (bs, c, h, w),
            _ => panic!("conv2d input must be [B,C,H,W], got {:?}", xv.shape()),
        };
        let (o, kc, kh, kw) = match *kv.shape() {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            _ => panic!("conv2d kernel must be [O,C,kh,kw], got {:?}", kv.shape()),
        };
        assert_eq!(c, kc, "channel mismatch");
        assert_eq!(bv.shape(), &[o], "bias must be [O]");
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let mut out = vec![S::zero(); bs * o * oh * ow];
        let xd = xv.data();
        let kd = kv.data();
        let bd = bv.data();
        for bi in 0..bs {
            for oi in 0..o {
                for yi in 0..oh {
                    for xi in 0..ow {
                        let mut acc = bd[oi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (yi * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (xi * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let xval =
                                        xd[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                    let kval = kd[((oi * c + ci) * kh + ky) * kw + kx];
                                    acc = acc + xval * kval;
                                }
                            }
                        }
                        out[((bi * o + oi) * oh + yi) * ow + xi] = acc;
                    }
                }
            }
        }
        let v = Tensor::from_vec(vec![bs, o, oh, ow], out).expect("conv length");
        self.push(
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            },
            v,
        )
    }

    /// Slot convolution over group-indexed features `x: [G, m]` with one
    /// `[p, m]` weight matrix per group element and an index table
    /// `widx[g][h]` naming the weight applied to slot `h` when producing
    /// slot `g`. Slot contributions are accumulated per coordinate in sorted
    /// order, so slot translations of the input produce exact slot
    /// translations of the output.
    pub fn group_conv(&mut self, x: NodeId, ws: &[NodeId], widx: Vec<Vec<usize>>) -> NodeId {
        let xv = self.value(x);
        let (g_count, m) = match *xv.shape() {
            [g, m] => (g, m),
            _ => panic!("group_conv input must be [G, m], got {:?}", xv.shape()),
        };
        assert_eq!(widx.len(), g_count, "widx must have one row per slot");
        assert!(
            widx.iter().all(|r| r.len() == g_count),
            "widx must be square"
        );
        let p = self.value(ws[0]).shape()[0];
        for &wid in ws {
            assert_eq!(
                self.value(wid).shape(),
                &[p, m],
                "all weights must be [p, m]"
            );
        }
        // addends[h] = W[widx[g][h]] · x[h]  (length-p vectors), then a
        // sorted per-coordinate sum over h.
        let mut out = vec![S::zero(); g_count * p];
        let mut addends = vec![vec![S::zero(); p]; g_count];
        let mut contributions = vec![S::zero(); g_count];
        for g in 0..g_count {
            for h in 0..g_count {
                let wv = self.value(ws[widx[g][h]]);
                let wd = wv.data();
                let xrow = &xv.data()[h * m..(h + 1) * m];
                for (c, a) in addends[h].iter_mut().enumerate() {
                    let wrow = &wd[c * m..(c + 1) * m];
                    let mut acc = S::zero();
                    for (&wi, &xi) in wrow.iter().zip(xrow) {
                        acc = acc + wi * xi;
                    }
                    *a = acc;
                }
            }
            for c in 0..p {
                for (h, contrib) in contributions.iter_mut().enumerate() {
                    *contrib = addends[h][c];
                }
                out[g * p + c] = sorted_sum(&mut contributions);
            }
        }
        let v = Tensor::from_vec(vec![g_count, p], out).expect("group conv length");
        self.push(
            Op::GroupConv {
                x,
                ws: ws.to_vec(),
                widx,
            },
            v,
        )
    }

    /// Mean softmax cross-entropy of logit rows against integer class
    /// targets. Rank-1 logits are treated as a single row.
    pub fn cross_entropy_logits(&mut self, x: NodeId, targets: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        let width = *xv.shape().last().expect("logits need a class axis");
        let rows = xv.len() / width;
        assert_eq!(targets.len(), rows, "one target per logit row");
        let mut total = S::zero();
        for (row, &t) in xv.data().chunks(width).zip(&targets) {
            assert!(t < width, "target {t} out of range");
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let mut z = S::zero();
            for &v in row {
                z = z + (v - m).exp();
            }
            total = total + (z.ln() + m - row[t]);
        }
        let v = Tensor::scalar(total / S::from_f64(rows as f64));
        self.push(Op::CrossEntropyLogits { x, targets }, v)
    }

    /// Mean of all entries (plain index-order sum; used for scalar losses).
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Tensor::scalar(av.sum() / S::from_f64(av.len() as f64));
        self.push(Op::MeanAll(a), v)
    }

    /// Negative log-likelihood of one entry of a probability vector, floored
    /// at the smallest positive normal to keep the log finite.
    pub fn nll_of_entry(&mut self, probs: NodeId, index: usize) -> NodeId {
        let p = self.gather1(probs, index);
        let p = self.max_const(p, S::min_positive_value());
        let lp = self.log(p);
        self.neg(lp)
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor<S>) {
        match &mut self.grads[id] {
            Some(g) => g.add_scaled(delta, S::one()),
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar loss node; gradients are then available
    /// via [`Self::grad`].
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss] = Some(Tensor::full(self.value(loss).shape(), S::one()));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[id].clone() else {
                continue;
            };
            // Ops are matched on a clone of the descriptor to keep borrows
            // simple; tensors themselves are not cloned unless needed.
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    let neg = g.map(|x| -x);
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_with(self.value(b), |x, y| x * y).expect("mul grad");
                    let gb = g.zip_with(self.value(a), |x, y| x * y).expect("mul grad");
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga = g.map(|x| x * c);
                    self.accumulate(a, &ga);
                }
                Op::AddBias(a, b) => {
                    self.accumulate(a, &g);
                    let n = self.value(b).len();
                    let mut gb = vec![S::zero(); n];
                    for chunk in g.data().chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(chunk) {
                            *acc = *acc + v;
                        }
                    }
                    let gb = Tensor::from_vec(vec![n], gb).expect("bias grad");
                    self.accumulate(b, &gb);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(a).clone();
                    let bv = self.value(b).clone();
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    // ga = g · bᵀ
                    let mut ga = vec![S::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            if gij == S::zero() {
                                continue;
                            }
                            let brow = &bv.data()[0..]; // b[p*n + j]
                            for p in 0..k {
                                ga[i * k + p] = ga[i * k + p] + gij * brow[p * n + j];
                            }
                        }
                    }
                    // gb = aᵀ · g
                    let mut gb = vec![S::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            if aip == S::zero() {
                                continue;
                            }
                            let grow = &g.data()[i * n..(i + 1) * n];
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d = *d + aip * gv;
                            }
                        }
                    }
                    let ga = Tensor::from_vec(vec![m, k], ga).expect("ga");
                    let gb = Tensor::from_vec(vec![k, n], gb).expect("gb");
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Relu(a) => {
                    let ga = g
                        .zip_with(
                            self.value(a),
                            |gv, x| if x > S::zero() { gv } else { S::zero() },
                        )
                        .expect("relu grad");
                    self.accumulate(a, &ga);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(id).clone();
                    let ga = g
                        .zip_with(&y, |gv, yv| gv * yv * (S::one() - yv))
                        .expect("sigmoid grad");
                    self.accumulate(a, &ga);
                }
                Op::Tanh(a) => {
                    let y = self.value(id).clone();
                    let ga = g
                        .zip_with(&y, |gv, yv| gv * (S::one() - yv * yv))
                        .expect("tanh grad");
                    self.accumulate(a, &ga);
                }
                Op::Softmax(a) => {
                    let y = self.value(id).clone();
                    let width = *y.shape().last().expect("softmax rank");
                    let mut ga = vec![S::zero(); y.len()];
                    for ((yrow, grow), garow) in y
                        .data()
                        .chunks(width)
                        .zip(g.data().chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let mut dot = S::zero();
                        for (&yv, &gv) in yrow.iter().zip(grow) {
                            dot = dot + yv * gv;
                        }
                        for ((d, &yv), &gv) in garow.iter_mut().zip(yrow).zip(grow) {
                            *d = yv * (gv - dot);
                        }
                    }
                    let ga = Tensor::from_vec(y.shape().to_vec(), ga).expect("softmax grad");
                    self.accumulate(a, &ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_with(self.value(a), |gv, x| gv / x).expect("log grad");
                    self.accumulate(a, &ga);
                }
                Op::MaxConst(a, c) => {
                    let ga = g
                        .zip_with(self.value(a), |gv, x| if x > c { gv } else { S::zero() })
                        .expect("max grad");
                    self.accumulate(a, &ga);
                }
                Op::AddN(ids) => {
                    for &a in &ids {
                        self.accumulate(a, &g);
                    }
                }
                Op::Stack(ids) => {
                    let inner = self.value(ids[0]).len();
                    for (slot, &a) in ids.iter().enumerate() {
                        let shape = self.value(a).shape().to_vec();
                        let slice = g.data()[slot * inner..(slot + 1) * inner].to_vec();
                        let gs = Tensor::from_vec(shape, slice).expect("stack grad");
                        self.accumulate(a, &gs);
                    }
                }
                Op::GroupMeanAxis0(a) => {
                    let ashape = self.value(a).shape().to_vec();
                    let slots = ashape[0];
                    let rest: usize = ashape[1..].iter().product();
                    let inv = S::one() / S::from_f64(slots as f64);
                    let mut ga = vec![S::zero(); slots * rest];
                    for s in 0..slots {
                        for c in 0..rest {
                            ga[s * rest + c] = g.data()[c] * inv;
                        }
                    }
                    let ga = Tensor::from_vec(ashape, ga).expect("group mean grad");
                    self.accumulate(a, &ga);
                }
                Op::Map { input, src } => {
                    let ishape = self.value(input).shape().to_vec();
                    let mut ga = vec![S::zero(); self.value(input).len()];
                    for (i, &p) in src.iter().enumerate() {
                        ga[p] = ga[p] + g.data()[i];
                    }
                    let ga = Tensor::from_vec(ishape, ga).expect("map grad");
                    self.accumulate(input, &ga);
                }
                Op::Reshape(a) => {
                    let ga = g.reshaped(self.value(a).shape()).expect("reshape grad");
                    self.accumulate(a, &ga);
                }
                Op::Conv2d {
                    x,
                    k,
                    b,
                    stride,
                    padding,
                } => {
                    let xv = self.value(x).clone();
                    let kv = self.value(k).clone();
                    let (bs, c, h, w) = match *xv.shape() {
                        [bs, c, h, w] => (bs, c, h, w),
                        _ => unreachable!(),
                    };
                    let (o, _, kh, kw) = match *kv.shape() {
                        [o, kc, kh, kw] => (o, kc, kh, kw),
                        _ => unreachable!(),
                    };
                    let oh = (h + 2 * padding - kh) / stride + 1;
                    let ow = (w + 2 * padding - kw) / stride + 1;
                    let mut gx = vec![S::zero(); xv.len()];
                    let mut gk = vec![S::zero(); kv.len()];
                    let mut gb = vec![S::zero(); o];
                    let gd = g.data();
                    let xd = xv.data();
                    let kd = kv.data();
                    for bi in 0..bs {
                        for oi in 0..o {
                            for yi in 0..oh {
                                for xi in 0..ow {
                                    let gout = gd[((bi * o + oi) * oh + yi) * ow + xi];
                                    if gout == S::zero() {
                                        continue;
                                    }
                                    gb[oi] = gb[oi] + gout;
                                    for ci in 0..c {
                                        for ky in 0..kh {
                                            let iy = (yi * stride + ky) as isize - padding as isize;
                                            if iy < 0 || iy as usize >= h {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix =
                                                    (xi * stride + kx) as isize - padding as isize;
                                                if ix < 0 || ix as usize >= w {
                                                    continue;
                                                }
                                                let xidx = ((bi * c + ci) * h + iy as usize) * w
                                                    + ix as usize;
                                                let kidx = ((oi * c + ci) * kh + ky) * kw + kx;
                                                gx[xidx] = gx[xidx] + gout * kd[kidx];
                                                gk[kidx] = gk[kidx] + gout * xd[xidx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let gx = Tensor::from_vec(xv.shape().to_vec(), gx).expect("gx");
                    let gk = Tensor::from_vec(kv.shape().to_vec(), gk).expect("gk");
                    let gb = Tensor::from_vec(vec![o], gb).expect("gb");
                    self.accumulate(x, &gx);
                    self.accumulate(k, &gk);
                    self.accumulate(b, &gb);
                }
                Op::GroupConv { x, ws, widx } => {
                    let xv = self.value(x).clone();
                    let (g_count, m) = (xv.shape()[0], xv.shape()[1]);
                    let p = self.value(ws[0]).shape()[0];
                    let mut gx = vec![S::zero(); xv.len()];
                    let mut gws = vec![vec![S::zero(); p * m]; ws.len()];
                    for gi in 0..g_count {
                        let grow = &g.data()[gi * p..(gi + 1) * p];
                        for h in 0..g_count {
                            let widx_gh = widx[gi][h];
                            let wv = self.value(ws[widx_gh]).clone();
                            let wd = wv.data();
                            let xrow = &xv.data()[h * m..(h + 1) * m];
                            let gw = &mut gws[widx_gh];
                            for (ci, &gout) in grow.iter().enumerate() {
                                if gout == S::zero() {
                                    continue;
                                }
                                let wrow = &wd[ci * m..(ci + 1) * m];
                                for d in 0..m {
                                    gw[ci * m + d] = gw[ci * m + d] + gout * xrow[d];
                                    gx[h * m + d] = gx[h * m + d] + gout * wrow[d];
                                }
                            }
                        }
                    }
                    let gx = Tensor::from_vec(vec![g_count, m], gx).expect("gx");
                    self.accumulate(x, &gx);
                    for (wid, gw) in ws.iter().zip(gws) {
                        let gw = Tensor::from_vec(vec![p, m], gw).expect("gw");
                        self.accumulate(*wid, &gw);
                    }
                }
                Op::CrossEntropyLogits { x, targets } => {
                    let xv = self.value(x).clone();
                    let width = *xv.shape().last().expect("logits rank");
                    let rows = xv.len() / width;
                    let scale = g.data()[0] / S::from_f64(rows as f64);
                    let mut gx = softmax_rows(xv.data(), width);
                    for (row, &t) in gx.chunks_mut(width).zip(&targets) {
                        row[t] = row[t] - S::one();
                        for v in row.iter_mut() {
                            *v = *v * scale;
                        }
                    }
                    let gx = Tensor::from_vec(xv.shape().to_vec(), gx).expect("ce grad");
                    self.accumulate(x, &gx);
                }
                Op::MeanAll(a) => {
                    let len = self.value(a).len();
                    let c = g.data()[0] / S::from_f64(len as f64);
                    let ga = Tensor::full(self.value(a).shape(), c);
                    self.accumulate(a, &ga);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn randt(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, "tape-test");
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_forward_matches_tensor_oracle() {
        let a = randt(&[3, 4], 1);
        let b = randt(&[4, 2], 2);
        let mut t = Tape::new();
        let (ia, ib) = (t.leaf(a.clone()), t.leaf(b.clone()));
        let ic = t.matmul(ia, ib);
        assert_eq!(t.value(ic), &a.matmul(&b).unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = randt(&[5, 7], 3).map(|v| v * 30.0);
        let mut t = Tape::new();
        let ix = t.leaf(x);
        let iy = t.softmax(ix);
        for row in t.value(iy).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn identity_kernel_conv_reproduces_input() {
        // 3×3 kernel, one-hot center, padding 1 ⇒ identity map.
        let x = randt(&[2, 1, 5, 5], 4);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        *k.at_mut(&[0, 0, 1, 1]) = 1.0;
        let b = Tensor::zeros(&[1]);
        let mut t = Tape::new();
        let (ix, ik, ib) = (t.leaf(x.clone()), t.leaf(k), t.leaf(b));
        let iy = t.conv2d(ix, ik, ib, 1, 1);
        assert_eq!(t.value(iy).data(), x.data());
    }

    #[test]
    fn group_mean_is_permutation_invariant_bitwise() {
        let x = randt(&[4, 6], 5);
        // Rotate slots by one.
        let mut permuted = Tensor::zeros(&[4, 6]);
        for s in 0..4 {
            for c in 0..6 {
                *permuted.at_mut(&[(s + 1) % 4, c]) = x.at(&[s, c]);
            }
        }
        let mut t = Tape::new();
        let i1 = t.leaf(x);
        let m1 = t.group_mean_axis0(i1);
        let i2 = t.leaf(permuted);
        let m2 = t.group_mean_axis0(i2);
        let (v1, v2) = (t.value(m1), t.value(m2));
        for (a, b) in v1.data().iter().zip(v2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn map_backward_scatter_adds_duplicates() {
        let x = Tensor::from_vec(vec![2], vec![3.0f64, 5.0]).unwrap();
        let mut t = Tape::new();
        let ix = t.leaf(x);
        // out = [x0, x0, x1]; loss = mean → dx0 = 2/3, dx1 = 1/3.
        let im = t.map(ix, vec![0, 0, 1], &[3]);
        let loss = t.mean_all(im);
        t.backward(loss);
        let gx = t.grad(ix).unwrap();
        assert!((gx.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((gx.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let x = randt(&[2, 4], 6);
        let mut t = Tape::new();
        let ix = t.leaf(x.clone());
        let loss = t.cross_entropy_logits(ix, vec![1, 3]);
        let mut expected = 0.0;
        for (row, &target) in x.data().chunks(4).zip(&[1usize, 3]) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            expected += z.ln() + m - row[target];
        }
        expected /= 2.0;
        assert!((t.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn backward_through_small_graph_matches_hand_gradient() {
        // loss = mean((x·w)²) with x=[1,2], w=[[a],[b]] at a=0.3,b=-0.5:
        // y = a + 2b, loss = y², dy/da = 1, dy/db = 2 ⇒ grad = [2y, 4y].
        let x = Tensor::from_vec(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::from_vec(vec![2, 1], vec![0.3f64, -0.5]).unwrap();
        let mut t = Tape::new();
        let (ix, iw) = (t.leaf(x), t.leaf(w));
        let iy = t.matmul(ix, iw);
        let sq = t.mul(iy, iy);
        let loss = t.mean_all(sq);
        t.backward(loss);
        let y = 0.3 - 1.0;
        let gw = t.grad(iw).unwrap();
        assert!((gw.data()[0] - 2.0 * y).abs() < 1e-12);
        assert!((gw.data()[1] - 4.0 * y).abs() < 1e-12);
    }

    #[test]
    fn stack_and_slice_roundtrip_gradients() {
        let a = randt(&[3], 7);
        let b = randt(&[3], 8);
        let mut t = Tape::new();
        let (ia, ib) = (t.leaf(a), t.leaf(b));
        let st = t.stack(&[ia, ib]);
        let m = t.group_mean_axis0(st);
        let loss = t.mean_all(m);
        t.backward(loss);
        // d loss / d a_i = 1/(2·3)
        for &v in t.grad(ia).unwrap().data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        for &v in t.grad(ib).unwrap().data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }
}

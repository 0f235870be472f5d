//! Toy differentiable models: layers, MLPs, a small CNN, recurrent cells,
//! a seq2seq encoder–decoder, and a word-level language model.
//!
//! Models own their parameter tensors. To run a forward pass, a model *binds*
//! its parameters onto a [`Tape`](crate::tape::Tape) (one leaf node per
//! tensor, in the canonical order of [`ParamSet::params`]) and the returned
//! bound handle exposes forward methods producing tape nodes. After
//! `backward`, [`collect_grads`] gathers parameter gradients in the same
//! canonical order, which is the order optimizers consume.
//!
//! Determinism: initialization draws from an explicit seeded stream, forward
//! passes are single-threaded straight-line float code, and checkpoints of
//! identically-seeded runs are byte-identical.

pub mod cells;
pub mod lm;
pub mod seq2seq;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Anything with an ordered, named set of trainable parameter tensors.
///
/// The order of `params` / `params_mut` / `param_names` must agree and must
/// match the order in which the model's `bind` pushes leaves onto a tape.
pub trait ParamSet<S: Scalar> {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor<S>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>>;

    /// Total number of trainable scalars.
    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Uniform fan-in-scaled initialization: `U(-1/√fan_in, 1/√fan_in)`.
///
/// Draws are made in `f64` and rounded to the target precision, so a fixed
/// seed produces comparable models at every precision.
pub fn uniform_init<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init length")
}

/// Fully connected layer `[in, out]` with bias `[out]`.
#[derive(Debug, Clone)]
pub struct Dense<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

/// Tape-bound handle to a [`Dense`] layer.
#[derive(Debug, Clone, Copy)]
pub struct DenseB {
    pub w: NodeId,
    pub b: NodeId,
}

impl<S: Scalar> Dense<S> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: uniform_init(&[inputs, outputs], inputs, rng),
            b: uniform_init(&[outputs], inputs, rng),
        }
    }

    /// Zero-initialized layer (used by trivial fixtures).
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Tensor::zeros(&[inputs, outputs]),
            b: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> DenseB {
        DenseB {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }
}

impl DenseB {
    /// `x · w + b` for `x: [rows, in]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: NodeId) -> NodeId {
        let y = tape.matmul(x, self.w);
        tape.add_bias(y, self.b)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.w, self.b]
    }
}

impl<S: Scalar> ParamSet<S> for Dense<S> {
    fn param_names(&self) -> Vec<String> {
        vec!["w".into(), "b".into()]
    }
    fn params(&self) -> Vec<&Tensor<S>> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Multi-layer perceptron with ReLU between layers and a linear final layer.
#[derive(Debug, Clone)]
pub struct Mlp<S: Scalar> {
    pub layers: Vec<Dense<S>>,
}

/// Tape-bound handle to an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpB {
    pub layers: Vec<DenseB>,
}

impl<S: Scalar> Mlp<S> {
    /// `sizes = [in, hidden…, out]`, at least two entries.
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least [in, out]");
        let layers = sizes
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().expect("nonempty").inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("nonempty").outputs()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> MlpB {
        MlpB {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    /// Inference forward on `[rows, in]`, no gradients retained.
    pub fn forward_raw(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let ix = tape.leaf(x.clone());
        let out = b.forward(&mut tape, ix);
        tape.value(out).clone()
    }
}

impl MlpB {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(DenseB::ids).collect()
    }
}

impl<S: Scalar> ParamSet<S> for Mlp<S> {
    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.w"), format!("layer{i}.b")])
            .collect()
    }
    fn params(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

/// One 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2dLayer<S: Scalar> {
    pub k: Tensor<S>,
    pub b: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dB {
    pub k: NodeId,
    pub b: NodeId,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2dLayer<S> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            k: uniform_init(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
            b: uniform_init(&[out_ch], fan_in, rng),
            stride,
            padding,
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> Conv2dB {
        Conv2dB {
            k: tape.leaf(self.k.clone()),
            b: tape.leaf(self.b.clone()),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl Conv2dB {
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: NodeId) -> NodeId {
        tape.conv2d(x, self.k, self.b, self.stride, self.padding)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.k, self.b]
    }
}

impl<S: Scalar> ParamSet<S> for Conv2dLayer<S> {
    fn param_names(&self) -> Vec<String> {
        vec!["k".into(), "b".into()]
    }
    fn params(&self) -> Vec<&Tensor<S>> {
        vec![&self.k, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.k, &mut self.b]
    }
}

/// Two convolutions + ReLUs + a dense classifier head over square
/// single-channel images.
#[derive(Debug, Clone)]
pub struct SmallCnn<S: Scalar> {
    pub side: usize,
    pub conv1: Conv2dLayer<S>,
    pub conv2: Conv2dLayer<S>,
    pub fc: Dense<S>,
}

#[derive(Debug, Clone)]
pub struct SmallCnnB {
    pub conv1: Conv2dB,
    pub conv2: Conv2dB,
    pub fc: DenseB,
    flat: usize,
}

impl<S: Scalar> SmallCnn<S> {
    /// Build for `side×side` inputs with the given channel widths and class
    /// count. Spatial sizes: conv1 is 3×3 stride 2 pad 1, conv2 is 3×3
    /// stride 1 pad 0.
    pub fn new(side: usize, ch1: usize, ch2: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let s1 = (side + 2 - 3) / 2 + 1;
        let s2 = s1 - 2;
        assert!(s2 >= 1, "side {side} too small for this architecture");
        let conv1 = Conv2dLayer::new(1, ch1, 3, 2, 1, rng);
        let conv2 = Conv2dLayer::new(ch1, ch2, 3, 1, 0, rng);
        let fc = Dense::new(ch2 * s2 * s2, classes, rng);
        Self {
            side,
            conv1,
            conv2,
            fc,
        }
    }

    pub fn classes(&self) -> usize {
        self.fc.outputs()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> SmallCnnB {
        SmallCnnB {
            conv1: self.conv1.bind(tape),
            conv2: self.conv2.bind(tape),
            fc: self.fc.bind(tape),
            flat: self.fc.inputs(),
        }
    }

    /// Inference logits for a `[B, 1, side, side]` batch.
    pub fn forward_raw(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let ix = tape.leaf(x.clone());
        let out = b.forward(&mut tape, ix);
        tape.value(out).clone()
    }
}

impl SmallCnnB {
    /// `[B, 1, side, side] → [B, classes]` logits.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: NodeId) -> NodeId {
        let h = self.conv1.forward(tape, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h);
        let h = tape.relu(h);
        let batch = tape.value(h).shape()[0];
        let h = tape.reshape(h, &[batch, self.flat]);
        self.fc.forward(tape, h)
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = self.conv1.ids();
        ids.extend(self.conv2.ids());
        ids.extend(self.fc.ids());
        ids
    }
}

impl<S: Scalar> ParamSet<S> for SmallCnn<S> {
    fn param_names(&self) -> Vec<String> {
        vec![
            "conv1.k".into(),
            "conv1.b".into(),
            "conv2.k".into(),
            "conv2.b".into(),
            "fc.w".into(),
            "fc.b".into(),
        ]
    }
    fn params(&self) -> Vec<&Tensor<S>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.extend(self.fc.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p.extend(self.fc.params_mut());
        p
    }
}

/// Gradients for the given bound node ids, in order; `None` where no path
/// reached the parameter.
pub fn collect_grads<S: Scalar>(tape: &Tape<S>, ids: &[NodeId]) -> Vec<Option<Tensor<S>>> {
    ids.iter().map(|&id| tape.grad(id).cloned()).collect()
}

/// A buildable base model (the thing equivariance wrappers wrap).
///
/// Inputs follow a single-sample convention without a batch axis: an MLP
/// consumes any shape whose element count equals its input width, a CNN
/// consumes `[1, side, side]`. Batched forwards prepend one batch axis and
/// each row is computed exactly as the corresponding single-sample pass.
#[derive(Debug, Clone)]
pub enum BaseModel<S: Scalar> {
    Mlp(Mlp<S>),
    Cnn(SmallCnn<S>),
}

/// Tape-bound handle to a [`BaseModel`].
#[derive(Debug, Clone)]
pub enum BaseModelB {
    Mlp { b: MlpB, inputs: usize },
    Cnn { b: SmallCnnB, side: usize },
}

impl<S: Scalar> BaseModel<S> {
    pub fn build(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Self {
        match spec {
            ModelSpec::Mlp { sizes } => BaseModel::Mlp(Mlp::new(sizes, rng)),
            ModelSpec::Cnn {
                side,
                ch1,
                ch2,
                classes,
            } => BaseModel::Cnn(SmallCnn::new(*side, *ch1, *ch2, *classes, rng)),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            BaseModel::Mlp(m) => ModelSpec::Mlp {
                sizes: std::iter::once(m.inputs())
                    .chain(m.layers.iter().map(Dense::outputs))
                    .collect(),
            },
            BaseModel::Cnn(c) => ModelSpec::Cnn {
                side: c.side,
                ch1: c.conv1.k.shape()[0],
                ch2: c.conv2.k.shape()[0],
                classes: c.classes(),
            },
        }
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Vec<usize> {
        match self {
            BaseModel::Mlp(m) => vec![m.outputs()],
            BaseModel::Cnn(c) => vec![c.classes()],
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BaseModelB {
        match self {
            BaseModel::Mlp(m) => BaseModelB::Mlp {
                b: m.bind(tape),
                inputs: m.inputs(),
            },
            BaseModel::Cnn(c) => BaseModelB::Cnn {
                b: c.bind(tape),
                side: c.side,
            },
        }
    }

    /// Inference forward on one sample (no batch axis in or out).
    pub fn forward_single(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let ix = tape.leaf(x.clone());
        let out = b.forward_batch_of(&mut tape, ix, 1);
        let out_shape = self.output_shape();
        tape.value(out).reshaped(&out_shape).expect("batch of one")
    }
}

impl BaseModelB {
    /// Forward a `[batch, …sample]` node to `[batch, …output]` logits.
    pub fn forward_batch_of<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        batch: usize,
    ) -> NodeId {
        match self {
            BaseModelB::Mlp { b, inputs } => {
                let flat = tape.reshape(x, &[batch, *inputs]);
                b.forward(tape, flat)
            }
            BaseModelB::Cnn { b, side } => {
                let imgs = tape.reshape(x, &[batch, 1, *side, *side]);
                b.forward(tape, imgs)
            }
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        match self {
            BaseModelB::Mlp { b, .. } => b.ids(),
            BaseModelB::Cnn { b, .. } => b.ids(),
        }
    }
}

impl<S: Scalar> ParamSet<S> for BaseModel<S> {
    fn param_names(&self) -> Vec<String> {
        match self {
            BaseModel::Mlp(m) => ParamSet::<S>::param_names(m),
            BaseModel::Cnn(c) => ParamSet::<S>::param_names(c),
        }
    }
    fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            BaseModel::Mlp(m) => m.params(),
            BaseModel::Cnn(c) => c.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            BaseModel::Mlp(m) => m.params_mut(),
            BaseModel::Cnn(c) => c.params_mut(),
        }
    }
}

/// Architecture descriptor used by configs and the benchmark command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    /// `sizes = [in, hidden…, out]`.
    Mlp { sizes: Vec<usize> },
    /// Small CNN over `side×side` single-channel images.
    Cnn {
        side: usize,
        ch1: usize,
        ch2: usize,
        classes: usize,
    },
}

//! Group-averaging wrappers that turn any base model into an equivariant one.
//!
//! Given a finite group G acting on inputs (Γ_X) and outputs (Γ_Y), the
//! *scalar* wrapper computes
//!
//! ```text
//! M_G(x) = (1/|G|) Σ_{g∈G} Γ_Y(g⁻¹, M(Γ_X(g, x)))
//! ```
//!
//! which is equivariant for any base model M. The *regular* wrapper keeps the
//! |G| summands as separate slots `M_G^R(x)[i] = Γ_Y(gᵢ⁻¹, M(Γ_X(gᵢ, x)))`,
//! which transform by a slot permutation plus the content action; slot-indexed
//! convolutions ([`GroupConvLayer`]) and [`group_mean_pool`] then build deeper
//! equivariant/invariant pipelines.
//!
//! Both wrappers run all |G| passes as **one batched forward**: the orbit of
//! the input is stacked along a leading group axis, the base model treats that
//! axis as a batch, the inverse output actions become a single index remap,
//! and the mean reduces the group axis. Each batch row is computed by exactly
//! the float operations of the corresponding standalone pass, and every group
//! reduction sums its |G| contributions in ascending order, so the averaged
//! model is equivariant *bitwise*, not merely up to rounding.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionError, ActionKind, GroupAction};
use crate::checkpoint::{self, CheckpointError};
use crate::group::FiniteGroup;
use crate::nn::{uniform_init, BaseModel, Dense, DenseB, ModelSpec, ParamSet};
use crate::scalar::{sorted_sum, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ShapeError, Tensor};

/// Whether the wrapper emits the group-averaged output or the per-element
/// slots it is averaged from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    Scalar,
    Regular,
}

#[derive(Debug, Error)]
pub enum EquituneError {
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model description: {0}")]
    Json(#[from] serde_json::Error),
    #[error("a dense head needs the averaged output and a trivial output action; mode is {mode:?}, output action is {kind:?}")]
    HeadNeedsInvariantOutput { mode: FeatureMode, kind: ActionKind },
    #[error("an action's group (order {action}) is not the wrapper's group (order {wrapper})")]
    GroupMismatch { action: usize, wrapper: usize },
    #[error("expected a leading group axis of extent {expected}, got shape {got:?}")]
    LeadingExtent { expected: usize, got: Vec<usize> },
    #[error("need {expected} weight matrices (one per group element), got {got}")]
    WeightCount { expected: usize, got: usize },
}

/// Stack the orbit `{Γ_X(g, x)}` along a new leading group axis, in element
/// order.
pub fn orbit_tensor<S: Scalar>(
    group: &FiniteGroup,
    input_action: &GroupAction,
    x: &Tensor<S>,
) -> Result<Tensor<S>, ActionError> {
    let mut data = Vec::with_capacity(group.order() * x.len());
    for g in group.elements() {
        data.extend(input_action.apply(g, x)?.into_data());
    }
    let mut shape = vec![group.order()];
    shape.extend_from_slice(x.shape());
    Ok(Tensor::from_vec(shape, data).expect("orbit length is |G|·len(x)"))
}

/// One flat index remap that applies `Γ_Y(gᵢ⁻¹)` inside slot `i` of a
/// `[|G|, …slot]` stack.
pub fn inverse_alignment_map(
    group: &FiniteGroup,
    output_action: &GroupAction,
    slot_shape: &[usize],
) -> Result<Vec<usize>, ActionError> {
    let m: usize = slot_shape.iter().product();
    let mut src = Vec::with_capacity(group.order() * m);
    for g in group.elements() {
        let per_slot = output_action.source_map(group.inv(g), slot_shape)?;
        src.extend(per_slot.into_iter().map(|p| g * m + p));
    }
    Ok(src)
}

fn check_groups(
    group: &FiniteGroup,
    input_action: &GroupAction,
    output_action: &GroupAction,
) -> Result<(), EquituneError> {
    for action in [input_action, output_action] {
        if action.group() != group {
            return Err(EquituneError::GroupMismatch {
                action: action.group().order(),
                wrapper: group.order(),
            });
        }
    }
    Ok(())
}

/// Regular-feature wrapper on a tape: returns a `[|G|, …out]` node whose slot
/// `i` is `Γ_Y(gᵢ⁻¹, M(Γ_X(gᵢ, x)))`.
///
/// `forward` receives the stacked orbit as a `[|G|, …x]` leaf and must return
/// a `[|G|, …out]` node, treating the leading axis as a batch.
pub fn equitune_regular_on_tape<S, F>(
    tape: &mut Tape<S>,
    group: &FiniteGroup,
    input_action: &GroupAction,
    output_action: &GroupAction,
    x: &Tensor<S>,
    forward: F,
) -> Result<NodeId, EquituneError>
where
    S: Scalar,
    F: FnOnce(&mut Tape<S>, NodeId) -> NodeId,
{
    check_groups(group, input_action, output_action)?;
    let orbit = orbit_tensor(group, input_action, x)?;
    let leaf = tape.leaf(orbit);
    let y = forward(tape, leaf);
    let y_shape = tape.value(y).shape().to_vec();
    if y_shape.first() != Some(&group.order()) {
        return Err(EquituneError::LeadingExtent {
            expected: group.order(),
            got: y_shape,
        });
    }
    let src = inverse_alignment_map(group, output_action, &y_shape[1..])?;
    Ok(tape.map(y, src, &y_shape))
}

/// Scalar (group-averaged) wrapper on a tape; see [`equitune_regular_on_tape`]
/// for the `forward` contract. Output drops the group axis.
pub fn equitune_scalar_on_tape<S, F>(
    tape: &mut Tape<S>,
    group: &FiniteGroup,
    input_action: &GroupAction,
    output_action: &GroupAction,
    x: &Tensor<S>,
    forward: F,
) -> Result<NodeId, EquituneError>
where
    S: Scalar,
    F: FnOnce(&mut Tape<S>, NodeId) -> NodeId,
{
    let regular = equitune_regular_on_tape(tape, group, input_action, output_action, x, forward)?;
    Ok(tape.group_mean_axis0(regular))
}

/// Regular-feature wrapper over a plain callable: |G| sequential passes.
/// This is the reference path the batched tape implementation is checked
/// against.
pub fn equitune_regular_fn<S, F>(
    group: &FiniteGroup,
    input_action: &GroupAction,
    output_action: &GroupAction,
    model: F,
    x: &Tensor<S>,
) -> Result<Tensor<S>, EquituneError>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Tensor<S>,
{
    check_groups(group, input_action, output_action)?;
    let mut data = Vec::new();
    let mut slot_shape: Option<Vec<usize>> = None;
    for g in group.elements() {
        let xg = input_action.apply(g, x)?;
        let y = model(&xg);
        let z = output_action.apply(group.inv(g), &y)?;
        match &slot_shape {
            None => slot_shape = Some(z.shape().to_vec()),
            Some(s) if s == z.shape() => {}
            Some(s) => {
                return Err(EquituneError::Shape(ShapeError::Mismatch {
                    expected: s.clone(),
                    got: z.shape().to_vec(),
                }))
            }
        }
        data.extend(z.into_data());
    }
    let mut shape = vec![group.order()];
    shape.extend(slot_shape.expect("groups are nonempty"));
    Ok(Tensor::from_vec(shape, data).expect("slot stack length"))
}

/// Scalar wrapper over a plain callable; reference path for
/// [`equitune_scalar_on_tape`].
pub fn equitune_scalar_fn<S, F>(
    group: &FiniteGroup,
    input_action: &GroupAction,
    output_action: &GroupAction,
    model: F,
    x: &Tensor<S>,
) -> Result<Tensor<S>, EquituneError>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Tensor<S>,
{
    let regular = equitune_regular_fn(group, input_action, output_action, model, x)?;
    group_mean_raw(group.order(), &regular)
}

/// Mean over a `[extent, …]` leading axis with the same sorted per-coordinate
/// accumulation the tape op uses, so the two paths agree bitwise.
pub fn group_mean_raw<S: Scalar>(
    extent: usize,
    stacked: &Tensor<S>,
) -> Result<Tensor<S>, EquituneError> {
    if stacked.shape().first() != Some(&extent) {
        return Err(EquituneError::LeadingExtent {
            expected: extent,
            got: stacked.shape().to_vec(),
        });
    }
    let rest: usize = stacked.shape()[1..].iter().product();
    let inv = S::one() / S::from_f64(extent as f64);
    let mut out = vec![S::zero(); rest];
    let mut contributions = vec![S::zero(); extent];
    for (c, o) in out.iter_mut().enumerate() {
        for (s, contrib) in contributions.iter_mut().enumerate() {
            *contrib = stacked.data()[s * rest + c];
        }
        *o = sorted_sum(&mut contributions) * inv;
    }
    let out_shape = if stacked.shape().len() == 1 {
        vec![1]
    } else {
        stacked.shape()[1..].to_vec()
    };
    Ok(Tensor::from_vec(out_shape, out).expect("mean length"))
}

/// Mean over the group axis of a regular-feature node, after checking the
/// leading extent is |G|.
pub fn group_mean_pool<S: Scalar>(
    tape: &mut Tape<S>,
    group: &FiniteGroup,
    regular: NodeId,
) -> Result<NodeId, EquituneError> {
    let shape = tape.value(regular).shape().to_vec();
    if shape.first() != Some(&group.order()) {
        return Err(EquituneError::LeadingExtent {
            expected: group.order(),
            got: shape,
        });
    }
    Ok(tape.group_mean_axis0(regular))
}

/// Weight-index table for slot convolution: producing slot `g` applies weight
/// `widx[g][h] = h·g⁻¹` to input slot `h`. With this sharing, right slot
/// translations of the input (`in'[i] = in[i·h₀]`) translate the output the
/// same way — exactly how regular features move when the original input is
/// transformed.
pub fn group_conv_index(group: &FiniteGroup) -> Vec<Vec<usize>> {
    group
        .elements()
        .map(|g| {
            let gi = group.inv(g);
            group.elements().map(|h| group.mul(h, gi)).collect()
        })
        .collect()
}

/// Slot convolution layer: one `[out, in]` matrix per group element, applied
/// over regular features `[|G|, in] → [|G|, out]` with the sharing pattern of
/// [`group_conv_index`]. Content (within-slot) features are plain channels.
#[derive(Debug, Clone)]
pub struct GroupConvLayer<S: Scalar> {
    weights: Vec<Tensor<S>>,
    widx: Vec<Vec<usize>>,
}

/// Tape-bound handle to a [`GroupConvLayer`].
#[derive(Debug, Clone)]
pub struct GroupConvB {
    ws: Vec<NodeId>,
    widx: Vec<Vec<usize>>,
}

impl<S: Scalar> GroupConvLayer<S> {
    pub fn new(
        group: &FiniteGroup,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Each output coordinate sums |G| · in_features products.
        let fan_in = in_features * group.order();
        let weights = group
            .elements()
            .map(|_| uniform_init(&[out_features, in_features], fan_in, rng))
            .collect();
        Self {
            weights,
            widx: group_conv_index(group),
        }
    }

    /// Build from explicit per-element weights (checked against the group).
    pub fn from_weights(
        group: &FiniteGroup,
        weights: Vec<Tensor<S>>,
    ) -> Result<Self, EquituneError> {
        if weights.len() != group.order() {
            return Err(EquituneError::WeightCount {
                expected: group.order(),
                got: weights.len(),
            });
        }
        let first = weights[0].shape().to_vec();
        for w in &weights {
            if w.shape() != first || first.len() != 2 {
                return Err(EquituneError::Shape(ShapeError::Mismatch {
                    expected: first.clone(),
                    got: w.shape().to_vec(),
                }));
            }
        }
        Ok(Self {
            weights,
            widx: group_conv_index(group),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> GroupConvB {
        GroupConvB {
            ws: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            widx: self.widx.clone(),
        }
    }
}

impl GroupConvB {
    /// `[|G|, in] → [|G|, out]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: NodeId) -> NodeId {
        tape.group_conv(x, &self.ws, self.widx.clone())
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.ws.clone()
    }
}

impl<S: Scalar> ParamSet<S> for GroupConvLayer<S> {
    fn param_names(&self) -> Vec<String> {
        (0..self.weights.len()).map(|i| format!("w{i}")).collect()
    }
    fn params(&self) -> Vec<&Tensor<S>> {
        self.weights.iter().collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.weights.iter_mut().collect()
    }
}

/// Pool regular features over the group axis and classify with a dense layer.
/// The result is invariant to transformations of the original input.
pub fn invariant_head<S: Scalar>(
    tape: &mut Tape<S>,
    group: &FiniteGroup,
    regular: NodeId,
    head: DenseB,
) -> Result<NodeId, EquituneError> {
    let pooled = group_mean_pool(tape, group, regular)?;
    let m = tape.value(pooled).len();
    let rowed = tape.reshape(pooled, &[1, m]);
    Ok(head.forward(tape, rowed))
}

/// Outcome of an equivariance sweep: the largest `‖f(g·x) − g·f(x)‖∞` over
/// all group elements and samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub max_deviation: f64,
    pub worst_element: usize,
    pub worst_element_label: String,
    pub worst_sample: usize,
    pub samples: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Measure how far `f` is from equivariance under the given actions, over the
/// provided samples. Passes iff the worst deviation is within `tolerance`.
pub fn check_equivariance<S, F>(
    f: F,
    group: &FiniteGroup,
    input_action: &GroupAction,
    output_action: &GroupAction,
    samples: &[Tensor<S>],
    tolerance: f64,
) -> Result<EquivarianceReport, EquituneError>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Tensor<S>,
{
    check_groups(group, input_action, output_action)?;
    let mut report = EquivarianceReport {
        max_deviation: 0.0,
        worst_element: group.identity(),
        worst_element_label: group.label(group.identity()).to_string(),
        worst_sample: 0,
        samples: samples.len(),
        tolerance,
        pass: true,
    };
    for (si, x) in samples.iter().enumerate() {
        let fx = f(x);
        for g in group.elements() {
            let xg = input_action.apply(g, x)?;
            let f_of_gx = f(&xg);
            let g_of_fx = output_action.apply(g, &fx)?;
            let dev = f_of_gx.max_abs_diff(&g_of_fx);
            if dev > report.max_deviation {
                report.max_deviation = dev;
                report.worst_element = g;
                report.worst_element_label = group.label(g).to_string();
                report.worst_sample = si;
            }
        }
    }
    report.pass = report.max_deviation <= tolerance;
    Ok(report)
}

/// A base model wrapped for equivariance: group, input/output actions,
/// feature mode, and an optional dense head on the averaged output.
#[derive(Debug, Clone)]
pub struct EquitunedModel<S: Scalar> {
    base: BaseModel<S>,
    group: FiniteGroup,
    input_action: GroupAction,
    output_action: GroupAction,
    mode: FeatureMode,
    head: Option<Dense<S>>,
}

/// Tape handle for one wrapped forward: the output node plus parameter node
/// ids (base params first, then head), in [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct EquitunedPass {
    pub output: NodeId,
    pub ids: Vec<NodeId>,
}

impl<S: Scalar> EquitunedModel<S> {
    pub fn new(
        base: BaseModel<S>,
        group: FiniteGroup,
        input_action: GroupAction,
        output_action: GroupAction,
        mode: FeatureMode,
    ) -> Result<Self, EquituneError> {
        check_groups(&group, &input_action, &output_action)?;
        Ok(Self {
            base,
            group,
            input_action,
            output_action,
            mode,
            head: None,
        })
    }

    /// Attach a dense head on the averaged output. Only meaningful when that
    /// output is invariant, i.e. scalar mode with a trivial output action.
    pub fn with_head(mut self, head: Dense<S>) -> Result<Self, EquituneError> {
        if self.mode != FeatureMode::Scalar || self.output_action.kind() != ActionKind::Trivial {
            return Err(EquituneError::HeadNeedsInvariantOutput {
                mode: self.mode,
                kind: self.output_action.kind(),
            });
        }
        self.head = Some(head);
        Ok(self)
    }

    pub fn base(&self) -> &BaseModel<S> {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut BaseModel<S> {
        &mut self.base
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn input_action(&self) -> &GroupAction {
        &self.input_action
    }

    pub fn output_action(&self) -> &GroupAction {
        &self.output_action
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn head(&self) -> Option<&Dense<S>> {
        self.head.as_ref()
    }

    /// Wrapped forward on a tape, for training. The head (when present)
    /// consumes the averaged output as a single row.
    pub fn forward_on(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
    ) -> Result<EquitunedPass, EquituneError> {
        let base_b = self.base.bind(tape);
        let mut ids = base_b.ids();
        let order = self.group.order();
        let fwd = |t: &mut Tape<S>, leaf: NodeId| base_b.forward_batch_of(t, leaf, order);
        let mut output = match self.mode {
            FeatureMode::Scalar => equitune_scalar_on_tape(
                tape,
                &self.group,
                &self.input_action,
                &self.output_action,
                x,
                fwd,
            )?,
            FeatureMode::Regular => equitune_regular_on_tape(
                tape,
                &self.group,
                &self.input_action,
                &self.output_action,
                x,
                fwd,
            )?,
        };
        if let Some(head) = &self.head {
            let hb = head.bind(tape);
            ids.extend(hb.ids());
            let m = tape.value(output).len();
            let rowed = tape.reshape(output, &[1, m]);
            let logits = hb.forward(tape, rowed);
            let classes = head.outputs();
            output = tape.reshape(logits, &[classes]);
        }
        Ok(EquitunedPass { output, ids })
    }

    /// Wrapped inference forward (scratch tape).
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, EquituneError> {
        let mut tape = Tape::new();
        let pass = self.forward_on(&mut tape, x)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Write the wrapper next to its checkpoints: `<stem>.json` describing
    /// {base architecture, checkpoint names, group, actions, mode, head},
    /// plus `<stem>.base.ckpt` / `<stem>.head.ckpt`.
    pub fn save(&self, json_path: &Path) -> Result<(), EquituneError> {
        let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
        let stem = json_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string();
        let base_name = format!("{stem}.base.ckpt");
        checkpoint::save_params(dir.join(&base_name), &self.base)?;
        let head_name = self.head.as_ref().map(|h| {
            let name = format!("{stem}.head.ckpt");
            checkpoint::save_params(dir.join(&name), h).map(|()| name)
        });
        let head_checkpoint = head_name.transpose()?;
        let spec = EquitunedSpec {
            base: self.base.spec(),
            base_checkpoint: base_name,
            group: self.group.clone(),
            input_action: self.input_action.clone(),
            output_action: self.output_action.clone(),
            mode: self.mode,
            head: self.head.as_ref().map(|h| HeadShape {
                inputs: h.inputs(),
                outputs: h.outputs(),
            }),
            head_checkpoint,
        };
        std::fs::write(json_path, serde_json::to_string_pretty(&spec)?)?;
        Ok(())
    }

    /// Rebuild a wrapper saved by [`EquitunedModel::save`].
    pub fn load(json_path: &Path) -> Result<Self, EquituneError> {
        let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
        let spec: EquitunedSpec = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
        let mut seed = crate::rng::stream(0, "equituned-load");
        let mut base = BaseModel::build(&spec.base, &mut seed);
        checkpoint::load_into(dir.join(&spec.base_checkpoint), &mut base)?;
        let mut model = Self::new(
            base,
            spec.group,
            spec.input_action,
            spec.output_action,
            spec.mode,
        )?;
        if let (Some(shape), Some(name)) = (&spec.head, &spec.head_checkpoint) {
            let mut head = Dense::zeros(shape.inputs, shape.outputs);
            checkpoint::load_into(dir.join(name), &mut head)?;
            model = model.with_head(head)?;
        }
        Ok(model)
    }
}

impl<S: Scalar> ParamSet<S> for EquitunedModel<S> {
    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ParamSet::<S>::param_names(&self.base)
            .iter()
            .map(|n| format!("base.{n}"))
            .collect();
        if let Some(h) = &self.head {
            names.extend(
                ParamSet::<S>::param_names(h)
                    .iter()
                    .map(|n| format!("head.{n}")),
            );
        }
        names
    }
    fn params(&self) -> Vec<&Tensor<S>> {
        let mut ps = self.base.params();
        if let Some(h) = &self.head {
            ps.extend(h.params());
        }
        ps
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut ps = self.base.params_mut();
        if let Some(h) = &mut self.head {
            ps.extend(h.params_mut());
        }
        ps
    }
}

/// On-disk description of an [`EquitunedModel`]: base architecture plus
/// checkpoint references, group, actions, mode, optional head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquitunedSpec {
    pub base: ModelSpec,
    pub base_checkpoint: String,
    pub group: FiniteGroup,
    pub input_action: GroupAction,
    pub output_action: GroupAction,
    pub mode: FeatureMode,
    pub head: Option<HeadShape>,
    pub head_checkpoint: Option<String>,
}

/// Dense head dimensions, for rebuilding before a checkpoint load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadShape {
    pub inputs: usize,
    pub outputs: usize,
}

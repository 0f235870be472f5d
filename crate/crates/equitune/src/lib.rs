//! Turn any differentiable model into a group-equivariant one by averaging
//! it over a finite symmetry group.
//!
//! Given a model `M`, a finite group `G` acting on inputs (`Γ_X`) and
//! outputs (`Γ_Y`), the wrapped model
//!
//! ```text
//! M_G(x) = (1/|G|) · Σ_g  Γ_Y(g⁻¹, M(Γ_X(g, x)))
//! ```
//!
//! is equivariant by construction: `M_G(h·x) = h·M_G(x)` for every `h ∈ G`,
//! with no retraining required (though a brief fine-tune under the averaged
//! objective usually recovers any lost accuracy). Because every group
//! operation here is a pure index remap and every orbit reduction sums its
//! `|G|` contributions in a fixed sorted order, the equivariance holds
//! *bitwise*, not merely up to rounding.
//!
//! The crate is self-contained:
//!
//! * [`group`] — finite groups as explicit Cayley tables, with axiom
//!   verifiers that report concrete counterexamples;
//! * [`action`] — how groups move data: image rotations/flips, token and
//!   vocabulary permutations, sequence lifts, and the trivial action;
//! * [`tensor`], [`tape`] — a dense tensor type and a minimal reverse-mode
//!   differentiation tape with the ops the toy models need;
//! * [`nn`] — the toy models: dense stacks, a small CNN, recurrent cells,
//!   an encoder–decoder, and a word-level language model;
//! * [`equitune`] — the wrapper itself: scalar and regular feature modes,
//!   group convolutions, invariant heads, and an equivariance checker;
//! * [`optim`], [`gradcheck`], [`checkpoint`] — training and persistence
//!   utilities, with finite-difference verification of every gradient;
//! * [`vision`], [`scan`], [`fairness`] — three desk-scale experiment
//!   harnesses: rotation-robust image classification, compositional
//!   command translation, and group-fair language modeling;
//! * [`report`] — the JSON run-report format the CLI emits.

pub mod action;
pub mod checkpoint;
pub mod equitune;
pub mod fairness;
pub mod gradcheck;
pub mod group;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod scan;
pub mod tape;
pub mod tensor;
pub mod vision;

pub use action::{ActionError, GroupAction};
pub use equitune::{
    check_equivariance, EquituneError, EquitunedModel, EquivarianceReport, FeatureMode,
};
pub use group::{FiniteGroup, GroupError};
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::Tensor;

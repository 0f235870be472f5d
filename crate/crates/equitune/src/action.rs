//! Group actions on the toolkit's carrier spaces.
//!
//! A [`GroupAction`] pairs a [`FiniteGroup`] with a per-element
//! transformation of one carrier space:
//!
//! * **image-rot-flip** — square `H×W` grids (trailing two axes of a tensor;
//!   leading axes such as channels or batch are mapped slice-by-slice and
//!   never permuted). The rotation `r` is a fixed 90° *counterclockwise*
//!   quarter turn and `f` is a horizontal mirror, so every element is a pure
//!   pixel permutation.
//! * **token-permutation** — ids of a token vocabulary, one permutation per
//!   group element, with an optional *undefined* subset on which the action
//!   is deliberately not defined (used by relaxed language-model wrappers).
//! * **sequence-lift** — token sequences, transformed token-by-token.
//! * **vector-permutation** — numeric vectors indexed by the vocabulary
//!   (logits or probabilities); entries move with their tokens, so sums,
//!   norms, and entry multisets are preserved exactly.
//! * **trivial** — every element acts as the identity (used for invariant
//!   output spaces such as class labels).
//!
//! All shipped actions are index permutations, hence exactly norm-preserving.
//! Actions are immutable after construction and safe to share across threads.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{FiniteGroup, GroupError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Errors from action construction and application.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ActionError {
    #[error("image actions require a square grid; got {h}×{w}")]
    NonSquareImage { h: usize, w: usize },
    #[error("tensor shape {shape:?} does not match this action's carrier")]
    CarrierMismatch { shape: Vec<usize> },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    UnknownToken { token: usize, vocab: usize },
    #[error("action is undefined on token id {token} (general set)")]
    UndefinedToken { token: usize },
    #[error("operation not supported for action kind {kind:?}")]
    WrongKind { kind: ActionKind },
    #[error("permutation table must have one row of length {expected} per group element")]
    BadPermutationTable { expected: usize },
    #[error(transparent)]
    Group(#[from] GroupError),
}

/// Carrier-space flavor of a [`GroupAction`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionKind {
    ImageRotFlip,
    TokenPermutation,
    SequenceLift,
    VectorPermutation,
    Trivial,
}

/// One violated action axiom, with a witness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionViolation {
    /// `act(e, x) ≠ x` on sample `sample`.
    Identity { sample: usize },
    /// `act(g, act(h, x)) ≠ act(g·h, x)` on sample `sample`.
    Compatibility { g: usize, h: usize, sample: usize },
    /// Element `g`'s map sends two defined tokens to the same image.
    NonBijective { g: usize, duplicated_target: usize },
}

impl std::fmt::Display for ActionViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Identity { sample } => write!(f, "identity axiom fails on sample {sample}"),
            Self::Compatibility { g, h, sample } => {
                write!(
                    f,
                    "compatibility fails for (g={g}, h={h}) on sample {sample}"
                )
            }
            Self::NonBijective {
                g,
                duplicated_target,
            } => write!(
                f,
                "element {g} is not a bijection (target {duplicated_target} hit twice)"
            ),
        }
    }
}

/// Result of action verification; empty means no violation found.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionReport {
    pub violations: Vec<ActionViolation>,
}

impl ActionReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: ActionReport) {
        self.violations.extend(other.violations);
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ActionData {
    /// Per-element pixel *source* maps over a `side×side` grid:
    /// `out[p] = in[src[p]]`.
    Image {
        side: usize,
        src: Vec<Vec<usize>>,
    },
    /// Per-element token maps `perm[g][t] = g·t`; `undefined` tokens are
    /// stored as fixed points but flagged.
    Tokens {
        perms: Vec<Vec<usize>>,
        undefined: BTreeSet<usize>,
    },
    Trivial,
}

/// A finite group acting on one carrier space. See the module docs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ActionRepr", into = "ActionRepr")]
pub struct GroupAction {
    group: FiniteGroup,
    kind: ActionKind,
    data: ActionData,
}

/// Serialized form: groups plus either permutation tables or the coordinate
/// rule that regenerates the pixel maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum ActionRepr {
    ImageRotFlip {
        group: FiniteGroup,
        side: usize,
        flips: bool,
    },
    TokenPermutation {
        group: FiniteGroup,
        perms: Vec<Vec<usize>>,
        undefined: BTreeSet<usize>,
    },
    SequenceLift {
        group: FiniteGroup,
        perms: Vec<Vec<usize>>,
        undefined: BTreeSet<usize>,
    },
    VectorPermutation {
        group: FiniteGroup,
        perms: Vec<Vec<usize>>,
    },
    Trivial {
        group: FiniteGroup,
    },
}

impl From<GroupAction> for ActionRepr {
    fn from(a: GroupAction) -> Self {
        match (a.kind, a.data) {
            (ActionKind::ImageRotFlip, ActionData::Image { side, .. }) => {
                ActionRepr::ImageRotFlip {
                    flips: a.group.order() == 8,
                    group: a.group,
                    side,
                }
            }
            (ActionKind::TokenPermutation, ActionData::Tokens { perms, undefined }) => {
                ActionRepr::TokenPermutation {
                    group: a.group,
                    perms,
                    undefined,
                }
            }
            (ActionKind::SequenceLift, ActionData::Tokens { perms, undefined }) => {
                ActionRepr::SequenceLift {
                    group: a.group,
                    perms,
                    undefined,
                }
            }
            (ActionKind::VectorPermutation, ActionData::Tokens { perms, .. }) => {
                ActionRepr::VectorPermutation {
                    group: a.group,
                    perms,
                }
            }
            (_, _) => ActionRepr::Trivial { group: a.group },
        }
    }
}

impl TryFrom<ActionRepr> for GroupAction {
    type Error = ActionError;

    fn try_from(r: ActionRepr) -> Result<Self, Self::Error> {
        match r {
            ActionRepr::ImageRotFlip { group, side, flips } => {
                if flips {
                    GroupAction::image_d4(side, side).map(|mut a| {
                        a.group = group;
                        a
                    })
                } else {
                    GroupAction::image_c4(side, side).map(|mut a| {
                        a.group = group;
                        a
                    })
                }
            }
            ActionRepr::TokenPermutation {
                group,
                perms,
                undefined,
            } => GroupAction::token_permutation(group, perms, undefined),
            ActionRepr::SequenceLift {
                group,
                perms,
                undefined,
            } => Ok(GroupAction::token_permutation(group, perms, undefined)?.lifted()),
            ActionRepr::VectorPermutation { group, perms } => {
                GroupAction::vector_permutation(group, perms)
            }
            ActionRepr::Trivial { group } => Ok(GroupAction::trivial(group)),
        }
    }
}

/// Pixel source map of one 90° counterclockwise quarter turn:
/// `new[i][j] = old[j][n-1-i]`.
fn rot_source(n: usize) -> Vec<usize> {
    let mut src = vec![0usize; n * n];
    for i in 0..n {
        for j in 0..n {
            src[i * n + j] = j * n + (n - 1 - i);
        }
    }
    src
}

/// Pixel source map of the horizontal mirror: `new[i][j] = old[i][n-1-j]`.
fn flip_source(n: usize) -> Vec<usize> {
    let mut src = vec![0usize; n * n];
    for i in 0..n {
        for j in 0..n {
            src[i * n + j] = i * n + (n - 1 - j);
        }
    }
    src
}

/// Source map of `a` applied after `b` (i.e. the transform `x ↦ a(b(x))`):
/// `src[p] = src_b[src_a[p]]`.
fn compose_sources(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().map(|&p| b[p]).collect()
}

impl GroupAction {
    /// The group whose elements this action interprets.
    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn kind(&self) -> ActionKind {
        self.kind
    }

    /// Tokens on which the action is undefined (the general set); empty for
    /// non-token kinds.
    pub fn undefined_tokens(&self) -> BTreeSet<usize> {
        match &self.data {
            ActionData::Tokens { undefined, .. } => undefined.clone(),
            _ => BTreeSet::new(),
        }
    }

    /// Trivial action of `group`: every element acts as the identity.
    pub fn trivial(group: FiniteGroup) -> Self {
        Self {
            group,
            kind: ActionKind::Trivial,
            data: ActionData::Trivial,
        }
    }

    /// 90°-rotation action of `C₄` on square `h×w` grids.
    pub fn image_c4(h: usize, w: usize) -> Result<Self, ActionError> {
        if h != w {
            return Err(ActionError::NonSquareImage { h, w });
        }
        let group = FiniteGroup::make_cyclic(4)?;
        let r = rot_source(h);
        let mut src = vec![(0..h * h).collect::<Vec<_>>()];
        for k in 1..4 {
            let prev: &Vec<usize> = &src[k - 1];
            // rᵏ = r applied after rᵏ⁻¹.
            src.push(compose_sources(&r, prev));
        }
        Ok(Self {
            group,
            kind: ActionKind::ImageRotFlip,
            data: ActionData::Image { side: h, src },
        })
    }

    /// Rotation+horizontal-flip action of `D₄` on square `h×w` grids.
    ///
    /// Element `n+k` (`f·rᵏ`) transforms by rotating `k` quarter turns and
    /// then mirroring, consistent with the `D₄` Cayley table.
    pub fn image_d4(h: usize, w: usize) -> Result<Self, ActionError> {
        if h != w {
            return Err(ActionError::NonSquareImage { h, w });
        }
        let group = FiniteGroup::make_dihedral(4)?;
        let r = rot_source(h);
        let f = flip_source(h);
        let mut rots = vec![(0..h * h).collect::<Vec<_>>()];
        for k in 1..4 {
            let prev: &Vec<usize> = &rots[k - 1];
            rots.push(compose_sources(&r, prev));
        }
        let mut src = rots.clone();
        for rk in &rots {
            // f·rᵏ acts as "f after rᵏ": src = src_rᵏ ∘ src_f.
            src.push(compose_sources(&f, rk));
        }
        Ok(Self {
            group,
            kind: ActionKind::ImageRotFlip,
            data: ActionData::Image { side: h, src },
        })
    }

    /// Token-permutation action from explicit per-element maps.
    ///
    /// `perms[g][t]` is the image of token `t` under element `g`; `undefined`
    /// lists tokens the action deliberately does not act on (stored as fixed
    /// points, flagged on application). Only structural shape is validated
    /// here — semantic problems (non-bijective maps, broken axioms) are the
    /// verifier's job, so they can be injected in tests.
    pub fn token_permutation(
        group: FiniteGroup,
        perms: Vec<Vec<usize>>,
        undefined: BTreeSet<usize>,
    ) -> Result<Self, ActionError> {
        if perms.len() != group.order() {
            return Err(ActionError::BadPermutationTable {
                expected: group.order(),
            });
        }
        let vocab = perms.first().map_or(0, Vec::len);
        if perms.iter().any(|p| p.len() != vocab) {
            return Err(ActionError::BadPermutationTable { expected: vocab });
        }
        Ok(Self {
            group,
            kind: ActionKind::TokenPermutation,
            data: ActionData::Tokens { perms, undefined },
        })
    }

    /// Vector-permutation action over vocabulary-indexed vectors: entry `t`
    /// moves to position `perms[g][t]`.
    pub fn vector_permutation(
        group: FiniteGroup,
        perms: Vec<Vec<usize>>,
    ) -> Result<Self, ActionError> {
        let mut a = Self::token_permutation(group, perms, BTreeSet::new())?;
        a.kind = ActionKind::VectorPermutation;
        Ok(a)
    }

    /// Lift a token action to token sequences (elementwise application).
    pub fn lifted(mut self) -> Self {
        assert!(
            matches!(
                self.kind,
                ActionKind::TokenPermutation | ActionKind::SequenceLift
            ),
            "only token actions lift to sequences"
        );
        self.kind = ActionKind::SequenceLift;
        self
    }

    /// View a token or sequence action as the matching vector-permutation
    /// action on vocabulary-indexed vectors (probabilities/logits).
    pub fn as_vector_action(&self) -> Result<Self, ActionError> {
        match &self.data {
            ActionData::Tokens { perms, .. } => {
                Self::vector_permutation(self.group.clone(), perms.clone())
            }
            _ => Err(ActionError::WrongKind { kind: self.kind }),
        }
    }

    /// Vocabulary size for token-backed kinds.
    pub fn vocab_size(&self) -> Option<usize> {
        match &self.data {
            ActionData::Tokens { perms, .. } => Some(perms.first().map_or(0, Vec::len)),
            _ => None,
        }
    }

    /// Apply element `g` to a single token id (strict semantics: undefined
    /// tokens are an error).
    pub fn apply_token(&self, g: usize, token: usize) -> Result<usize, ActionError> {
        let (mapped, was_undefined) = self.apply_token_relaxed(g, token)?;
        if was_undefined {
            return Err(ActionError::UndefinedToken { token });
        }
        Ok(mapped)
    }

    /// Apply element `g` to a token under relaxed semantics: tokens in the
    /// undefined subset pass through unchanged, flagged `true` in the return.
    pub fn apply_token_relaxed(
        &self,
        g: usize,
        token: usize,
    ) -> Result<(usize, bool), ActionError> {
        self.group.compose(g, self.group.identity())?; // bounds-check g
        match &self.data {
            ActionData::Tokens { perms, undefined } => {
                let vocab = perms[g].len();
                if token >= vocab {
                    return Err(ActionError::UnknownToken { token, vocab });
                }
                if undefined.contains(&token) {
                    Ok((token, true))
                } else {
                    Ok((perms[g][token], false))
                }
            }
            ActionData::Trivial => Ok((token, false)),
            _ => Err(ActionError::WrongKind { kind: self.kind }),
        }
    }

    /// Apply element `g` to a token sequence (strict semantics).
    pub fn apply_seq(&self, g: usize, seq: &[usize]) -> Result<Vec<usize>, ActionError> {
        seq.iter().map(|&t| self.apply_token(g, t)).collect()
    }

    /// Apply element `g` to a token sequence, passing undefined tokens
    /// through unchanged.
    pub fn apply_seq_relaxed(&self, g: usize, seq: &[usize]) -> Result<Vec<usize>, ActionError> {
        seq.iter()
            .map(|&t| self.apply_token_relaxed(g, t).map(|(m, _)| m))
            .collect()
    }

    /// Apply element `g` to a tensor carrier (image, vector, or trivial
    /// kinds). Pure data movement: no arithmetic is performed, so repeated
    /// application composes exactly.
    pub fn apply<S: Scalar>(&self, g: usize, x: &Tensor<S>) -> Result<Tensor<S>, ActionError> {
        let src = self.source_map(g, x.shape())?;
        let data = src.iter().map(|&p| x.data()[p]).collect();
        Ok(Tensor::from_vec(x.shape().to_vec(), data).expect("source map preserves length"))
    }

    /// Flat *source* index map realizing element `g` on tensors of `shape`:
    /// `out[i] = in[map[i]]`. This is what the differentiation tape's
    /// index-remap operation consumes, so the same map serves both the plain
    /// and the differentiable paths.
    pub fn source_map(&self, g: usize, shape: &[usize]) -> Result<Vec<usize>, ActionError> {
        self.group.compose(g, self.group.identity())?; // bounds-check g
        let total: usize = shape.iter().product();
        match &self.data {
            ActionData::Trivial => Ok((0..total).collect()),
            ActionData::Image { side, src } => {
                let n = *side;
                if shape.len() < 2 || shape[shape.len() - 1] != n || shape[shape.len() - 2] != n {
                    return Err(ActionError::CarrierMismatch {
                        shape: shape.to_vec(),
                    });
                }
                let plane = n * n;
                let lead = total / plane;
                let s = &src[g];
                let mut map = Vec::with_capacity(total);
                for l in 0..lead {
                    let base = l * plane;
                    map.extend(s.iter().map(|&p| base + p));
                }
                Ok(map)
            }
            ActionData::Tokens { perms, .. } => {
                if self.kind != ActionKind::VectorPermutation {
                    return Err(ActionError::WrongKind { kind: self.kind });
                }
                let vocab = perms[g].len();
                if shape.last() != Some(&vocab) {
                    return Err(ActionError::CarrierMismatch {
                        shape: shape.to_vec(),
                    });
                }
                // (g·v)[perm[t]] = v[t]  ⇔  out[u] = in[perm⁻¹[u]].
                let mut inv = vec![usize::MAX; vocab];
                for (t, &u) in perms[g].iter().enumerate() {
                    inv[u] = t;
                }
                if inv.iter().any(|&t| t == usize::MAX) {
                    return Err(ActionError::BadPermutationTable { expected: vocab });
                }
                let lead = total / vocab;
                let mut map = Vec::with_capacity(total);
                for l in 0..lead {
                    let base = l * vocab;
                    map.extend(inv.iter().map(|&t| base + t));
                }
                Ok(map)
            }
        }
    }

    /// Check that every element's map is a bijection on its defined domain.
    pub fn verify_bijectivity(&self) -> ActionReport {
        let mut report = ActionReport::default();
        match &self.data {
            ActionData::Tokens { perms, undefined } => {
                for (g, perm) in perms.iter().enumerate() {
                    let mut seen = vec![false; perm.len()];
                    for (t, &u) in perm.iter().enumerate() {
                        if undefined.contains(&t) {
                            continue;
                        }
                        if u >= perm.len() || seen[u] {
                            report.violations.push(ActionViolation::NonBijective {
                                g,
                                duplicated_target: u.min(perm.len().saturating_sub(1)),
                            });
                            break;
                        }
                        seen[u] = true;
                    }
                }
            }
            ActionData::Image { src, .. } => {
                for (g, s) in src.iter().enumerate() {
                    let mut seen = vec![false; s.len()];
                    for &p in s {
                        if seen[p] {
                            report.violations.push(ActionViolation::NonBijective {
                                g,
                                duplicated_target: p,
                            });
                            break;
                        }
                        seen[p] = true;
                    }
                }
            }
            ActionData::Trivial => {}
        }
        report
    }

    /// Verify the identity and compatibility axioms on tensor samples, plus
    /// bijectivity of every element map.
    pub fn verify_tensor_axioms<S: Scalar>(&self, samples: &[Tensor<S>]) -> ActionReport {
        let mut report = self.verify_bijectivity();
        report.merge(verify_action_axioms_with(
            &self.group,
            |g, x: &Tensor<S>| self.apply(g, x).expect("samples match carrier"),
            samples,
        ));
        report
    }

    /// Verify the axioms on token-sequence samples (undefined tokens must be
    /// excluded from the samples; they are outside the action's domain).
    pub fn verify_sequence_axioms(&self, samples: &[Vec<usize>]) -> ActionReport {
        let mut report = self.verify_bijectivity();
        report.merge(verify_action_axioms_with(
            &self.group,
            |g, seq: &Vec<usize>| self.apply_seq(g, seq).expect("samples in defined domain"),
            samples,
        ));
        report
    }
}

/// Exhaustively check the identity and compatibility axioms of `apply` over
/// all `(g, h)` pairs and all samples. Works for any carrier with equality.
pub fn verify_action_axioms_with<V, F>(group: &FiniteGroup, apply: F, samples: &[V]) -> ActionReport
where
    V: Clone + PartialEq,
    F: Fn(usize, &V) -> V,
{
    let mut report = ActionReport::default();
    let e = group.identity();
    for (i, x) in samples.iter().enumerate() {
        if apply(e, x) != *x {
            report
                .violations
                .push(ActionViolation::Identity { sample: i });
        }
    }
    for g in group.elements() {
        for h in group.elements() {
            let gh = group.mul(g, h);
            for (i, x) in samples.iter().enumerate() {
                let stepwise = apply(g, &apply(h, x));
                let direct = apply(gh, x);
                if stepwise != direct {
                    report
                        .violations
                        .push(ActionViolation::Compatibility { g, h, sample: i });
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid2x2() -> Tensor<f64> {
        Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    fn random_grids(side: usize, count: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = stream(seed, "action-test-grids");
        (0..count)
            .map(|_| {
                let data = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::from_vec(vec![side, side], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn quarter_turn_is_counterclockwise() {
        let a = GroupAction::image_c4(2, 2).unwrap();
        let r = a.apply(1, &grid2x2()).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn half_turn_matches_fixture() {
        let a = GroupAction::image_c4(2, 2).unwrap();
        let r2 = a.apply(2, &grid2x2()).unwrap();
        assert_eq!(r2.data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn horizontal_flip_matches_fixture() {
        let a = GroupAction::image_d4(2, 2).unwrap();
        let f = a.apply(4, &grid2x2()).unwrap();
        assert_eq!(f.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let a = GroupAction::image_c4(5, 5).unwrap();
        let x = random_grids(5, 1, 3)[0].clone();
        let mut y = x.clone();
        for _ in 0..4 {
            y = a.apply(1, &y).unwrap();
        }
        assert_eq!(x, y);
    }

    #[test]
    fn non_square_images_rejected() {
        assert!(matches!(
            GroupAction::image_c4(3, 4),
            Err(ActionError::NonSquareImage { h: 3, w: 4 })
        ));
    }

    #[test]
    fn channels_are_not_permuted() {
        // A [2, 2, 2] tensor: each channel rotates independently.
        let a = GroupAction::image_c4(2, 2).unwrap();
        let x = Tensor::from_vec(
            vec![2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        )
        .unwrap();
        let y = a.apply(1, &x).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 1.0, 3.0, 20.0, 40.0, 10.0, 30.0]);
    }

    #[test]
    fn c4_axioms_hold_on_random_grids() {
        let a = GroupAction::image_c4(4, 4).unwrap();
        let report = a.verify_tensor_axioms(&random_grids(4, 50, 7));
        assert!(report.is_empty(), "{:?}", report.violations);
    }

    #[test]
    fn d4_axioms_hold_on_random_grids() {
        let a = GroupAction::image_d4(4, 4).unwrap();
        let report = a.verify_tensor_axioms(&random_grids(4, 50, 8));
        assert!(report.is_empty(), "{:?}", report.violations);
    }

    #[test]
    fn d4_flip_rotation_relation() {
        // f·r·f = r⁻¹ as pixel maps on a 4×4 grid.
        let a = GroupAction::image_d4(4, 4).unwrap();
        let g = a.group().clone();
        let x = random_grids(4, 1, 9)[0].clone();
        let (r, f) = (1usize, 4usize);
        let frf = g.mul(f, g.mul(r, f));
        assert_eq!(frf, g.inv(r));
        let lhs = a.apply(frf, &x).unwrap();
        let rhs = a
            .apply(f, &a.apply(r, &a.apply(f, &x).unwrap()).unwrap())
            .unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn inverse_cancels() {
        let a = GroupAction::image_d4(6, 6).unwrap();
        let x = random_grids(6, 1, 11)[0].clone();
        for g in a.group().elements() {
            let back = a.apply(a.group().inv(g), &a.apply(g, &x).unwrap()).unwrap();
            assert_eq!(back, x, "g = {}", a.group().label(g));
        }
    }

    #[test]
    fn token_action_relaxed_passthrough() {
        let g = FiniteGroup::make_cyclic(2).unwrap();
        // vocab = [a, b, n, u]: swap a↔b, fix n, u undefined.
        let perms = vec![vec![0, 1, 2, 3], vec![1, 0, 2, 3]];
        let a = GroupAction::token_permutation(g, perms, BTreeSet::from([3])).unwrap();
        assert_eq!(a.apply_token(1, 0).unwrap(), 1);
        assert_eq!(a.apply_token(1, 2).unwrap(), 2);
        assert!(matches!(
            a.apply_token(1, 3),
            Err(ActionError::UndefinedToken { token: 3 })
        ));
        assert_eq!(a.apply_token_relaxed(1, 3).unwrap(), (3, true));
        assert!(matches!(
            a.apply_token(1, 9),
            Err(ActionError::UnknownToken { token: 9, vocab: 4 })
        ));
    }

    #[test]
    fn sequence_lift_applies_tokenwise() {
        let g = FiniteGroup::make_cyclic(2).unwrap();
        let perms = vec![vec![0, 1, 2], vec![1, 0, 2]];
        let a = GroupAction::token_permutation(g, perms, BTreeSet::new())
            .unwrap()
            .lifted();
        assert_eq!(a.kind(), ActionKind::SequenceLift);
        assert_eq!(a.apply_seq(1, &[0, 2, 1, 2]).unwrap(), vec![1, 2, 0, 2]);
    }

    #[test]
    fn vector_action_moves_entries_with_tokens() {
        let g = FiniteGroup::make_cyclic(2).unwrap();
        let perms = vec![vec![0, 1, 2], vec![1, 0, 2]];
        let a = GroupAction::vector_permutation(g, perms).unwrap();
        let v = Tensor::from_vec(vec![3], vec![0.7, 0.2, 0.1]).unwrap();
        let gv = a.apply(1, &v).unwrap();
        assert_eq!(gv.data(), &[0.2, 0.7, 0.1]);
        assert_eq!(gv.sum(), v.sum(), "permutations preserve sums exactly");
    }

    #[test]
    fn non_bijective_map_is_flagged() {
        let g = FiniteGroup::make_cyclic(2).unwrap();
        let perms = vec![vec![0, 1, 2], vec![1, 1, 2]]; // duplicated target 1
        let a = GroupAction::token_permutation(g, perms, BTreeSet::new()).unwrap();
        let report = a.verify_bijectivity();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, ActionViolation::NonBijective { g: 1, .. })));
    }

    #[test]
    fn identity_axiom_break_is_flagged() {
        let g = FiniteGroup::make_cyclic(2).unwrap();
        let perms = vec![vec![1, 0, 2], vec![1, 0, 2]]; // e does not act as identity
        let a = GroupAction::token_permutation(g, perms, BTreeSet::new()).unwrap();
        let report = a.verify_sequence_axioms(&[vec![0, 1, 2]]);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, ActionViolation::Identity { .. })));
    }

    #[test]
    fn trivial_action_passes() {
        let a = GroupAction::trivial(FiniteGroup::make_cyclic(4).unwrap());
        let report = a.verify_tensor_axioms(&random_grids(3, 5, 13));
        assert!(report.is_empty());
    }

    #[test]
    fn serde_roundtrip_image_and_token() {
        let img = GroupAction::image_d4(4, 4).unwrap();
        let json = serde_json::to_string(&img).unwrap();
        let back: GroupAction = serde_json::from_str(&json).unwrap();
        assert_eq!(img, back);

        let g = FiniteGroup::make_cyclic(2).unwrap();
        let tok = GroupAction::token_permutation(
            g,
            vec![vec![0, 1, 2], vec![1, 0, 2]],
            BTreeSet::from([2]),
        )
        .unwrap();
        let json = serde_json::to_string(&tok).unwrap();
        let back: GroupAction = serde_json::from_str(&json).unwrap();
        assert_eq!(tok, back);
    }

    #[test]
    fn source_map_matches_apply() {
        let a = GroupAction::image_d4(3, 3).unwrap();
        let x = random_grids(3, 1, 17)[0].clone();
        for g in a.group().elements() {
            let map = a.source_map(g, x.shape()).unwrap();
            let via_map: Vec<f64> = map.iter().map(|&p| x.data()[p]).collect();
            assert_eq!(via_map, a.apply(g, &x).unwrap().into_data());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn image_actions_satisfy_axioms(side in 2usize..6, seed in 0u64..500, flips in any::<bool>()) {
            let a = if flips {
                GroupAction::image_d4(side, side).unwrap()
            } else {
                GroupAction::image_c4(side, side).unwrap()
            };
            let samples = random_grids(side, 4, seed);
            prop_assert!(a.verify_tensor_axioms(&samples).is_empty());
        }

        #[test]
        fn vector_permutations_preserve_sums(seed in 0u64..500) {
            let mut rng = stream(seed, "vec-perm");
            let g = FiniteGroup::make_cyclic(3).unwrap();
            // 3-cycle on the first three tokens, two fixed tokens.
            let base = vec![1usize, 2, 0, 3, 4];
            let mut perms = vec![(0..5).collect::<Vec<_>>()];
            perms.push(base.clone());
            perms.push(base.iter().map(|&t| base[t]).collect());
            let a = GroupAction::vector_permutation(g, perms).unwrap();
            let v = Tensor::from_vec(vec![5], (0..5).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>()).unwrap();
            for g in a.group().elements() {
                let gv = a.apply(g, &v).unwrap();
                // The entry multiset is preserved, so order-independent sums
                // agree bitwise.
                let mut sv = v.data().to_vec();
                let mut sgv = gv.data().to_vec();
                prop_assert_eq!(
                    crate::scalar::sorted_sum(&mut sgv).to_bits(),
                    crate::scalar::sorted_sum(&mut sv).to_bits()
                );
                sv.sort_by(f64::total_cmp);
                sgv.sort_by(f64::total_cmp);
                prop_assert_eq!(sv, sgv);
            }
        }
    }
}

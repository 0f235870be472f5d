//! Finite groups as explicit multiplication tables.
//!
//! A [`FiniteGroup`] stores the full Cayley table of a group of order `n`
//! together with the identity index, the inverse map, and human-readable
//! element labels. Explicit tables keep every query O(1), make exhaustive
//! axiom verification possible, and serialize bit-exactly; the groups used by
//! the equivariance transforms never exceed order 8, so the O(n²) storage is
//! irrelevant.
//!
//! Conventions (fixed so fixtures and serialized records are deterministic):
//! * the identity is always element index `0`;
//! * `make_cyclic(n)` indexes element `i` as `gⁱ`;
//! * `make_dihedral(n)` lists the `n` rotations `rᵏ` first (indices `0..n`),
//!   then the `n` reflections `f·rᵏ` (indices `n..2n`), where `f·rᵏ` means
//!   "rotate by `rᵏ`, then reflect".

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from group construction and element queries.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroupError {
    #[error("group order must be at least 1")]
    InvalidOrder,
    #[error("element index {index} out of range for group of order {order}")]
    ElementOutOfRange { index: usize, order: usize },
    #[error("malformed table: {0}")]
    MalformedTable(String),
}

/// One violated group axiom, with a witness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupViolation {
    /// `table[a][b]` is not a valid element index (closure failure).
    Closure { a: usize, b: usize, entry: usize },
    /// `e·k ≠ k` or `k·e ≠ k`.
    Identity { k: usize },
    /// `k · inverses[k] ≠ e` or `inverses[k] · k ≠ e`.
    Inverse { k: usize },
    /// `(a·b)·c ≠ a·(b·c)`.
    Associativity { a: usize, b: usize, c: usize },
}

impl std::fmt::Display for GroupViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Closure { a, b, entry } => {
                write!(f, "closure: table[{a}][{b}] = {entry} is out of range")
            }
            Self::Identity { k } => write!(f, "identity axiom fails at element {k}"),
            Self::Inverse { k } => write!(f, "inverse axiom fails at element {k}"),
            Self::Associativity { a, b, c } => {
                write!(f, "associativity fails on triple ({a}, {b}, {c})")
            }
        }
    }
}

/// Result of [`FiniteGroup::verify_group_axioms`]: empty means all axioms hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub violations: Vec<GroupViolation>,
}

impl AxiomReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// A finite group given by its Cayley table.
///
/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteGroup {
    order: usize,
    /// Row-major: `table[a][b]` is the index of `gₐ·g_b`.
    table: Vec<Vec<usize>>,
    identity: usize,
    inverses: Vec<usize>,
    labels: Vec<String>,
}

impl FiniteGroup {
    /// Build from raw parts, checking only structural consistency
    /// (dimensions and ranges). Axioms are checked separately by
    /// [`Self::verify_group_axioms`], so deliberately broken tables can be
    /// constructed for verifier tests.
    pub fn from_parts(
        table: Vec<Vec<usize>>,
        identity: usize,
        inverses: Vec<usize>,
        labels: Vec<String>,
    ) -> Result<Self, GroupError> {
        let order = table.len();
        if order == 0 {
            return Err(GroupError::InvalidOrder);
        }
        if table.iter().any(|row| row.len() != order) {
            return Err(GroupError::MalformedTable(format!(
                "table must be {order}×{order}"
            )));
        }
        if inverses.len() != order {
            return Err(GroupError::MalformedTable(format!(
                "inverse map has {} entries, expected {order}",
                inverses.len()
            )));
        }
        if labels.len() != order {
            return Err(GroupError::MalformedTable(format!(
                "labels has {} entries, expected {order}",
                labels.len()
            )));
        }
        if identity >= order {
            return Err(GroupError::ElementOutOfRange {
                index: identity,
                order,
            });
        }
        if let Some(&bad) = inverses.iter().find(|&&i| i >= order) {
            return Err(GroupError::ElementOutOfRange { index: bad, order });
        }
        Ok(Self {
            order,
            table,
            identity,
            inverses,
            labels,
        })
    }

    /// Cyclic group `Cₙ`: `table[i][j] = (i+j) mod n`, identity `0`,
    /// element `i` labeled `gⁱ`.
    pub fn make_cyclic(n: usize) -> Result<Self, GroupError> {
        if n == 0 {
            return Err(GroupError::InvalidOrder);
        }
        let table = (0..n)
            .map(|i| (0..n).map(|j| (i + j) % n).collect())
            .collect();
        let inverses = (0..n).map(|i| (n - i) % n).collect();
        let labels = (0..n)
            .map(|i| match i {
                0 => "e".to_string(),
                1 => "g".to_string(),
                _ => format!("g^{i}"),
            })
            .collect();
        Self::from_parts(table, 0, inverses, labels)
    }

    /// Dihedral group `Dₙ` of order `2n` with relations
    /// `rⁿ = e`, `f² = e`, `f·r·f = r⁻¹`.
    ///
    /// Index `k` (`k < n`) is the rotation `rᵏ`; index `n+k` is the
    /// reflection `f·rᵏ`. Writing elements as `fˢ·rᵏ`, the product is
    /// `(fˢ¹·rᵏ¹)(fˢ²·rᵏ²) = f^(s¹ xor s²) · r^((s²=1 ? n−k¹ : k¹)+k² mod n)`.
    pub fn make_dihedral(n: usize) -> Result<Self, GroupError> {
        if n == 0 {
            return Err(GroupError::InvalidOrder);
        }
        let order = 2 * n;
        let idx = |s: usize, k: usize| s * n + (k % n);
        let mut table = vec![vec![0usize; order]; order];
        for s1 in 0..2 {
            for k1 in 0..n {
                for s2 in 0..2 {
                    for k2 in 0..n {
                        let s = s1 ^ s2;
                        let k = if s2 == 1 { (n - k1) % n + k2 } else { k1 + k2 };
                        table[idx(s1, k1)][idx(s2, k2)] = idx(s, k);
                    }
                }
            }
        }
        let mut inverses = vec![0usize; order];
        for (a, inv) in inverses.iter_mut().enumerate() {
            *inv = (0..order)
                .find(|&b| table[a][b] == 0 && table[b][a] == 0)
                .expect("dihedral table always has inverses");
        }
        let labels = (0..order)
            .map(|i| {
                let (s, k) = (i / n, i % n);
                match (s, k) {
                    (0, 0) => "e".to_string(),
                    (0, 1) => "r".to_string(),
                    (0, _) => format!("r^{k}"),
                    (_, 0) => "f".to_string(),
                    (_, 1) => "f·r".to_string(),
                    (_, _) => format!("f·r^{k}"),
                }
            })
            .collect();
        Self::from_parts(table, 0, inverses, labels)
    }

    /// Trivial group `C₁`.
    pub fn trivial() -> Self {
        Self::make_cyclic(1).expect("order 1 is valid")
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn identity(&self) -> usize {
        self.identity
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, a: usize) -> &str {
        &self.labels[a]
    }

    /// Bounds-checked product `gₐ·g_b`.
    pub fn compose(&self, a: usize, b: usize) -> Result<usize, GroupError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.table[a][b])
    }

    /// Bounds-checked inverse.
    pub fn inverse_of(&self, a: usize) -> Result<usize, GroupError> {
        self.check(a)?;
        Ok(self.inverses[a])
    }

    /// Unchecked product for internal hot paths (panics on bad indices).
    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.table[a][b]
    }

    /// Unchecked inverse for internal hot paths.
    pub fn inv(&self, a: usize) -> usize {
        self.inverses[a]
    }

    /// Iterator over all element indices.
    pub fn elements(&self) -> std::ops::Range<usize> {
        0..self.order
    }

    fn check(&self, a: usize) -> Result<(), GroupError> {
        if a >= self.order {
            Err(GroupError::ElementOutOfRange {
                index: a,
                order: self.order,
            })
        } else {
            Ok(())
        }
    }

    /// Exhaustively check closure, identity, inverse, and associativity.
    ///
    /// Structural problems (non-square table, wrong map lengths) surface as
    /// an `Err` before any axiom is evaluated; axiom violations are collected
    /// with witnesses into the report. The associativity sweep is the full
    /// `order³` triple loop, skipping triples whose products already failed
    /// closure.
    pub fn verify_group_axioms(&self) -> Result<AxiomReport, GroupError> {
        if self.table.len() != self.order || self.table.iter().any(|row| row.len() != self.order) {
            return Err(GroupError::MalformedTable(format!(
                "table must be {0}×{0}",
                self.order
            )));
        }
        if self.inverses.len() != self.order {
            return Err(GroupError::MalformedTable(
                "inverse map length mismatch".to_string(),
            ));
        }

        let mut report = AxiomReport::default();
        let n = self.order;
        let in_range = |x: usize| x < n;

        for a in 0..n {
            for b in 0..n {
                let entry = self.table[a][b];
                if !in_range(entry) {
                    report
                        .violations
                        .push(GroupViolation::Closure { a, b, entry });
                }
            }
        }
        for k in 0..n {
            if self.table[self.identity][k] != k || self.table[k][self.identity] != k {
                report.violations.push(GroupViolation::Identity { k });
            }
        }
        for k in 0..n {
            let ik = self.inverses[k];
            if !in_range(ik)
                || self.table[k][ik] != self.identity
                || self.table[ik][k] != self.identity
            {
                report.violations.push(GroupViolation::Inverse { k });
            }
        }
        for a in 0..n {
            for b in 0..n {
                let ab = self.table[a][b];
                if !in_range(ab) {
                    continue;
                }
                for c in 0..n {
                    let bc = self.table[b][c];
                    if !in_range(bc) {
                        continue;
                    }
                    if self.table[ab][c] != self.table[a][bc] {
                        report
                            .violations
                            .push(GroupViolation::Associativity { a, b, c });
                    }
                }
            }
        }
        Ok(report)
    }

    /// Test-support helper: overwrite one table entry (for verifier tests).
    pub fn set_table_entry(&mut self, a: usize, b: usize, value: usize) {
        self.table[a][b] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cyclic_two_has_self_inverse_generator() {
        let g = FiniteGroup::make_cyclic(2).unwrap();
        assert_eq!(g.compose(1, 1).unwrap(), 0, "g·g = e");
    }

    #[test]
    fn cyclic_one_is_trivial() {
        let g = FiniteGroup::make_cyclic(1).unwrap();
        assert_eq!(g.order(), 1);
        assert_eq!(g.compose(0, 0).unwrap(), 0);
        assert_eq!(g.inverse_of(0).unwrap(), 0);
    }

    #[test]
    fn cyclic_four_exponent_arithmetic() {
        let g = FiniteGroup::make_cyclic(4).unwrap();
        assert_eq!(g.compose(2, 3).unwrap(), 1, "r²·r³ = r");
        assert_eq!(g.compose(1, 3).unwrap(), 0, "r·r³ = e");
        assert_eq!(g.inverse_of(1).unwrap(), 3);
    }

    #[test]
    fn zero_order_rejected() {
        assert_eq!(
            FiniteGroup::make_cyclic(0).unwrap_err(),
            GroupError::InvalidOrder
        );
        assert_eq!(
            FiniteGroup::make_dihedral(0).unwrap_err(),
            GroupError::InvalidOrder
        );
    }

    #[test]
    fn dihedral_four_defining_relation() {
        let d4 = FiniteGroup::make_dihedral(4).unwrap();
        assert_eq!(d4.order(), 8);
        let (r, f) = (1, 4);
        // f·r·f = r⁻¹ = r³
        let rf = d4.compose(r, f).unwrap();
        let frf = d4.compose(f, rf).unwrap();
        assert_eq!(frf, 3);
        assert_eq!(d4.inverse_of(f).unwrap(), f, "f² = e");
    }

    #[test]
    fn constructed_groups_verify_clean() {
        for g in [
            FiniteGroup::make_cyclic(1).unwrap(),
            FiniteGroup::make_cyclic(2).unwrap(),
            FiniteGroup::make_cyclic(4).unwrap(),
            FiniteGroup::make_dihedral(4).unwrap(),
        ] {
            let report = g.verify_group_axioms().unwrap();
            assert!(
                report.is_empty(),
                "{:?} violations: {:?}",
                g,
                report.violations
            );
        }
    }

    #[test]
    fn mutated_table_is_detected() {
        let mut g = FiniteGroup::make_cyclic(4).unwrap();
        g.set_table_entry(1, 2, 0);
        let report = g.verify_group_axioms().unwrap();
        assert!(
            report.violations.iter().any(|v| matches!(
                v,
                GroupViolation::Associativity { .. } | GroupViolation::Inverse { .. }
            )),
            "expected an associativity or inverse witness, got {:?}",
            report.violations
        );
    }

    #[test]
    fn missing_inverse_without_breaking_associativity() {
        // Idempotent non-identity element: associativity holds, inverse fails.
        let g = FiniteGroup::from_parts(
            vec![vec![0, 1], vec![1, 1]],
            0,
            vec![0, 1],
            vec!["e".into(), "a".into()],
        )
        .unwrap();
        let report = g.verify_group_axioms().unwrap();
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, GroupViolation::Inverse { k: 1 })));
        assert!(!report
            .violations
            .iter()
            .any(|v| matches!(v, GroupViolation::Associativity { .. })));
    }

    #[test]
    fn out_of_range_queries_error() {
        let g = FiniteGroup::make_cyclic(2).unwrap();
        assert!(matches!(
            g.compose(0, 5),
            Err(GroupError::ElementOutOfRange { index: 5, order: 2 })
        ));
        assert!(g.inverse_of(2).is_err());
    }

    #[test]
    fn identity_composes_trivially() {
        let g = FiniteGroup::make_dihedral(3).unwrap();
        for k in g.elements() {
            assert_eq!(g.compose(0, k).unwrap(), k);
            assert_eq!(g.compose(k, 0).unwrap(), k);
        }
    }

    #[test]
    fn serialization_roundtrip_is_exact() {
        let g = FiniteGroup::make_dihedral(4).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let back: FiniteGroup = serde_json::from_str(&json).unwrap();
        assert_eq!(g, back);
        assert_eq!(json, serde_json::to_string(&back).unwrap());
    }

    #[test]
    fn labels_follow_convention() {
        let c4 = FiniteGroup::make_cyclic(4).unwrap();
        assert_eq!(c4.labels(), &["e", "g", "g^2", "g^3"]);
        let d4 = FiniteGroup::make_dihedral(4).unwrap();
        assert_eq!(d4.label(0), "e");
        assert_eq!(d4.label(1), "r");
        assert_eq!(d4.label(4), "f");
        assert_eq!(d4.label(7), "f·r^3");
    }

    proptest! {
        #[test]
        fn cyclic_groups_are_abelian(n in 1usize..12, a in 0usize..12, b in 0usize..12) {
            let g = FiniteGroup::make_cyclic(n).unwrap();
            let (a, b) = (a % n, b % n);
            prop_assert_eq!(g.compose(a, b).unwrap(), g.compose(b, a).unwrap());
        }

        #[test]
        fn inverse_is_involution(n in 1usize..9, a in 0usize..18, dihedral in any::<bool>()) {
            let g = if dihedral {
                FiniteGroup::make_dihedral(n).unwrap()
            } else {
                FiniteGroup::make_cyclic(n).unwrap()
            };
            let a = a % g.order();
            let inv = g.inverse_of(a).unwrap();
            prop_assert_eq!(g.inverse_of(inv).unwrap(), a);
            prop_assert_eq!(g.compose(a, inv).unwrap(), g.identity());
        }

        #[test]
        fn dihedral_n_at_least_3_is_nonabelian(n in 3usize..8) {
            let g = FiniteGroup::make_dihedral(n).unwrap();
            let noncommuting = (0..g.order()).any(|a| {
                (0..g.order()).any(|b| g.mul(a, b) != g.mul(b, a))
            });
            prop_assert!(noncommuting);
        }

        #[test]
        fn random_constructions_verify_clean(n in 1usize..9, dihedral in any::<bool>()) {
            let g = if dihedral {
                FiniteGroup::make_dihedral(n).unwrap()
            } else {
                FiniteGroup::make_cyclic(n).unwrap()
            };
            prop_assert!(g.verify_group_axioms().unwrap().is_empty());
        }
    }
}

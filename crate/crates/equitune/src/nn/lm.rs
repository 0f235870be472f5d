//! Word-level recurrent language model.
//!
//! Embeds each token, rolls a recurrent cell over the prefix, and projects
//! the hidden state to next-token logits. Sized for desk-scale corpora.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::cells::{Cell, CellB, CellKind, CellState};
use crate::nn::{uniform_init, Dense, DenseB, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Architecture knobs for the language model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmConfig {
    pub cell: CellKind,
    pub embed: usize,
    pub hidden: usize,
}

/// Language-model parameters.
#[derive(Debug, Clone)]
pub struct WordLm<S: Scalar> {
    pub embed: Tensor<S>,
    pub cell: Cell<S>,
    pub out: Dense<S>,
}

/// Tape-bound language model.
pub struct WordLmB {
    embed: NodeId,
    cell: CellB,
    out: DenseB,
}

impl<S: Scalar> WordLm<S> {
    pub fn new(vocab: usize, cfg: &LmConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            embed: uniform_init(&[vocab, cfg.embed], cfg.embed, rng),
            cell: Cell::new(cfg.cell, cfg.embed, cfg.hidden, rng),
            out: Dense::new(cfg.hidden, vocab, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> WordLmB {
        WordLmB {
            embed: tape.leaf(self.embed.clone()),
            cell: self.cell.bind(tape),
            out: self.out.bind(tape),
        }
    }
}

impl WordLmB {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.embed];
        ids.extend(self.cell.ids());
        ids.extend(self.out.ids());
        ids
    }

    /// Consume one token, returning logits for the following token and the
    /// advanced state.
    pub fn step<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        state: CellState,
        token: usize,
    ) -> (NodeId, CellState) {
        let x = tape.row(self.embed, token);
        let st = self.cell.step(tape, x, state);
        (self.out.forward(tape, st.h), st)
    }

    pub fn zero_state<S: Scalar>(&self, tape: &mut Tape<S>) -> CellState {
        self.cell.zero_state(tape)
    }

    /// Logits for the token following `bos, context[0], …, context[n−1]`.
    pub fn next_logits<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bos: usize,
        context: &[usize],
    ) -> NodeId {
        let mut st = self.zero_state(tape);
        let mut logits = None;
        for &t in std::iter::once(&bos).chain(context) {
            let (l, next) = self.step(tape, st, t);
            logits = Some(l);
            st = next;
        }
        logits.expect("at least the start token is consumed")
    }

    /// Mean next-token cross-entropy over one line: predict `tokens[i]` from
    /// `bos, tokens[..i]`, and `eos` (when given) from the full line.
    pub fn line_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        tokens: &[usize],
        bos: usize,
        eos: Option<usize>,
    ) -> NodeId {
        let mut st = self.zero_state(tape);
        let mut prev = bos;
        let mut per_step = Vec::new();
        let mut targets = Vec::new();
        for &y in tokens.iter().chain(eos.iter()) {
            let (l, next) = self.step(tape, st, prev);
            per_step.push(l);
            targets.push(y);
            st = next;
            prev = y;
        }
        let stacked = tape.stack(&per_step);
        let v = tape.value(stacked).shape()[2];
        let flat = tape.reshape(stacked, &[targets.len(), v]);
        tape.cross_entropy_logits(flat, targets)
    }
}

impl<S: Scalar> ParamSet<S> for WordLm<S> {
    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string()];
        names.extend(self.cell.param_names().iter().map(|n| format!("cell.{n}")));
        names.extend(
            ParamSet::<S>::param_names(&self.out)
                .iter()
                .map(|n| format!("out.{n}")),
        );
        names
    }

    fn params(&self) -> Vec<&Tensor<S>> {
        let mut ps = vec![&self.embed];
        ps.extend(self.cell.params());
        ps.extend(self.out.params());
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut ps = vec![&mut self.embed];
        ps.extend(self.cell.params_mut());
        ps.extend(self.out.params_mut());
        ps
    }
}

//! Encoder–decoder over token sequences.
//!
//! The encoder embeds source tokens and rolls a recurrent cell; the decoder
//! embeds previously produced tokens, rolls its own cell from the encoder's
//! final state, and projects each hidden state to output-vocabulary logits.
//! Special tokens (start / end of sequence) are owned by the caller.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::cells::{Cell, CellB, CellKind, CellState};
use crate::nn::{uniform_init, Dense, DenseB, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Architecture knobs for an encoder–decoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub cell: CellKind,
    pub embed: usize,
    pub hidden: usize,
}

/// Encoder–decoder parameters.
#[derive(Debug, Clone)]
pub struct Seq2Seq<S: Scalar> {
    pub embed_in: Tensor<S>,
    pub encoder: Cell<S>,
    pub embed_out: Tensor<S>,
    pub decoder: Cell<S>,
    pub out: Dense<S>,
}

/// Tape-bound encoder–decoder.
pub struct Seq2SeqB {
    embed_in: NodeId,
    encoder: CellB,
    embed_out: NodeId,
    decoder: CellB,
    out: DenseB,
}

impl<S: Scalar> Seq2Seq<S> {
    pub fn new(
        in_vocab: usize,
        out_vocab: usize,
        cfg: &Seq2SeqConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            embed_in: uniform_init(&[in_vocab, cfg.embed], cfg.embed, rng),
            encoder: Cell::new(cfg.cell, cfg.embed, cfg.hidden, rng),
            embed_out: uniform_init(&[out_vocab, cfg.embed], cfg.embed, rng),
            decoder: Cell::new(cfg.cell, cfg.embed, cfg.hidden, rng),
            out: Dense::new(cfg.hidden, out_vocab, rng),
        }
    }

    pub fn in_vocab(&self) -> usize {
        self.embed_in.shape()[0]
    }

    pub fn out_vocab(&self) -> usize {
        self.embed_out.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> Seq2SeqB {
        Seq2SeqB {
            embed_in: tape.leaf(self.embed_in.clone()),
            encoder: self.encoder.bind(tape),
            embed_out: tape.leaf(self.embed_out.clone()),
            decoder: self.decoder.bind(tape),
            out: self.out.bind(tape),
        }
    }
}

impl Seq2SeqB {
    /// Parameter node ids, in [`ParamSet`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.embed_in];
        ids.extend(self.encoder.ids());
        ids.push(self.embed_out);
        ids.extend(self.decoder.ids());
        ids.extend(self.out.ids());
        ids
    }

    /// Roll the encoder over `src`, returning its final state rebased as the
    /// decoder's starting state.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, src: &[usize]) -> CellState {
        let mut st = self.encoder.zero_state(tape);
        for &t in src {
            let x = tape.row(self.embed_in, t);
            st = self.encoder.step(tape, x, st);
        }
        // The decoder continues from the encoder state; give it a cell vector
        // when the decoder is an LSTM but the state lacks one.
        if matches!(self.decoder.kind(), CellKind::Lstm) && st.c.is_none() {
            let zero = self.decoder.zero_state(tape);
            st = CellState { h: st.h, c: zero.c };
        }
        st
    }

    /// Feed one previously produced token; returns logits `[1, out_vocab]`
    /// and the next state.
    pub fn decode_step<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        state: CellState,
        prev_token: usize,
    ) -> (NodeId, CellState) {
        let x = tape.row(self.embed_out, prev_token);
        let st = self.decoder.step(tape, x, state);
        let logits = self.out.forward(tape, st.h);
        (logits, st)
    }

    /// Teacher-forced loss on one pair: the decoder consumes
    /// `bos, tgt[0], …, tgt[n−1]` and is scored against `tgt[0], …, eos`.
    pub fn teacher_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        src: &[usize],
        tgt: &[usize],
        bos: usize,
        eos: usize,
    ) -> NodeId {
        let mut st = self.encode(tape, src);
        let mut logits = Vec::with_capacity(tgt.len() + 1);
        let mut prev = bos;
        let mut targets = Vec::with_capacity(tgt.len() + 1);
        for &y in tgt.iter().chain(std::iter::once(&eos)) {
            let (l, next) = self.decode_step(tape, st, prev);
            logits.push(l);
            targets.push(y);
            st = next;
            prev = y;
        }
        let stacked = tape.stack(&logits);
        let v = tape.value(stacked).shape()[2];
        let flat = tape.reshape(stacked, &[targets.len(), v]);
        tape.cross_entropy_logits(flat, targets)
    }

    /// Greedy decode: argmax each step (ties go to the lowest token id),
    /// stopping at `eos` or after `max_len` tokens.
    pub fn greedy<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        src: &[usize],
        bos: usize,
        eos: usize,
        max_len: usize,
    ) -> Vec<usize> {
        let mut st = self.encode(tape, src);
        let mut prev = bos;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (l, next) = self.decode_step(tape, st, prev);
            let row = tape.value(l).data();
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if v.total_cmp(&row[best]) == std::cmp::Ordering::Greater {
                    best = i;
                }
            }
            if best == eos {
                return out;
            }
            out.push(best);
            st = next;
            prev = best;
        }
        out
    }
}

impl<S: Scalar> ParamSet<S> for Seq2Seq<S> {
    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed_in".to_string()];
        names.extend(
            self.encoder
                .param_names()
                .iter()
                .map(|n| format!("enc.{n}")),
        );
        names.push("embed_out".to_string());
        names.extend(
            self.decoder
                .param_names()
                .iter()
                .map(|n| format!("dec.{n}")),
        );
        names.extend(
            ParamSet::<S>::param_names(&self.out)
                .iter()
                .map(|n| format!("out.{n}")),
        );
        names
    }

    fn params(&self) -> Vec<&Tensor<S>> {
        let mut ps = vec![&self.embed_in];
        ps.extend(self.encoder.params());
        ps.push(&self.embed_out);
        ps.extend(self.decoder.params());
        ps.extend(self.out.params());
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut ps = vec![&mut self.embed_in];
        ps.extend(self.encoder.params_mut());
        ps.push(&mut self.embed_out);
        ps.extend(self.decoder.params_mut());
        ps.extend(self.out.params_mut());
        ps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::collect_grads;
    use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
    use crate::rng::stream;

    /// A model this small should learn to copy three-token sequences.
    #[test]
    fn learns_the_copy_task() {
        let vocab = 6; // tokens 0..=3 payload, 4 = bos, 5 = eos
        let (bos, eos) = (4, 5);
        let cfg = Seq2SeqConfig {
            cell: CellKind::Gru,
            embed: 8,
            hidden: 24,
        };
        let mut rng = stream(11, "copy-task");
        let mut model = Seq2Seq::<f64>::new(vocab, vocab, &cfg, &mut rng);
        let data: Vec<Vec<usize>> = (0..4usize.pow(3))
            .map(|n| vec![n / 16 % 4, n / 4 % 4, n % 4])
            .collect();
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 5e-3,
            ..OptimizerConfig::default()
        });
        let mut last = f64::INFINITY;
        for epoch in 0..60 {
            let mut total = 0.0;
            for seq in &data {
                let mut tape = Tape::new();
                let b = model.bind(&mut tape);
                let loss = b.teacher_loss(&mut tape, seq, seq, bos, eos);
                total += tape.value(loss).data()[0];
                tape.backward(loss);
                let grads = collect_grads(&tape, &b.ids());
                opt.step(&mut model.params_mut(), &grads);
            }
            last = total / data.len() as f64;
            if epoch > 10 && last < 0.02 {
                break;
            }
        }
        assert!(last < 0.1, "copy loss stayed at {last}");
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let got = b.greedy(&mut tape, &[2, 0, 3], bos, eos, 10);
        assert_eq!(got, vec![2, 0, 3]);
    }

    #[test]
    fn lstm_decoder_gets_a_cell_vector_from_a_fresh_state() {
        let cfg = Seq2SeqConfig {
            cell: CellKind::Lstm,
            embed: 4,
            hidden: 5,
        };
        let mut rng = stream(12, "lstm-state");
        let model = Seq2Seq::<f32>::new(3, 3, &cfg, &mut rng);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let st = b.encode(&mut tape, &[0, 1]);
        assert!(st.c.is_some());
        let (logits, _) = b.decode_step(&mut tape, st, 0);
        assert_eq!(tape.value(logits).shape(), &[1, 3]);
    }
}

//! Recurrent cells: simple RNN, GRU, and LSTM, all single-layer.
//!
//! A cell maps `(input [1, in], state) → state` on a tape. States carry the
//! hidden vector and, for LSTM, the cell vector. The unified [`Cell`] enum
//! lets sequence models pick the cell kind from configuration.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{uniform_init, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Which recurrent cell a sequence model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

/// Recurrent state on a tape: hidden vector plus LSTM cell vector.
#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: NodeId,
    pub c: Option<NodeId>,
}

/// `h' = tanh(x·Wx + h·Wh + b)`.
#[derive(Debug, Clone)]
pub struct RnnCell<S: Scalar> {
    pub wx: Tensor<S>,
    pub wh: Tensor<S>,
    pub b: Tensor<S>,
}

/// Gated recurrent unit.
#[derive(Debug, Clone)]
pub struct GruCell<S: Scalar> {
    pub wz: Tensor<S>,
    pub uz: Tensor<S>,
    pub bz: Tensor<S>,
    pub wr: Tensor<S>,
    pub ur: Tensor<S>,
    pub br: Tensor<S>,
    pub wh: Tensor<S>,
    pub uh: Tensor<S>,
    pub bh: Tensor<S>,
}

/// Long short-term memory cell. The forget-gate bias starts at 1 so early
/// training does not erase state.
#[derive(Debug, Clone)]
pub struct LstmCell<S: Scalar> {
    pub wi: Tensor<S>,
    pub ui: Tensor<S>,
    pub bi: Tensor<S>,
    pub wf: Tensor<S>,
    pub uf: Tensor<S>,
    pub bf: Tensor<S>,
    pub wo: Tensor<S>,
    pub uo: Tensor<S>,
    pub bo: Tensor<S>,
    pub wc: Tensor<S>,
    pub uc: Tensor<S>,
    pub bc: Tensor<S>,
}

/// One recurrent cell of any kind.
#[derive(Debug, Clone)]
pub enum Cell<S: Scalar> {
    Rnn(RnnCell<S>),
    Gru(GruCell<S>),
    Lstm(LstmCell<S>),
}

/// Tape-bound cell parameters.
#[derive(Debug, Clone)]
pub struct CellB {
    kind: CellKind,
    hidden: usize,
    ids: Vec<NodeId>,
}

impl<S: Scalar> RnnCell<S> {
    pub fn new(inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wx: uniform_init(&[inputs, hidden], inputs, rng),
            wh: uniform_init(&[hidden, hidden], hidden, rng),
            b: uniform_init(&[hidden], hidden, rng),
        }
    }
}

impl<S: Scalar> GruCell<S> {
    pub fn new(inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let gate = |i: usize, o: usize, rng: &mut ChaCha8Rng| uniform_init::<S>(&[i, o], i, rng);
        Self {
            wz: gate(inputs, hidden, rng),
            uz: gate(hidden, hidden, rng),
            bz: uniform_init(&[hidden], hidden, rng),
            wr: gate(inputs, hidden, rng),
            ur: gate(hidden, hidden, rng),
            br: uniform_init(&[hidden], hidden, rng),
            wh: gate(inputs, hidden, rng),
            uh: gate(hidden, hidden, rng),
            bh: uniform_init(&[hidden], hidden, rng),
        }
    }
}

impl<S: Scalar> LstmCell<S> {
    pub fn new(inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let gate = |i: usize, o: usize, rng: &mut ChaCha8Rng| uniform_init::<S>(&[i, o], i, rng);
        let bias = |rng: &mut ChaCha8Rng| uniform_init::<S>(&[hidden], hidden, rng);
        let mut cell = Self {
            wi: gate(inputs, hidden, rng),
            ui: gate(hidden, hidden, rng),
            bi: bias(rng),
            wf: gate(inputs, hidden, rng),
            uf: gate(hidden, hidden, rng),
            bf: bias(rng),
            wo: gate(inputs, hidden, rng),
            uo: gate(hidden, hidden, rng),
            bo: bias(rng),
            wc: gate(inputs, hidden, rng),
            uc: gate(hidden, hidden, rng),
            bc: bias(rng),
        };
        for v in cell.bf.data_mut() {
            *v = S::one();
        }
        cell
    }
}

impl<S: Scalar> Cell<S> {
    pub fn new(kind: CellKind, inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            CellKind::Rnn => Cell::Rnn(RnnCell::new(inputs, hidden, rng)),
            CellKind::Gru => Cell::Gru(GruCell::new(inputs, hidden, rng)),
            CellKind::Lstm => Cell::Lstm(LstmCell::new(inputs, hidden, rng)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Rnn(_) => CellKind::Rnn,
            Cell::Gru(_) => CellKind::Gru,
            Cell::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Cell::Rnn(c) => c.wh.shape()[0],
            Cell::Gru(c) => c.uh.shape()[0],
            Cell::Lstm(c) => c.uc.shape()[0],
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> CellB {
        let ids = self
            .params()
            .into_iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        CellB {
            kind: self.kind(),
            hidden: self.hidden(),
            ids,
        }
    }
}

impl CellB {
    pub fn ids(&self) -> Vec<NodeId> {
        self.ids.clone()
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    /// Fresh all-zero state (with a cell vector iff LSTM).
    pub fn zero_state<S: Scalar>(&self, tape: &mut Tape<S>) -> CellState {
        let h = tape.leaf(Tensor::zeros(&[1, self.hidden]));
        let c = matches!(self.kind, CellKind::Lstm)
            .then(|| tape.leaf(Tensor::zeros(&[1, self.hidden])));
        CellState { h, c }
    }

    /// One recurrence step on `x: [1, in]`.
    pub fn step<S: Scalar>(&self, tape: &mut Tape<S>, x: NodeId, state: CellState) -> CellState {
        // Helper: x·W + h·U + b.
        let affine = |tape: &mut Tape<S>, w: NodeId, u: NodeId, b: NodeId, h: NodeId| {
            let xw = tape.matmul(x, w);
            let hu = tape.matmul(h, u);
            let s = tape.add(xw, hu);
            tape.add_bias(s, b)
        };
        match self.kind {
            CellKind::Rnn => {
                let [wx, wh, b] = self.ids[..] else {
                    unreachable!()
                };
                let a = affine(tape, wx, wh, b, state.h);
                CellState {
                    h: tape.tanh(a),
                    c: None,
                }
            }
            CellKind::Gru => {
                let [wz, uz, bz, wr, ur, br, wh, uh, bh] = self.ids[..] else {
                    unreachable!()
                };
                let h = state.h;
                let z = affine(tape, wz, uz, bz, h);
                let z = tape.sigmoid(z);
                let r = affine(tape, wr, ur, br, h);
                let r = tape.sigmoid(r);
                let rh = tape.mul(r, h);
                let xw = tape.matmul(x, wh);
                let ru = tape.matmul(rh, uh);
                let cand = tape.add(xw, ru);
                let cand = tape.add_bias(cand, bh);
                let cand = tape.tanh(cand);
                // h' = h + z∘(cand − h)
                let delta = tape.sub(cand, h);
                let scaled = tape.mul(z, delta);
                CellState {
                    h: tape.add(h, scaled),
                    c: None,
                }
            }
            CellKind::Lstm => {
                let [wi, ui, bi, wf, uf, bf, wo, uo, bo, wc, uc, bc] = self.ids[..] else {
                    unreachable!()
                };
                let h = state.h;
                let c = state.c.expect("LSTM state carries a cell vector");
                let i = affine(tape, wi, ui, bi, h);
                let i = tape.sigmoid(i);
                let f = affine(tape, wf, uf, bf, h);
                let f = tape.sigmoid(f);
                let o = affine(tape, wo, uo, bo, h);
                let o = tape.sigmoid(o);
                let cand = affine(tape, wc, uc, bc, h);
                let cand = tape.tanh(cand);
                let fc = tape.mul(f, c);
                let ic = tape.mul(i, cand);
                let c_next = tape.add(fc, ic);
                let tc = tape.tanh(c_next);
                CellState {
                    h: tape.mul(o, tc),
                    c: Some(c_next),
                }
            }
        }
    }
}

impl<S: Scalar> ParamSet<S> for Cell<S> {
    fn param_names(&self) -> Vec<String> {
        match self {
            Cell::Rnn(_) => vec!["wx".into(), "wh".into(), "b".into()],
            Cell::Gru(_) => ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Cell::Lstm(_) => [
                "wi", "ui", "bi", "wf", "uf", "bf", "wo", "uo", "bo", "wc", "uc", "bc",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            Cell::Rnn(c) => vec![&c.wx, &c.wh, &c.b],
            Cell::Gru(c) => vec![
                &c.wz, &c.uz, &c.bz, &c.wr, &c.ur, &c.br, &c.wh, &c.uh, &c.bh,
            ],
            Cell::Lstm(c) => vec![
                &c.wi, &c.ui, &c.bi, &c.wf, &c.uf, &c.bf, &c.wo, &c.uo, &c.bo, &c.wc, &c.uc, &c.bc,
            ],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Cell::Rnn(c) => vec![&mut c.wx, &mut c.wh, &mut c.b],
            Cell::Gru(c) => vec![
                &mut c.wz, &mut c.uz, &mut c.bz, &mut c.wr, &mut c.ur, &mut c.br, &mut c.wh,
                &mut c.uh, &mut c.bh,
            ],
            Cell::Lstm(c) => vec![
                &mut c.wi, &mut c.ui, &mut c.bi, &mut c.wf, &mut c.uf, &mut c.bf, &mut c.wo,
                &mut c.uo, &mut c.bo, &mut c.wc, &mut c.uc, &mut c.bc,
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn roll<S: Scalar>(cell: &Cell<S>, xs: &[Tensor<S>]) -> Tensor<S> {
        let mut tape = Tape::new();
        let b = cell.bind(&mut tape);
        let mut st = b.zero_state(&mut tape);
        for x in xs {
            let ix = tape.leaf(x.clone());
            st = b.step(&mut tape, ix, st);
        }
        tape.value(st.h).clone()
    }

    #[test]
    fn cells_keep_finite_state_over_long_rolls() {
        let mut rng = stream(3, "cells");
        for kind in [CellKind::Rnn, CellKind::Gru, CellKind::Lstm] {
            let cell = Cell::<f64>::new(kind, 4, 6, &mut rng);
            let xs: Vec<_> = (0..50)
                .map(|i| Tensor::full(&[1, 4], ((i % 7) as f64 - 3.0) / 3.0))
                .collect();
            let h = roll(&cell, &xs);
            assert!(h.all_finite());
            assert_eq!(h.shape(), &[1, 6]);
        }
    }

    #[test]
    fn rnn_step_matches_hand_formula() {
        let mut rng = stream(4, "rnn-oracle");
        let cell = Cell::<f64>::new(CellKind::Rnn, 2, 3, &mut rng);
        let x = Tensor::from_vec(vec![1, 2], vec![0.5, -0.25]).unwrap();
        let h = roll(&cell, std::slice::from_ref(&x));
        let Cell::Rnn(c) = &cell else { unreachable!() };
        for j in 0..3 {
            let mut acc = c.b.data()[j];
            for i in 0..2 {
                acc += x.data()[i] * c.wx.at(&[i, j]);
            }
            // initial hidden state is zero, so the wh term vanishes
            assert!((h.data()[j] - acc.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_saturation_bounds_hidden_values() {
        let mut rng = stream(5, "bounds");
        let cell = Cell::<f64>::new(CellKind::Gru, 3, 5, &mut rng);
        let xs: Vec<_> = (0..20).map(|_| Tensor::full(&[1, 3], 100.0)).collect();
        let h = roll(&cell, &xs);
        assert!(h.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
    }
}

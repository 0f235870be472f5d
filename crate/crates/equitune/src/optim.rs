//! First-order optimizers over positional parameter lists.
//!
//! The optimizer holds per-slot state (momentum / Adam moments) keyed by the
//! position of each parameter in the model's canonical parameter order, so
//! callers must pass the same list shape every step.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    /// Adam first/second moment decay.
    pub betas: (f64, f64),
    pub eps: f64,
    /// When set, scale gradients so their global L2 norm is at most this.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 3e-4,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// Stateful optimizer; see [`OptimizerConfig`] for the update rules' knobs.
#[derive(Debug, Clone)]
pub struct Optimizer<S: Scalar> {
    cfg: OptimizerConfig,
    velocity: Vec<Option<Tensor<S>>>,
    adam_m: Vec<Option<Tensor<S>>>,
    adam_v: Vec<Option<Tensor<S>>>,
    t: u64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Apply one update. `grads[i]` pairs with `params[i]`; `None` entries are
    /// skipped (parameters the loss did not touch).
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Option<Tensor<S>>]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient lists must pair up"
        );
        for store in [&mut self.velocity, &mut self.adam_m, &mut self.adam_v] {
            store.resize(params.len(), None);
        }
        self.t += 1;

        let scale = self.grad_scale(grads);
        match self.cfg.kind {
            OptimizerKind::Sgd => self.step_sgd(params, grads, scale),
            OptimizerKind::Adam => self.step_adam(params, grads, scale),
        }
    }

    fn grad_scale(&self, grads: &[Option<Tensor<S>>]) -> f64 {
        let Some(cap) = self.cfg.max_grad_norm else {
            return 1.0;
        };
        let mut sq = 0.0f64;
        for g in grads.iter().flatten() {
            for &v in g.data() {
                let f = v.to_f64();
                sq += f * f;
            }
        }
        let norm = sq.sqrt();
        if norm > cap && norm > 0.0 {
            cap / norm
        } else {
            1.0
        }
    }

    fn step_sgd(&mut self, params: &mut [&mut Tensor<S>], grads: &[Option<Tensor<S>>], scale: f64) {
        let lr = S::from_f64(self.cfg.lr);
        let mu = S::from_f64(self.cfg.momentum);
        let sc = S::from_f64(scale);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let vel = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (v, gv) in vel.data_mut().iter_mut().zip(g.data()) {
                *v = mu * *v + *gv * sc;
            }
            p.add_scaled(vel, -lr);
        }
    }

    fn step_adam(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[Option<Tensor<S>>],
        scale: f64,
    ) {
        let lr = self.cfg.lr;
        let (b1, b2) = self.cfg.betas;
        let eps = self.cfg.eps;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.adam_m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.adam_v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, mv), (vv, &gv)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                let gf = gv.to_f64() * scale;
                let mf = b1 * mv.to_f64() + (1.0 - b1) * gf;
                let vf = b2 * vv.to_f64() + (1.0 - b2) * gf * gf;
                *mv = S::from_f64(mf);
                *vv = S::from_f64(vf);
                let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + eps);
                *pv = *pv - S::from_f64(update);
            }
        }
    }
}

//! Finite-difference verification of reverse-mode gradients.
//!
//! For each parameter entry θ the analytic gradient is compared against the
//! central difference `(L(θ+h) − L(θ−h)) / 2h` with relative error
//! `|a − n| / max(|a| + |n|, 1e-6)`. The built-in suite covers every layer
//! type in the crate plus the full group-averaged pipeline.

use serde::{Deserialize, Serialize};

use crate::action::GroupAction;
use crate::equitune::{EquitunedModel, FeatureMode, GroupConvLayer};
use crate::group::FiniteGroup;
use crate::nn::cells::{Cell, CellKind};
use crate::nn::lm::{LmConfig, WordLm};
use crate::nn::{collect_grads, BaseModel, Dense, Mlp, ParamSet, SmallCnn};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub threshold: f64,
    /// At most this many entries are probed per tensor (stride-sampled).
    pub max_entries_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            threshold: 1e-4,
            max_entries_per_tensor: 25,
        }
    }
}

/// One case's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub case: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub entries_checked: usize,
    pub pass: bool,
}

/// Compare analytic and numeric gradients of `build`'s loss with respect to
/// every parameter of `model`.
///
/// `build` must deterministically construct the loss on the given tape and
/// return the loss node together with the parameter leaf ids, in the model's
/// [`ParamSet`] order.
pub fn check_gradients<S, M, F>(
    case: &str,
    model: &mut M,
    build: F,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    S: Scalar,
    M: ParamSet<S>,
    F: Fn(&M, &mut Tape<S>) -> (NodeId, Vec<NodeId>),
{
    let mut tape = Tape::new();
    let (loss, ids) = build(model, &mut tape);
    tape.backward(loss);
    let grads = collect_grads(&tape, &ids);
    drop(tape);

    let names = model.param_names();
    assert_eq!(
        names.len(),
        grads.len(),
        "build must return one leaf id per parameter"
    );

    let loss_at = |m: &M| -> f64 {
        let mut t = Tape::new();
        let (l, _) = build(m, &mut t);
        t.value(l).data()[0].to_f64()
    };

    let mut report = GradCheckReport {
        case: case.to_string(),
        max_rel_err: 0.0,
        worst_param: String::new(),
        entries_checked: 0,
        pass: true,
    };
    let h = cfg.step;
    let param_count = names.len();
    for p in 0..param_count {
        let len = model.params()[p].len();
        let stride = (len / cfg.max_entries_per_tensor).max(1);
        for e in (0..len).step_by(stride) {
            let original = model.params()[p].data()[e];
            let probe = |m: &mut M, v: f64| {
                m.params_mut()[p].data_mut()[e] = S::from_f64(v);
            };
            probe(model, original.to_f64() + h);
            let plus = loss_at(model);
            probe(model, original.to_f64() - h);
            let minus = loss_at(model);
            model.params_mut()[p].data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[p]
                .as_ref()
                .map(|g| g.data()[e].to_f64())
                .unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{}[{}]", names[p], e);
            }
        }
    }
    report.pass = report.max_rel_err <= cfg.threshold;
    report
}

fn fixed<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    let mut rng = stream(seed, "gradcheck-input");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rand::Rng::gen_range(&mut rng, -1.0..1.0)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("fixed input length")
}

/// Run the full gradient-check suite at 64-bit: one report per case.
pub fn run_suite(seed: u64, cfg: &GradCheckConfig) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();

    {
        let mut dense = Dense::<f64>::new(4, 3, &mut stream(seed, "gc-dense"));
        let x = fixed::<f64>(&[2, 4], seed ^ 1);
        reports.push(check_gradients(
            "dense",
            &mut dense,
            |m, tape| {
                let b = m.bind(tape);
                let xi = tape.leaf(x.clone());
                let y = b.forward(tape, xi);
                let t = tape.tanh(y);
                (tape.mean_all(t), b.ids())
            },
            cfg,
        ));
    }

    {
        let mut mlp = Mlp::<f64>::new(&[4, 6, 3], &mut stream(seed, "gc-mlp"));
        let x = fixed::<f64>(&[3, 4], seed ^ 2);
        reports.push(check_gradients(
            "mlp",
            &mut mlp,
            |m, tape| {
                let b = m.bind(tape);
                let xi = tape.leaf(x.clone());
                let y = b.forward(tape, xi);
                (tape.cross_entropy_logits(y, vec![0, 2, 1]), b.ids())
            },
            cfg,
        ));
    }

    {
        let mut cnn = SmallCnn::<f64>::new(7, 3, 4, 3, &mut stream(seed, "gc-cnn"));
        let x = fixed::<f64>(&[2, 1, 7, 7], seed ^ 3);
        reports.push(check_gradients(
            "conv2d",
            &mut cnn,
            |m, tape| {
                let b = m.bind(tape);
                let xi = tape.leaf(x.clone());
                let y = b.forward(tape, xi);
                (tape.cross_entropy_logits(y, vec![1, 0]), b.ids())
            },
            cfg,
        ));
    }

    for (name, kind) in [
        ("rnn", CellKind::Rnn),
        ("gru", CellKind::Gru),
        ("lstm", CellKind::Lstm),
    ] {
        let mut cell = Cell::<f64>::new(kind, 3, 4, &mut stream(seed, name));
        let xs: Vec<Tensor<f64>> = (0..3).map(|i| fixed(&[1, 3], seed ^ (10 + i))).collect();
        reports.push(check_gradients(
            name,
            &mut cell,
            |m, tape| {
                let b = m.bind(tape);
                let mut st = b.zero_state(tape);
                let mut hs = Vec::new();
                for x in &xs {
                    let xi = tape.leaf(x.clone());
                    st = b.step(tape, xi, st);
                    hs.push(st.h);
                }
                let all = tape.stack(&hs);
                (tape.mean_all(all), b.ids())
            },
            cfg,
        ));
    }

    {
        let lm_cfg = LmConfig {
            cell: CellKind::Gru,
            embed: 4,
            hidden: 5,
        };
        let mut lm = WordLm::<f64>::new(6, &lm_cfg, &mut stream(seed, "gc-lm"));
        reports.push(check_gradients(
            "word-lm",
            &mut lm,
            |m, tape| {
                let b = m.bind(tape);
                let loss = b.line_loss(tape, &[0, 3, 1, 2], 4, Some(5));
                (loss, b.ids())
            },
            cfg,
        ));
    }

    {
        let mut dense = Dense::<f64>::new(5, 4, &mut stream(seed, "gc-smce"));
        let x = fixed::<f64>(&[3, 5], seed ^ 4);
        reports.push(check_gradients(
            "softmax-ce",
            &mut dense,
            |m, tape| {
                let b = m.bind(tape);
                let xi = tape.leaf(x.clone());
                let logits = b.forward(tape, xi);
                let probs = tape.softmax(logits);
                let flat = tape.reshape(probs, &[12]);
                let n0 = tape.nll_of_entry(flat, 2);
                let n1 = tape.nll_of_entry(flat, 7);
                let ce = tape.cross_entropy_logits(logits, vec![3, 0, 2]);
                let s = tape.add_n(&[n0, n1, ce]);
                (tape.mean_all(s), b.ids())
            },
            cfg,
        ));
    }

    {
        let group = FiniteGroup::make_dihedral(4).expect("d4 exists");
        let mut layer = GroupConvLayer::<f64>::new(&group, 3, 4, &mut stream(seed, "gc-gconv"));
        let x = fixed::<f64>(&[8, 3], seed ^ 5);
        reports.push(check_gradients(
            "group-conv",
            &mut layer,
            |m, tape| {
                let b = m.bind(tape);
                let xi = tape.leaf(x.clone());
                let y = b.forward(tape, xi);
                let t = tape.tanh(y);
                (tape.mean_all(t), b.ids())
            },
            cfg,
        ));
    }

    {
        let group = FiniteGroup::make_cyclic(4).expect("c4 exists");
        let in_act = GroupAction::image_c4(3, 3).expect("3×3 action");
        let out_act = GroupAction::trivial(group.clone());
        let mut rng = stream(seed, "gc-wrapped");
        let base = BaseModel::Mlp(Mlp::new(&[9, 6, 5], &mut rng));
        let head = Dense::new(5, 3, &mut rng);
        let mut model = EquitunedModel::new(base, group, in_act, out_act, FeatureMode::Scalar)
            .expect("matching groups")
            .with_head(head)
            .expect("scalar + trivial output");
        let x = fixed::<f64>(&[3, 3], seed ^ 6);
        reports.push(check_gradients(
            "equituned-mlp",
            &mut model,
            |m, tape| {
                let pass = m.forward_on(tape, &x).expect("valid wrapper");
                let m_out = tape.value(pass.output).len();
                let row = tape.reshape(pass.output, &[1, m_out]);
                let loss = tape.cross_entropy_logits(row, vec![2]);
                (loss, pass.ids)
            },
            cfg,
        ));
    }

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_full_suite_passes_at_default_tolerance() {
        let cfg = GradCheckConfig::default();
        let reports = run_suite(17, &cfg);
        assert_eq!(reports.len(), 10);
        for r in &reports {
            assert!(
                r.pass,
                "{}: max rel err {} at {}",
                r.case, r.max_rel_err, r.worst_param
            );
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // Build a loss whose reported parameter ids point at the wrong leaf
        // (the input instead of the weights); the analytic gradient is then
        // wrong and the check must fail.
        let cfg = GradCheckConfig::default();
        let mut dense = Dense::<f64>::new(3, 2, &mut stream(23, "bad"));
        let x = fixed::<f64>(&[2, 3], 23);
        let report = check_gradients(
            "deliberately-broken",
            &mut dense,
            |m, tape| {
                let b = m.bind(tape);
                let xi = tape.leaf(x.clone());
                let y = b.forward(tape, xi);
                let t = tape.tanh(y);
                (tape.mean_all(t), vec![xi, b.b])
            },
            &cfg,
        );
        assert!(!report.pass);
    }
}

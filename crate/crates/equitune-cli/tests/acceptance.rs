//! End-to-end acceptance suite. Each test checks one release criterion and
//! prints a single `acceptance NN <name>: PASS/FAIL [details]` line (visible
//! with `--nocapture`, and always on failure) before asserting it.
//!
//! Library-level criteria call `equitune` directly; the wrapper-accounting and
//! axiom-verifier criteria drive the compiled `equitune` binary with the
//! shipped config files.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use equitune::action::GroupAction;
use equitune::equitune::{
    check_equivariance, equitune_regular_fn, equitune_regular_on_tape, equitune_scalar_fn,
    group_mean_pool, GroupConvLayer,
};
use equitune::fairness::{
    gender_partition_full, gender_partition_relaxed, partition_action, resolve_partition,
    run_fairness_audit, token_ids, toy_vocab, FairLm, FairnessConfig, FairnessLevel, FairnessMode,
    PartitionSpec,
};
use equitune::gradcheck::{run_suite, GradCheckConfig};
use equitune::group::FiniteGroup;
use equitune::nn::cells::CellKind;
use equitune::nn::lm::{LmConfig, WordLm};
use equitune::nn::{BaseModel, Dense, Mlp, SmallCnn};
use equitune::rng::stream;
use equitune::scalar::{sorted_sum, Scalar};
use equitune::scan::{run_scan_experiment, swap_for, ScanConfig, SplitName};
use equitune::tape::Tape;
use equitune::tensor::Tensor;
use equitune::vision::{run_image_demo, ImageDemoConfig};

/// Print the criterion's verdict line, then enforce it.
fn verdict(num: u32, name: &str, pass: bool, details: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {num:02} {name}: {tag} [{details}]");
    assert!(pass, "acceptance {num:02} {name}: {details}");
}

fn random_tensors<S: Scalar>(shape: &[usize], n: usize, seed: u64, label: &str) -> Vec<Tensor<S>> {
    let mut rng = stream(seed, label);
    let len: usize = shape.iter().product();
    (0..n)
        .map(|_| {
            let data = (0..len)
                .map(|_| S::from_f64(rng.gen_range(-1.0..1.0)))
                .collect();
            Tensor::from_vec(shape.to_vec(), data).expect("sample shape")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 1. Every shipped (group, action, base model) combination is equivariant
// ---------------------------------------------------------------------------

/// Averaged wrapper with a trivial output action: invariance sweep.
fn wrapped_invariance_dev<S: Scalar>(
    group: &FiniteGroup,
    in_act: &GroupAction,
    base: &BaseModel<S>,
    samples: &[Tensor<S>],
    tol: f64,
) -> f64 {
    let out_act = GroupAction::trivial(group.clone());
    let report = check_equivariance(
        |x| equitune_scalar_fn(group, in_act, &out_act, |u| base.forward_single(u), x).unwrap(),
        group,
        in_act,
        &out_act,
        samples,
        tol,
    )
    .unwrap();
    assert!(report.pass, "deviation {:.3e}", report.max_deviation);
    report.max_deviation
}

/// Averaged wrapper with the same permutation action on both sides.
fn wrapped_equivariance_dev<S: Scalar>(
    act: &GroupAction,
    base: &BaseModel<S>,
    samples: &[Tensor<S>],
    tol: f64,
) -> f64 {
    let group = act.group().clone();
    let report = check_equivariance(
        |x| equitune_scalar_fn(&group, act, act, |u| base.forward_single(u), x).unwrap(),
        &group,
        act,
        act,
        samples,
        tol,
    )
    .unwrap();
    assert!(report.pass, "deviation {:.3e}", report.max_deviation);
    report.max_deviation
}

/// All shipped combinations at one precision; returns (count, worst deviation).
fn equivariance_suite<S: Scalar>(tol: f64) -> (usize, f64) {
    let mut combos = 0usize;
    let mut worst = 0.0f64;

    // Quarter-turn and rotation+flip image actions, on the MLP and CNN bases.
    let side = 8;
    let images: Vec<Tensor<S>> = random_tensors(&[side, side], 100, 11, "acc-images");
    for (group, in_act) in [
        (
            FiniteGroup::make_cyclic(4).unwrap(),
            GroupAction::image_c4(side, side).unwrap(),
        ),
        (
            FiniteGroup::make_dihedral(4).unwrap(),
            GroupAction::image_d4(side, side).unwrap(),
        ),
    ] {
        let mlp = BaseModel::Mlp(Mlp::<S>::new(
            &[side * side, 24, 10],
            &mut stream(21, "acc-mlp"),
        ));
        worst = worst.max(wrapped_invariance_dev(&group, &in_act, &mlp, &images, tol));
        combos += 1;
        let cnn = BaseModel::Cnn(SmallCnn::<S>::new(
            side,
            4,
            8,
            6,
            &mut stream(22, "acc-cnn"),
        ));
        worst = worst.max(wrapped_invariance_dev(&group, &in_act, &cnn, &images, tol));
        combos += 1;
    }

    // The command/action vocabulary swaps of both compositional splits,
    // lifted to vector permutations, on an MLP over score vectors.
    for split in [SplitName::AddJump, SplitName::AroundRight] {
        let swap = swap_for(split);
        for token_action in [&swap.input, &swap.output] {
            let v = token_action
                .vocab_size()
                .expect("token actions have a vocabulary");
            let act = token_action.as_vector_action().unwrap();
            let samples: Vec<Tensor<S>> = random_tensors(&[v], 100, 31, "acc-scan-vec");
            let mlp = BaseModel::Mlp(Mlp::<S>::new(&[v, 16, v], &mut stream(32, "acc-scan-mlp")));
            worst = worst.max(wrapped_equivariance_dev(&act, &mlp, &samples, tol));
            combos += 1;
        }
    }

    // Every shipped demographic word swap, lifted to the full vocabulary.
    let vocab = toy_vocab();
    let list = |words: [&str; 2]| words.iter().map(|w| w.to_string()).collect::<Vec<_>>();
    let partitions = [
        gender_partition_full(),
        gender_partition_relaxed(),
        PartitionSpec {
            equality_lists: vec![list(["black", "white"])],
            general: vec![],
        },
        PartitionSpec {
            equality_lists: vec![list(["gay", "straight"])],
            general: vec![],
        },
    ];
    for spec in partitions {
        let partition = resolve_partition(&spec, &vocab).unwrap();
        let (_, action) = partition_action(&partition, vocab.len()).unwrap();
        let act = action.as_vector_action().unwrap();
        let samples: Vec<Tensor<S>> = random_tensors(&[vocab.len()], 100, 41, "acc-fair-vec");
        let mlp = BaseModel::Mlp(Mlp::<S>::new(
            &[vocab.len(), 20, vocab.len()],
            &mut stream(42, "acc-fair-mlp"),
        ));
        worst = worst.max(wrapped_equivariance_dev(&act, &mlp, &samples, tol));
        combos += 1;
    }

    (combos, worst)
}

#[test]
fn c01_every_shipped_wrapper_combination_is_equivariant() {
    let start = Instant::now();
    let (n64, worst64) = equivariance_suite::<f64>(1e-10);
    let (n32, worst32) = equivariance_suite::<f32>(1e-5);
    let secs = start.elapsed().as_secs_f64();
    let pass = n64 == n32 && worst64 <= 1e-10 && worst32 <= 1e-5 && secs < 60.0;
    verdict(
        1,
        "every shipped wrapper is equivariant",
        pass,
        &format!(
            "{n64} combinations x 100 inputs; worst deviation {worst64:.1e} (f64) / {worst32:.1e} (f32); {secs:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Averaging a model that is already invariant changes nothing
// ---------------------------------------------------------------------------

#[test]
fn c02_invariant_base_model_is_a_fixpoint_of_the_wrapper() {
    let group = FiniteGroup::make_cyclic(4).unwrap();
    let in_act = GroupAction::image_c4(6, 6).unwrap();
    let out_act = GroupAction::trivial(group.clone());
    // Hand-built invariant base: the order-independent pixel mean. Rotations
    // permute pixels, so its output is exactly rotation-invariant.
    let mean_model = |x: &Tensor<f64>| {
        let mut vals: Vec<f64> = x.data().to_vec();
        let s = sorted_sum(&mut vals) / x.len() as f64;
        Tensor::from_vec(vec![1], vec![s]).unwrap()
    };
    let mut worst = 0.0f64;
    for x in random_tensors::<f64>(&[6, 6], 100, 2, "acc-fixpoint") {
        let wrapped = equitune_scalar_fn(&group, &in_act, &out_act, mean_model, &x).unwrap();
        worst = worst.max(wrapped.max_abs_diff(&mean_model(&x)));
    }
    verdict(
        2,
        "invariant base is a fixpoint",
        worst <= 1e-12,
        &format!("max |wrapped - base| = {worst:.1e} over 100 inputs"),
    );
}

// ---------------------------------------------------------------------------
// 3. Regular slots translate by right multiplication
// ---------------------------------------------------------------------------

#[test]
fn c03_regular_slots_translate_by_right_multiplication() {
    // Slot law: wrap(h.x)[i] = h.(wrap(x)[j]) with g_j = g_i.h, checked for
    // every (h, i) on the quarter-turn and rotation+flip groups, with the
    // image action on both sides so the content action is non-trivial.
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (group, act) in [
        (
            FiniteGroup::make_cyclic(4).unwrap(),
            GroupAction::image_c4(3, 3).unwrap(),
        ),
        (
            FiniteGroup::make_dihedral(4).unwrap(),
            GroupAction::image_d4(3, 3).unwrap(),
        ),
    ] {
        let base = BaseModel::Mlp(Mlp::<f64>::new(&[9, 12, 9], &mut stream(3, "acc-slots")));
        let model = |u: &Tensor<f64>| base.forward_single(u).reshaped(&[3, 3]).unwrap();
        let m = 9usize;
        let slot = |t: &Tensor<f64>, i: usize| {
            Tensor::from_vec(vec![3, 3], t.data()[i * m..(i + 1) * m].to_vec()).unwrap()
        };
        for x in random_tensors::<f64>(&[3, 3], 5, 4, "acc-slot-inputs") {
            let reg_x = equitune_regular_fn(&group, &act, &act, model, &x).unwrap();
            // A generic MLP keeps the slots pairwise distinct, so the index
            // relation below picks out a unique slot.
            for a in 0..group.order() {
                for b in a + 1..group.order() {
                    assert!(slot(&reg_x, a).max_abs_diff(&slot(&reg_x, b)) > 0.0);
                }
            }
            for h in group.elements() {
                let hx = act.apply(h, &x).unwrap();
                let reg_hx = equitune_regular_fn(&group, &act, &act, model, &hx).unwrap();
                for i in group.elements() {
                    let j = group.mul(i, h);
                    let expected = act.apply(h, &slot(&reg_x, j)).unwrap();
                    worst = worst.max(expected.max_abs_diff(&slot(&reg_hx, i)));
                    checked += 1;
                }
            }
        }
    }
    verdict(
        3,
        "regular-feature slot law",
        worst <= 1e-10,
        &format!("{checked} (h, i) pairs across c4 and d4; worst slot deviation {worst:.1e}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Regular wrap + slot convolution + pooling + head stays invariant
// ---------------------------------------------------------------------------

#[test]
fn c04_stacked_regular_pipeline_is_invariant() {
    let mut worst = 0.0f64;
    for (group, in_act) in [
        (
            FiniteGroup::make_cyclic(4).unwrap(),
            GroupAction::image_c4(3, 3).unwrap(),
        ),
        (
            FiniteGroup::make_dihedral(4).unwrap(),
            GroupAction::image_d4(3, 3).unwrap(),
        ),
    ] {
        let out_act = GroupAction::trivial(group.clone());
        let mut rng = stream(14, "acc-stack");
        let base = BaseModel::Mlp(Mlp::<f64>::new(&[9, 10, 6], &mut rng));
        let conv = GroupConvLayer::new(&group, 6, 5, &mut rng);
        let head = Dense::new(5, 3, &mut rng);
        let pipeline = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let bb = base.bind(&mut tape);
            let order = group.order();
            let reg =
                equitune_regular_on_tape(&mut tape, &group, &in_act, &out_act, x, |t, leaf| {
                    bb.forward_batch_of(t, leaf, order)
                })
                .unwrap();
            let cb = conv.bind(&mut tape);
            let c = cb.forward(&mut tape, reg);
            let r = tape.relu(c);
            let pooled = group_mean_pool(&mut tape, &group, r).unwrap();
            let m = tape.value(pooled).len();
            let rowed = tape.reshape(pooled, &[1, m]);
            let hb = head.bind(&mut tape);
            let logits = hb.forward(&mut tape, rowed);
            tape.value(logits).reshaped(&[3]).unwrap()
        };
        let trivial = GroupAction::trivial(group.clone());
        let report = check_equivariance(
            pipeline,
            &group,
            &in_act,
            &trivial,
            &random_tensors::<f64>(&[3, 3], 20, 15, "acc-stack-inputs"),
            1e-10,
        )
        .unwrap();
        assert!(report.pass, "deviation {:.3e}", report.max_deviation);
        worst = worst.max(report.max_deviation);
    }
    verdict(
        4,
        "stacked regular pipeline stays invariant",
        worst <= 1e-10,
        &format!(
            "regular wrap + slot conv + pool + dense on c4 and d4; worst deviation {worst:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. The wrapped language model satisfies the swap-fairness identity
// ---------------------------------------------------------------------------

#[test]
fn c05_wrapped_lm_satisfies_the_fairness_identity() {
    let vocab = toy_vocab();
    let cfg = LmConfig {
        cell: CellKind::Gru,
        embed: 12,
        hidden: 20,
    };
    let texts: [(&str, &str); 20] = [
        ("the man is", "strong"),
        ("the woman is", "kind"),
        ("the king was", "brave"),
        ("the queen was", "smart"),
        ("the dad said", "he is strong"),
        ("the mom said", "she is kind"),
        ("he is a", "doctor"),
        ("she is a", "nurse"),
        ("his day was", "good"),
        ("her day was", "good"),
        ("the man", "works"),
        ("the woman", "loves him"),
        ("the king loves", "her"),
        ("the queen loves", "him"),
        ("the man was a", "teacher"),
        ("the woman was a", "teacher"),
        ("the dad is", "smart"),
        ("the mom is", "brave"),
        ("he said his day was", "good"),
        ("she said her day was", "good"),
    ];
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = texts
        .iter()
        .map(|(c, k)| (token_ids(c, &vocab).unwrap(), token_ids(k, &vocab).unwrap()))
        .collect();
    assert_eq!(pairs.len(), 20);

    let full = FairLm::new(
        WordLm::<f64>::new(vocab.len(), &cfg, &mut stream(5, "acc-fair-lm")),
        vocab.clone(),
        resolve_partition(&gender_partition_full(), &vocab).unwrap(),
        FairnessMode::Full,
    )
    .unwrap();
    let sentence = full
        .check_group_fairness(&pairs, FairnessLevel::Sentence, 1e-10)
        .unwrap();
    let word_full = full
        .check_group_fairness(&pairs, FairnessLevel::Word, 1e-10)
        .unwrap();

    let relaxed = FairLm::new(
        WordLm::<f64>::new(vocab.len(), &cfg, &mut stream(6, "acc-fair-lm-rel")),
        vocab.clone(),
        resolve_partition(&gender_partition_relaxed(), &vocab).unwrap(),
        FairnessMode::Relaxed,
    )
    .unwrap();
    let word_relaxed = relaxed
        .check_group_fairness(&pairs, FairnessLevel::Word, 1e-10)
        .unwrap();

    let pass = sentence.pass && word_full.pass && word_relaxed.pass;
    verdict(
        5,
        "swap-fairness identity",
        pass,
        &format!(
            "20 pairs; full-mode sentence gap {:.1e}, word gap {:.1e}; relaxed word gap {:.1e} on equality+neutral words",
            sentence.max_gap, word_full.max_gap, word_relaxed.max_gap
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Seeded generation commutes with the demographic swap exactly
// ---------------------------------------------------------------------------

#[test]
fn c06_seeded_generation_commutes_with_the_swap() {
    let cfg = FairnessConfig::default(); // full mode, 100 seeds x 5 contexts
    assert_eq!(cfg.generation.num_seeds, 100);
    assert_eq!(cfg.generation.contexts.len(), 5);
    let report = run_fairness_audit::<f64>(&cfg, 0).unwrap();
    let pass = report.generation_total == 500 && report.generation_equal == report.generation_total;
    verdict(
        6,
        "seeded generation commutes with the swap",
        pass,
        &format!(
            "{}/{} generations token-for-token identical (100 seeds x 5 contexts)",
            report.generation_equal, report.generation_total
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Compositional splits: baseline fails, the wrapped model generalizes
// ---------------------------------------------------------------------------

#[test]
fn c07_scan_splits_reproduce_the_generalization_gap() {
    let mut pass = true;
    let mut parts = Vec::new();
    for split in [SplitName::AddJump, SplitName::AroundRight] {
        let cfg = ScanConfig {
            split,
            ..ScanConfig::default()
        };
        let start = Instant::now();
        let mut max_base_test = 0.0f64;
        let mut min_eq_test = 1.0f64;
        let mut min_val = 1.0f64;
        for seed in 0..3u64 {
            let r = run_scan_experiment::<f64>(&cfg, seed).unwrap();
            max_base_test = max_base_test.max(r.baseline_test);
            min_eq_test = min_eq_test.min(r.equituned_test);
            min_val = min_val.min(r.baseline_val.min(r.equituned_val));
            pass &= r.baseline_test < 0.10
                && r.equituned_test >= 0.80
                && r.baseline_val >= 0.90
                && r.equituned_val >= 0.90;
        }
        let secs = start.elapsed().as_secs_f64();
        pass &= secs < 600.0;
        parts.push(format!(
            "{}: baseline test <= {:.3}, equituned test >= {:.3}, vals >= {:.3}, 3 seeds in {:.0}s",
            split.as_str(),
            max_base_test,
            min_eq_test,
            min_val,
            secs
        ));
    }
    verdict(
        7,
        "compositional splits reproduce the generalization gap",
        pass,
        &parts.join("; "),
    );
}

// ---------------------------------------------------------------------------
// 8. Wrapped image classifier: zero rotation gap, no worse under rotation
// ---------------------------------------------------------------------------

#[test]
fn c08_wrapped_cnn_is_rotation_invariant_and_no_worse_rotated() {
    let cfg = ImageDemoConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let r = run_image_demo::<f64>(&cfg, seed).unwrap();
        pass &= r.max_rotation_gap == 0.0 && r.equituned_rotated >= r.baseline_rotated;
        parts.push(format!(
            "seed {seed}: gap {:.1}, rotated accuracy {:.2} (baseline) vs {:.2} (equituned)",
            r.max_rotation_gap, r.baseline_rotated, r.equituned_rotated
        ));
    }
    verdict(
        8,
        "rotation gap is exactly zero and rotated accuracy does not regress",
        pass,
        &parts.join("; "),
    );
}

// ---------------------------------------------------------------------------
// 9. Analytic gradients match central finite differences everywhere
// ---------------------------------------------------------------------------

#[test]
fn c09_gradients_match_finite_differences_everywhere() {
    let reports = run_suite(0, &GradCheckConfig::default());
    let expected = [
        "dense",
        "mlp",
        "conv2d",
        "rnn",
        "gru",
        "lstm",
        "word-lm",
        "softmax-ce",
        "group-conv",
        "equituned-mlp",
    ];
    let names: Vec<&str> = reports.iter().map(|r| r.case.as_str()).collect();
    let coverage = expected.iter().all(|e| names.contains(e));
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = coverage && reports.iter().all(|r| r.pass) && worst <= 1e-4;
    verdict(
        9,
        "gradients match finite differences",
        pass,
        &format!(
            "{} cases including the wrapped pipeline; max relative error {worst:.1e}",
            reports.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10–11 drive the compiled CLI
// ---------------------------------------------------------------------------

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

/// Run the binary with `--out <dir>` plus the given args; returns the exit
/// code and the JSON report it prints on stdout.
fn cli_report(args: &[&str], out: &Path) -> (i32, serde_json::Value) {
    let output = Command::new(env!("CARGO_BIN_EXE_equitune"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("the CLI binary runs");
    let code = output.status.code().unwrap_or(-1);
    let stdout = String::from_utf8_lossy(&output.stdout);
    let report = serde_json::from_str(stdout.trim()).unwrap_or_else(|e| {
        panic!(
            "CLI stdout should be a JSON report: {e}\nstdout: {stdout}\nstderr: {}",
            String::from_utf8_lossy(&output.stderr)
        )
    });
    (code, report)
}

#[test]
fn c10_bench_accounts_for_params_speed_and_memory() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = cli_report(&["bench"], dir.path());
    let get = |k: &str| report["metrics"][k].as_f64().unwrap_or(f64::NAN);
    let params_ok = get("base_params") + get("head_params") == get("wrapped_params");
    let speed_ok = get("batched_seconds") <= get("naive_seconds");
    let memory_ok = get("memory_growth_factor") <= get("group_order");
    let pass = code == 0
        && report["pass"].as_bool() == Some(true)
        && params_ok
        && speed_ok
        && memory_ok
        && get("outputs_match") == 1.0;
    verdict(
        10,
        "wrapper accounting (params, speed, memory)",
        pass,
        &format!(
            "params {:.0}+{:.0}={:.0} exactly; batched block {:.3}s <= naive {:.3}s; memory x{:.2} <= x{:.0}; outputs bitwise equal",
            get("base_params"),
            get("head_params"),
            get("wrapped_params"),
            get("batched_seconds"),
            get("naive_seconds"),
            get("memory_growth_factor"),
            get("group_order"),
        ),
    );
}

#[test]
fn c11_axiom_verifiers_pass_good_inputs_and_flag_every_injected_violation() {
    // Clean sweep: named groups, image/token/partition actions.
    let good_dir = tempfile::tempdir().unwrap();
    let good_cfg = config_path("verify.json");
    let (good_code, good) = cli_report(
        &["--config", good_cfg.to_str().unwrap(), "verify"],
        good_dir.path(),
    );
    let good_cases = good["metrics"]["cases"].as_f64().unwrap_or(0.0);
    let clean = good_code == 0
        && good["pass"].as_bool() == Some(true)
        && good["metrics"]["violations"].as_f64() == Some(0.0);

    // Injected-violation sweep: every deliberately broken input must be
    // flagged, and the run must exit with the assertion-failure code.
    let broken_dir = tempfile::tempdir().unwrap();
    let broken_cfg = config_path("verify_broken.json");
    let (broken_code, broken) = cli_report(
        &["--config", broken_cfg.to_str().unwrap(), "verify"],
        broken_dir.path(),
    );
    let injected = [
        "group:broken-associativity",
        "group:missing-inverse",
        "group:broken-identity",
        "action:non-bijective-swap",
    ];
    let detected = injected
        .iter()
        .filter(|case| {
            broken["metrics"][format!("{case}.violations").as_str()]
                .as_f64()
                .unwrap_or(0.0)
                >= 1.0
        })
        .count();
    let all_flagged = broken_code == 1 && detected == injected.len();

    verdict(
        11,
        "axiom verifiers pass good inputs and flag injected violations",
        clean && all_flagged,
        &format!(
            "{good_cases:.0} clean cases, 0 violations; {detected}/{} injected violations detected",
            injected.len()
        ),
    );
}

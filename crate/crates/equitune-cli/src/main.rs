//! Command-line surface for the equitune toolkit.
//!
//! Every subcommand reads an optional JSON config (built-in defaults when
//! omitted), runs one verification pass or experiment, writes a
//! [`RunReport`] into the output directory, prints the same JSON to stdout,
//! and exits with:
//!
//! * `0` — every assertion the command makes passed;
//! * `1` — the run completed but an assertion failed (the report's `pass`
//!   field is `false` and names the failing metrics);
//! * `2` — the configuration was unusable: unreadable file, malformed JSON,
//!   unknown group name, a word outside the vocabulary, and so on.
//!
//! Identical config and seed reproduce identical metric values; only the
//! wall-clock and peak-memory fields vary between runs. Config schemas are
//! documented in `configs/README.md` at the repository root, with one
//! ready-to-run example per command.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use equitune::action::GroupAction;
use equitune::equitune::{equitune_scalar_fn, EquitunedModel, FeatureMode};
use equitune::fairness::{
    gender_partition_full, gender_partition_relaxed, partition_action, resolve_partition,
    run_fairness_audit, toy_vocab, FairnessConfig, PartitionSpec,
};
use equitune::gradcheck::{run_suite, GradCheckConfig};
use equitune::group::FiniteGroup;
use equitune::nn::{BaseModel, Dense, ModelSpec, ParamSet};
use equitune::report::RunReport;
use equitune::rng::stream;
use equitune::scalar::Scalar;
use equitune::scan::{run_scan_experiment, swap_for, ScanConfig, SplitName, OUT_VOCAB};
use equitune::tape::Tape;
use equitune::tensor::Tensor;
use equitune::vision::{run_image_demo, ImageDemoConfig};

// ---------------------------------------------------------------------------
// Counting allocator
// ---------------------------------------------------------------------------

/// System allocator wrapped with live/peak byte counters, so reports can
/// carry an allocator-level memory figure and the bench command can compare
/// footprints without OS-specific probes.
struct CountingAllocator;

static CURRENT_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

fn count_alloc(n: usize) {
    let now = CURRENT_BYTES.fetch_add(n, Ordering::Relaxed) + n;
    PEAK_BYTES.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            count_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT_BYTES.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT_BYTES.fetch_sub(layout.size(), Ordering::Relaxed);
            count_alloc(new_size);
        }
        p
    }
}

#[global_allocator]
static ALLOCATOR: CountingAllocator = CountingAllocator;

fn current_bytes() -> u64 {
    CURRENT_BYTES.load(Ordering::Relaxed) as u64
}

fn peak_bytes() -> u64 {
    PEAK_BYTES.load(Ordering::Relaxed) as u64
}

/// Forget previous highs: the peak restarts from the current live total.
fn reset_peak() {
    PEAK_BYTES.store(CURRENT_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Run `f` and return its result plus how far the heap high-water mark rose
/// above the live total at entry.
fn measure_growth<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let floor = current_bytes();
    reset_peak();
    let r = f();
    (r, peak_bytes().saturating_sub(floor))
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "equitune",
    version,
    about = "Make models group-equivariant by symmetry averaging, and prove it",
    long_about = "Verifiers, demos, audits, and benchmarks for group-averaged models.\n\
                  Each command writes a JSON run report into the output directory and\n\
                  exits 0 when all of its assertions hold, 1 when one fails, and 2 when\n\
                  the configuration itself is unusable."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON config file; built-in defaults are used when omitted
    #[arg(long, global = true, value_name = "path")]
    config: Option<PathBuf>,

    /// Base seed for every deterministic random stream
    #[arg(long, global = true, default_value_t = 0, value_name = "int")]
    seed: u64,

    /// Floating-point precision (verify and gradcheck always run at f64)
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,

    /// Directory for reports and artifacts, created if missing
    #[arg(long, global = true, default_value = "out", value_name = "dir")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Check group- and action-axioms, reporting concrete witnesses on failure
    Verify,
    /// Rotation robustness: a plain CNN vs its quarter-turn-averaged wrap
    ImageDemo,
    /// Compositional command translation with a vocabulary-swap wrap
    Scan,
    /// Train a biased toy language model, wrap it, and certify swap-fairness
    FairnessAudit,
    /// Compare base and wrapped forwards: parameter counts, time, memory
    Bench,
    /// Finite-difference verification of every layer's gradients
    Gradcheck,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// `"c<n>"` or `"d<n>"` to the corresponding cyclic or dihedral group.
fn named_group(name: &str) -> Result<FiniteGroup> {
    let build = || -> Option<FiniteGroup> {
        let n: usize = name[1..].parse().ok()?;
        match &name[..1] {
            "c" => FiniteGroup::make_cyclic(n).ok(),
            "d" => FiniteGroup::make_dihedral(n).ok(),
            _ => None,
        }
    };
    if name.len() < 2 {
        bail!("unknown group {name:?}: expected c<n> or d<n>");
    }
    build().with_context(|| format!("unknown group {name:?}: expected c<n> or d<n>"))
}

fn main() {
    let cli = Cli::parse();
    reset_peak();
    let started = Instant::now();
    match run(&cli) {
        Ok(mut report) => {
            report.wall_seconds = started.elapsed().as_secs_f64();
            report.peak_memory_bytes = peak_bytes();
            let file = format!("{}_report.json", report.command.replace('-', "_"));
            let path = cli.out.join(&file);
            if let Err(e) = report.save(&path) {
                eprintln!("cannot write report {}: {e}", path.display());
                std::process::exit(2);
            }
            print!("{}", report.to_json());
            eprintln!(
                "{}: {} ({})",
                report.command,
                if report.pass { "PASS" } else { "FAIL" },
                path.display()
            );
            std::process::exit(if report.pass { 0 } else { 1 });
        }
        Err(err) => {
            eprintln!("configuration error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn run(cli: &Cli) -> Result<RunReport> {
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    let config = cli.config.as_deref();
    match (&cli.command, cli.precision) {
        (Cmd::Verify, _) => cmd_verify(load_config(config)?, cli),
        (Cmd::ImageDemo, Precision::F32) => cmd_image_demo::<f32>(load_config(config)?, cli),
        (Cmd::ImageDemo, Precision::F64) => cmd_image_demo::<f64>(load_config(config)?, cli),
        (Cmd::Scan, Precision::F32) => cmd_scan::<f32>(load_config(config)?, cli),
        (Cmd::Scan, Precision::F64) => cmd_scan::<f64>(load_config(config)?, cli),
        (Cmd::FairnessAudit, Precision::F32) => {
            cmd_fairness_audit::<f32>(load_config(config)?, cli)
        }
        (Cmd::FairnessAudit, Precision::F64) => {
            cmd_fairness_audit::<f64>(load_config(config)?, cli)
        }
        (Cmd::Bench, Precision::F32) => cmd_bench::<f32>(load_config(config)?, cli),
        (Cmd::Bench, Precision::F64) => cmd_bench::<f64>(load_config(config)?, cli),
        (Cmd::Gradcheck, _) => cmd_gradcheck(load_config(config)?, cli),
    }
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

/// An explicit Cayley table to verify; lets configs inject broken groups and
/// see them rejected with witnesses.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawGroup {
    name: String,
    table: Vec<Vec<usize>>,
    identity: usize,
    inverses: Vec<usize>,
    /// Optional; `g0…` is generated when empty.
    #[serde(default)]
    labels: Vec<String>,
}

/// An explicit token-permutation table over an arbitrary vocabulary size.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTokenAction {
    name: String,
    /// Named group the table claims to represent, e.g. `"c2"`.
    group: String,
    /// `perms[g][t]` = image of token `t` under element `g`.
    perms: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct VerifyConfig {
    /// Groups by name: `c<n>` (cyclic) or `d<n>` (dihedral).
    groups: Vec<String>,
    /// Explicit tables to verify alongside the named groups.
    raw_groups: Vec<RawGroup>,
    /// Square grid sides; each gets the quarter-turn and rotation+flip
    /// actions checked exhaustively over all element pairs.
    image_sides: Vec<usize>,
    /// Word-level swap partitions, resolved against the built-in vocabulary.
    partitions: Vec<PartitionSpec>,
    /// Explicit token permutations to verify (bijectivity plus axioms).
    raw_token_actions: Vec<RawTokenAction>,
    /// Random samples per carrier for the compatibility sweeps.
    samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            groups: ["c1", "c2", "c4", "d4"].map(String::from).to_vec(),
            raw_groups: Vec::new(),
            image_sides: vec![8],
            partitions: vec![gender_partition_full(), gender_partition_relaxed()],
            raw_token_actions: Vec::new(),
            samples: 25,
        }
    }
}

struct VerifyCase {
    name: String,
    witnesses: Vec<String>,
}

fn cmd_verify(cfg: VerifyConfig, cli: &Cli) -> Result<RunReport> {
    let mut cases: Vec<VerifyCase> = Vec::new();
    let mut case =
        |name: String, witnesses: Vec<String>| cases.push(VerifyCase { name, witnesses });

    for name in &cfg.groups {
        let g = named_group(name)?;
        let rep = g.verify_group_axioms()?;
        case(
            format!("group:{name}"),
            rep.violations.iter().map(ToString::to_string).collect(),
        );
    }
    for raw in &cfg.raw_groups {
        let labels = if raw.labels.is_empty() {
            (0..raw.table.len()).map(|i| format!("g{i}")).collect()
        } else {
            raw.labels.clone()
        };
        let g = FiniteGroup::from_parts(
            raw.table.clone(),
            raw.identity,
            raw.inverses.clone(),
            labels,
        )
        .with_context(|| format!("building group {:?}", raw.name))?;
        let rep = g.verify_group_axioms()?;
        case(
            format!("group:{}", raw.name),
            rep.violations.iter().map(ToString::to_string).collect(),
        );
    }

    let mut rng = stream(cli.seed, "verify-samples");
    let mut grids = |side: usize, count: usize| -> Vec<Tensor<f64>> {
        (0..count)
            .map(|_| {
                let data = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::from_vec(vec![side, side], data).expect("sample length")
            })
            .collect()
    };
    for &side in &cfg.image_sides {
        let samples = grids(side, cfg.samples);
        for (label, action) in [
            ("c4", GroupAction::image_c4(side, side)?),
            ("d4", GroupAction::image_d4(side, side)?),
        ] {
            case(
                format!("action:image-{label}-{side}x{side}"),
                action
                    .verify_tensor_axioms(&samples)
                    .violations
                    .iter()
                    .map(ToString::to_string)
                    .collect(),
            );
        }
    }
    {
        let trivial = GroupAction::trivial(FiniteGroup::make_cyclic(4)?);
        let samples = grids(5, cfg.samples.min(5));
        case(
            "action:trivial-c4".into(),
            trivial
                .verify_tensor_axioms(&samples)
                .violations
                .iter()
                .map(ToString::to_string)
                .collect(),
        );
    }

    let mut rng = stream(cli.seed, "verify-sequences");
    let mut sequences = |pool: &[usize], count: usize| -> Vec<Vec<usize>> {
        (0..count)
            .map(|_| {
                let len = rng.gen_range(3..10);
                (0..len)
                    .map(|_| pool[rng.gen_range(0..pool.len())])
                    .collect()
            })
            .collect()
    };
    let vectors = |vocab: usize, count: usize| -> Vec<Tensor<f64>> {
        let mut rng = stream(cli.seed, "verify-vectors");
        (0..count)
            .map(|_| {
                let data = (0..vocab).map(|_| rng.gen_range(0.0..1.0)).collect();
                Tensor::from_vec(vec![vocab], data).expect("sample length")
            })
            .collect()
    };

    for split in [SplitName::AddJump, SplitName::AroundRight] {
        let swap = swap_for(split);
        let in_vocab = swap.input.vocab_size().expect("token action");
        let pool: Vec<usize> = (0..in_vocab).collect();
        case(
            format!("action:command-swap-{}", split.as_str()),
            swap.input
                .verify_sequence_axioms(&sequences(&pool, cfg.samples))
                .violations
                .iter()
                .map(ToString::to_string)
                .collect(),
        );
        case(
            format!("action:action-swap-{}", split.as_str()),
            swap.output
                .as_vector_action()?
                .verify_tensor_axioms(&vectors(OUT_VOCAB, cfg.samples))
                .violations
                .iter()
                .map(ToString::to_string)
                .collect(),
        );
    }

    let vocab = toy_vocab();
    for (i, spec) in cfg.partitions.iter().enumerate() {
        let partition = resolve_partition(spec, &vocab)?;
        let (_, action) = partition_action(&partition, vocab.len())?;
        let undefined = action.undefined_tokens();
        let pool: Vec<usize> = (0..vocab.len())
            .filter(|t| !undefined.contains(t))
            .collect();
        case(
            format!("action:partition-{i}-sequences"),
            action
                .verify_sequence_axioms(&sequences(&pool, cfg.samples))
                .violations
                .iter()
                .map(ToString::to_string)
                .collect(),
        );
        case(
            format!("action:partition-{i}-vectors"),
            action
                .as_vector_action()?
                .verify_tensor_axioms(&vectors(vocab.len(), cfg.samples))
                .violations
                .iter()
                .map(ToString::to_string)
                .collect(),
        );
    }
    for raw in &cfg.raw_token_actions {
        let group = named_group(&raw.group)?;
        let action = GroupAction::token_permutation(group, raw.perms.clone(), Default::default())
            .with_context(|| format!("building token action {:?}", raw.name))?;
        let vocab_size = action.vocab_size().unwrap_or(0);
        let pool: Vec<usize> = (0..vocab_size).collect();
        case(
            format!("action:{}", raw.name),
            action
                .verify_sequence_axioms(&sequences(&pool, cfg.samples))
                .violations
                .iter()
                .map(ToString::to_string)
                .collect(),
        );
    }

    let total: usize = cases.iter().map(|c| c.witnesses.len()).sum();
    let mut lines = String::new();
    for c in &cases {
        if c.witnesses.is_empty() {
            lines.push_str(&format!("PASS {}\n", c.name));
        } else {
            for w in &c.witnesses {
                lines.push_str(&format!("FAIL {}: {}\n", c.name, w));
            }
        }
    }
    let witness_file = "verify_cases.txt";
    std::fs::write(cli.out.join(witness_file), lines)?;

    let mut report = RunReport::new("verify", "f64", vec![cli.seed], serde_json::to_value(&cfg)?);
    report.metric("cases", cases.len() as f64);
    report.metric("violations", total as f64);
    for c in &cases {
        report.metric(&format!("{}.violations", c.name), c.witnesses.len() as f64);
    }
    report.artifact(witness_file);
    report.pass = total == 0;
    Ok(report)
}

// ---------------------------------------------------------------------------
// image-demo
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ImageDemoCmdConfig {
    /// Consecutive seeds to run, starting at `--seed`.
    num_seeds: u64,
    #[serde(flatten)]
    demo: ImageDemoConfig,
}

impl Default for ImageDemoCmdConfig {
    fn default() -> Self {
        Self {
            num_seeds: 3,
            demo: ImageDemoConfig::default(),
        }
    }
}

fn cmd_image_demo<S: Scalar>(cfg: ImageDemoCmdConfig, cli: &Cli) -> Result<RunReport> {
    let seeds: Vec<u64> = (0..cfg.num_seeds)
        .map(|i| cli.seed.wrapping_add(i))
        .collect();
    let mut report = RunReport::new(
        "image-demo",
        cli.precision.name(),
        seeds.clone(),
        serde_json::to_value(&cfg)?,
    );
    let mut pass = true;
    let mut worst_gap: f64 = 0.0;
    let mut min_advantage = f64::INFINITY;
    for &s in &seeds {
        let r = run_image_demo::<S>(&cfg.demo, s)?;
        let file = format!("image_demo_seed{s}.json");
        std::fs::write(
            cli.out.join(&file),
            serde_json::to_string_pretty(&r)? + "\n",
        )?;
        report.artifact(&file);
        report.metric(&format!("seed{s}.baseline_clean"), r.baseline_clean);
        report.metric(&format!("seed{s}.baseline_rotated"), r.baseline_rotated);
        report.metric(&format!("seed{s}.equituned_clean"), r.equituned_clean);
        report.metric(&format!("seed{s}.equituned_rotated"), r.equituned_rotated);
        report.metric(&format!("seed{s}.rotation_gap"), r.max_rotation_gap);
        worst_gap = worst_gap.max(r.max_rotation_gap);
        min_advantage = min_advantage.min(r.equituned_rotated - r.baseline_rotated);
        // The wrap's predictions are rotation-invariant per image, so its
        // clean and rotated accuracies must agree exactly, the logit gap must
        // be exactly zero, and under rotation it must not lose to the
        // baseline.
        pass &= r.max_rotation_gap == 0.0
            && r.equituned_clean == r.equituned_rotated
            && r.equituned_rotated >= r.baseline_rotated;
    }
    report.metric("max_rotation_gap", worst_gap);
    report.metric("min_rotation_advantage", min_advantage);
    report.pass = pass;
    Ok(report)
}

// ---------------------------------------------------------------------------
// scan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ScanCmdConfig {
    /// Consecutive seeds to run, starting at `--seed`.
    num_seeds: u64,
    /// A baseline that truly fails to generalize stays under this.
    baseline_test_max: f64,
    /// The wrapped model must reach at least this test exact-match.
    equituned_test_min: f64,
    /// Both models must reach at least this validation exact-match.
    val_min: f64,
    #[serde(flatten)]
    scan: ScanConfig,
}

impl Default for ScanCmdConfig {
    fn default() -> Self {
        Self {
            num_seeds: 3,
            baseline_test_max: 0.10,
            equituned_test_min: 0.80,
            val_min: 0.90,
            scan: ScanConfig::default(),
        }
    }
}

fn cmd_scan<S: Scalar>(cfg: ScanCmdConfig, cli: &Cli) -> Result<RunReport> {
    let seeds: Vec<u64> = (0..cfg.num_seeds)
        .map(|i| cli.seed.wrapping_add(i))
        .collect();
    let mut report = RunReport::new(
        "scan",
        cli.precision.name(),
        seeds.clone(),
        serde_json::to_value(&cfg)?,
    );
    let mut pass = true;
    let mut max_baseline_test: f64 = 0.0;
    let mut min_equituned_test = f64::INFINITY;
    let mut min_baseline_val = f64::INFINITY;
    let mut min_equituned_val = f64::INFINITY;
    for &s in &seeds {
        let r = run_scan_experiment::<S>(&cfg.scan, s)?;
        let file = format!(
            "scan_{}_seed{s}.json",
            cfg.scan.split.as_str().replace('-', "_")
        );
        std::fs::write(
            cli.out.join(&file),
            serde_json::to_string_pretty(&r)? + "\n",
        )?;
        report.artifact(&file);
        report.metric(&format!("seed{s}.baseline_val"), r.baseline_val);
        report.metric(&format!("seed{s}.baseline_test"), r.baseline_test);
        report.metric(&format!("seed{s}.equituned_val"), r.equituned_val);
        report.metric(&format!("seed{s}.equituned_test"), r.equituned_test);
        max_baseline_test = max_baseline_test.max(r.baseline_test);
        min_equituned_test = min_equituned_test.min(r.equituned_test);
        min_baseline_val = min_baseline_val.min(r.baseline_val);
        min_equituned_val = min_equituned_val.min(r.equituned_val);
        pass &= r.baseline_test < cfg.baseline_test_max
            && r.equituned_test >= cfg.equituned_test_min
            && r.baseline_val >= cfg.val_min
            && r.equituned_val >= cfg.val_min;
    }
    report.metric("max_baseline_test", max_baseline_test);
    report.metric("min_equituned_test", min_equituned_test);
    report.metric("min_baseline_val", min_baseline_val);
    report.metric("min_equituned_val", min_equituned_val);
    report.pass = pass;
    Ok(report)
}

// ---------------------------------------------------------------------------
// fairness-audit
// ---------------------------------------------------------------------------

fn cmd_fairness_audit<S: Scalar>(cfg: FairnessConfig, cli: &Cli) -> Result<RunReport> {
    let r = run_fairness_audit::<S>(&cfg, cli.seed)?;
    let mut report = RunReport::new(
        "fairness-audit",
        cli.precision.name(),
        vec![cli.seed],
        serde_json::to_value(&cfg)?,
    );
    report.metric("group_order", r.group_order as f64);
    report.metric("vocab_size", r.vocab_size as f64);
    report.metric("train_loss", r.train_loss);
    report.metric("baseline_sentence_gap", r.baseline_sentence_gap);
    report.metric("wrapped_word_gap", r.wrapped_word_gap);
    if let Some(gap) = r.wrapped_sentence_gap {
        report.metric("wrapped_sentence_gap", gap);
    }
    report.metric("generation_total", r.generation_total as f64);
    report.metric("generation_equal", r.generation_equal as f64);
    let transcript = "generations.txt";
    std::fs::write(
        cli.out.join(transcript),
        r.sample_generations.join("\n") + "\n",
    )?;
    report.artifact(transcript);
    report.pass = r.pass;
    Ok(report)
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct BenchConfig {
    /// Base architecture; its input size must match `side` × `side`.
    model: ModelSpec,
    /// Symmetry group acting on the input grid: `"c4"` or `"d4"`.
    group: String,
    /// Input grid side length.
    side: usize,
    /// Class count of the dense head attached to the averaged output.
    head_outputs: usize,
    /// Forward passes per timed block.
    repeats: usize,
    /// Seeds benchmarked; medians across them decide the assertions.
    num_seeds: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::Mlp {
                sizes: vec![256, 128, 10],
            },
            group: "c4".into(),
            side: 16,
            head_outputs: 10,
            repeats: 50,
            num_seeds: 3,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn bench_input<S: Scalar>(side: usize, seed: u64) -> Tensor<S> {
    let mut rng = stream(seed, "bench-input");
    let data = (0..side * side)
        .map(|_| S::from_f64(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(vec![1, side, side], data).expect("input length")
}

/// The naive reference: |G| sequential base passes, inverse alignment, mean,
/// then the same dense head the wrapper uses.
fn naive_forward<S: Scalar>(
    group: &FiniteGroup,
    in_act: &GroupAction,
    out_act: &GroupAction,
    base: &BaseModel<S>,
    head: &Dense<S>,
    x: &Tensor<S>,
) -> Tensor<S> {
    let averaged = equitune_scalar_fn(group, in_act, out_act, |v| base.forward_single(v), x)
        .expect("actions match the carrier");
    let mut tape = Tape::new();
    let hb = head.bind(&mut tape);
    let m = averaged.len();
    let leaf = tape.leaf(averaged.reshaped(&[1, m]).expect("row reshape"));
    let out = hb.forward(&mut tape, leaf);
    let classes = head.outputs();
    tape.value(out)
        .reshaped(&[classes])
        .expect("one row of logits")
}

fn cmd_bench<S: Scalar>(cfg: BenchConfig, cli: &Cli) -> Result<RunReport> {
    let group = named_group(&cfg.group)?;
    let in_act = match cfg.group.as_str() {
        "c4" => GroupAction::image_c4(cfg.side, cfg.side)?,
        "d4" => GroupAction::image_d4(cfg.side, cfg.side)?,
        other => bail!("bench supports groups c4 and d4 acting on images, got {other:?}"),
    };
    match &cfg.model {
        ModelSpec::Mlp { sizes } => {
            let expect = cfg.side * cfg.side;
            if sizes.first() != Some(&expect) {
                bail!(
                    "model input width {:?} does not match side {} ({} pixels)",
                    sizes.first(),
                    cfg.side,
                    expect
                );
            }
        }
        ModelSpec::Cnn { side, .. } => {
            if *side != cfg.side {
                bail!(
                    "model side {} does not match configured side {}",
                    side,
                    cfg.side
                );
            }
        }
    }

    let seeds: Vec<u64> = (0..cfg.num_seeds)
        .map(|i| cli.seed.wrapping_add(i))
        .collect();
    let mut report = RunReport::new(
        "bench",
        cli.precision.name(),
        seeds.clone(),
        serde_json::to_value(&cfg)?,
    );

    let build_base = |seed: u64| -> BaseModel<S> {
        BaseModel::build(&cfg.model, &mut stream(seed, "bench-init"))
    };
    let build_wrapped = |seed: u64| -> Result<EquitunedModel<S>> {
        let base = build_base(seed);
        let m = base.output_shape()[0];
        let head = Dense::new(m, cfg.head_outputs, &mut stream(seed, "bench-head"));
        Ok(EquitunedModel::new(
            base,
            group.clone(),
            in_act.clone(),
            GroupAction::trivial(group.clone()),
            FeatureMode::Scalar,
        )?
        .with_head(head)?)
    };

    // Parameter identity: wrapping adds the head's weights and nothing else.
    let probe_base = build_base(cli.seed);
    let probe_head: Dense<S> = Dense::new(
        probe_base.output_shape()[0],
        cfg.head_outputs,
        &mut stream(cli.seed, "bench-head"),
    );
    let base_params = probe_base.param_count();
    let head_params = ParamSet::<S>::param_count(&probe_head);
    let wrapped_params = build_wrapped(cli.seed)?.param_count();
    let params_ok = wrapped_params == base_params + head_params;
    report.metric("base_params", base_params as f64);
    report.metric("head_params", head_params as f64);
    report.metric("wrapped_params", wrapped_params as f64);

    let out_act = GroupAction::trivial(group.clone());
    let mut naive_times = Vec::new();
    let mut batched_times = Vec::new();
    let mut base_footprints = Vec::new();
    let mut wrapped_footprints = Vec::new();
    let mut outputs_match = true;
    for &s in &seeds {
        let x = bench_input::<S>(cfg.side, s);

        // Footprints cover building the model and running one forward: what
        // a process must hold to use each variant.
        let ((), base_bytes) = measure_growth(|| {
            let base = build_base(s);
            std::hint::black_box(base.forward_single(&x));
        });
        let (wrapped, wrapped_bytes) = measure_growth(|| -> Result<EquitunedModel<S>> {
            let wrapped = build_wrapped(s)?;
            std::hint::black_box(wrapped.forward(&x)?);
            Ok(wrapped)
        });
        let wrapped = wrapped?;
        base_footprints.push(base_bytes as f64);
        wrapped_footprints.push(wrapped_bytes as f64);

        let base = build_base(s);
        let head = wrapped
            .head()
            .expect("bench always attaches a head")
            .clone();
        let batched_out = wrapped.forward(&x)?;
        let naive_out = naive_forward(&group, &in_act, &out_act, &base, &head, &x);
        outputs_match &= batched_out.max_abs_diff(&naive_out) == 0.0;

        let t = Instant::now();
        for _ in 0..cfg.repeats {
            std::hint::black_box(naive_forward(&group, &in_act, &out_act, &base, &head, &x));
        }
        naive_times.push(t.elapsed().as_secs_f64());

        let t = Instant::now();
        for _ in 0..cfg.repeats {
            std::hint::black_box(wrapped.forward(&x)?);
        }
        batched_times.push(t.elapsed().as_secs_f64());
    }

    let naive_seconds = median(naive_times);
    let batched_seconds = median(batched_times);
    let base_bytes = median(base_footprints);
    let wrapped_bytes = median(wrapped_footprints);
    let growth = wrapped_bytes / base_bytes;
    let order = group.order() as f64;

    report.metric("group_order", order);
    report.metric("naive_seconds", naive_seconds);
    report.metric("batched_seconds", batched_seconds);
    report.metric("base_footprint_bytes", base_bytes);
    report.metric("wrapped_footprint_bytes", wrapped_bytes);
    report.metric("memory_growth_factor", growth);
    report.metric("outputs_match", if outputs_match { 1.0 } else { 0.0 });
    report.pass = params_ok && outputs_match && batched_seconds <= naive_seconds && growth <= order;
    Ok(report)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(cfg: GradCheckConfig, cli: &Cli) -> Result<RunReport> {
    let results = run_suite(cli.seed, &cfg);
    let mut report = RunReport::new(
        "gradcheck",
        "f64",
        vec![cli.seed],
        serde_json::to_value(&cfg)?,
    );
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for r in &results {
        report.metric(&format!("{}.max_rel_err", r.case), r.max_rel_err);
        worst = worst.max(r.max_rel_err);
        pass &= r.pass;
    }
    report.metric("cases", results.len() as f64);
    report.metric("max_rel_err", worst);
    report.pass = pass;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use equitune::fairness::{resolve_partition, token_ids};

    fn read(name: &str) -> String {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../configs")
            .join(name);
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {path:?}: {e}"))
    }

    /// Every shipped config file must deserialize against its command's
    /// schema, and fairness configs must only use demo-vocabulary words.
    #[test]
    fn shipped_configs_parse() {
        serde_json::from_str::<VerifyConfig>(&read("verify.json")).unwrap();
        serde_json::from_str::<VerifyConfig>(&read("verify_broken.json")).unwrap();
        serde_json::from_str::<ImageDemoCmdConfig>(&read("image_demo.json")).unwrap();
        serde_json::from_str::<GradCheckConfig>(&read("gradcheck.json")).unwrap();
        serde_json::from_str::<BenchConfig>(&read("bench.json")).unwrap();
        let cnn = serde_json::from_str::<BenchConfig>(&read("bench_d4_cnn.json")).unwrap();
        assert!(matches!(cnn.model, ModelSpec::Cnn { .. }));

        let jump = serde_json::from_str::<ScanCmdConfig>(&read("scan_add_jump.json")).unwrap();
        assert_eq!(jump.scan.split, SplitName::AddJump);
        let right = serde_json::from_str::<ScanCmdConfig>(&read("scan_around_right.json")).unwrap();
        assert_eq!(right.scan.split, SplitName::AroundRight);

        let vocab = toy_vocab();
        for file in [
            "fairness_gender_full.json",
            "fairness_gender_relaxed.json",
            "fairness_color.json",
            "fairness_sexuality.json",
        ] {
            let cfg = serde_json::from_str::<FairnessConfig>(&read(file)).unwrap();
            let partition =
                resolve_partition(&cfg.partition, &vocab).unwrap_or_else(|e| panic!("{file}: {e}"));
            for p in &cfg.pairs {
                token_ids(&p.context, &vocab).unwrap_or_else(|e| panic!("{file}: {e}"));
                token_ids(&p.continuation, &vocab).unwrap_or_else(|e| panic!("{file}: {e}"));
            }
            // Seeded generation only commutes with the swap when the context
            // mentions an equality word that anchors the sampler.
            for text in &cfg.generation.contexts {
                let ids = token_ids(text, &vocab).unwrap_or_else(|e| panic!("{file}: {e}"));
                let anchored = ids
                    .iter()
                    .any(|t| partition.equality_lists.iter().flatten().any(|x| x == t));
                assert!(anchored, "{file}: context {text:?} lacks an equality word");
            }
        }
    }
}

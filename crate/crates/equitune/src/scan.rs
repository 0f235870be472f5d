//! Desk-scale compositional-generalization benchmark over a command grammar.
//!
//! Commands like `jump around right twice` translate to action sequences like
//! `RTURN JUMP RTURN JUMP … ` via a deterministic interpreter. Two holdout
//! splits probe composition:
//!
//! * **add-jump** — training sees `jump` only as a bare primitive; every
//!   compound jump command is test-only.
//! * **around-right** — training never contains the `around right` bigram.
//!
//! A baseline encoder–decoder fails on the holdouts. Wrapping it with the
//! C₂ vocabulary swap (jump↔run / JUMP↔RUN, or left↔right / LTURN↔RTURN) and
//! averaging the per-step output distributions over the two swapped passes
//! transfers what was learned for the seen primitive to the held-out one.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionError, GroupAction};
use crate::equitune::EquituneError;
use crate::group::FiniteGroup;
use crate::nn::cells::CellKind;
use crate::nn::collect_grads;
use crate::nn::seq2seq::{Seq2Seq, Seq2SeqB, Seq2SeqConfig};
use crate::nn::ParamSet;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Command vocabulary, in id order.
pub const INPUT_WORDS: [&str; 13] = [
    "walk", "look", "run", "jump", "turn", "left", "right", "opposite", "around", "twice",
    "thrice", "and", "after",
];

/// Action vocabulary, in id order (decoder ids 6 and 7 are start/end marks).
pub const ACTION_WORDS: [&str; 6] = ["WALK", "LOOK", "RUN", "JUMP", "LTURN", "RTURN"];

pub const IN_VOCAB: usize = INPUT_WORDS.len();
pub const OUT_BOS: usize = ACTION_WORDS.len();
pub const OUT_EOS: usize = ACTION_WORDS.len() + 1;
pub const OUT_VOCAB: usize = ACTION_WORDS.len() + 2;

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("cannot parse command at token {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("unknown word {word:?}")]
    UnknownWord { word: String },
    #[error(
        "the {name} split needs {needed} {side} examples but only {available} fit the length cap"
    )]
    NotEnoughExamples {
        name: String,
        side: &'static str,
        needed: usize,
        available: usize,
    },
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Wrapper(#[from] EquituneError),
}

// ---------------------------------------------------------------------------
// Grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prim {
    Walk,
    Look,
    Run,
    Jump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Left,
    Right,
}

/// The thing that moves in a directed verb: a primitive or a bare turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mover {
    Turn,
    Act(Prim),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Directed {
    pub mover: Mover,
    pub dir: Dir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Opposite(Directed),
    Around(Directed),
    Directed(Directed),
    Prim(Prim),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phrase {
    Twice(Verb),
    Thrice(Verb),
    Plain(Verb),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    And(Phrase, Phrase),
    After(Phrase, Phrase),
    Single(Phrase),
}

impl Prim {
    fn word(self) -> &'static str {
        match self {
            Prim::Walk => "walk",
            Prim::Look => "look",
            Prim::Run => "run",
            Prim::Jump => "jump",
        }
    }

    fn action(self) -> &'static str {
        match self {
            Prim::Walk => "WALK",
            Prim::Look => "LOOK",
            Prim::Run => "RUN",
            Prim::Jump => "JUMP",
        }
    }
}

impl Dir {
    fn word(self) -> &'static str {
        match self {
            Dir::Left => "left",
            Dir::Right => "right",
        }
    }

    fn turn(self) -> &'static str {
        match self {
            Dir::Left => "LTURN",
            Dir::Right => "RTURN",
        }
    }
}

/// Surface form of a command.
pub fn command_words(cmd: &Command) -> Vec<&'static str> {
    fn verb(v: &Verb, out: &mut Vec<&'static str>) {
        let mover = |m: Mover, out: &mut Vec<&'static str>| match m {
            Mover::Turn => out.push("turn"),
            Mover::Act(p) => out.push(p.word()),
        };
        match v {
            Verb::Opposite(d) => {
                mover(d.mover, out);
                out.push("opposite");
                out.push(d.dir.word());
            }
            Verb::Around(d) => {
                mover(d.mover, out);
                out.push("around");
                out.push(d.dir.word());
            }
            Verb::Directed(d) => {
                mover(d.mover, out);
                out.push(d.dir.word());
            }
            Verb::Prim(p) => out.push(p.word()),
        }
    }
    fn phrase(p: &Phrase, out: &mut Vec<&'static str>) {
        match p {
            Phrase::Twice(v) => {
                verb(v, out);
                out.push("twice");
            }
            Phrase::Thrice(v) => {
                verb(v, out);
                out.push("thrice");
            }
            Phrase::Plain(v) => verb(v, out),
        }
    }
    let mut out = Vec::new();
    match cmd {
        Command::And(a, b) => {
            phrase(a, &mut out);
            out.push("and");
            phrase(b, &mut out);
        }
        Command::After(a, b) => {
            phrase(a, &mut out);
            out.push("after");
            phrase(b, &mut out);
        }
        Command::Single(p) => phrase(p, &mut out),
    }
    out
}

/// Deterministic semantics: the action sequence a command denotes.
pub fn interpret(cmd: &Command) -> Vec<&'static str> {
    fn step(d: &Directed, out: &mut Vec<&'static str>) {
        out.push(d.dir.turn());
        if let Mover::Act(p) = d.mover {
            out.push(p.action());
        }
    }
    fn verb(v: &Verb, out: &mut Vec<&'static str>) {
        match v {
            Verb::Opposite(d) => {
                out.push(d.dir.turn());
                step(d, out);
            }
            Verb::Around(d) => {
                for _ in 0..4 {
                    step(d, out);
                }
            }
            Verb::Directed(d) => step(d, out),
            Verb::Prim(p) => out.push(p.action()),
        }
    }
    fn phrase(p: &Phrase, out: &mut Vec<&'static str>) {
        let (v, times) = match p {
            Phrase::Twice(v) => (v, 2),
            Phrase::Thrice(v) => (v, 3),
            Phrase::Plain(v) => (v, 1),
        };
        for _ in 0..times {
            verb(v, out);
        }
    }
    let mut out = Vec::new();
    match cmd {
        Command::And(a, b) => {
            phrase(a, &mut out);
            phrase(b, &mut out);
        }
        // "a after b" performs b first.
        Command::After(a, b) => {
            phrase(b, &mut out);
            phrase(a, &mut out);
        }
        Command::Single(p) => phrase(p, &mut out),
    }
    out
}

/// Parse a word sequence back into the grammar, reporting the offending
/// token position on failure.
pub fn parse(words: &[&str]) -> Result<Command, ScanError> {
    let conn = words.iter().position(|w| *w == "and" || *w == "after");
    match conn {
        Some(i) => {
            let a = parse_phrase(&words[..i], 0)?;
            let b = parse_phrase(&words[i + 1..], i + 1)?;
            if words[i] == "and" {
                Ok(Command::And(a, b))
            } else {
                Ok(Command::After(a, b))
            }
        }
        None => Ok(Command::Single(parse_phrase(words, 0)?)),
    }
}

fn parse_phrase(words: &[&str], offset: usize) -> Result<Phrase, ScanError> {
    match words.last() {
        None => Err(ScanError::Parse {
            position: offset,
            message: "empty phrase".into(),
        }),
        Some(&"twice") => Ok(Phrase::Twice(parse_verb(
            &words[..words.len() - 1],
            offset,
        )?)),
        Some(&"thrice") => Ok(Phrase::Thrice(parse_verb(
            &words[..words.len() - 1],
            offset,
        )?)),
        Some(_) => Ok(Phrase::Plain(parse_verb(words, offset)?)),
    }
}

fn parse_prim(word: &str, position: usize) -> Result<Prim, ScanError> {
    match word {
        "walk" => Ok(Prim::Walk),
        "look" => Ok(Prim::Look),
        "run" => Ok(Prim::Run),
        "jump" => Ok(Prim::Jump),
        other => Err(ScanError::Parse {
            position,
            message: format!("expected a primitive verb, found {other:?}"),
        }),
    }
}

fn parse_mover(word: &str, position: usize) -> Result<Mover, ScanError> {
    if word == "turn" {
        Ok(Mover::Turn)
    } else {
        parse_prim(word, position).map(Mover::Act)
    }
}

fn parse_dir(word: &str, position: usize) -> Result<Dir, ScanError> {
    match word {
        "left" => Ok(Dir::Left),
        "right" => Ok(Dir::Right),
        other => Err(ScanError::Parse {
            position,
            message: format!("expected a direction, found {other:?}"),
        }),
    }
}

fn parse_verb(words: &[&str], offset: usize) -> Result<Verb, ScanError> {
    match words {
        [] => Err(ScanError::Parse {
            position: offset,
            message: "empty verb".into(),
        }),
        [one] => parse_prim(one, offset).map(Verb::Prim),
        [m, d] => Ok(Verb::Directed(Directed {
            mover: parse_mover(m, offset)?,
            dir: parse_dir(d, offset + 1)?,
        })),
        [m, kw, d] => {
            let directed = Directed {
                mover: parse_mover(m, offset)?,
                dir: parse_dir(d, offset + 2)?,
            };
            match *kw {
                "opposite" => Ok(Verb::Opposite(directed)),
                "around" => Ok(Verb::Around(directed)),
                other => Err(ScanError::Parse {
                    position: offset + 1,
                    message: format!("expected 'opposite' or 'around', found {other:?}"),
                }),
            }
        }
        _ => Err(ScanError::Parse {
            position: offset + 3,
            message: "verb has too many words".into(),
        }),
    }
}

/// Every command the grammar produces, in a fixed deterministic order.
pub fn all_commands() -> Vec<Command> {
    let prims = [Prim::Walk, Prim::Look, Prim::Run, Prim::Jump];
    let dirs = [Dir::Left, Dir::Right];
    let mut movers = vec![Mover::Turn];
    movers.extend(prims.iter().map(|&p| Mover::Act(p)));
    let directed: Vec<Directed> = movers
        .iter()
        .flat_map(|&mover| dirs.iter().map(move |&dir| Directed { mover, dir }))
        .collect();
    let mut verbs: Vec<Verb> = Vec::new();
    verbs.extend(directed.iter().map(|&d| Verb::Opposite(d)));
    verbs.extend(directed.iter().map(|&d| Verb::Around(d)));
    verbs.extend(directed.iter().map(|&d| Verb::Directed(d)));
    verbs.extend(prims.iter().map(|&p| Verb::Prim(p)));
    let mut phrases: Vec<Phrase> = Vec::new();
    phrases.extend(verbs.iter().map(|&v| Phrase::Twice(v)));
    phrases.extend(verbs.iter().map(|&v| Phrase::Thrice(v)));
    phrases.extend(verbs.iter().map(|&v| Phrase::Plain(v)));
    let mut commands = Vec::new();
    for &a in &phrases {
        for &b in &phrases {
            commands.push(Command::And(a, b));
        }
    }
    for &a in &phrases {
        for &b in &phrases {
            commands.push(Command::After(a, b));
        }
    }
    commands.extend(phrases.iter().map(|&p| Command::Single(p)));
    commands
}

// ---------------------------------------------------------------------------
// Token encoding and corpus records
// ---------------------------------------------------------------------------

pub fn input_id(word: &str) -> Result<usize, ScanError> {
    INPUT_WORDS
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| ScanError::UnknownWord { word: word.into() })
}

pub fn action_id(word: &str) -> Result<usize, ScanError> {
    ACTION_WORDS
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| ScanError::UnknownWord { word: word.into() })
}

/// One (command, actions) example as token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanPair {
    pub command: Vec<usize>,
    pub actions: Vec<usize>,
}

impl ScanPair {
    pub fn from_command(cmd: &Command) -> Self {
        let command = command_words(cmd)
            .iter()
            .map(|w| input_id(w).expect("grammar words are in the vocabulary"))
            .collect();
        let actions = interpret(cmd)
            .iter()
            .map(|w| action_id(w).expect("interpreter emits vocabulary actions"))
            .collect();
        Self { command, actions }
    }

    /// `IN: jump twice OUT: JUMP JUMP` — the conventional corpus layout.
    pub fn line(&self) -> String {
        let cmd: Vec<&str> = self.command.iter().map(|&t| INPUT_WORDS[t]).collect();
        let act: Vec<&str> = self.actions.iter().map(|&t| ACTION_WORDS[t]).collect();
        format!("IN: {} OUT: {}", cmd.join(" "), act.join(" "))
    }
}

/// Write one record per line.
pub fn write_corpus(path: &std::path::Path, pairs: &[ScanPair]) -> std::io::Result<()> {
    let mut text = String::new();
    for p in pairs {
        text.push_str(&p.line());
        text.push('\n');
    }
    std::fs::write(path, text)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    AddJump,
    AroundRight,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::AddJump => "add-jump",
            SplitName::AroundRight => "around-right",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanDataConfig {
    /// Commands whose action sequence is longer than this are dropped.
    pub max_action_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for ScanDataConfig {
    fn default() -> Self {
        Self {
            max_action_len: 12,
            train_size: 1200,
            val_size: 120,
            test_size: 250,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanSplit {
    pub train: Vec<ScanPair>,
    pub val: Vec<ScanPair>,
    pub test: Vec<ScanPair>,
}

fn contains_word(words: &[&str], needle: &str) -> bool {
    words.iter().any(|w| *w == needle)
}

fn contains_bigram(words: &[&str], a: &str, b: &str) -> bool {
    words.windows(2).any(|w| w[0] == a && w[1] == b)
}

/// Partition the grammar's corpus per the split's holdout rule, then sample
/// train/val/test of the configured sizes. For add-jump the bare `jump`
/// primitive is appended to the training side, as the split demands.
pub fn make_split(
    name: SplitName,
    cfg: &ScanDataConfig,
    seed: u64,
) -> Result<ScanSplit, ScanError> {
    let mut train_pool = Vec::new();
    let mut test_pool = Vec::new();
    for cmd in all_commands() {
        let words = command_words(&cmd);
        let pair = ScanPair::from_command(&cmd);
        if pair.actions.len() > cfg.max_action_len {
            continue;
        }
        let held_out = match name {
            SplitName::AddJump => contains_word(&words, "jump") && words.len() > 1,
            SplitName::AroundRight => contains_bigram(&words, "around", "right"),
        };
        // The bare `jump` command is added to train explicitly below.
        let bare_jump = matches!(name, SplitName::AddJump) && words == ["jump"];
        if held_out {
            test_pool.push(pair);
        } else if !bare_jump {
            train_pool.push(pair);
        }
    }
    let need_train = cfg.train_size + cfg.val_size;
    if train_pool.len() < need_train {
        return Err(ScanError::NotEnoughExamples {
            name: name.as_str().into(),
            side: "train",
            needed: need_train,
            available: train_pool.len(),
        });
    }
    if test_pool.is_empty() {
        return Err(ScanError::NotEnoughExamples {
            name: name.as_str().into(),
            side: "test",
            needed: 1,
            available: 0,
        });
    }
    let mut rng = stream(seed, "scan-split");
    train_pool.shuffle(&mut rng);
    test_pool.shuffle(&mut rng);
    let mut train: Vec<ScanPair> = train_pool[..cfg.train_size].to_vec();
    let val = train_pool[cfg.train_size..need_train].to_vec();
    let test: Vec<ScanPair> = test_pool.into_iter().take(cfg.test_size).collect();
    if matches!(name, SplitName::AddJump) {
        train.push(ScanPair::from_command(&Command::Single(Phrase::Plain(
            Verb::Prim(Prim::Jump),
        ))));
    }
    Ok(ScanSplit { train, val, test })
}

// ---------------------------------------------------------------------------
// The C₂ vocabulary swap
// ---------------------------------------------------------------------------

/// The split's two-element vocabulary swap, on command words and on action
/// words (identity on the decoder's start/end marks).
#[derive(Debug, Clone)]
pub struct ScanSwap {
    pub group: FiniteGroup,
    pub input: GroupAction,
    pub output: GroupAction,
}

pub fn swap_for(name: SplitName) -> ScanSwap {
    let group = FiniteGroup::make_cyclic(2).expect("order two is a valid cyclic group");
    let swap = |vocab: usize, a: usize, b: usize| {
        let identity: Vec<usize> = (0..vocab).collect();
        let mut swapped = identity.clone();
        swapped.swap(a, b);
        GroupAction::token_permutation(group.clone(), vec![identity, swapped], Default::default())
            .expect("hand-built permutations are well-formed")
    };
    let (ia, ib, oa, ob) = match name {
        // jump ↔ run, JUMP ↔ RUN
        SplitName::AddJump => (3, 2, 3, 2),
        // left ↔ right, LTURN ↔ RTURN
        SplitName::AroundRight => (5, 6, 4, 5),
    };
    let input = swap(IN_VOCAB, ia, ib);
    let output = swap(OUT_VOCAB, oa, ob);
    ScanSwap {
        group,
        input,
        output,
    }
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanTrainConfig {
    pub model: Seq2SeqConfig,
    pub optimizer: OptimizerConfig,
    pub baseline_epochs: usize,
    pub equitune_epochs: usize,
    /// Learning rate for the brief averaged-objective fine-tune.
    pub equitune_lr: f64,
    /// Probability of feeding the gold token during training.
    pub teacher_forcing: f64,
    pub max_decode_len: usize,
}

impl Default for ScanTrainConfig {
    fn default() -> Self {
        Self {
            model: Seq2SeqConfig {
                cell: CellKind::Lstm,
                embed: 40,
                hidden: 80,
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 2e-3,
                max_grad_norm: Some(5.0),
                ..OptimizerConfig::default()
            },
            baseline_epochs: 30,
            equitune_epochs: 12,
            equitune_lr: 1e-3,
            teacher_forcing: 0.9,
            max_decode_len: 24,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub split: SplitName,
    pub data: ScanDataConfig,
    pub train: ScanTrainConfig,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            split: SplitName::AddJump,
            data: ScanDataConfig::default(),
            train: ScanTrainConfig::default(),
        }
    }
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v.total_cmp(&row[best]) == std::cmp::Ordering::Greater {
            best = i;
        }
    }
    best
}

/// Per-pair loss with scheduled sampling: the gold token is fed with
/// probability `tf`, otherwise the model's own greedy choice.
fn seq_loss<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Seq2SeqB,
    pair: &ScanPair,
    tf: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> NodeId {
    let mut st = b.encode(tape, &pair.command);
    let mut prev = OUT_BOS;
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for &y in pair.actions.iter().chain(std::iter::once(&OUT_EOS)) {
        let (l, next) = b.decode_step(tape, st, prev);
        logits.push(l);
        targets.push(y);
        st = next;
        prev = if rng.gen::<f64>() < tf {
            y
        } else {
            argmax(tape.value(l).data())
        };
    }
    let stacked = tape.stack(&logits);
    let flat = tape.reshape(stacked, &[targets.len(), OUT_VOCAB]);
    tape.cross_entropy_logits(flat, targets)
}

/// One shuffled pass over the training pairs; returns the mean loss.
fn baseline_epoch<S: Scalar>(
    model: &mut Seq2Seq<S>,
    pairs: &[ScanPair],
    opt: &mut Optimizer<S>,
    tf: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> f64 {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for &i in &order {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let loss = seq_loss(&mut tape, &b, &pairs[i], tf, rng);
        total += tape.value(loss).data()[0].to_f64();
        tape.backward(loss);
        let grads = collect_grads(&tape, &b.ids());
        opt.step(&mut model.params_mut(), &grads);
    }
    total / pairs.len() as f64
}

/// Train in place; returns the final epoch's mean loss.
pub fn train_seq2seq<S: Scalar>(
    model: &mut Seq2Seq<S>,
    pairs: &[ScanPair],
    epochs: usize,
    opt_cfg: &OptimizerConfig,
    tf: f64,
    seed: u64,
) -> f64 {
    let mut opt = Optimizer::new(opt_cfg.clone());
    let mut rng = stream(seed, "scan-train");
    let mut last = 0.0;
    for _ in 0..epochs {
        last = baseline_epoch(model, pairs, &mut opt, tf, &mut rng);
    }
    last
}

/// One decode step of the swap-averaged model: run both swapped passes in
/// lockstep, align each pass's softmax back through the inverse output swap,
/// and average per coordinate (sorted accumulation, so the average is
/// bitwise equivariant).
fn averaged_step<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Seq2SeqB,
    swap: &ScanSwap,
    out_vec: &GroupAction,
    states: &mut [crate::nn::cells::CellState],
    prevs: &[usize],
) -> Result<NodeId, ScanError> {
    let mut aligned = Vec::with_capacity(swap.group.order());
    for g in swap.group.elements() {
        let (logits, next) = b.decode_step(tape, states[g], prevs[g]);
        states[g] = next;
        let probs = tape.softmax(logits);
        let flat = tape.reshape(probs, &[OUT_VOCAB]);
        let src = out_vec.source_map(swap.group.inv(g), &[OUT_VOCAB])?;
        aligned.push(tape.map(flat, src, &[OUT_VOCAB]));
    }
    let stacked = tape.stack(&aligned);
    Ok(tape.group_mean_axis0(stacked))
}

fn lockstep_start<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Seq2SeqB,
    swap: &ScanSwap,
    command: &[usize],
) -> Result<(Vec<crate::nn::cells::CellState>, Vec<usize>), ScanError> {
    let mut states = Vec::with_capacity(swap.group.order());
    let mut prevs = Vec::with_capacity(swap.group.order());
    for g in swap.group.elements() {
        let src = swap.input.apply_seq(g, command)?;
        states.push(b.encode(tape, &src));
        prevs.push(swap.output.apply_token(g, OUT_BOS)?);
    }
    Ok((states, prevs))
}

fn feed_next(swap: &ScanSwap, prevs: &mut [usize], token: usize) -> Result<(), ScanError> {
    for g in swap.group.elements() {
        prevs[g] = swap.output.apply_token(g, token)?;
    }
    Ok(())
}

/// Averaged-objective loss for one pair: negative log of the averaged
/// distribution at each gold token, mean over steps.
fn equi_seq_loss<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Seq2SeqB,
    swap: &ScanSwap,
    out_vec: &GroupAction,
    pair: &ScanPair,
    tf: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<NodeId, ScanError> {
    let (mut states, mut prevs) = lockstep_start(tape, b, swap, &pair.command)?;
    let mut losses = Vec::new();
    for &y in pair.actions.iter().chain(std::iter::once(&OUT_EOS)) {
        let avg = averaged_step(tape, b, swap, out_vec, &mut states, &prevs)?;
        losses.push(tape.nll_of_entry(avg, y));
        let feed = if rng.gen::<f64>() < tf {
            y
        } else {
            argmax(tape.value(avg).data())
        };
        feed_next(swap, &mut prevs, feed)?;
    }
    let total = tape.add_n(&losses);
    let n = losses.len();
    Ok(tape.scale(total, S::from_f64(1.0 / n as f64)))
}

/// One shuffled pass under the averaged objective; returns the mean loss.
fn equituned_epoch<S: Scalar>(
    model: &mut Seq2Seq<S>,
    swap: &ScanSwap,
    out_vec: &GroupAction,
    pairs: &[ScanPair],
    opt: &mut Optimizer<S>,
    tf: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64, ScanError> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for &i in &order {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let loss = equi_seq_loss(&mut tape, &b, swap, out_vec, &pairs[i], tf, rng)?;
        total += tape.value(loss).data()[0].to_f64();
        tape.backward(loss);
        let grads = collect_grads(&tape, &b.ids());
        opt.step(&mut model.params_mut(), &grads);
    }
    Ok(total / pairs.len() as f64)
}

/// Fine-tune in place under the averaged objective; returns final mean loss.
pub fn train_equituned<S: Scalar>(
    model: &mut Seq2Seq<S>,
    swap: &ScanSwap,
    pairs: &[ScanPair],
    epochs: usize,
    opt_cfg: &OptimizerConfig,
    tf: f64,
    seed: u64,
) -> Result<f64, ScanError> {
    let out_vec = swap.output.as_vector_action()?;
    let mut opt = Optimizer::new(opt_cfg.clone());
    let mut rng = stream(seed, "scan-equitune");
    let mut last = 0.0;
    for _ in 0..epochs {
        last = equituned_epoch(model, swap, &out_vec, pairs, &mut opt, tf, &mut rng)?;
    }
    Ok(last)
}

/// Greedy decode of the plain model.
pub fn baseline_greedy<S: Scalar>(
    model: &Seq2Seq<S>,
    command: &[usize],
    max_len: usize,
) -> Vec<usize> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    b.greedy(&mut tape, command, OUT_BOS, OUT_EOS, max_len)
}

/// Greedy decode of the swap-averaged model (argmax of the averaged
/// distribution each step, ties to the lowest token id).
pub fn equituned_greedy<S: Scalar>(
    model: &Seq2Seq<S>,
    swap: &ScanSwap,
    command: &[usize],
    max_len: usize,
) -> Result<Vec<usize>, ScanError> {
    let out_vec = swap.output.as_vector_action()?;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let (mut states, mut prevs) = lockstep_start(&mut tape, &b, swap, command)?;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let avg = averaged_step(&mut tape, &b, swap, &out_vec, &mut states, &prevs)?;
        let tok = argmax(tape.value(avg).data());
        if tok == OUT_EOS {
            break;
        }
        out.push(tok);
        feed_next(swap, &mut prevs, tok)?;
    }
    Ok(out)
}

/// Teacher-forced averaged distributions at each step (predicting
/// `forced[0], …, forced[n−1]`, then the end mark).
pub fn equituned_step_dists<S: Scalar>(
    model: &Seq2Seq<S>,
    swap: &ScanSwap,
    command: &[usize],
    forced: &[usize],
) -> Result<Vec<Tensor<S>>, ScanError> {
    let out_vec = swap.output.as_vector_action()?;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let (mut states, mut prevs) = lockstep_start(&mut tape, &b, swap, command)?;
    let mut dists = Vec::new();
    for &y in forced {
        let avg = averaged_step(&mut tape, &b, swap, &out_vec, &mut states, &prevs)?;
        dists.push(tape.value(avg).clone());
        feed_next(swap, &mut prevs, y)?;
    }
    let last = averaged_step(&mut tape, &b, swap, &out_vec, &mut states, &prevs)?;
    dists.push(tape.value(last).clone());
    Ok(dists)
}

/// Exact-sequence-match rate of the plain model.
pub fn exact_match_baseline<S: Scalar>(
    model: &Seq2Seq<S>,
    pairs: &[ScanPair],
    max_len: usize,
) -> f64 {
    let hits = pairs
        .iter()
        .filter(|p| baseline_greedy(model, &p.command, max_len) == p.actions)
        .count();
    hits as f64 / pairs.len().max(1) as f64
}

/// Exact-sequence-match rate of the swap-averaged model.
pub fn exact_match_equituned<S: Scalar>(
    model: &Seq2Seq<S>,
    swap: &ScanSwap,
    pairs: &[ScanPair],
    max_len: usize,
) -> Result<f64, ScanError> {
    let mut hits = 0usize;
    for p in pairs {
        if equituned_greedy(model, swap, &p.command, max_len)? == p.actions {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len().max(1) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanReport {
    pub split: SplitName,
    pub seed: u64,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    pub baseline_loss: f64,
    pub baseline_val: f64,
    pub baseline_test: f64,
    pub equituned_loss: f64,
    pub equituned_val: f64,
    pub equituned_test: f64,
}

/// Full protocol: train a baseline on the split's training side, evaluate it,
/// then wrap it with the split's vocabulary swap, fine-tune briefly under the
/// averaged objective, and evaluate the wrapped model.
pub fn run_scan_experiment<S: Scalar>(
    cfg: &ScanConfig,
    seed: u64,
) -> Result<ScanReport, ScanError> {
    let split = make_split(cfg.split, &cfg.data, seed)?;
    let swap = swap_for(cfg.split);
    let out_vec = swap.output.as_vector_action()?;
    let max_len = cfg.train.max_decode_len;

    let mut model = Seq2Seq::<S>::new(
        IN_VOCAB,
        OUT_VOCAB,
        &cfg.train.model,
        &mut stream(seed, "scan-init"),
    );

    // Held-out accuracy at the last epoch is noisy, so both phases score the
    // validation set after every epoch and keep the earliest best snapshot.
    let mut opt = Optimizer::new(cfg.train.optimizer.clone());
    let mut rng = stream(seed, "scan-train");
    let mut baseline_loss = 0.0;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_model = model.clone();
    for _ in 0..cfg.train.baseline_epochs {
        baseline_loss = baseline_epoch(
            &mut model,
            &split.train,
            &mut opt,
            cfg.train.teacher_forcing,
            &mut rng,
        );
        let val = exact_match_baseline(&model, &split.val, max_len);
        if val > best_val {
            best_val = val;
            best_model = model.clone();
        }
    }
    let model = best_model;
    let baseline_val = exact_match_baseline(&model, &split.val, max_len);
    let baseline_test = exact_match_baseline(&model, &split.test, max_len);

    // Fine-tune from the selected baseline; the untouched wrap is itself a
    // candidate in case an averaged-objective epoch makes things worse.
    let mut wrapped = model.clone();
    let mut ft_cfg = cfg.train.optimizer.clone();
    ft_cfg.lr = cfg.train.equitune_lr;
    let mut ft_opt = Optimizer::new(ft_cfg);
    let mut ft_rng = stream(seed, "scan-equitune");
    let mut equituned_loss = 0.0;
    let mut best_eq_val = exact_match_equituned(&wrapped, &swap, &split.val, max_len)?;
    let mut best_wrapped = wrapped.clone();
    for _ in 0..cfg.train.equitune_epochs {
        equituned_loss = equituned_epoch(
            &mut wrapped,
            &swap,
            &out_vec,
            &split.train,
            &mut ft_opt,
            cfg.train.teacher_forcing,
            &mut ft_rng,
        )?;
        let val = exact_match_equituned(&wrapped, &swap, &split.val, max_len)?;
        if val > best_eq_val {
            best_eq_val = val;
            best_wrapped = wrapped.clone();
        }
    }
    let wrapped = best_wrapped;
    let equituned_val = exact_match_equituned(&wrapped, &swap, &split.val, max_len)?;
    let equituned_test = exact_match_equituned(&wrapped, &swap, &split.test, max_len)?;

    Ok(ScanReport {
        split: cfg.split,
        seed,
        train_examples: split.train.len(),
        val_examples: split.val.len(),
        test_examples: split.test.len(),
        baseline_loss,
        baseline_val,
        baseline_test,
        equituned_loss,
        equituned_val,
        equituned_test,
    })
}

//! Group-fairness wrapper for word-level language models.
//!
//! A vocabulary partition names *equality lists* — tuples of demographic
//! words that should be interchangeable, like `[man, woman]` — plus an
//! optional *general* set of ambiguous words (such as `her`, which is both a
//! possessive and an objective pronoun and therefore has no single swap
//! image). Everything else is *neutral*. The lists generate a cyclic group
//! that rotates every list in lockstep and fixes neutral words.
//!
//! Wrapping a language model with [`FairLm`] averages its next-token
//! distribution over the group orbit of the context:
//!
//! * **full** mode averages every coordinate, giving distributions (and thus
//!   sentence probabilities) that are exactly invariant to swapping the
//!   demographic words of the conditioning text;
//! * **relaxed** mode averages only the equality-list and neutral
//!   coordinates, copies the general-word probabilities from the
//!   untransformed pass, and renormalizes. The renormalization trades the
//!   sentence-level certificate for better handling of ambiguous words, so
//!   only word-level checks are offered there.
//!
//! Generation draws tokens by inverse transform sampling over a token order
//! that is itself swap-covariant, so with a fixed seed the text generated
//! from a swapped context is exactly the swap of the text generated from the
//! original context.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionError, GroupAction};
use crate::group::{FiniteGroup, GroupError};
use crate::nn::collect_grads;
use crate::nn::lm::{LmConfig, WordLm};
use crate::nn::ParamSet;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::rng::stream;
use crate::scalar::{sorted_sum, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("a partition needs at least one equality list")]
    NoLists,
    #[error("equality list {list} has {found} entries, expected {expected}")]
    Ragged {
        list: usize,
        expected: usize,
        found: usize,
    },
    #[error("equality lists need at least two entries, list {list} has {found}")]
    TooShort { list: usize, found: usize },
    #[error("token {token} appears more than once in the partition")]
    Repeated { token: usize },
    #[error("token {token} is out of range for a vocabulary of {vocab}")]
    OutOfRange { token: usize, vocab: usize },
}

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("full mode requires an empty general set, found {count} general tokens")]
    GeneralInFullMode { count: usize },
    #[error("relaxed mode renormalizes, so only word-level checks are supported")]
    SentenceLevelUnsupported,
    #[error("the vocabulary has no line-break token")]
    NoLineBreak,
    #[error("word {word:?} is not in the vocabulary")]
    UnknownWord { word: String },
}

// ---------------------------------------------------------------------------
// Vocabulary partitions
// ---------------------------------------------------------------------------

/// Token-id partition: equality lists plus ambiguous (general) tokens.
/// Neutral tokens are the complement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabPartition {
    pub equality_lists: Vec<Vec<usize>>,
    pub general: Vec<usize>,
}

impl VocabPartition {
    /// Tokens fixed by the swap group, in ascending id order.
    pub fn neutral(&self, vocab: usize) -> Vec<usize> {
        let mut used = vec![false; vocab];
        for &t in self.equality_lists.iter().flatten().chain(&self.general) {
            if t < vocab {
                used[t] = true;
            }
        }
        (0..vocab).filter(|&t| !used[t]).collect()
    }
}

/// Check well-formedness against a vocabulary size and return the common
/// list length (the order of the swap group). Violations carry the
/// offending list or token as a witness.
pub fn validate_partition(p: &VocabPartition, vocab: usize) -> Result<usize, PartitionError> {
    let Some(first) = p.equality_lists.first() else {
        return Err(PartitionError::NoLists);
    };
    let d = first.len();
    for (i, list) in p.equality_lists.iter().enumerate() {
        if list.len() < 2 {
            return Err(PartitionError::TooShort {
                list: i,
                found: list.len(),
            });
        }
        if list.len() != d {
            return Err(PartitionError::Ragged {
                list: i,
                expected: d,
                found: list.len(),
            });
        }
    }
    let mut seen = vec![false; vocab];
    for &t in p.equality_lists.iter().flatten().chain(&p.general) {
        if t >= vocab {
            return Err(PartitionError::OutOfRange { token: t, vocab });
        }
        if seen[t] {
            return Err(PartitionError::Repeated { token: t });
        }
        seen[t] = true;
    }
    Ok(d)
}

/// Word-level partition description, as found in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub equality_lists: Vec<Vec<String>>,
    #[serde(default)]
    pub general: Vec<String>,
}

/// Resolve a word-level partition spec against a vocabulary.
pub fn resolve_partition(
    spec: &PartitionSpec,
    vocab: &[String],
) -> Result<VocabPartition, FairnessError> {
    let id = |word: &String| {
        vocab
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| FairnessError::UnknownWord { word: word.clone() })
    };
    let equality_lists = spec
        .equality_lists
        .iter()
        .map(|l| l.iter().map(id).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let general = spec.general.iter().map(id).collect::<Result<Vec<_>, _>>()?;
    Ok(VocabPartition {
        equality_lists,
        general,
    })
}

/// Build the cyclic swap group and its token action: element `k` rotates
/// every equality list forward by `k`, fixes neutral tokens, and marks
/// general tokens undefined (they pass through under relaxed application).
pub fn partition_action(
    p: &VocabPartition,
    vocab: usize,
) -> Result<(FiniteGroup, GroupAction), FairnessError> {
    let d = validate_partition(p, vocab)?;
    let group = FiniteGroup::make_cyclic(d)?;
    let mut perms = Vec::with_capacity(d);
    for k in 0..d {
        let mut perm: Vec<usize> = (0..vocab).collect();
        for list in &p.equality_lists {
            for (i, &t) in list.iter().enumerate() {
                perm[t] = list[(i + k) % d];
            }
        }
        perms.push(perm);
    }
    let undefined: BTreeSet<usize> = p.general.iter().copied().collect();
    let action = GroupAction::token_permutation(group.clone(), perms, undefined)?;
    Ok((group, action))
}

// ---------------------------------------------------------------------------
// The wrapped model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairnessMode {
    Full,
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairnessLevel {
    Word,
    Sentence,
}

/// Outcome of a fairness check over context/continuation pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairnessCheck {
    pub level: FairnessLevel,
    pub max_gap: f64,
    pub worst_pair: usize,
    pub worst_element: usize,
    pub pairs_checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// A language model wrapped with swap-averaged next-token distributions.
pub struct FairLm<S: Scalar> {
    lm: WordLm<S>,
    vocab: Vec<String>,
    partition: VocabPartition,
    group: FiniteGroup,
    action: GroupAction,
    mode: FairnessMode,
    line_break: usize,
    is_general: Vec<bool>,
    /// `perm[k][u]` = image of token `u` under element `k` (identity on
    /// general tokens, which the averaging never indexes through).
    perm: Vec<Vec<usize>>,
}

impl<S: Scalar> FairLm<S> {
    pub fn new(
        lm: WordLm<S>,
        vocab: Vec<String>,
        partition: VocabPartition,
        mode: FairnessMode,
    ) -> Result<Self, FairnessError> {
        let d = validate_partition(&partition, vocab.len())?;
        if mode == FairnessMode::Full && !partition.general.is_empty() {
            return Err(FairnessError::GeneralInFullMode {
                count: partition.general.len(),
            });
        }
        let line_break = vocab
            .iter()
            .position(|w| w == "\n")
            .ok_or(FairnessError::NoLineBreak)?;
        let (group, action) = partition_action(&partition, vocab.len())?;
        let mut is_general = vec![false; vocab.len()];
        for &t in &partition.general {
            is_general[t] = true;
        }
        let mut perm = Vec::with_capacity(d);
        for k in 0..d {
            let mut row: Vec<usize> = (0..vocab.len()).collect();
            for (u, slot) in row.iter_mut().enumerate() {
                if !is_general[u] {
                    *slot = action.apply_token(k, u)?;
                }
            }
            perm.push(row);
        }
        Ok(Self {
            lm,
            vocab,
            partition,
            group,
            action,
            mode,
            line_break,
            is_general,
            perm,
        })
    }

    pub fn lm(&self) -> &WordLm<S> {
        &self.lm
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn group(&self) -> &FiniteGroup {
        &self.group
    }

    pub fn action(&self) -> &GroupAction {
        &self.action
    }

    pub fn mode(&self) -> FairnessMode {
        self.mode
    }

    pub fn partition(&self) -> &VocabPartition {
        &self.partition
    }

    pub fn line_break(&self) -> usize {
        self.line_break
    }

    /// Transform a context the way the wrapper's forward passes do: strict in
    /// full mode, pass-through on general tokens in relaxed mode.
    pub fn transform_context(&self, g: usize, ctx: &[usize]) -> Result<Vec<usize>, FairnessError> {
        Ok(match self.mode {
            FairnessMode::Full => self.action.apply_seq(g, ctx)?,
            FairnessMode::Relaxed => self.action.apply_seq_relaxed(g, ctx)?,
        })
    }

    /// The averaged distribution before relaxed-mode renormalization (in
    /// full mode this *is* the final distribution). Word-level fairness is
    /// certified on these values.
    fn prenorm_dist(&self, ctx: &[usize]) -> Result<Vec<S>, FairnessError> {
        let d = self.group.order();
        let mut passes = Vec::with_capacity(d);
        for k in self.group.elements() {
            let t = self.transform_context(k, ctx)?;
            passes.push(base_next_probs(&self.lm, self.line_break, &t));
        }
        let vocab = self.vocab.len();
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut out = Vec::with_capacity(vocab);
        for u in 0..vocab {
            if self.is_general[u] {
                out.push(passes[0][u]);
            } else {
                // Aligning pass k back through the inverse swap reads
                // coordinate k·u; sorting before summing makes the average
                // independent of which pass produced which value.
                let mut cands: Vec<S> = (0..d).map(|k| passes[k][self.perm[k][u]]).collect();
                out.push(sorted_sum(&mut cands) * inv_d);
            }
        }
        Ok(out)
    }

    /// Swap-averaged next-token distribution given a context.
    pub fn next_token_dist(&self, ctx: &[usize]) -> Result<Tensor<S>, FairnessError> {
        let mut out = self.prenorm_dist(ctx)?;
        if self.mode == FairnessMode::Relaxed {
            let total: S = out.iter().copied().fold(S::zero(), |a, b| a + b);
            for v in &mut out {
                *v = *v / total;
            }
        }
        let vocab = out.len();
        Ok(Tensor::from_vec(vec![vocab], out).expect("distribution length matches vocabulary"))
    }

    /// Log probability of a continuation given a context, token by token.
    /// An empty continuation has log probability zero.
    pub fn sentence_log_prob(
        &self,
        context: &[usize],
        continuation: &[usize],
    ) -> Result<f64, FairnessError> {
        let mut ctx = context.to_vec();
        let mut total = 0.0;
        for &t in continuation {
            let dist = self.next_token_dist(&ctx)?;
            total += dist.data()[t].to_f64().ln();
            ctx.push(t);
        }
        Ok(total)
    }

    /// Verify the fairness guarantee over (context, continuation) pairs.
    ///
    /// Word level compares, for every group element, the averaged
    /// distribution of the transformed context against the transformed
    /// averaged distribution of the original — on every coordinate in full
    /// mode, and on the equality-list and neutral coordinates (before
    /// renormalization) in relaxed mode. Sentence level compares
    /// continuation log probabilities and is only available in full mode.
    pub fn check_group_fairness(
        &self,
        pairs: &[(Vec<usize>, Vec<usize>)],
        level: FairnessLevel,
        tolerance: f64,
    ) -> Result<FairnessCheck, FairnessError> {
        if level == FairnessLevel::Sentence && self.mode == FairnessMode::Relaxed {
            return Err(FairnessError::SentenceLevelUnsupported);
        }
        let mut max_gap = 0.0f64;
        let mut worst_pair = 0;
        let mut worst_element = 0;
        for (i, (ctx, cont)) in pairs.iter().enumerate() {
            for g in self.group.elements().skip(1) {
                let gap = match level {
                    FairnessLevel::Word => {
                        let base = self.prenorm_dist(ctx)?;
                        let g_ctx = self.transform_context(g, ctx)?;
                        let moved = self.prenorm_dist(&g_ctx)?;
                        let mut gap = 0.0f64;
                        for u in 0..self.vocab.len() {
                            if self.is_general[u] {
                                continue;
                            }
                            let diff = (moved[self.perm[g][u]].to_f64() - base[u].to_f64()).abs();
                            gap = gap.max(diff);
                        }
                        gap
                    }
                    FairnessLevel::Sentence => {
                        let g_ctx = self.transform_context(g, ctx)?;
                        let g_cont = self.transform_context(g, cont)?;
                        (self.sentence_log_prob(ctx, cont)?
                            - self.sentence_log_prob(&g_ctx, &g_cont)?)
                        .abs()
                    }
                };
                if gap > max_gap {
                    max_gap = gap;
                    worst_pair = i;
                    worst_element = g;
                }
            }
        }
        Ok(FairnessCheck {
            level,
            max_gap,
            worst_pair,
            worst_element,
            pairs_checked: pairs.len(),
            tolerance,
            pass: max_gap <= tolerance,
        })
    }

    /// Token order used by the inverse-transform sampler. Fixed tokens come
    /// first in id order; each equality list follows, rotated so the list
    /// starts at the position of the first equality word seen in the text.
    /// Swapping the text rotates the anchor the same way, so the order is
    /// swap-covariant and seeded sampling commutes with the swap.
    fn sampling_order(&self, anchor: usize) -> Vec<usize> {
        let vocab = self.vocab.len();
        let mut in_list = vec![false; vocab];
        for &t in self.partition.equality_lists.iter().flatten() {
            in_list[t] = true;
        }
        let mut order: Vec<usize> = (0..vocab).filter(|&t| !in_list[t]).collect();
        let d = self.group.order();
        for list in &self.partition.equality_lists {
            order.extend((0..d).map(|i| list[(anchor + i) % d]));
        }
        order
    }

    /// Rotation of the first equality-list word occurring in `tokens`
    /// (zero if none occurs).
    fn rotation_anchor(&self, tokens: &[usize]) -> usize {
        for &t in tokens {
            for list in &self.partition.equality_lists {
                if let Some(j) = list.iter().position(|&x| x == t) {
                    return j;
                }
            }
        }
        0
    }

    /// Seeded sampling from the averaged model. Stops at the line break or
    /// after `max_tokens`. In full mode, generating from a swapped context
    /// with the same seed yields exactly the swapped token sequence,
    /// provided the context mentions at least one equality-list word to
    /// anchor the sampler's token order.
    pub fn generate(
        &self,
        seed: u64,
        context: &[usize],
        max_tokens: usize,
    ) -> Result<Vec<usize>, FairnessError> {
        let mut rng = stream(seed, "fair-generate");
        let mut text = context.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_tokens {
            let dist = self.next_token_dist(&text)?;
            let order = self.sampling_order(self.rotation_anchor(&text));
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut choice = *order.last().expect("vocabulary is nonempty");
            for &t in &order {
                cum += dist.data()[t].to_f64();
                if u < cum {
                    choice = t;
                    break;
                }
            }
            if choice == self.line_break {
                break;
            }
            out.push(choice);
            text.push(choice);
        }
        Ok(out)
    }
}

/// Raw next-token distribution of the unwrapped model.
fn base_next_probs<S: Scalar>(lm: &WordLm<S>, bos: usize, ctx: &[usize]) -> Vec<S> {
    let mut tape = Tape::new();
    let b = lm.bind(&mut tape);
    let logits = b.next_logits(&mut tape, bos, ctx);
    let probs = tape.softmax(logits);
    tape.value(probs).data().to_vec()
}

/// Continuation log probability under the unwrapped model.
pub fn base_sentence_log_prob<S: Scalar>(
    lm: &WordLm<S>,
    bos: usize,
    context: &[usize],
    continuation: &[usize],
) -> f64 {
    let mut ctx = context.to_vec();
    let mut total = 0.0;
    for &t in continuation {
        total += base_next_probs(lm, bos, &ctx)[t].to_f64().ln();
        ctx.push(t);
    }
    total
}

// ---------------------------------------------------------------------------
// Toy corpus and training
// ---------------------------------------------------------------------------

/// Deliberately biased line templates and their repeat counts.
const TEMPLATES: [(&str, usize); 24] = [
    ("the man is strong", 6),
    ("the man is smart", 3),
    ("the man is kind", 1),
    ("the woman is kind", 6),
    ("the woman is smart", 3),
    ("the woman is strong", 1),
    ("the king was brave", 4),
    ("the queen was kind", 4),
    ("the dad said he is strong", 3),
    ("the mom said she is kind", 3),
    ("he is a doctor", 5),
    ("she is a nurse", 5),
    ("he is a teacher", 2),
    ("she is a teacher", 2),
    ("his day was good", 3),
    ("her day was good", 3),
    ("the king loves her", 2),
    ("the queen loves him", 2),
    ("the man works", 2),
    ("the woman works", 2),
    ("the black person works", 2),
    ("the white person works", 2),
    ("the gay person is kind", 2),
    ("the straight person is kind", 2),
];

/// The demo vocabulary: a line break, filler, demographic words, pronouns,
/// and the attribute words the templates skew.
pub fn toy_vocab() -> Vec<String> {
    [
        "\n", "the", "a", "is", "was", "said", "works", "loves", "good", "day", "man", "woman",
        "he", "she", "king", "queen", "dad", "mom", "his", "her", "him", "doctor", "nurse",
        "teacher", "strong", "kind", "smart", "brave", "black", "white", "gay", "straight",
        "person",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Encode whitespace-separated words against a vocabulary.
pub fn token_ids(text: &str, vocab: &[String]) -> Result<Vec<usize>, FairnessError> {
    text.split_whitespace()
        .map(|word| {
            vocab
                .iter()
                .position(|w| w == word)
                .ok_or_else(|| FairnessError::UnknownWord { word: word.into() })
        })
        .collect()
}

/// Render token ids back to text.
pub fn render(ids: &[usize], vocab: &[String]) -> String {
    ids.iter()
        .map(|&t| vocab[t].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// The biased training lines (shuffled by seed), encoded against
/// [`toy_vocab`]. Lines carry no line break; training appends it as the
/// end-of-line target.
pub fn toy_corpus(seed: u64) -> Vec<Vec<usize>> {
    let vocab = toy_vocab();
    let mut lines = Vec::new();
    for (text, count) in TEMPLATES {
        let ids = token_ids(text, &vocab).expect("templates use the demo vocabulary");
        for _ in 0..count {
            lines.push(ids.clone());
        }
    }
    lines.shuffle(&mut stream(seed, "fair-corpus"));
    lines
}

/// Train the model on whole lines (line break as both start and end mark);
/// returns the final epoch's mean loss.
pub fn train_lm<S: Scalar>(
    lm: &mut WordLm<S>,
    lines: &[Vec<usize>],
    line_break: usize,
    epochs: usize,
    opt_cfg: &OptimizerConfig,
    seed: u64,
) -> f64 {
    let mut opt = Optimizer::new(opt_cfg.clone());
    let mut rng = stream(seed, "fair-train");
    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut last = 0.0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let mut tape = Tape::new();
            let b = lm.bind(&mut tape);
            let loss = b.line_loss(&mut tape, &lines[i], line_break, Some(line_break));
            total += tape.value(loss).data()[0].to_f64();
            tape.backward(loss);
            let grads = collect_grads(&tape, &b.ids());
            opt.step(&mut lm.params_mut(), &grads);
        }
        last = total / lines.len() as f64;
    }
    last
}

// ---------------------------------------------------------------------------
// Audit harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextPair {
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_tokens: usize,
    pub num_seeds: u64,
    pub contexts: Vec<String>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_tokens: 12,
            num_seeds: 100,
            contexts: vec![
                "the man is".into(),
                "the queen was".into(),
                "the dad said".into(),
                "the woman works".into(),
                "the king loves".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FairnessConfig {
    pub mode: FairnessMode,
    pub partition: PartitionSpec,
    pub model: LmConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub pairs: Vec<ContextPair>,
    pub tolerance: f64,
    pub generation: GenerationConfig,
}

/// The binary-gender partition with every demographic word in an equality
/// list (full mode's requirement).
pub fn gender_partition_full() -> PartitionSpec {
    let lists = [
        ["man", "woman"],
        ["he", "she"],
        ["king", "queen"],
        ["dad", "mom"],
        ["his", "her"],
    ];
    PartitionSpec {
        equality_lists: lists
            .iter()
            .map(|l| l.iter().map(|s| s.to_string()).collect())
            .collect(),
        general: vec![],
    }
}

/// The relaxed variant: pronouns are ambiguous (`her` is both possessive and
/// objective), so they are general rather than forced into lists.
pub fn gender_partition_relaxed() -> PartitionSpec {
    let lists = [["man", "woman"], ["king", "queen"], ["dad", "mom"]];
    PartitionSpec {
        equality_lists: lists
            .iter()
            .map(|l| l.iter().map(|s| s.to_string()).collect())
            .collect(),
        general: ["he", "she", "his", "her", "him"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    }
}

impl Default for FairnessConfig {
    fn default() -> Self {
        let pair = |c: &str, k: &str| ContextPair {
            context: c.into(),
            continuation: k.into(),
        };
        Self {
            mode: FairnessMode::Full,
            partition: gender_partition_full(),
            model: LmConfig {
                cell: crate::nn::cells::CellKind::Gru,
                embed: 24,
                hidden: 48,
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 3e-3,
                max_grad_norm: Some(5.0),
                ..OptimizerConfig::default()
            },
            epochs: 30,
            pairs: vec![
                pair("the man is", "strong"),
                pair("the woman is", "strong"),
                pair("the king was", "brave"),
                pair("he is a", "doctor"),
                pair("the dad said he is", "strong"),
            ],
            tolerance: 1e-10,
            generation: GenerationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairnessReport {
    pub mode: FairnessMode,
    pub group_order: usize,
    pub vocab_size: usize,
    pub train_loss: f64,
    /// Largest sentence-level log-probability gap of the *unwrapped* model
    /// over the audit pairs: how unfair the baseline is.
    pub baseline_sentence_gap: f64,
    pub wrapped_word_gap: f64,
    /// Absent in relaxed mode, where renormalization voids the certificate.
    pub wrapped_sentence_gap: Option<f64>,
    pub generation_total: usize,
    pub generation_equal: usize,
    pub sample_generations: Vec<String>,
    pub pass: bool,
}

/// Train the biased demo model, wrap it, and certify the wrapper: word-level
/// (and in full mode sentence-level) distribution gaps over the configured
/// pairs, plus exact seeded-generation equivariance in full mode.
pub fn run_fairness_audit<S: Scalar>(
    cfg: &FairnessConfig,
    seed: u64,
) -> Result<FairnessReport, FairnessError> {
    let vocab = toy_vocab();
    let lines = toy_corpus(seed);
    let mut lm = WordLm::<S>::new(vocab.len(), &cfg.model, &mut stream(seed, "fair-init"));
    let line_break = vocab
        .iter()
        .position(|w| w == "\n")
        .ok_or(FairnessError::NoLineBreak)?;
    let train_loss = train_lm(
        &mut lm,
        &lines,
        line_break,
        cfg.epochs,
        &cfg.optimizer,
        seed,
    );

    let partition = resolve_partition(&cfg.partition, &vocab)?;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = cfg
        .pairs
        .iter()
        .map(|p| {
            Ok((
                token_ids(&p.context, &vocab)?,
                token_ids(&p.continuation, &vocab)?,
            ))
        })
        .collect::<Result<_, FairnessError>>()?;

    // Baseline unfairness before wrapping.
    let (_, action) = partition_action(&partition, vocab.len())?;
    let mut baseline_gap = 0.0f64;
    for (ctx, cont) in &pairs {
        for g in action.group().elements().skip(1) {
            let g_ctx = action.apply_seq_relaxed(g, ctx)?;
            let g_cont = action.apply_seq_relaxed(g, cont)?;
            let gap = (base_sentence_log_prob(&lm, line_break, ctx, cont)
                - base_sentence_log_prob(&lm, line_break, &g_ctx, &g_cont))
            .abs();
            baseline_gap = baseline_gap.max(gap);
        }
    }

    let fair = FairLm::new(lm, vocab.clone(), partition, cfg.mode)?;
    let word = fair.check_group_fairness(&pairs, FairnessLevel::Word, cfg.tolerance)?;
    let sentence = match cfg.mode {
        FairnessMode::Full => {
            Some(fair.check_group_fairness(&pairs, FairnessLevel::Sentence, cfg.tolerance)?)
        }
        FairnessMode::Relaxed => None,
    };

    // Seeded-generation equivariance (exact check; full mode only, since the
    // relaxed renormalization does not preserve sampling boundaries).
    let mut generation_total = 0;
    let mut generation_equal = 0;
    let mut sample_generations = Vec::new();
    if cfg.mode == FairnessMode::Full {
        for text in &cfg.generation.contexts {
            let ctx = token_ids(text, &vocab)?;
            for s in 0..cfg.generation.num_seeds {
                let base = fair.generate(s, &ctx, cfg.generation.max_tokens)?;
                if s < 2 && sample_generations.len() < 6 {
                    sample_generations.push(format!("{text} | {}", render(&base, &vocab)));
                }
                for g in fair.group().elements().skip(1) {
                    let g_ctx = fair.transform_context(g, &ctx)?;
                    let moved = fair.generate(s, &g_ctx, cfg.generation.max_tokens)?;
                    let expected = fair.transform_context(g, &base)?;
                    generation_total += 1;
                    if moved == expected {
                        generation_equal += 1;
                    }
                }
            }
        }
    }

    let pass = word.pass
        && sentence.as_ref().map_or(true, |s| s.pass)
        && generation_equal == generation_total;
    Ok(FairnessReport {
        mode: cfg.mode,
        group_order: fair.group().order(),
        vocab_size: vocab.len(),
        train_loss,
        baseline_sentence_gap: baseline_gap,
        wrapped_word_gap: word.max_gap,
        wrapped_sentence_gap: sentence.map(|s| s.max_gap),
        generation_total,
        generation_equal,
        sample_generations,
        pass,
    })
}

//! Self-supervised triplet construction.
//!
//! A self-contained query r drawn from a dialogue is corrupted into an
//! incomplete query q by deleting spans it shares with its context, or by
//! replacing noun-phrase spans with a pronoun. The original r becomes the
//! rewrite target. Positions whose query shares no qualifying span with the
//! context supply negative samples with q = r.

pub mod io;

use rand::Rng;

use crate::error::{Result, TeresaError};
use crate::rng::keyed_rng;
use crate::text::{
    pos_tags, render_tokens, tokenize, DialogueSession, PosLexicon, PosTag, TagSet,
};

use serde::{Deserialize, Serialize};

/// Whether the rewrite differs from the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Pos,
    Neg,
}

/// How a triplet was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    RemovedSpan,
    PronounSwap,
    Negative,
}

/// One corruption site, retained so tests can rebuild r from q.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanEdit {
    /// Token offset of the span in r.
    pub start_r: usize,
    pub len: usize,
    /// Token offset in q where the span was deleted or its pronoun sits.
    pub q_start: usize,
    /// Pronoun surface when the span was substituted rather than deleted.
    pub replaced_with: Option<String>,
    /// The removed r tokens.
    pub removed: Vec<String>,
}

/// A (context, query, rewrite) training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CqrTriplet {
    pub context: Vec<String>,
    pub query: String,
    pub rewrite: String,
    pub label: Label,
    pub source_session: String,
    #[serde(skip)]
    pub edits: Vec<SpanEdit>,
}

impl CqrTriplet {
    pub fn provenance(&self) -> Provenance {
        if self.label == Label::Neg {
            Provenance::Negative
        } else if self.edits.iter().any(|e| e.replaced_with.is_some()) {
            Provenance::PronounSwap
        } else {
            Provenance::RemovedSpan
        }
    }
}

/// A common token span between context and rewrite, reported in r coordinates
/// with one context witness position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub start_r: usize,
    pub len: usize,
    /// Witness offset into the flattened context tokens.
    pub start_c: usize,
    /// Union of the POS tag-sets of the span's tokens; filled by
    /// `qualify_spans`.
    pub tags: TagSet,
    /// Final token tagged NOUN and no token tagged VERB; pronoun substitution
    /// applies only to such spans. Filled by `qualify_spans`.
    pub np_eligible: bool,
}

fn default_min_query_chars() -> usize {
    10
}
fn default_max_context_turns() -> usize {
    5
}
fn default_pronoun_prob() -> f64 {
    0.5
}
fn default_min_span_len() -> usize {
    2
}
fn default_neg_ratio() -> f64 {
    1.0
}
fn default_pronoun_table() -> Vec<String> {
    vec!["它".to_string()]
}

/// Constructor settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstructorConfig {
    /// Queries shorter than this many characters are never corrupted or
    /// sampled.
    #[serde(default = "default_min_query_chars")]
    pub min_query_chars: usize,
    #[serde(default = "default_max_context_turns")]
    pub max_context_turns: usize,
    /// Probability of substituting a pronoun for an eligible span instead of
    /// deleting it.
    #[serde(default = "default_pronoun_prob")]
    pub pronoun_prob: f64,
    #[serde(default = "default_min_span_len")]
    pub min_span_len: usize,
    /// Negatives emitted per positive.
    #[serde(default = "default_neg_ratio")]
    pub neg_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    /// Each entry must tokenize to exactly one token.
    #[serde(default = "default_pronoun_table")]
    pub pronoun_table: Vec<String>,
}

impl Default for ConstructorConfig {
    fn default() -> Self {
        ConstructorConfig {
            min_query_chars: default_min_query_chars(),
            max_context_turns: default_max_context_turns(),
            pronoun_prob: default_pronoun_prob(),
            min_span_len: default_min_span_len(),
            neg_ratio: default_neg_ratio(),
            seed: 0,
            pronoun_table: default_pronoun_table(),
        }
    }
}

impl ConstructorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pronoun_prob) {
            return Err(TeresaError::Config(format!(
                "pronoun_prob must be in [0,1], got {}",
                self.pronoun_prob
            )));
        }
        if self.min_span_len < 1 {
            return Err(TeresaError::Config("min_span_len must be ≥ 1".into()));
        }
        if self.neg_ratio.is_nan() || self.neg_ratio <= 0.0 {
            return Err(TeresaError::Config("neg_ratio must be > 0".into()));
        }
        if self.min_query_chars < 1 {
            return Err(TeresaError::Config("min_query_chars must be ≥ 1".into()));
        }
        if self.max_context_turns < 1 {
            return Err(TeresaError::Config("max_context_turns must be ≥ 1".into()));
        }
        for p in &self.pronoun_table {
            if tokenize(p).len() != 1 {
                return Err(TeresaError::Config(format!(
                    "pronoun {p:?} must tokenize to exactly one token"
                )));
            }
        }
        Ok(())
    }
}

/// All maximal common contiguous token runs of length ≥ min_span_len between
/// context and r, made non-overlapping in r by greedy longest-first selection
/// with leftmost tie-break. Deterministic.
pub fn find_common_spans(
    context_tokens: &[String],
    r_tokens: &[String],
    min_span_len: usize,
) -> Vec<Span> {
    let nc = context_tokens.len();
    let nr = r_tokens.len();
    if nc == 0 || nr == 0 {
        return Vec::new();
    }
    // suffix[i][j] = length of the longest common run ending at c[i-1], r[j-1].
    let mut suffix = vec![vec![0usize; nr + 1]; nc + 1];
    // (len, start_r, start_c) for matches that cannot extend in either
    // direction at their witness position.
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for i in 1..=nc {
        for j in 1..=nr {
            if context_tokens[i - 1] == r_tokens[j - 1] {
                suffix[i][j] = suffix[i - 1][j - 1] + 1;
                let len = suffix[i][j];
                let extends_right = i < nc && j < nr && context_tokens[i] == r_tokens[j];
                if len >= min_span_len && !extends_right {
                    candidates.push((len, j - len, i - len));
                }
            }
        }
    }
    // One witness per (start_r, len): the leftmost context position.
    candidates.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    candidates.dedup_by_key(|c| (c.0, c.1));

    let mut taken = vec![false; nr];
    let mut spans = Vec::new();
    for (len, start_r, start_c) in candidates {
        if taken[start_r..start_r + len].iter().any(|&t| t) {
            continue;
        }
        taken[start_r..start_r + len].iter_mut().for_each(|t| *t = true);
        spans.push(Span {
            start_r,
            len,
            start_c,
            tags: TagSet::EMPTY,
            np_eligible: false,
        });
    }
    spans.sort_by_key(|s| s.start_r);
    spans
}

/// Keeps spans containing at least one NOUN/VERB/ADJ token and records their
/// tag unions and pronoun eligibility. `r_tags` are the tag-sets of r's
/// tokens.
pub fn qualify_spans(spans: Vec<Span>, r_tags: &[TagSet]) -> Vec<Span> {
    spans
        .into_iter()
        .filter_map(|mut s| {
            let toks = &r_tags[s.start_r..s.start_r + s.len];
            let union = toks.iter().fold(TagSet::EMPTY, |acc, t| acc.union(*t));
            if !union.is_content() {
                return None;
            }
            s.tags = union;
            s.np_eligible = toks[toks.len() - 1].contains(PosTag::Noun)
                && !toks.iter().any(|t| t.contains(PosTag::Verb));
            Some(s)
        })
        .collect()
}

/// Output of `corrupt`: the incomplete query and the edits that undo it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub q_tokens: Vec<String>,
    pub edits: Vec<SpanEdit>,
}

/// Corrupts every span: pronoun-eligible spans are replaced by one pronoun
/// with probability `pronoun_prob`, all other selected outcomes delete the
/// span. Deterministic given the generator state.
pub fn corrupt<R: Rng>(
    r_tokens: &[String],
    spans: &[Span],
    config: &ConstructorConfig,
    rng: &mut R,
) -> Result<Corruption> {
    if spans.is_empty() {
        return Err(TeresaError::InvalidInput("no spans to corrupt".into()));
    }
    let mut q_tokens: Vec<String> = Vec::with_capacity(r_tokens.len());
    let mut edits = Vec::with_capacity(spans.len());
    let mut cursor = 0usize;
    for s in spans {
        q_tokens.extend(r_tokens[cursor..s.start_r].iter().cloned());
        let removed: Vec<String> = r_tokens[s.start_r..s.start_r + s.len].to_vec();
        let q_start = q_tokens.len();
        let substitute = s.np_eligible
            && !config.pronoun_table.is_empty()
            && rng.gen_bool(config.pronoun_prob);
        let replaced_with = if substitute {
            let p = config.pronoun_table[rng.gen_range(0..config.pronoun_table.len())].clone();
            q_tokens.push(p.clone());
            Some(p)
        } else {
            None
        };
        edits.push(SpanEdit {
            start_r: s.start_r,
            len: s.len,
            q_start,
            replaced_with,
            removed,
        });
        cursor = s.start_r + s.len;
    }
    q_tokens.extend(r_tokens[cursor..].iter().cloned());
    if q_tokens.is_empty() {
        return Err(TeresaError::InvalidInput("degenerate corruption".into()));
    }
    Ok(Corruption { q_tokens, edits })
}

/// Rebuilds r's token sequence from a corrupted query and its edits. Inverse
/// of `corrupt`; used to assert the reconstruction invariant.
pub fn reconstruct_rewrite(q_tokens: &[String], edits: &[SpanEdit]) -> Vec<String> {
    let mut tokens: Vec<String> = q_tokens.to_vec();
    let mut edits: Vec<&SpanEdit> = edits.iter().collect();
    edits.sort_by_key(|e| std::cmp::Reverse(e.q_start));
    for e in edits {
        let replaced = usize::from(e.replaced_with.is_some());
        tokens.splice(e.q_start..e.q_start + replaced, e.removed.iter().cloned());
    }
    tokens
}

struct SessionYield {
    positives: Vec<(usize, CqrTriplet)>,
    rejected: Vec<NegCandidate>,
}

/// A position eligible for negative sampling: informative query, no
/// qualifying span.
struct NegCandidate {
    utterance_index: usize,
    context: Vec<String>,
    rewrite: String,
}

fn process_session(
    session: &DialogueSession,
    config: &ConstructorConfig,
    lexicon: &PosLexicon,
) -> SessionYield {
    let mut out = SessionYield {
        positives: Vec::new(),
        rejected: Vec::new(),
    };
    for idx in 1..session.utterances.len() {
        let r_tokens = tokenize(&session.utterances[idx].text);
        let rewrite = render_tokens(&r_tokens);
        if rewrite.chars().count() < config.min_query_chars {
            continue;
        }
        let ctx_start = idx.saturating_sub(config.max_context_turns);
        let context: Vec<String> = session.utterances[ctx_start..idx]
            .iter()
            .map(|u| u.text.clone())
            .collect();
        let context_tokens: Vec<String> =
            context.iter().flat_map(|t| tokenize(t)).collect();
        let spans = find_common_spans(&context_tokens, &r_tokens, config.min_span_len);
        let r_tags = pos_tags(&r_tokens, lexicon);
        let spans = qualify_spans(spans, &r_tags);
        if spans.is_empty() {
            out.rejected.push(NegCandidate {
                utterance_index: idx,
                context,
                rewrite,
            });
            continue;
        }
        let mut rng = keyed_rng(
            config.seed,
            &format!("corrupt:{}", session.session_id),
            idx as u64,
        );
        // Degenerate corruptions drop the position entirely.
        if let Ok(c) = corrupt(&r_tokens, &spans, config, &mut rng) {
            out.positives.push((
                idx,
                CqrTriplet {
                    context,
                    query: render_tokens(&c.q_tokens),
                    rewrite,
                    label: Label::Pos,
                    source_session: session.session_id.clone(),
                    edits: c.edits,
                },
            ));
        }
    }
    out
}

/// Positive triplets for one session: each utterance from the second onward
/// with an informative (≥ min_query_chars) text and a qualifying common span
/// against its preceding ≤ max_context_turns utterances.
pub fn construct_positives(
    session: &DialogueSession,
    config: &ConstructorConfig,
    lexicon: &PosLexicon,
) -> Vec<CqrTriplet> {
    process_session(session, config, lexicon)
        .positives
        .into_iter()
        .map(|(_, t)| t)
        .collect()
}

/// Draws `count` negatives uniformly from positions rejected by the positive
/// path. Returns the triplets and whether the corpus was exhausted before
/// reaching the count.
pub fn sample_negatives(
    corpus: &[DialogueSession],
    count: usize,
    config: &ConstructorConfig,
    lexicon: &PosLexicon,
) -> (Vec<CqrTriplet>, bool) {
    let mut candidates = Vec::new();
    for session in corpus {
        let y = process_session(session, config, lexicon);
        for c in y.rejected {
            candidates.push((session.session_id.clone(), c));
        }
    }
    let exhausted = candidates.len() < count;
    let chosen: Vec<usize> = if exhausted {
        (0..candidates.len()).collect()
    } else {
        let mut rng = keyed_rng(config.seed, "negatives", 0);
        let mut idx = rand::seq::index::sample(&mut rng, candidates.len(), count).into_vec();
        idx.sort_unstable();
        idx
    };
    let triplets = chosen
        .into_iter()
        .map(|i| {
            let (sid, c) = &candidates[i];
            CqrTriplet {
                context: c.context.clone(),
                query: c.rewrite.clone(),
                rewrite: c.rewrite.clone(),
                label: Label::Neg,
                source_session: sid.clone(),
                edits: Vec::new(),
            }
        })
        .collect();
    (triplets, exhausted)
}

/// Summary counts for a constructed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_removed_span: usize,
    pub n_pronoun_swap: usize,
    pub mean_context_turns: f64,
    /// True when the corpus ran out of negative candidates before the
    /// requested ratio was met.
    pub negatives_exhausted: bool,
}

/// Builds the full dataset: positives in corpus order interleaved with
/// sampled negatives at `neg_ratio`. Byte-identical output for any worker
/// count; `workers` only controls parallelism.
pub fn build_dataset(
    corpus: &[DialogueSession],
    config: &ConstructorConfig,
    lexicon: &PosLexicon,
    workers: usize,
) -> Result<(Vec<CqrTriplet>, DatasetStats)> {
    config.validate()?;
    let n = corpus.len();
    let workers = workers.max(1).min(n.max(1));
    let mut slots: Vec<Option<SessionYield>> = (0..n).map(|_| None).collect();
    if workers <= 1 {
        for (slot, session) in slots.iter_mut().zip(corpus) {
            *slot = Some(process_session(session, config, lexicon));
        }
    } else {
        let chunk = n.div_ceil(workers);
        std::thread::scope(|scope| {
            for (w, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
                let base = w * chunk;
                scope.spawn(move || {
                    for (j, slot) in slot_chunk.iter_mut().enumerate() {
                        *slot = Some(process_session(&corpus[base + j], config, lexicon));
                    }
                });
            }
        });
    }

    // (session index, utterance index) keys keep the merge schedule-free.
    let mut positives: Vec<(usize, usize, CqrTriplet)> = Vec::new();
    let mut candidates: Vec<(usize, NegCandidate)> = Vec::new();
    for (si, slot) in slots.into_iter().enumerate() {
        let y = slot.unwrap();
        for (ui, t) in y.positives {
            positives.push((si, ui, t));
        }
        for c in y.rejected {
            candidates.push((si, c));
        }
    }

    let n_pos = positives.len();
    let want_neg = (n_pos as f64 * config.neg_ratio).round() as usize;
    let exhausted = candidates.len() < want_neg;
    let chosen: Vec<usize> = if exhausted {
        log::warn!(
            "negative candidates exhausted: wanted {want_neg}, have {}",
            candidates.len()
        );
        (0..candidates.len()).collect()
    } else {
        let mut rng = keyed_rng(config.seed, "negatives", 0);
        let mut idx = rand::seq::index::sample(&mut rng, candidates.len(), want_neg).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut negatives: Vec<(usize, usize, CqrTriplet)> = Vec::with_capacity(chosen.len());
    for i in chosen {
        let (si, c) = &candidates[i];
        negatives.push((
            *si,
            c.utterance_index,
            CqrTriplet {
                context: c.context.clone(),
                query: c.rewrite.clone(),
                rewrite: c.rewrite.clone(),
                label: Label::Neg,
                source_session: corpus[*si].session_id.clone(),
                edits: Vec::new(),
            },
        ));
    }

    let mut merged: Vec<(usize, usize, CqrTriplet)> = positives;
    merged.extend(negatives);
    merged.sort_by_key(|(si, ui, _)| (*si, *ui));
    let triplets: Vec<CqrTriplet> = merged.into_iter().map(|(_, _, t)| t).collect();

    let n_neg = triplets.iter().filter(|t| t.label == Label::Neg).count();
    let n_pronoun_swap = triplets
        .iter()
        .filter(|t| t.provenance() == Provenance::PronounSwap)
        .count();
    let n_removed_span = triplets
        .iter()
        .filter(|t| t.provenance() == Provenance::RemovedSpan)
        .count();
    let mean_context_turns = if triplets.is_empty() {
        0.0
    } else {
        triplets.iter().map(|t| t.context.len() as f64).sum::<f64>() / triplets.len() as f64
    };
    Ok((
        triplets,
        DatasetStats {
            n_pos,
            n_neg,
            n_removed_span,
            n_pronoun_swap,
            mean_context_turns,
            negatives_exhausted: exhausted,
        },
    ))
}

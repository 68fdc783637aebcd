//! Tokenization, vocabulary, POS lexicon, and input packing.
//!
//! Tokenization is character-level for CJK codepoints and run-level for
//! everything else: a maximal run of non-CJK, non-whitespace characters is one
//! token, whitespace separates runs and is discarded. This keeps span matching
//! well defined for Chinese text without a word segmenter.

pub mod io;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TeresaError};

/// Reserved vocabulary entries at fixed indices.
pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
pub const PRON: u32 = 4;
pub const UNK: u32 = 5;

pub const PAD_SURFACE: &str = "[PAD]";
pub const CLS_SURFACE: &str = "[CLS]";
pub const SEP_SURFACE: &str = "[SEP]";
pub const EOS_SURFACE: &str = "[EOS]";
pub const PRON_SURFACE: &str = "[PRON]";
pub const UNK_SURFACE: &str = "[UNK]";

const RESERVED: [&str; 6] = [
    PAD_SURFACE,
    CLS_SURFACE,
    SEP_SURFACE,
    EOS_SURFACE,
    PRON_SURFACE,
    UNK_SURFACE,
];

/// Context is truncated to this many most-recent utterances before packing.
pub const MAX_CONTEXT_TURNS: usize = 5;

/// CJK blocks tokenized as single characters: symbols/punctuation, extension A,
/// unified ideographs, compatibility ideographs, and full-width forms.
pub fn is_cjk(c: char) -> bool {
    matches!(u32::from(c),
        0x3000..=0x303F | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0xFF00..=0xFFEF)
}

/// Splits text into token surfaces. Deterministic; empty input gives an empty
/// list. Concatenating the surfaces reproduces the input's non-whitespace
/// characters in order.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
        } else if is_cjk(c) {
            if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
            out.push(c.to_string());
        } else {
            run.push(c);
        }
    }
    if !run.is_empty() {
        out.push(run);
    }
    out
}

/// Joins token surfaces back into text, inserting a space only between two
/// adjacent non-CJK run tokens. For any token list produced by `tokenize`,
/// `tokenize(render_tokens(ts)) == ts`.
pub fn render_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev_is_run = false;
    for t in tokens {
        let t = t.as_ref();
        let is_run = t.chars().next().map(|c| !is_cjk(c)).unwrap_or(false);
        if prev_is_run && is_run {
            out.push(' ');
        }
        out.push_str(t);
        prev_is_run = is_run;
    }
    out
}

/// Who produced an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

/// One turn of a dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }
}

/// A multi-turn dialogue session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub session_id: String,
    pub utterances: Vec<Utterance>,
}

/// Part-of-speech tag from the lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Pronoun,
    Other,
}

impl PosTag {
    pub fn parse(s: &str) -> Option<PosTag> {
        match s {
            "NOUN" => Some(PosTag::Noun),
            "VERB" => Some(PosTag::Verb),
            "ADJ" => Some(PosTag::Adj),
            "PRONOUN" => Some(PosTag::Pronoun),
            "OTHER" => Some(PosTag::Other),
            _ => None,
        }
    }
}

/// Small set of POS tags, stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TagSet(u8);

impl TagSet {
    pub const EMPTY: TagSet = TagSet(0);

    fn bit(tag: PosTag) -> u8 {
        match tag {
            PosTag::Noun => 1,
            PosTag::Verb => 2,
            PosTag::Adj => 4,
            PosTag::Pronoun => 8,
            PosTag::Other => 16,
        }
    }

    pub fn single(tag: PosTag) -> TagSet {
        TagSet(Self::bit(tag))
    }

    pub fn insert(&mut self, tag: PosTag) {
        self.0 |= Self::bit(tag);
    }

    pub fn contains(self, tag: PosTag) -> bool {
        self.0 & Self::bit(tag) != 0
    }

    pub fn union(self, other: TagSet) -> TagSet {
        TagSet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// True when the set contains a noun, verb, or adjective tag.
    pub fn is_content(self) -> bool {
        self.0 & (1 | 2 | 4) != 0
    }
}

/// Surface string to tag-set lookup table.
#[derive(Debug, Clone, Default)]
pub struct PosLexicon {
    entries: HashMap<String, TagSet>,
}

impl PosLexicon {
    pub fn new() -> PosLexicon {
        PosLexicon::default()
    }

    pub fn insert(&mut self, surface: &str, tag: PosTag) {
        self.entries.entry(surface.to_string()).or_default().insert(tag);
    }

    /// Unknown surfaces get {OTHER}.
    pub fn lookup(&self, surface: &str) -> TagSet {
        self.entries
            .get(surface)
            .copied()
            .unwrap_or_else(|| TagSet::single(PosTag::Other))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tags each surface via lexicon lookup; output length equals input length.
pub fn pos_tags<S: AsRef<str>>(tokens: &[S], lexicon: &PosLexicon) -> Vec<TagSet> {
    tokens.iter().map(|t| lexicon.lookup(t.as_ref())).collect()
}

/// Token inventory with reserved entries at fixed indices.
#[derive(Debug, Clone)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Vocab {
        let mut v = Vocab {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        for s in RESERVED {
            v.push(s.to_string());
        }
        v
    }

    fn push(&mut self, surface: String) {
        let id = self.entries.len() as u32;
        self.index.insert(surface.clone(), id);
        self.entries.push(surface);
    }

    /// Rebuilds a vocabulary from a saved entry list. The reserved tokens
    /// must come first and entries must be unique.
    pub fn from_entries<S: AsRef<str>>(entries: &[S]) -> Result<Vocab> {
        if entries.len() < RESERVED.len() {
            return Err(TeresaError::InvalidInput(format!(
                "vocabulary has {} entries, fewer than the {} reserved tokens",
                entries.len(),
                RESERVED.len()
            )));
        }
        let mut v = Vocab {
            entries: Vec::with_capacity(entries.len()),
            index: HashMap::with_capacity(entries.len()),
        };
        for (i, e) in entries.iter().enumerate() {
            let e = e.as_ref();
            if i < RESERVED.len() && e != RESERVED[i] {
                return Err(TeresaError::InvalidInput(format!(
                    "vocabulary entry {i} is {e:?}, expected reserved token {:?}",
                    RESERVED[i]
                )));
            }
            if v.index.contains_key(e) {
                return Err(TeresaError::InvalidInput(format!(
                    "duplicate vocabulary entry {e:?} at index {i}"
                )));
            }
            v.push(e.to_string());
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a surface, or [UNK] when absent.
    pub fn id(&self, surface: &str) -> u32 {
        self.index.get(surface).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.index.contains_key(surface)
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.entries[id as usize]
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    /// SHA-256 over the entry list, for checkpoint compatibility checks.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds a vocabulary from session texts: reserved tokens plus every surface
/// with frequency ≥ min_freq, ordered by (frequency desc, surface asc).
/// Insensitive to session order.
pub fn build_vocab(sessions: &[DialogueSession], min_freq: usize) -> Result<Vocab> {
    if min_freq < 1 {
        return Err(TeresaError::Config(format!(
            "min_freq must be ≥ 1, got {min_freq}"
        )));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for s in sessions {
        for u in &s.utterances {
            for t in u.tokens() {
                *freq.entry(t).or_insert(0) += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = freq.into_iter().filter(|(_, f)| *f >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut vocab = Vocab::reserved_only();
    for (surface, _) in kept {
        if !vocab.contains(&surface) {
            vocab.push(surface);
        }
    }
    Ok(vocab)
}

/// Encoder input: [CLS] context-tokens [SEP] query-tokens [EOS].
///
/// `segment_ids` are 0 up to and including [SEP], 1 after. Position ids are
/// implicitly 0..len. `context_range` covers the context tokens (excluding
/// [CLS] and [SEP]); `query_range` covers the query tokens plus [EOS], which
/// stays copyable so the decoder can terminate.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInput {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub surfaces: Vec<String>,
    pub context_range: std::ops::Range<usize>,
    pub query_range: std::ops::Range<usize>,
    pub cls_index: usize,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Packs context utterance texts and a query into one encoder input. Contexts
/// longer than `MAX_CONTEXT_TURNS` keep only the most recent turns.
pub fn pack_input<S: AsRef<str>>(context: &[S], query: &str, vocab: &Vocab) -> Result<PackedInput> {
    let query_tokens = tokenize(query);
    if query_tokens.is_empty() {
        return Err(TeresaError::InvalidInput("empty query".to_string()));
    }
    let start = context.len().saturating_sub(MAX_CONTEXT_TURNS);
    let mut surfaces = vec![CLS_SURFACE.to_string()];
    for u in &context[start..] {
        surfaces.extend(tokenize(u.as_ref()));
    }
    let n_ctx = surfaces.len() - 1;
    surfaces.push(SEP_SURFACE.to_string());
    surfaces.extend(query_tokens.iter().cloned());
    surfaces.push(EOS_SURFACE.to_string());

    let token_ids: Vec<u32> = surfaces.iter().map(|s| vocab.id(s)).collect();
    let sep_index = 1 + n_ctx;
    let segment_ids: Vec<u8> = (0..surfaces.len())
        .map(|i| if i <= sep_index { 0 } else { 1 })
        .collect();
    Ok(PackedInput {
        token_ids,
        segment_ids,
        surfaces,
        context_range: 1..sep_index,
        query_range: sep_index + 1..sep_index + 1 + query_tokens.len() + 1,
        cls_index: 0,
    })
}

/// Packs a single utterance as [CLS] tokens [EOS] with every position in
/// segment 1, for encoding a rewrite on its own.
pub fn pack_single(text: &str, vocab: &Vocab) -> Result<PackedInput> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(TeresaError::InvalidInput("empty query".to_string()));
    }
    let mut surfaces = vec![CLS_SURFACE.to_string()];
    surfaces.extend(tokens.iter().cloned());
    surfaces.push(EOS_SURFACE.to_string());
    let token_ids: Vec<u32> = surfaces.iter().map(|s| vocab.id(s)).collect();
    let n = surfaces.len();
    Ok(PackedInput {
        token_ids,
        segment_ids: vec![1; n],
        surfaces,
        context_range: 0..0,
        query_range: 1..n,
        cls_index: 0,
    })
}

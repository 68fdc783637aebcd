//! Synthetic dialogue corpus for tests, benchmarks, and demo runs.
//!
//! Each session follows a small support-chat script: a user turn that
//! introduces a noun phrase, an agent turn that repeats it, and a user turn
//! whose noun phrase is recoverable from the context. Around half the
//! sessions append a self-contained follow-up drawn from a disjoint word
//! pool, which the dataset constructor rejects as a positive and can sample
//! as a negative.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::rng::keyed_rng;
use crate::ssl::{build_dataset, ConstructorConfig, CqrTriplet, DatasetStats};
use crate::text::{DialogueSession, PosLexicon, PosTag, Speaker, Utterance};

const NOUNS: [&str; 10] = [
    "phone", "laptop", "headset", "speaker", "camera", "tablet", "router", "monitor", "drone",
    "watch",
];
const VERBS: [&str; 6] = ["support", "connect", "repair", "upgrade", "return", "pair"];
const ADJS: [&str; 3] = ["new", "cheap", "wireless"];
const PRONOUN: &str = "it";

/// Self-contained follow-ups; word-disjoint from the session templates so no
/// two-token run is shared with the context.
const STANDALONE: [&str; 4] = [
    "what is your warranty policy",
    "how long does shipping take",
    "where can someone find invoices",
    "what are those payment options",
];

fn intro(rng: &mut impl Rng, np: &str) -> String {
    let t: [String; 3] = [
        format!("i got {np} today"),
        format!("hello i own {np} now"),
        format!("my order has {np} inside"),
    ];
    t.choose(rng).expect("non-empty").clone()
}

fn reply(rng: &mut impl Rng, np: &str) -> String {
    let t: [String; 3] = [
        format!("info about {np} follows"),
        format!("ok {np} shows as listed"),
        format!("sure {np} looks fine here"),
    ];
    t.choose(rng).expect("non-empty").clone()
}

/// The lexicon rows behind `synth_lexicon`, in writable form.
pub fn synth_lexicon_entries() -> Vec<(String, Vec<PosTag>)> {
    let mut rows: Vec<(String, Vec<PosTag>)> = Vec::new();
    rows.extend(NOUNS.iter().map(|n| (n.to_string(), vec![PosTag::Noun])));
    rows.extend(VERBS.iter().map(|v| (v.to_string(), vec![PosTag::Verb])));
    rows.extend(ADJS.iter().map(|a| (a.to_string(), vec![PosTag::Adj])));
    rows.push((PRONOUN.to_string(), vec![PosTag::Pronoun]));
    rows
}

/// The part-of-speech table covering every template word that matters to
/// span qualification.
pub fn synth_lexicon() -> PosLexicon {
    let mut lex = PosLexicon::new();
    for (surface, tags) in synth_lexicon_entries() {
        for tag in tags {
            lex.insert(&surface, tag);
        }
    }
    lex
}

/// Generates `n_sessions` scripted sessions. Deterministic per (seed,
/// session index); sessions are independent of `n_sessions`. Each session
/// appends up to `max_standalone` follow-up turns, each present with
/// probability one half; every scripted session yields two recoverable
/// rewrite positions, every standalone turn one negative candidate.
pub fn synth_corpus_with(
    n_sessions: usize,
    seed: u64,
    max_standalone: usize,
) -> Vec<DialogueSession> {
    (0..n_sessions)
        .map(|i| {
            let mut rng = keyed_rng(seed, "synth", i as u64);
            let noun = *NOUNS.choose(&mut rng).expect("non-empty");
            let np = if rng.gen_bool(0.7) {
                let adj = *ADJS.choose(&mut rng).expect("non-empty");
                format!("the {adj} {noun}")
            } else {
                format!("the {noun}")
            };
            let verb = *VERBS.choose(&mut rng).expect("non-empty");
            let mut utterances = vec![
                Utterance {
                    speaker: Speaker::User,
                    text: intro(&mut rng, &np),
                },
                Utterance {
                    speaker: Speaker::Agent,
                    text: reply(&mut rng, &np),
                },
                Utterance {
                    speaker: Speaker::User,
                    text: format!("can you {verb} {np} please"),
                },
            ];
            for _ in 0..max_standalone {
                if rng.gen_bool(0.5) {
                    utterances.push(Utterance {
                        speaker: Speaker::User,
                        text: STANDALONE.choose(&mut rng).expect("non-empty").to_string(),
                    });
                }
            }
            DialogueSession {
                session_id: format!("synth-{i:05}"),
                utterances,
            }
        })
        .collect()
}

/// The default corpus: at most one standalone follow-up per session.
pub fn synth_corpus(n_sessions: usize, seed: u64) -> Vec<DialogueSession> {
    synth_corpus_with(n_sessions, seed, 1)
}

/// Constructor settings matched to the scripted sessions: an English
/// pronoun table and a negative ratio the standalone follow-ups can supply.
pub fn synth_constructor_config(seed: u64) -> ConstructorConfig {
    ConstructorConfig {
        pronoun_table: vec![PRONOUN.to_string()],
        neg_ratio: 0.15,
        seed,
        ..ConstructorConfig::default()
    }
}

/// One-call corpus-to-triplets pipeline.
pub fn synth_dataset(
    n_sessions: usize,
    seed: u64,
    workers: usize,
) -> Result<(Vec<CqrTriplet>, DatasetStats)> {
    let corpus = synth_corpus(n_sessions, seed);
    build_dataset(&corpus, &synth_constructor_config(seed), &synth_lexicon(), workers)
}

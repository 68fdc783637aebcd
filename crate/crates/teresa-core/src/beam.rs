//! Beam-search decoding over the copy distribution. No length
//! normalization; ties broken lexicographically on the surface sequence so
//! decoding is fully deterministic.

use crate::autodiff::{Tape, LOG_CLAMP};
use crate::error::{Result, TeresaError};
use crate::model::{encode, next_token_distribution, Model};
use crate::sakd::keyword_scores;
use crate::text::{pack_input, render_tokens, EOS_SURFACE};

pub const DEFAULT_BEAM_SIZE: usize = 4;

#[derive(Debug, Clone)]
pub struct BeamOptions {
    pub beam_size: usize,
    /// Maximum emitted tokens; clamped to what the model's positions allow.
    pub max_len: usize,
    /// Apply the keyword-score bias during decoding.
    pub use_sakd: bool,
}

impl Default for BeamOptions {
    fn default() -> BeamOptions {
        BeamOptions {
            beam_size: DEFAULT_BEAM_SIZE,
            max_len: 64,
            use_sakd: true,
        }
    }
}

/// One partial or finished decode.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    /// Emitted surfaces, [EOS] excluded.
    pub tokens: Vec<String>,
    /// Cumulative log-probability, [EOS] included once finished. Each
    /// extension adds a log of a probability, so it never increases.
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone)]
pub struct BeamResult {
    pub rewrite: String,
    pub tokens: Vec<String>,
    pub log_prob: f64,
    /// Set when no hypothesis finished within the length budget and the
    /// best unfinished one was returned instead.
    pub truncated: bool,
}

/// Ranking: higher log-probability first, then lexicographically smaller
/// surface sequence.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> std::cmp::Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .expect("log-probabilities are finite")
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Rewrites a query against its context by beam search.
pub fn beam_search<S: AsRef<str>>(
    model: &Model,
    context: &[S],
    query: &str,
    opts: &BeamOptions,
) -> Result<BeamResult> {
    if opts.beam_size == 0 {
        return Err(TeresaError::Config("beam_size must be ≥ 1".into()));
    }
    let tape = Tape::inference();
    let packed = pack_input(context, query, &model.vocab)?;
    let enc = encode(&tape, &packed, &model.params, &model.config, &mut None)?;
    let score = if opts.use_sakd {
        Some(keyword_scores(&tape, &enc.h_c, &model.params)?)
    } else {
        None
    };
    // The decoder consumes [BOS] plus the emitted prefix.
    let budget = opts.max_len.min(model.config.max_len.saturating_sub(1));
    let mut beams = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..budget {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut pool: Vec<BeamHypothesis> = Vec::new();
        for hyp in &beams {
            if hyp.finished {
                pool.push(hyp.clone());
                continue;
            }
            let (dist, candidates) = next_token_distribution(
                &tape,
                &enc,
                &hyp.tokens,
                &model.vocab,
                &model.params,
                &model.config,
                score.as_ref(),
            )?;
            for (surface, p) in candidates.iter().zip(&dist) {
                let lp = hyp.log_prob + p.max(LOG_CLAMP).ln();
                if surface == EOS_SURFACE {
                    pool.push(BeamHypothesis {
                        tokens: hyp.tokens.clone(),
                        log_prob: lp,
                        finished: true,
                    });
                } else {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(surface.clone());
                    pool.push(BeamHypothesis {
                        tokens,
                        log_prob: lp,
                        finished: false,
                    });
                }
            }
        }
        pool.sort_by(rank);
        pool.truncate(opts.beam_size);
        beams = pool;
    }
    let best_finished = beams.iter().filter(|b| b.finished).min_by(|a, b| rank(a, b));
    let (hyp, truncated) = match best_finished {
        Some(h) => (h, false),
        None => (
            beams
                .iter()
                .min_by(|a, b| rank(a, b))
                .expect("beam never empties"),
            true,
        ),
    };
    Ok(BeamResult {
        rewrite: render_tokens(&hyp.tokens),
        tokens: hyp.tokens.clone(),
        log_prob: hyp.log_prob,
        truncated,
    })
}

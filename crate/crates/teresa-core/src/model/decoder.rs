//! Copy-only decoder. Each layer runs masked self-attention, separate
//! cross-attentions over context and query states, and a feed-forward over
//! their concatenation. The output distribution mixes context and query
//! copy attention through a learned gate; every emitted token is copied.

use std::collections::BTreeSet;

use super::encoder::{feed_forward, EncoderOutput};
use super::params::TeresaParameters;
use super::{maybe_dropout, mean_head_logits, multi_head_attention, DropoutRng, TeresaConfig};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Result, TeresaError};
use crate::text::{Vocab, EOS_SURFACE};

/// Per-step decode results. Row t of every tensor describes the step that
/// predicts the (t+1)-th output token.
pub struct DecodeOutput {
    /// Distinct copyable surfaces (context ∪ query ∪ [EOS]), sorted
    /// lexicographically by byte order.
    pub candidates: Vec<String>,
    /// T × n_candidates copy distribution; each row sums to 1.
    pub dist: Tensor,
    /// T × n_ctx context copy attention (biased when a score is given).
    pub ctx_attn: Tensor,
    /// T × n_query query copy attention.
    pub qry_attn: Tensor,
    /// T × 1 mixture gate λ; the context side carries weight λ.
    pub gate: Tensor,
}

impl DecodeOutput {
    pub fn candidate_index(&self, surface: &str) -> Option<usize> {
        self.candidates.binary_search_by(|c| c.as_str().cmp(surface)).ok()
    }
}

/// The copyable surface set for a packed input.
pub fn copy_candidates(enc: &EncoderOutput) -> Vec<String> {
    let packed = &enc.packed;
    let mut set: BTreeSet<&str> = BTreeSet::new();
    for i in packed.context_range.clone() {
        set.insert(packed.surfaces[i].as_str());
    }
    for i in packed.query_range.clone() {
        set.insert(packed.surfaces[i].as_str());
    }
    set.insert(EOS_SURFACE);
    set.into_iter().map(String::from).collect()
}

/// 0/1 matrix mapping source positions to candidate columns. Constant.
fn indicator(enc: &EncoderOutput, range: std::ops::Range<usize>, candidates: &[String]) -> Tensor {
    let n = range.len();
    let mut v = vec![0.0; n * candidates.len()];
    for (row, i) in range.enumerate() {
        let surface = enc.packed.surfaces[i].as_str();
        let col = candidates
            .binary_search_by(|c| c.as_str().cmp(surface))
            .expect("candidate set covers every source surface");
        v[row * candidates.len() + col] = 1.0;
    }
    Tensor::new(n, candidates.len(), v, false)
}

fn causal_mask(t: usize) -> Vec<bool> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = true;
        }
    }
    m
}

/// Runs the decoder over [BOS] + `input_tokens` and returns one distribution
/// row per input position: row t is P(next token | first t outputs).
///
/// `score` is an optional 1 × n_ctx keyword prior; when present it is scaled
/// by the learned gain and added to the context copy logits before softmax.
/// When absent the bias path is skipped entirely, so a zeroed score and no
/// score are distinguishable only through rounding-free no-op additions.
#[allow(clippy::too_many_arguments)]
fn run_decoder(
    tape: &Tape,
    enc: &EncoderOutput,
    input_tokens: &[String],
    vocab: &Vocab,
    params: &TeresaParameters,
    config: &TeresaConfig,
    score: Option<&Tensor>,
    rng: &mut DropoutRng<'_>,
) -> Result<DecodeOutput> {
    let n_ctx = enc.packed.context_range.len();
    if n_ctx == 0 {
        return Err(TeresaError::InvalidInput(
            "cannot decode without context tokens".into(),
        ));
    }
    let t_len = input_tokens.len() + 1;
    if t_len > config.max_len {
        return Err(TeresaError::InvalidInput(format!(
            "decoder sequence of {t_len} tokens exceeds max_len {}",
            config.max_len
        )));
    }
    if let Some(s) = score {
        if s.rows() != 1 || s.cols() != n_ctx {
            return Err(TeresaError::Shape {
                op: "run_decoder".into(),
                detail: format!(
                    "score is {}x{}, expected 1x{n_ctx}",
                    s.rows(),
                    s.cols()
                ),
            });
        }
    }

    let mut x = if input_tokens.is_empty() {
        params.bos.clone()
    } else {
        let ids: Vec<usize> = input_tokens.iter().map(|t| vocab.id(t) as usize).collect();
        let emb = tape.embedding_gather(&params.token_embed, &ids)?;
        tape.concat_rows(&[params.bos.clone(), emb])?
    };
    let positions: Vec<usize> = (0..t_len).collect();
    let pos = tape.embedding_gather(&params.position_embed, &positions)?;
    x = tape.add(&x, &pos)?;
    x = maybe_dropout(tape, &x, config.dropout, rng)?;

    let mask = causal_mask(t_len);
    let mut top = None;
    for layer in &params.decoder {
        let s_in = tape.layer_norm(&x, &layer.ln1.gain, &layer.ln1.bias)?;
        let (sa, _) =
            multi_head_attention(tape, &s_in, &s_in, &layer.self_attn, config.n_heads, Some(&mask))?;
        let m = tape.add(&x, &maybe_dropout(tape, &sa, config.dropout, rng)?)?;

        let c_in = tape.layer_norm(&m, &layer.ln_c.gain, &layer.ln_c.bias)?;
        let (ca, ctx_logits) =
            multi_head_attention(tape, &c_in, &enc.h_c, &layer.ctx_attn, config.n_heads, None)?;
        let c = tape.add(&m, &maybe_dropout(tape, &ca, config.dropout, rng)?)?;

        let q_in = tape.layer_norm(&m, &layer.ln_q.gain, &layer.ln_q.bias)?;
        let (qa, qry_logits) =
            multi_head_attention(tape, &q_in, &enc.h_q, &layer.qry_attn, config.n_heads, None)?;
        let q = tape.add(&m, &maybe_dropout(tape, &qa, config.dropout, rng)?)?;

        let f_in = tape.layer_norm(
            &tape.concat_cols(&c, &q)?,
            &layer.ln3.gain,
            &layer.ln3.bias,
        )?;
        let f = feed_forward(tape, &f_in, &layer.ffn)?;
        let s = tape.add(
            &tape.mul_scalar(&tape.add(&c, &q)?, 0.5),
            &maybe_dropout(tape, &f, config.dropout, rng)?,
        )?;
        x = s.clone();
        top = Some((s, c, q, ctx_logits, qry_logits));
    }
    let (s_top, c_top, q_top, ctx_logits, qry_logits) =
        top.expect("config validation guarantees at least one layer");

    // Copy attention from the top layer's cross-attention logits, averaged
    // over heads; the keyword score biases the context side only.
    let ctx_raw = mean_head_logits(tape, &ctx_logits)?;
    let a_ctx = match score {
        Some(s) => crate::sakd::bias_attention(tape, &ctx_raw, s, &params.w_score)?,
        None => tape.row_softmax(&ctx_raw),
    };
    let a_qry = tape.row_softmax(&mean_head_logits(tape, &qry_logits)?);

    let gate_in = tape.add(
        &tape.add(
            &tape.matmul(&s_top, &params.gate_ws)?,
            &tape.matmul(&c_top, &params.gate_wc)?,
        )?,
        &tape.matmul(&q_top, &params.gate_wq)?,
    )?;
    let gate = tape.sigmoid(&gate_in);
    let gate_inv = tape.add_scalar(&tape.mul_scalar(&gate, -1.0), 1.0);

    let candidates = copy_candidates(enc);
    let ind_ctx = indicator(enc, enc.packed.context_range.clone(), &candidates);
    let ind_qry = indicator(enc, enc.packed.query_range.clone(), &candidates);
    let p_ctx = tape.matmul(&a_ctx, &ind_ctx)?;
    let p_qry = tape.matmul(&a_qry, &ind_qry)?;
    let dist = tape.add(&tape.mul(&p_ctx, &gate)?, &tape.mul(&p_qry, &gate_inv)?)?;

    Ok(DecodeOutput {
        candidates,
        dist,
        ctx_attn: a_ctx,
        qry_attn: a_qry,
        gate,
    })
}

/// Decode targets for a rewrite: its tokens followed by [EOS].
pub fn decode_targets<S: AsRef<str>>(rewrite_tokens: &[S]) -> Vec<String> {
    let mut out: Vec<String> = rewrite_tokens.iter().map(|t| t.as_ref().to_string()).collect();
    out.push(EOS_SURFACE.to_string());
    out
}

/// Teacher-forced decode: row t of the output predicts `targets[t]`.
#[allow(clippy::too_many_arguments)]
pub fn decode_teacher_forced(
    tape: &Tape,
    enc: &EncoderOutput,
    targets: &[String],
    vocab: &Vocab,
    params: &TeresaParameters,
    config: &TeresaConfig,
    score: Option<&Tensor>,
    rng: &mut DropoutRng<'_>,
) -> Result<DecodeOutput> {
    if targets.is_empty() {
        return Err(TeresaError::InvalidInput("empty decode target".into()));
    }
    run_decoder(
        tape,
        enc,
        &targets[..targets.len() - 1],
        vocab,
        params,
        config,
        score,
        rng,
    )
}

/// Distribution over candidates for the token following `prefix`.
pub fn next_token_distribution(
    tape: &Tape,
    enc: &EncoderOutput,
    prefix: &[String],
    vocab: &Vocab,
    params: &TeresaParameters,
    config: &TeresaConfig,
    score: Option<&Tensor>,
) -> Result<(Vec<f64>, Vec<String>)> {
    let out = run_decoder(tape, enc, prefix, vocab, params, config, score, &mut None)?;
    let t = out.dist.rows();
    let last = out.dist.values()[(t - 1) * out.dist.cols()..].to_vec();
    Ok((last, out.candidates))
}

/// Mean negative log-probability of the targets, [EOS] included.
pub fn nll_loss(tape: &Tape, out: &DecodeOutput, targets: &[String]) -> Result<Tensor> {
    if targets.len() != out.dist.rows() {
        return Err(TeresaError::Shape {
            op: "nll_loss".into(),
            detail: format!(
                "{} targets but {} distribution rows",
                targets.len(),
                out.dist.rows()
            ),
        });
    }
    let mut idx = Vec::with_capacity(targets.len());
    for t in targets {
        match out.candidate_index(t) {
            Some(i) => idx.push(i),
            None => {
                return Err(TeresaError::UncopyableTarget { token: t.clone() });
            }
        }
    }
    let picked = tape.gather_per_row(&out.dist, &idx)?;
    let lp = tape.log(&picked);
    Ok(tape.mul_scalar(&tape.sum_all(&lp), -1.0 / targets.len() as f64))
}

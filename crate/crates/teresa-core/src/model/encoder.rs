//! Shared encoder over packed inputs: summed token, position, and segment
//! embeddings through a pre-norm self-attention stack.

use super::params::{FfnWeights, TeresaParameters};
use super::{maybe_dropout, multi_head_attention, DropoutRng, TeresaConfig};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Result, TeresaError};
use crate::text::PackedInput;

/// Encoder states split by input section.
#[derive(Debug)]
pub struct EncoderOutput {
    /// Full sequence, len × d_model.
    pub h: Tensor,
    /// Context token rows ([CLS] and [SEP] excluded).
    pub h_c: Tensor,
    /// Query token rows, [EOS] included.
    pub h_q: Tensor,
    /// The [CLS] row, 1 × d_model.
    pub h_cls: Tensor,
    pub packed: PackedInput,
}

/// Two-layer feed-forward with GELU, shared by encoder and decoder stacks.
pub(crate) fn feed_forward(tape: &Tape, x: &Tensor, w: &FfnWeights) -> Result<Tensor> {
    let h = tape.gelu(&tape.add(&tape.matmul(x, &w.w1)?, &w.b1)?);
    tape.add(&tape.matmul(&h, &w.w2)?, &w.b2)
}

pub fn encode(
    tape: &Tape,
    packed: &PackedInput,
    params: &TeresaParameters,
    config: &TeresaConfig,
    rng: &mut DropoutRng<'_>,
) -> Result<EncoderOutput> {
    let len = packed.token_ids.len();
    if len > config.max_len {
        return Err(TeresaError::InvalidInput(format!(
            "packed input of {len} tokens exceeds max_len {}",
            config.max_len
        )));
    }
    let ids: Vec<usize> = packed.token_ids.iter().map(|&i| i as usize).collect();
    if ids.iter().any(|&i| i >= params.vocab_size()) {
        return Err(TeresaError::InvalidInput(
            "token id outside embedding table".into(),
        ));
    }
    let positions: Vec<usize> = (0..len).collect();
    let segments: Vec<usize> = packed.segment_ids.iter().map(|&s| s as usize).collect();
    let tok = tape.embedding_gather(&params.token_embed, &ids)?;
    let pos = tape.embedding_gather(&params.position_embed, &positions)?;
    let seg = tape.embedding_gather(&params.segment_embed, &segments)?;
    let mut x = tape.add(&tape.add(&tok, &pos)?, &seg)?;
    x = maybe_dropout(tape, &x, config.dropout, rng)?;
    for layer in &params.encoder {
        let a_in = tape.layer_norm(&x, &layer.ln1.gain, &layer.ln1.bias)?;
        let (attn, _) = multi_head_attention(tape, &a_in, &a_in, &layer.attn, config.n_heads, None)?;
        x = tape.add(&x, &maybe_dropout(tape, &attn, config.dropout, rng)?)?;
        let f_in = tape.layer_norm(&x, &layer.ln2.gain, &layer.ln2.bias)?;
        let f = feed_forward(tape, &f_in, &layer.ffn)?;
        x = tape.add(&x, &maybe_dropout(tape, &f, config.dropout, rng)?)?;
    }
    let h = tape.layer_norm(&x, &params.encoder_ln_f.gain, &params.encoder_ln_f.bias)?;
    let h_c = tape.slice_rows(&h, packed.context_range.start, packed.context_range.end)?;
    let h_q = tape.slice_rows(&h, packed.query_range.start, packed.query_range.end)?;
    let h_cls = tape.slice_rows(&h, packed.cls_index, packed.cls_index + 1)?;
    Ok(EncoderOutput {
        h,
        h_c,
        h_q,
        h_cls,
        packed: packed.clone(),
    })
}

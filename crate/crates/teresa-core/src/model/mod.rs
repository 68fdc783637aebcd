//! Conversational query rewriting model: a copy-only encoder-decoder over
//! packed dialogue inputs, with a keyword-biased copy mechanism and an
//! auxiliary intent head.

mod decoder;
mod encoder;
mod params;

pub use decoder::{
    copy_candidates, decode_targets, decode_teacher_forced, next_token_distribution, nll_loss,
    DecodeOutput,
};
pub use encoder::{encode, EncoderOutput};
pub use params::{
    AttnWeights, DecoderLayerWeights, EncoderLayerWeights, FfnWeights, LnWeights,
    TeresaParameters,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Result, TeresaError};
use crate::text::Vocab;

/// Architecture hyperparameters. Unknown keys in config files are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeresaConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum packed input length and maximum decoded length, in tokens.
    pub max_len: usize,
    pub n_intents: usize,
    pub dropout: f64,
}

impl Default for TeresaConfig {
    fn default() -> TeresaConfig {
        TeresaConfig {
            n_layers: 6,
            d_model: 256,
            n_heads: 8,
            d_ff: 1024,
            max_len: 256,
            n_intents: 64,
            dropout: 0.1,
        }
    }
}

impl TeresaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TeresaError::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("n_layers, d_model, n_heads, d_ff must all be nonzero".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_intents == 0 {
            return bad("n_intents must be nonzero".into());
        }
        if self.max_len < 8 {
            return bad(format!("max_len {} too small (need at least 8)", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Architecture, weights, and vocabulary bundled for inference and
/// checkpointing.
#[derive(Debug)]
pub struct Model {
    pub config: TeresaConfig,
    pub params: TeresaParameters,
    pub vocab: Vocab,
}

impl Model {
    /// Fresh model with seeded random initialization.
    pub fn new(config: TeresaConfig, vocab: Vocab, seed: u64) -> Result<Model> {
        config.validate()?;
        let params = TeresaParameters::new(&config, vocab.len(), seed);
        Ok(Model {
            config,
            params,
            vocab,
        })
    }
}

/// Optional training-time randomness; `None` disables dropout entirely.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

pub(crate) fn maybe_dropout(
    tape: &Tape,
    x: &Tensor,
    p: f64,
    rng: &mut DropoutRng<'_>,
) -> Result<Tensor> {
    match rng {
        Some(r) if p > 0.0 => tape.dropout(x, p, r),
        _ => Ok(x.clone()),
    }
}

/// Multi-head attention. Returns the projected output and the per-head
/// scaled logits (post-mask) so callers can reuse them for copy attention.
pub(crate) fn multi_head_attention(
    tape: &Tape,
    x_q: &Tensor,
    x_kv: &Tensor,
    w: &AttnWeights,
    n_heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let d = x_q.cols();
    debug_assert_eq!(d % n_heads, 0);
    let dh = d / n_heads;
    let q = tape.add(&tape.matmul(x_q, &w.wq)?, &w.bq)?;
    let k = tape.matmul(x_kv, &w.wk)?;
    let v = tape.add(&tape.matmul(x_kv, &w.wv)?, &w.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut logits = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(&q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(&k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(&v, h * dh, (h + 1) * dh)?;
        let mut lg = tape.mul_scalar(&tape.matmul_nt(&qh, &kh)?, scale);
        if let Some(m) = mask {
            lg = tape.masked_fill(&lg, m, crate::autodiff::MASK_FILL)?;
        }
        let probs = tape.row_softmax(&lg);
        heads.push(tape.matmul(&probs, &vh)?);
        logits.push(lg);
    }
    let mut cat = heads[0].clone();
    for h in &heads[1..] {
        cat = tape.concat_cols(&cat, h)?;
    }
    let out = tape.add(&tape.matmul(&cat, &w.wo)?, &w.bo)?;
    Ok((out, logits))
}

/// Mean of per-head logits; the shared raw logits that copy attention
/// softmaxes (optionally after a keyword bias).
pub(crate) fn mean_head_logits(tape: &Tape, logits: &[Tensor]) -> Result<Tensor> {
    let mut sum = logits[0].clone();
    for l in &logits[1..] {
        sum = tape.add(&sum, l)?;
    }
    Ok(tape.mul_scalar(&sum, 1.0 / logits.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = TeresaConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.d_model, 256);
        assert_eq!(cfg.head_dim(), 32);
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let mut cfg = TeresaConfig {
            n_heads: 7,
            ..TeresaConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TeresaError::Config(_))));
        cfg = TeresaConfig {
            dropout: 1.0,
            ..TeresaConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = TeresaConfig::default();
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_and_unknown_key() {
        let cfg = TeresaConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: TeresaConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        // Partial configs fill in defaults; unknown keys are schema errors.
        let partial: TeresaConfig = serde_json::from_str(r#"{"d_model": 64}"#).unwrap();
        assert_eq!(partial.d_model, 64);
        assert_eq!(partial.n_layers, 6);
        assert!(serde_json::from_str::<TeresaConfig>(r#"{"d_modell": 64}"#).is_err());
    }

    #[test]
    fn attention_rows_mix_values() {
        let tape = Tape::new();
        let d = 4;
        let w = AttnWeights {
            wq: Tensor::new(d, d, identity(d), true),
            bq: Tensor::zeros(1, d, true),
            wk: Tensor::new(d, d, identity(d), true),
            wv: Tensor::new(d, d, identity(d), true),
            bv: Tensor::zeros(1, d, true),
            wo: Tensor::new(d, d, identity(d), true),
            bo: Tensor::zeros(1, d, true),
        };
        let x = Tensor::new(2, d, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], false);
        let (out, logits) = multi_head_attention(&tape, &x, &x, &w, 2, None).unwrap();
        assert_eq!((out.rows(), out.cols()), (2, 4));
        assert_eq!(logits.len(), 2);
        // Causal mask keeps the first row from attending forward.
        let mask = vec![false, true, false, false];
        let (_, ml) = multi_head_attention(&tape, &x, &x, &w, 2, Some(&mask)).unwrap();
        let probs = tape.row_softmax(&ml[0]);
        let v = probs.values();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
    }

    fn identity(d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        v
    }
}

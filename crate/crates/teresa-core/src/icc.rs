//! Intent consistency: a softmax intent head over [CLS] states, with a KL
//! tie pulling the rewrite's latent intent toward the contextual input's.

use crate::autodiff::{Tape, Tensor};
use crate::error::Result;
use crate::model::{encode, DropoutRng, TeresaConfig, TeresaParameters};
use crate::text::{pack_single, Vocab};

/// Distribution over latent intents for a [CLS] state, 1 × n_intents.
pub fn intent_distribution(
    tape: &Tape,
    h_cls: &Tensor,
    params: &TeresaParameters,
) -> Result<Tensor> {
    Ok(tape.row_softmax(&tape.add(&tape.matmul(h_cls, &params.intent_w)?, &params.intent_b)?))
}

/// KL between the contextual input's intent distribution and the rewrite's.
///
/// The rewrite is encoded alone through the shared encoder; both branches
/// receive gradients. Training-only: inference never calls this.
pub fn icc_loss(
    tape: &Tape,
    cq_h_cls: &Tensor,
    rewrite_text: &str,
    vocab: &Vocab,
    params: &TeresaParameters,
    config: &TeresaConfig,
    rng: &mut DropoutRng<'_>,
) -> Result<Tensor> {
    let packed_r = pack_single(rewrite_text, vocab)?;
    let enc_r = encode(tape, &packed_r, params, config, rng)?;
    let p = intent_distribution(tape, cq_h_cls, params)?;
    let q = intent_distribution(tape, &enc_r.h_cls, params)?;
    tape.kl_div(&p, &q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use crate::text::{build_vocab, pack_input, DialogueSession, Speaker, Utterance};
    use rand::Rng;

    fn setup() -> (TeresaConfig, TeresaParameters, Vocab) {
        let cfg = TeresaConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_len: 32,
            n_intents: 4,
            dropout: 0.0,
        };
        let sessions = vec![DialogueSession {
            session_id: "s".into(),
            utterances: ["小米8 支持 蓝牙 吗", "支持", "能 连接 耳机 吗"]
                .iter()
                .map(|t| Utterance {
                    speaker: Speaker::User,
                    text: (*t).into(),
                })
                .collect(),
        }];
        let vocab = build_vocab(&sessions, 1).unwrap();
        let params = TeresaParameters::new(&cfg, vocab.len(), 21);
        (cfg, params, vocab)
    }

    #[test]
    fn intent_distribution_is_stochastic() {
        let (cfg, params, _) = setup();
        let tape = Tape::inference();
        let mut rng = keyed_rng(1, "icc-test", 0);
        let h = Tensor::new(1, cfg.d_model, (0..cfg.d_model).map(|_| rng.gen::<f64>()).collect(), false);
        let d = intent_distribution(&tape, &h, &params).unwrap();
        assert_eq!(d.cols(), cfg.n_intents);
        let s: f64 = d.values().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(d.values().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn loss_nonnegative_and_zero_on_matching_states() {
        let (cfg, params, vocab) = setup();
        let tape = Tape::inference();
        let packed = pack_input(&["小米8 支持 蓝牙 吗"], "能 连接 耳机 吗", &vocab).unwrap();
        let enc = encode(&tape, &packed, &params, &cfg, &mut None).unwrap();
        let l = icc_loss(&tape, &enc.h_cls, "能 连接 蓝牙 耳机 吗", &vocab, &params, &cfg, &mut None)
            .unwrap()
            .item();
        assert!(l >= 0.0);
        // Same [CLS] state on both sides collapses the KL to zero.
        let p = intent_distribution(&tape, &enc.h_cls, &params).unwrap();
        let z = tape.kl_div(&p, &p).unwrap().item();
        assert!(z.abs() < 1e-12);
    }

    #[test]
    fn gradients_reach_head_and_both_branches() {
        let (cfg, params, vocab) = setup();
        let tape = Tape::new();
        let packed = pack_input(&["小米8 支持 蓝牙 吗"], "能 连接 耳机 吗", &vocab).unwrap();
        let enc = encode(&tape, &packed, &params, &cfg, &mut None).unwrap();
        let l = icc_loss(&tape, &enc.h_cls, "能 连接 蓝牙 耳机 吗", &vocab, &params, &cfg, &mut None)
            .unwrap();
        tape.backward(&l).unwrap();
        let head = params.intent_w.grad().unwrap();
        assert!(head.iter().any(|&g| g != 0.0));
        // The token embedding grad collects from the contextual encode and
        // the rewrite encode alike.
        let emb = params.token_embed.grad().unwrap();
        assert!(emb.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn loss_invariant_under_intent_relabeling() {
        let (cfg, params, vocab) = setup();
        let tape = Tape::inference();
        let packed = pack_input(&["小米8 支持 蓝牙 吗"], "能 连接 耳机 吗", &vocab).unwrap();
        let enc = encode(&tape, &packed, &params, &cfg, &mut None).unwrap();
        let before = icc_loss(&tape, &enc.h_cls, "能 连接 耳机 吗", &vocab, &params, &cfg, &mut None)
            .unwrap()
            .item();
        // Swap intent columns 0 and 1 along with their biases.
        let n = cfg.n_intents;
        {
            let mut w = params.intent_w.values_mut();
            for r in 0..cfg.d_model {
                w.swap(r * n, r * n + 1);
            }
            params.intent_b.values_mut().swap(0, 1);
        }
        let after = icc_loss(&tape, &enc.h_cls, "能 连接 耳机 吗", &vocab, &params, &cfg, &mut None)
            .unwrap()
            .item();
        assert!((before - after).abs() < 1e-12);
    }
}

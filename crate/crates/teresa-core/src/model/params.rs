//! All trainable weights, registered under stable names for checkpointing
//! and optimizer state alignment.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TeresaConfig;
use crate::autodiff::Tensor;
use crate::error::{Result, TeresaError};
use crate::rng::keyed_rng;

/// One attention block's projections.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    /// No key bias: softmax row shifts cancel, so one would be dead
    /// weight with an identically zero gradient.
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone)]
pub struct LnWeights {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerWeights {
    pub ln1: LnWeights,
    pub attn: AttnWeights,
    pub ln2: LnWeights,
    pub ffn: FfnWeights,
}

/// Decoder layer: masked self-attention, separate context and query
/// cross-attentions, and a feed-forward over their concatenation.
#[derive(Debug, Clone)]
pub struct DecoderLayerWeights {
    pub ln1: LnWeights,
    pub self_attn: AttnWeights,
    pub ln_c: LnWeights,
    pub ctx_attn: AttnWeights,
    pub ln_q: LnWeights,
    pub qry_attn: AttnWeights,
    pub ln3: LnWeights,
    pub ffn: FfnWeights,
}

/// Every parameter tensor of the model. Clones in the registry alias the
/// structured fields, so `named()` order is the canonical flattening.
#[derive(Debug)]
pub struct TeresaParameters {
    pub token_embed: Tensor,
    pub position_embed: Tensor,
    pub segment_embed: Tensor,
    pub encoder: Vec<EncoderLayerWeights>,
    pub encoder_ln_f: LnWeights,
    pub decoder: Vec<DecoderLayerWeights>,
    /// Learned begin-of-sequence embedding; never a copy candidate.
    pub bos: Tensor,
    pub gate_ws: Tensor,
    pub gate_wc: Tensor,
    pub gate_wq: Tensor,
    /// Dedicated single-head projections for the keyword graph layer.
    pub sakd_wq: Tensor,
    pub sakd_wk: Tensor,
    /// Scalar gain on the keyword score added to copy-attention logits.
    pub w_score: Tensor,
    pub intent_w: Tensor,
    pub intent_b: Tensor,
    registry: Vec<(String, Tensor)>,
    vocab_size: usize,
}

struct Builder {
    rng: ChaCha8Rng,
    registry: Vec<(String, Tensor)>,
}

impl Builder {
    /// Uniform Xavier initialization for projection matrices.
    fn mat(&mut self, name: &str, rows: usize, cols: usize) -> Tensor {
        let r = (6.0 / (rows + cols) as f64).sqrt();
        let v: Vec<f64> = (0..rows * cols)
            .map(|_| (self.rng.gen::<f64>() * 2.0 - 1.0) * r)
            .collect();
        self.reg(name, Tensor::new(rows, cols, v, true))
    }

    /// Embedding rows with variance 1/cols.
    fn emb(&mut self, name: &str, rows: usize, cols: usize) -> Tensor {
        let r = (3.0 / cols as f64).sqrt();
        let v: Vec<f64> = (0..rows * cols)
            .map(|_| (self.rng.gen::<f64>() * 2.0 - 1.0) * r)
            .collect();
        self.reg(name, Tensor::new(rows, cols, v, true))
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Tensor {
        self.reg(name, Tensor::zeros(rows, cols, true))
    }

    fn ones(&mut self, name: &str, rows: usize, cols: usize) -> Tensor {
        self.reg(name, Tensor::new(rows, cols, vec![1.0; rows * cols], true))
    }

    fn reg(&mut self, name: &str, t: Tensor) -> Tensor {
        self.registry.push((name.to_string(), t.clone()));
        t
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnWeights {
        LnWeights {
            gain: self.ones(&format!("{prefix}.gain"), 1, d),
            bias: self.zeros(&format!("{prefix}.bias"), 1, d),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnWeights {
        AttnWeights {
            wq: self.mat(&format!("{prefix}.wq"), d, d),
            bq: self.zeros(&format!("{prefix}.bq"), 1, d),
            wk: self.mat(&format!("{prefix}.wk"), d, d),
            wv: self.mat(&format!("{prefix}.wv"), d, d),
            bv: self.zeros(&format!("{prefix}.bv"), 1, d),
            wo: self.mat(&format!("{prefix}.wo"), d, d),
            bo: self.zeros(&format!("{prefix}.bo"), 1, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d_in: usize, d_ff: usize, d_out: usize) -> FfnWeights {
        FfnWeights {
            w1: self.mat(&format!("{prefix}.w1"), d_in, d_ff),
            b1: self.zeros(&format!("{prefix}.b1"), 1, d_ff),
            w2: self.mat(&format!("{prefix}.w2"), d_ff, d_out),
            b2: self.zeros(&format!("{prefix}.b2"), 1, d_out),
        }
    }
}

impl TeresaParameters {
    pub fn new(config: &TeresaConfig, vocab_size: usize, seed: u64) -> TeresaParameters {
        let d = config.d_model;
        let mut b = Builder {
            rng: keyed_rng(seed, "init", 0),
            registry: Vec::new(),
        };
        let token_embed = b.emb("embed.token", vocab_size, d);
        let position_embed = b.emb("embed.position", config.max_len, d);
        let segment_embed = b.emb("embed.segment", 2, d);
        let encoder = (0..config.n_layers)
            .map(|l| EncoderLayerWeights {
                ln1: b.ln(&format!("enc.{l}.ln1"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln2: b.ln(&format!("enc.{l}.ln2"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.d_ff, d),
            })
            .collect();
        let encoder_ln_f = b.ln("enc.final_ln", d);
        let decoder = (0..config.n_layers)
            .map(|l| DecoderLayerWeights {
                ln1: b.ln(&format!("dec.{l}.ln1"), d),
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln_c: b.ln(&format!("dec.{l}.ln_c"), d),
                ctx_attn: b.attn(&format!("dec.{l}.ctx"), d),
                ln_q: b.ln(&format!("dec.{l}.ln_q"), d),
                qry_attn: b.attn(&format!("dec.{l}.qry"), d),
                ln3: b.ln(&format!("dec.{l}.ln3"), 2 * d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), 2 * d, config.d_ff, d),
            })
            .collect();
        let bos = b.emb("dec.bos", 1, d);
        let gate_ws = b.mat("gate.ws", d, 1);
        let gate_wc = b.mat("gate.wc", d, 1);
        let gate_wq = b.mat("gate.wq", d, 1);
        let sakd_wq = b.mat("sakd.wq", d, d);
        let sakd_wk = b.mat("sakd.wk", d, d);
        let w_score = b.zeros("sakd.w_score", 1, 1);
        let intent_w = b.mat("intent.w", d, config.n_intents);
        let intent_b = b.zeros("intent.b", 1, config.n_intents);
        TeresaParameters {
            token_embed,
            position_embed,
            segment_embed,
            encoder,
            encoder_ln_f,
            decoder,
            bos,
            gate_ws,
            gate_wc,
            gate_wq,
            sakd_wq,
            sakd_wk,
            w_score,
            intent_w,
            intent_b,
            registry: b.registry,
            vocab_size,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Canonical (name, tensor) flattening; the order is stable and shared
    /// by checkpoints and optimizer state.
    pub fn named(&self) -> &[(String, Tensor)] {
        &self.registry
    }

    /// All tensors in registry order.
    pub fn all(&self) -> Vec<Tensor> {
        self.registry.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.registry.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.registry {
            t.clear_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.registry.iter().all(|(_, t)| t.all_finite())
    }

    pub fn value_count(&self) -> usize {
        self.registry.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies all values out, in registry order.
    pub fn snapshot(&self) -> Vec<(String, usize, usize, Vec<f64>)> {
        self.registry
            .iter()
            .map(|(n, t)| (n.clone(), t.rows(), t.cols(), t.values().clone()))
            .collect()
    }

    /// Overwrites one named tensor's values, shape-checked.
    pub fn load_named(&self, name: &str, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
        let t = self.lookup(name).ok_or_else(|| TeresaError::InvalidInput(format!(
            "unknown parameter {name:?}"
        )))?;
        if t.rows() != rows || t.cols() != cols || values.len() != rows * cols {
            return Err(TeresaError::Shape {
                op: "load_named".into(),
                detail: format!(
                    "parameter {name:?} is {}x{}, got {rows}x{cols} with {} values",
                    t.rows(),
                    t.cols(),
                    values.len()
                ),
            });
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }

    /// Restores a full snapshot; every parameter must be covered exactly once.
    pub fn restore(&self, snapshot: &[(String, usize, usize, Vec<f64>)]) -> Result<()> {
        if snapshot.len() != self.registry.len() {
            return Err(TeresaError::InvalidInput(format!(
                "snapshot has {} tensors, model has {}",
                snapshot.len(),
                self.registry.len()
            )));
        }
        for (name, rows, cols, values) in snapshot {
            self.load_named(name, *rows, *cols, values)?;
        }
        Ok(())
    }
}

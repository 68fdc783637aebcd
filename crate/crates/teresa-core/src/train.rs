//! Training and evaluation: the integrated loss, the Adam + warmup loop,
//! beam-search evaluation with split exact match, and the annotated-fraction
//! sweep harness.

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape, Tensor};
use crate::beam::{beam_search, BeamOptions};
use crate::error::{Result, TeresaError};
use crate::icc::icc_loss;
use crate::metrics::{metric_report, normalize_ws, MetricReport};
use crate::model::{
    decode_targets, decode_teacher_forced, encode, nll_loss, DropoutRng, Model,
};
use crate::rng::keyed_rng;
use crate::sakd::{keyword_scores, sakd_loss};
use crate::ssl::CqrTriplet;
use crate::text::{
    build_vocab, pack_input, tokenize, DialogueSession, Speaker, Utterance, Vocab, EOS_SURFACE,
};

/// Optimization hyperparameters. Unknown keys in config files are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Scale on the warmup-then-decay schedule.
    pub lr_factor: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Milestone period: checkpoints and dev evaluation every this many steps.
    pub eval_every: usize,
    pub pretrain_path: Option<PathBuf>,
    pub finetune_path: Option<PathBuf>,
    /// Seeded fraction of the training data actually used, in (0, 1].
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            lr_factor: 0.5,
            warmup_steps: 4000,
            max_steps: 1000,
            seed: 0,
            eval_every: 100,
            pretrain_path: None,
            finetune_path: None,
            train_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TeresaError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.lr_factor <= 0.0 || !self.lr_factor.is_finite() {
            return bad(format!("lr_factor {} must be positive", self.lr_factor));
        }
        if self.warmup_steps == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return bad("warmup_steps, max_steps, eval_every must be ≥ 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!(
                "train_fraction {} outside (0, 1]",
                self.train_fraction
            ));
        }
        Ok(())
    }
}

/// Warmup-then-inverse-square-root learning rate:
/// factor · d_model^(−1/2) · min(step^(−1/2), step · warmup^(−3/2)).
/// Peaks at step = warmup_steps.
pub fn noam_lr(step: u64, d_model: usize, lr_factor: f64, warmup_steps: usize) -> f64 {
    let s = step as f64;
    let w = warmup_steps as f64;
    lr_factor * (d_model as f64).powf(-0.5) * f64::min(s.powf(-0.5), s * w.powf(-1.5))
}

/// Which auxiliary losses are active; both default on.
#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub use_sakd: bool,
    pub use_icc: bool,
}

impl Default for LossOptions {
    fn default() -> LossOptions {
        LossOptions {
            use_sakd: true,
            use_icc: true,
        }
    }
}

/// One example's loss terms. `total` stays on the tape for backward; the
/// component values are detached copies for logging.
pub struct LossBreakdown {
    pub total: Tensor,
    pub nll: f64,
    pub sakd: f64,
    pub icc: f64,
}

/// The integrated training loss for one triplet:
/// (nll + keyword-KL) + intent-KL, in that exact summation order so the
/// intent term's removal changes the total by precisely its value.
pub fn integrated_loss(
    tape: &Tape,
    triplet: &CqrTriplet,
    model: &Model,
    opts: &LossOptions,
    rng: &mut DropoutRng<'_>,
) -> Result<LossBreakdown> {
    let packed = pack_input(&triplet.context, &triplet.query, &model.vocab)?;
    let enc = encode(tape, &packed, &model.params, &model.config, rng)?;
    let score = match opts.use_sakd {
        true => Some(keyword_scores(tape, &enc.h_c, &model.params)?),
        false => None,
    };
    let targets = decode_targets(&tokenize(&triplet.rewrite));
    let out = decode_teacher_forced(
        tape,
        &enc,
        &targets,
        &model.vocab,
        &model.params,
        &model.config,
        score.as_ref(),
        rng,
    )?;
    let l_nll = nll_loss(tape, &out, &targets)?;
    let l_sakd = match &score {
        Some(s) => sakd_loss(tape, &out.ctx_attn, s)?,
        None => Tensor::scalar(0.0),
    };
    let l_icc = if opts.use_icc {
        icc_loss(
            tape,
            &enc.h_cls,
            &triplet.rewrite,
            &model.vocab,
            &model.params,
            &model.config,
            rng,
        )?
    } else {
        Tensor::scalar(0.0)
    };
    let total = tape.add(&tape.add(&l_nll, &l_sakd)?, &l_icc)?;
    Ok(LossBreakdown {
        nll: l_nll.item(),
        sakd: l_sakd.item(),
        icc: l_icc.item(),
        total,
    })
}

/// Per-step log record; serialized one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_nll: f64,
    pub l_sakd: f64,
    pub l_icc: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Callbacks from the training loop.
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    /// Every `eval_every` steps and at the end: checkpoint (the optimizer
    /// state rides along for that) and, if the caller has a dev set,
    /// evaluate.
    Milestone { step: u64, adam: &'a AdamState },
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps_run: u64,
    /// Triplets excluded up front: uncopyable targets or unpackable inputs.
    pub skipped: usize,
    pub final_record: Option<StepRecord>,
}

/// Builds a vocabulary over every surface occurring in the given triplet
/// slices (context turns, queries, and rewrites alike).
pub fn triplet_vocab(slices: &[&[CqrTriplet]], min_freq: usize) -> Result<Vocab> {
    let mut sessions = Vec::new();
    for (i, slice) in slices.iter().enumerate() {
        for (j, t) in slice.iter().enumerate() {
            let mut utterances: Vec<Utterance> = t
                .context
                .iter()
                .map(|c| Utterance {
                    speaker: Speaker::User,
                    text: c.clone(),
                })
                .collect();
            for text in [&t.query, &t.rewrite] {
                utterances.push(Utterance {
                    speaker: Speaker::User,
                    text: text.clone(),
                });
            }
            sessions.push(DialogueSession {
                session_id: format!("vocab-{i}-{j}"),
                utterances,
            });
        }
    }
    build_vocab(&sessions, min_freq)
}

/// True when the triplet can actually be trained on: inputs pack within the
/// length budget, the context is non-empty, and every target token
/// (terminator included) is copyable from context ∪ query.
pub fn trainable(triplet: &CqrTriplet, model: &Model) -> bool {
    let q = tokenize(&triplet.query);
    let r = tokenize(&triplet.rewrite);
    let ctx: Vec<String> = triplet.context.iter().flat_map(|t| tokenize(t)).collect();
    if q.is_empty() || r.is_empty() || ctx.is_empty() {
        return false;
    }
    let packed_len = 1 + ctx.len() + 1 + q.len() + 1;
    if packed_len > model.config.max_len || r.len() + 1 > model.config.max_len {
        return false;
    }
    let mut sources: HashSet<&str> = ctx.iter().map(String::as_str).collect();
    sources.extend(q.iter().map(String::as_str));
    sources.insert(EOS_SURFACE);
    r.iter().all(|t| sources.contains(t.as_str()))
}

/// Seeded subset selection: a shuffled prefix, so smaller fractions nest
/// inside larger ones under the same seed.
pub fn fraction_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TeresaError::Config(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = keyed_rng(seed, "fraction", 0);
    use rand::seq::SliceRandom;
    idx.shuffle(&mut rng);
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    idx.truncate(k);
    Ok(idx)
}

/// Runs the optimizer loop over shuffled mini-batches, updating the model's
/// parameters in place. Continues from `adam`'s step counter when resuming;
/// stops once it reaches `max_steps` total steps.
pub fn train(
    model: &Model,
    data: &[CqrTriplet],
    tcfg: &TrainConfig,
    opts: &LossOptions,
    adam: Option<AdamState>,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<(TrainReport, AdamState)> {
    tcfg.validate()?;
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| trainable(&data[i], model))
        .collect();
    let skipped = data.len() - usable.len();
    if skipped > 0 {
        log::warn!("excluding {skipped} of {} triplets (uncopyable target or unpackable input)", data.len());
    }
    let subset_of_usable = fraction_subset(usable.len(), tcfg.train_fraction, tcfg.seed)?;
    let subset: Vec<usize> = subset_of_usable.iter().map(|&i| usable[i]).collect();
    if subset.is_empty() {
        return Err(TeresaError::InvalidInput(
            "no usable training triplets".into(),
        ));
    }
    let n = subset.len();
    let batches_per_epoch = n.div_ceil(tcfg.batch_size);
    let params = model.params.all();
    let mut adam = adam.unwrap_or_else(|| AdamState::new(&params));
    let mut steps_run = 0u64;
    let mut final_record = None;
    let mut order: Vec<usize> = Vec::new();
    let mut epoch_of_order = u64::MAX;
    use rand::seq::SliceRandom;

    while adam.step_count() < tcfg.max_steps as u64 {
        let step = adam.step_count() + 1;
        let global_batch = step - 1;
        let epoch = global_batch / batches_per_epoch as u64;
        let within = (global_batch % batches_per_epoch as u64) as usize;
        if epoch != epoch_of_order {
            order = subset.clone();
            order.shuffle(&mut keyed_rng(tcfg.seed, "shuffle", epoch));
            epoch_of_order = epoch;
        }
        let lo = within * tcfg.batch_size;
        let hi = (lo + tcfg.batch_size).min(n);
        let batch = &order[lo..hi];

        let t0 = Instant::now();
        model.params.zero_grad();
        let mut dropout_rng = keyed_rng(tcfg.seed, "dropout", step);
        let mut sums = [0.0f64; 3];
        for &i in batch {
            let tape = Tape::new();
            let mut rng_opt: DropoutRng<'_> = if model.config.dropout > 0.0 {
                Some(&mut dropout_rng)
            } else {
                None
            };
            let lb = integrated_loss(&tape, &data[i], model, opts, &mut rng_opt)?;
            if !(lb.nll.is_finite() && lb.sakd.is_finite() && lb.icc.is_finite()) {
                return Err(TeresaError::Numeric(format!(
                    "non-finite loss at step {step}: l_nll={} l_sakd={} l_icc={}",
                    lb.nll, lb.sakd, lb.icc
                )));
            }
            let scaled = tape.mul_scalar(&lb.total, 1.0 / batch.len() as f64);
            tape.backward(&scaled)?;
            sums[0] += lb.nll;
            sums[1] += lb.sakd;
            sums[2] += lb.icc;
        }
        let lr = noam_lr(step, model.config.d_model, tcfg.lr_factor, tcfg.warmup_steps);
        adam.step(&params, lr)?;
        steps_run += 1;

        let b = batch.len() as f64;
        let record = StepRecord {
            step,
            l_nll: sums[0] / b,
            l_sakd: sums[1] / b,
            l_icc: sums[2] / b,
            lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        on_event(TrainEvent::Step(&record))?;
        if step.is_multiple_of(tcfg.eval_every as u64) || step == tcfg.max_steps as u64 {
            on_event(TrainEvent::Milestone { step, adam: &adam })?;
        }
        final_record = Some(record);
    }
    Ok((
        TrainReport {
            steps_run,
            skipped,
            final_record,
        },
        adam,
    ))
}

/// One decoded evaluation example, serialized per line during eval runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalExample {
    pub context: Vec<String>,
    pub query: String,
    pub reference: String,
    pub hypothesis: String,
    pub label: crate::ssl::Label,
    pub em: bool,
}

fn eval_one(model: &Model, t: &CqrTriplet, opts: &BeamOptions) -> Result<EvalExample> {
    let decoded = beam_search(model, &t.context, &t.query, opts)?;
    let em = normalize_ws(&decoded.rewrite) == normalize_ws(&t.rewrite);
    Ok(EvalExample {
        context: t.context.clone(),
        query: t.query.clone(),
        reference: t.rewrite.clone(),
        hypothesis: decoded.rewrite,
        label: t.label,
        em,
    })
}

/// Decodes every example with beam search and assembles the metric report.
/// `workers > 1` fans decoding out over threads; outputs are order-stable
/// and byte-identical for any worker count.
pub fn evaluate(
    model: &Model,
    testset: &[CqrTriplet],
    opts: &BeamOptions,
    workers: usize,
) -> Result<(MetricReport, Vec<EvalExample>)> {
    if testset.is_empty() {
        return Err(TeresaError::InvalidInput("empty evaluation set".into()));
    }
    let workers = workers.max(1).min(testset.len());
    let examples: Vec<EvalExample> = if workers == 1 {
        testset
            .iter()
            .map(|t| eval_one(model, t, opts))
            .collect::<Result<_>>()?
    } else {
        // The model itself is not Send (tensors hold Rc), so each worker
        // rebuilds one from plain data: config, vocabulary, and a value
        // snapshot. Decoding is deterministic, which keeps the output
        // independent of the split.
        let snapshot = model.params.snapshot();
        let config = model.config.clone();
        let vocab = model.vocab.clone();
        let mut slots: Vec<Option<Result<EvalExample>>> = Vec::new();
        slots.resize_with(testset.len(), || None);
        let chunk = testset.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (slot_chunk, data_chunk) in slots.chunks_mut(chunk).zip(testset.chunks(chunk)) {
                let snapshot = &snapshot;
                let config = config.clone();
                let vocab = vocab.clone();
                scope.spawn(move || {
                    let local = Model::new(config, vocab, 0).and_then(|m| {
                        m.params.restore(snapshot)?;
                        Ok(m)
                    });
                    match local {
                        Ok(local) => {
                            for (slot, t) in slot_chunk.iter_mut().zip(data_chunk) {
                                *slot = Some(eval_one(&local, t, opts));
                            }
                        }
                        Err(e) => slot_chunk[0] = Some(Err(e)),
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every slot filled"))
            .collect::<Result<_>>()?
    };
    let hyps: Vec<&str> = examples.iter().map(|e| e.hypothesis.as_str()).collect();
    let refs: Vec<&str> = examples.iter().map(|e| e.reference.as_str()).collect();
    let labels: Vec<crate::ssl::Label> = examples.iter().map(|e| e.label).collect();
    let report = metric_report(&hyps, &refs, &labels)?;
    Ok((report, examples))
}

/// Fine-tunes a copy of the model on seeded subsamples of the annotated set
/// at each fraction and evaluates every run; the model is restored to its
/// initial weights afterwards.
#[allow(clippy::too_many_arguments)]
pub fn fraction_sweep(
    model: &Model,
    train_set: &[CqrTriplet],
    test_set: &[CqrTriplet],
    fractions: &[f64],
    tcfg: &TrainConfig,
    loss_opts: &LossOptions,
    beam_opts: &BeamOptions,
    workers: usize,
) -> Result<Vec<(f64, MetricReport)>> {
    let init = model.params.snapshot();
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        model.params.restore(&init)?;
        let mut cfg = tcfg.clone();
        cfg.train_fraction = f;
        train(model, train_set, &cfg, loss_opts, None, &mut |_| Ok(()))?;
        let (report, _) = evaluate(model, test_set, beam_opts, workers)?;
        rows.push((f, report));
    }
    model.params.restore(&init)?;
    Ok(rows)
}

/// Plot-ready CSV for sweep results; absent exact-match subsets are empty
/// cells.
pub fn sweep_csv(rows: &[(f64, MetricReport)]) -> String {
    let mut out = String::from("fraction,bleu4,rouge_l,em_pos,em_neg\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for (f, r) in rows {
        out.push_str(&format!(
            "{f},{:.4},{:.4},{},{}\n",
            r.bleu4,
            r.rouge_l,
            cell(r.em_pos),
            cell(r.em_neg)
        ));
    }
    out
}

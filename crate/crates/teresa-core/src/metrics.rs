//! Evaluation metrics: corpus-level BLEU-4, macro-averaged ROUGE-L F1, and
//! exact match split by sample label. All scores are percentages.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TeresaError};
use crate::ssl::Label;
use crate::text::tokenize;

/// Scores for one evaluation run. `em_pos`/`em_neg` are absent (not zero)
/// when the corresponding subset is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_neg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em_pos: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check_corpus<S, T>(candidates: &[S], references: &[T]) -> Result<()> {
    if candidates.is_empty() {
        return Err(TeresaError::InvalidInput("empty evaluation corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(TeresaError::InvalidInput(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4: clipped n-gram precisions pooled over the corpus,
/// geometric mean over n = 1..4, brevity penalty e^(1−r/c) when the
/// candidate corpus is shorter than the reference corpus.
pub fn bleu4<S: AsRef<str>, T: AsRef<str>>(candidates: &[S], references: &[T]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c.as_ref())).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| tokenize(r.as_ref())).collect();
    let c_total: usize = cand_tokens.iter().map(Vec::len).sum();
    let r_total: usize = ref_tokens.iter().map(Vec::len).sum();
    if c_total == 0 {
        return Ok(0.0);
    }
    let mut log_p_sum = 0.0;
    for n in 1..=4 {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (c, r) in cand_tokens.iter().zip(&ref_tokens) {
            let rc = ngram_counts(r, n);
            for (gram, count) in ngram_counts(c, n) {
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
            }
            total += c.len().saturating_sub(n - 1);
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_p_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if c_total < r_total {
        (1.0 - r_total as f64 / c_total as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_p_sum / 4.0).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    // One-row DP over the shorter side.
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Macro-averaged ROUGE-L F1 (β = 1): per pair, precision = LCS/|candidate|,
/// recall = LCS/|reference|, 0 when the LCS is empty.
pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(candidates: &[S], references: &[T]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        let ct = tokenize(c.as_ref());
        let rt = tokenize(r.as_ref());
        let l = lcs_len(&ct, &rt);
        if l == 0 {
            continue;
        }
        let p = l as f64 / ct.len() as f64;
        let rec = l as f64 / rt.len() as f64;
        sum += 2.0 * p * rec / (p + rec);
    }
    Ok(100.0 * sum / candidates.len() as f64)
}

/// Collapses runs of whitespace and trims, the equality used by exact match.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exact-match percentages over the positive and negative subsets. An empty
/// subset yields `None` for its field.
pub fn exact_match<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[S],
    references: &[T],
    labels: &[Label],
) -> Result<(Option<f64>, Option<f64>)> {
    check_corpus(candidates, references)?;
    if labels.len() != candidates.len() {
        return Err(TeresaError::InvalidInput(format!(
            "{} labels vs {} candidates",
            labels.len(),
            candidates.len()
        )));
    }
    let mut hit = [0usize; 2];
    let mut n = [0usize; 2];
    for ((c, r), l) in candidates.iter().zip(references).zip(labels) {
        let i = usize::from(*l == Label::Neg);
        n[i] += 1;
        if normalize_ws(c.as_ref()) == normalize_ws(r.as_ref()) {
            hit[i] += 1;
        }
    }
    let pct = |hit: usize, n: usize| (n > 0).then(|| 100.0 * hit as f64 / n as f64);
    Ok((pct(hit[0], n[0]), pct(hit[1], n[1])))
}

/// Full report over a labeled corpus.
pub fn metric_report<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[S],
    references: &[T],
    labels: &[Label],
) -> Result<MetricReport> {
    let (em_pos, em_neg) = exact_match(candidates, references, labels)?;
    Ok(MetricReport {
        bleu4: bleu4(candidates, references)?,
        rouge_l: rouge_l(candidates, references)?,
        em_neg,
        em_pos,
        n_pos: labels.iter().filter(|l| **l == Label::Pos).count(),
        n_neg: labels.iter().filter(|l| **l == Label::Neg).count(),
    })
}

//! Keyword detection over context states. A dedicated single-head attention
//! layer turns the context encoding into a directed word graph; a damped
//! random walk over the graph scores each token; the scores bias copy
//! attention and anchor a KL loss.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Result, TeresaError};
use crate::model::TeresaParameters;

pub const DAMPING: f64 = 0.85;
pub const TEXTRANK_TOL: f64 = 1e-8;
pub const TEXTRANK_MAX_ITER: usize = 1000;
/// Fixed iteration count for the differentiable score path. The walk
/// contracts at least geometrically with ratio `DAMPING`, so 200 iterations
/// land within 1e-14 of the fixed point.
pub const SCORE_UNROLL_ITERS: usize = 200;

/// Directed weighted word graph; raw nonnegative edge weights, row i holding
/// the out-edges of node i.
#[derive(Debug, Clone)]
pub struct AttentionGraph {
    n: usize,
    weights: Vec<f64>,
}

impl AttentionGraph {
    pub fn new(n: usize, weights: Vec<f64>) -> Result<AttentionGraph> {
        if n == 0 {
            return Err(TeresaError::InvalidInput("empty graph".into()));
        }
        if weights.len() != n * n {
            return Err(TeresaError::InvalidInput(format!(
                "graph weights have {} entries, expected {}",
                weights.len(),
                n * n
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TeresaError::InvalidInput(
                "graph weights must be finite and nonnegative".into(),
            ));
        }
        Ok(AttentionGraph { n, weights })
    }

    /// Snapshot of a square tensor's values as a graph.
    pub fn from_tensor(t: &Tensor) -> Result<AttentionGraph> {
        if t.rows() != t.cols() {
            return Err(TeresaError::Shape {
                op: "AttentionGraph::from_tensor".into(),
                detail: format!("{}x{} is not square", t.rows(), t.cols()),
            });
        }
        AttentionGraph::new(t.rows(), t.values().clone())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Row-normalized transition matrix; all-zero rows fall back to uniform.
    fn transitions(&self) -> Vec<f64> {
        let n = self.n;
        let mut w = self.weights.clone();
        for i in 0..n {
            let row = &mut w[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                for x in row {
                    *x /= s;
                }
            } else {
                row.fill(1.0 / n as f64);
            }
        }
        w
    }
}

/// Importance scores from the damped random walk.
#[derive(Debug, Clone)]
pub struct TextRankResult {
    /// Distribution over nodes, normalized to sum 1.
    pub score: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Damped random-walk node scoring: iterates
/// s′_j = (1−d)/n + d·Σ_i s_i·W_{i→j} over the row-normalized graph from a
/// uniform start, stopping when max|s′−s| < tol or after max_iter rounds.
pub fn textrank(
    graph: &AttentionGraph,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<TextRankResult> {
    if !(0.0..1.0).contains(&damping) {
        return Err(TeresaError::Config(format!("damping {damping} outside [0, 1)")));
    }
    if tol.is_nan() || tol <= 0.0 || max_iter == 0 {
        return Err(TeresaError::Config(
            "textrank needs tol > 0 and max_iter ≥ 1".into(),
        ));
    }
    let n = graph.n;
    let w = graph.transitions();
    let base = (1.0 - damping) / n as f64;
    let mut s = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        next.fill(base);
        for i in 0..n {
            let si = damping * s[i];
            if si == 0.0 {
                continue;
            }
            for j in 0..n {
                next[j] += si * w[i * n + j];
            }
        }
        let delta = s
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut s, &mut next);
        if delta < tol {
            converged = true;
            break;
        }
    }
    let total: f64 = s.iter().sum();
    for x in &mut s {
        *x /= total;
    }
    Ok(TextRankResult {
        score: s,
        converged,
        iterations,
    })
}

/// Differentiable walk: the same recurrence unrolled for a fixed
/// `SCORE_UNROLL_ITERS` rounds on the tape. Expects a row-stochastic input
/// (for example a row-softmax output); rows are not renormalized.
pub fn textrank_unrolled(tape: &Tape, transition: &Tensor, damping: f64) -> Result<Tensor> {
    let n = transition.rows();
    if n == 0 || transition.cols() != n {
        return Err(TeresaError::Shape {
            op: "textrank_unrolled".into(),
            detail: format!("{}x{} is not square", transition.rows(), transition.cols()),
        });
    }
    let base = (1.0 - damping) / n as f64;
    let mut s = Tensor::new(1, n, vec![1.0 / n as f64; n], false);
    for _ in 0..SCORE_UNROLL_ITERS {
        s = tape.add_scalar(&tape.mul_scalar(&tape.matmul(&s, transition)?, damping), base);
    }
    Ok(s)
}

/// Word graph from the dedicated attention layer: row-softmaxed scaled dot
/// products of the context states under the layer's own Q/K projections.
pub fn build_attention_graph(
    tape: &Tape,
    h_c: &Tensor,
    params: &TeresaParameters,
) -> Result<Tensor> {
    if h_c.rows() == 0 {
        return Err(TeresaError::InvalidInput(
            "no context tokens to build a word graph from".into(),
        ));
    }
    let q = tape.matmul(h_c, &params.sakd_wq)?;
    let k = tape.matmul(h_c, &params.sakd_wk)?;
    let scale = 1.0 / (h_c.cols() as f64).sqrt();
    Ok(tape.row_softmax(&tape.mul_scalar(&tape.matmul_nt(&q, &k)?, scale)))
}

/// Keyword importance distribution for the context, 1 × n_ctx, on the tape.
pub fn keyword_scores(tape: &Tape, h_c: &Tensor, params: &TeresaParameters) -> Result<Tensor> {
    let graph = build_attention_graph(tape, h_c, params)?;
    textrank_unrolled(tape, &graph, DAMPING)
}

/// Keyword-biased attention: softmax(raw + gain·score) per row.
pub fn bias_attention(
    tape: &Tape,
    raw_logits: &Tensor,
    score: &Tensor,
    w_score: &Tensor,
) -> Result<Tensor> {
    Ok(tape.row_softmax(&tape.add(raw_logits, &tape.mul(score, w_score)?)?))
}

/// KL between the time-averaged context copy attention and the keyword
/// score distribution.
pub fn sakd_loss(tape: &Tape, ctx_attn: &Tensor, score: &Tensor) -> Result<Tensor> {
    tape.kl_div(&tape.mean_rows(ctx_attn), score)
}

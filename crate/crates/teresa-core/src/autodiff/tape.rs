//! Dynamic tape: ops record themselves on forward, `backward` replays them in
//! reverse. An op's output requires grad only when the tape is recording and
//! at least one input requires grad; inference runs on a non-recording tape
//! and pays no taping cost.

use std::cell::RefCell;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Result, TeresaError};

/// Values below this are clamped before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;
/// Additive fill for masked attention logits; large enough to zero the
/// softmax cell without overflowing exp.
pub const MASK_FILL: f64 = -1e30;
const LN_EPS: f64 = 1e-5;
/// Distribution inputs to kl_div must sum to 1 within this.
pub const DIST_TOL: f64 = 1e-9;

fn shape_err(op: &str, detail: String) -> TeresaError {
    TeresaError::Shape {
        op: op.to_string(),
        detail,
    }
}

/// Backward step for one op: takes ∂loss/∂output, accumulates into inputs.
type BackFn = Box<dyn Fn(&[f64])>;

struct Node {
    output: Tensor,
    back: BackFn,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape for training.
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A non-recording tape for inference; ops only compute values.
    pub fn inference() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn track(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    fn push<F: Fn(&[f64]) + 'static>(&self, output: &Tensor, back: F) {
        self.nodes.borrow_mut().push(Node {
            output: output.clone(),
            back: Box::new(back),
        });
    }

    /// Accumulates ∂loss/∂x into every requires-grad tensor reachable from
    /// `loss`. Node outputs have their gradients cleared first, so repeated
    /// calls accumulate into leaves only.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {}x{}", loss.rows(), loss.cols()),
            ));
        }
        let nodes = self.nodes.borrow();
        for n in nodes.iter() {
            n.output.clear_grad();
        }
        loss.accum_grad(&[1.0]);
        for n in nodes.iter().rev() {
            if let Some(g) = n.output.grad() {
                (n.back)(&g);
            }
        }
        Ok(())
    }

    /// A·B for a: m×k, b: k×n.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        if b.rows() != k {
            return Err(shape_err(
                "matmul",
                format!("{m}x{k} · {}x{n}", b.rows()),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = a.values();
            let bv = b.values();
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x != 0.0 {
                        let brow = &bv[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, bb) in orow.iter_mut().zip(brow) {
                            *o += x * bb;
                        }
                    }
                }
            }
        }
        let out_t = Tensor::new(m, n, out, self.track(&[a, b]));
        if out_t.requires_grad() {
            let (a, b) = (a.clone(), b.clone());
            self.push(&out_t, move |g| {
                if a.requires_grad() {
                    let bv = b.values();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for p in 0..k {
                                    da[i * k + p] += gij * bv[p * n + j];
                                }
                            }
                        }
                    }
                    a.accum_grad(&da);
                }
                if b.requires_grad() {
                    let av = a.values();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip != 0.0 {
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                    b.accum_grad(&db);
                }
            });
        }
        Ok(out_t)
    }

    /// A·Bᵀ for a: m×k, b: n×k.
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        if b.cols() != k {
            return Err(shape_err(
                "matmul_nt",
                format!("{m}x{k} · ({n}x{})ᵀ", b.cols()),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = a.values();
            let bv = b.values();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += av[i * k + p] * bv[j * k + p];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        let out_t = Tensor::new(m, n, out, self.track(&[a, b]));
        if out_t.requires_grad() {
            let (a, b) = (a.clone(), b.clone());
            self.push(&out_t, move |g| {
                if a.requires_grad() {
                    let bv = b.values();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for p in 0..k {
                                    da[i * k + p] += gij * bv[j * k + p];
                                }
                            }
                        }
                    }
                    a.accum_grad(&da);
                }
                if b.requires_grad() {
                    let av = a.values();
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for p in 0..k {
                                    db[j * k + p] += gij * av[i * k + p];
                                }
                            }
                        }
                    }
                    b.accum_grad(&db);
                }
            });
        }
        Ok(out_t)
    }

    /// a + b where b may share a's shape, be a 1×n row broadcast over rows,
    /// or be a 1×1 scalar.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, n) = (a.rows(), a.cols());
        enum Mode {
            Same,
            Row,
            Scalar,
        }
        let mode = if b.is_scalar() && !(m == 1 && n == 1) {
            Mode::Scalar
        } else if b.rows() == m && b.cols() == n {
            Mode::Same
        } else if b.rows() == 1 && b.cols() == n {
            Mode::Row
        } else {
            return Err(shape_err(
                "add",
                format!("{m}x{n} + {}x{}", b.rows(), b.cols()),
            ));
        };
        let mut out = vec![0.0; m * n];
        {
            let av = a.values();
            let bv = b.values();
            match mode {
                Mode::Same => {
                    for (o, (x, y)) in out.iter_mut().zip(av.iter().zip(bv.iter())) {
                        *o = x + y;
                    }
                }
                Mode::Row => {
                    for i in 0..m {
                        for j in 0..n {
                            out[i * n + j] = av[i * n + j] + bv[j];
                        }
                    }
                }
                Mode::Scalar => {
                    let c = bv[0];
                    for (o, x) in out.iter_mut().zip(av.iter()) {
                        *o = x + c;
                    }
                }
            }
        }
        let out_t = Tensor::new(m, n, out, self.track(&[a, b]));
        if out_t.requires_grad() {
            let (a, b) = (a.clone(), b.clone());
            self.push(&out_t, move |g| {
                if a.requires_grad() {
                    a.accum_grad(g);
                }
                if b.requires_grad() {
                    match b.len() {
                        1 if m * n != 1 => b.accum_grad(&[g.iter().sum()]),
                        l if l == m * n => b.accum_grad(g),
                        _ => {
                            let mut db = vec![0.0; n];
                            for i in 0..m {
                                for j in 0..n {
                                    db[j] += g[i * n + j];
                                }
                            }
                            b.accum_grad(&db);
                        }
                    }
                }
            });
        }
        Ok(out_t)
    }

    /// a ∘ b where b may share a's shape, be a 1×1 scalar, or be an m×1
    /// column broadcast across columns.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, n) = (a.rows(), a.cols());
        enum Mode {
            Same,
            Scalar,
            Col,
        }
        let mode = if b.is_scalar() && !(m == 1 && n == 1) {
            Mode::Scalar
        } else if b.rows() == m && b.cols() == n {
            Mode::Same
        } else if b.rows() == m && b.cols() == 1 {
            Mode::Col
        } else {
            return Err(shape_err(
                "mul",
                format!("{m}x{n} ∘ {}x{}", b.rows(), b.cols()),
            ));
        };
        let mut out = vec![0.0; m * n];
        {
            let av = a.values();
            let bv = b.values();
            match mode {
                Mode::Same => {
                    for (o, (x, y)) in out.iter_mut().zip(av.iter().zip(bv.iter())) {
                        *o = x * y;
                    }
                }
                Mode::Scalar => {
                    let c = bv[0];
                    for (o, x) in out.iter_mut().zip(av.iter()) {
                        *o = x * c;
                    }
                }
                Mode::Col => {
                    for i in 0..m {
                        for j in 0..n {
                            out[i * n + j] = av[i * n + j] * bv[i];
                        }
                    }
                }
            }
        }
        let out_t = Tensor::new(m, n, out, self.track(&[a, b]));
        if out_t.requires_grad() {
            let (a, b) = (a.clone(), b.clone());
            self.push(&out_t, move |g| {
                let scalar_b = b.len() == 1 && m * n != 1;
                let col_b = !scalar_b && b.cols() == 1 && n != 1;
                if a.requires_grad() {
                    let bv = b.values();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            let bb = if scalar_b {
                                bv[0]
                            } else if col_b {
                                bv[i]
                            } else {
                                bv[i * n + j]
                            };
                            da[i * n + j] = g[i * n + j] * bb;
                        }
                    }
                    a.accum_grad(&da);
                }
                if b.requires_grad() {
                    let av = a.values();
                    if scalar_b {
                        let s: f64 = g.iter().zip(av.iter()).map(|(x, y)| x * y).sum();
                        b.accum_grad(&[s]);
                    } else if col_b {
                        let mut db = vec![0.0; m];
                        for i in 0..m {
                            for j in 0..n {
                                db[i] += g[i * n + j] * av[i * n + j];
                            }
                        }
                        b.accum_grad(&db);
                    } else {
                        let db: Vec<f64> =
                            g.iter().zip(av.iter()).map(|(x, y)| x * y).collect();
                        b.accum_grad(&db);
                    }
                }
            });
        }
        Ok(out_t)
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = a.values().iter().map(|x| x + c).collect();
        let out_t = Tensor::new(a.rows(), a.cols(), out, self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            self.push(&out_t, move |g| a.accum_grad(g));
        }
        out_t
    }

    pub fn mul_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = a.values().iter().map(|x| x * c).collect();
        let out_t = Tensor::new(a.rows(), a.cols(), out, self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            self.push(&out_t, move |g| {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                a.accum_grad(&da);
            });
        }
        out_t
    }

    /// Concatenation along the last dimension: m×p ++ m×q → m×(p+q).
    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, p, q) = (a.rows(), a.cols(), b.cols());
        if b.rows() != m {
            return Err(shape_err(
                "concat_cols",
                format!("{m}x{p} ++ {}x{q}", b.rows()),
            ));
        }
        let n = p + q;
        let mut out = vec![0.0; m * n];
        {
            let av = a.values();
            let bv = b.values();
            for i in 0..m {
                out[i * n..i * n + p].copy_from_slice(&av[i * p..(i + 1) * p]);
                out[i * n + p..(i + 1) * n].copy_from_slice(&bv[i * q..(i + 1) * q]);
            }
        }
        let out_t = Tensor::new(m, n, out, self.track(&[a, b]));
        if out_t.requires_grad() {
            let (a, b) = (a.clone(), b.clone());
            self.push(&out_t, move |g| {
                if a.requires_grad() {
                    let mut da = vec![0.0; m * p];
                    for i in 0..m {
                        da[i * p..(i + 1) * p].copy_from_slice(&g[i * n..i * n + p]);
                    }
                    a.accum_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; m * q];
                    for i in 0..m {
                        db[i * q..(i + 1) * q].copy_from_slice(&g[i * n + p..(i + 1) * n]);
                    }
                    b.accum_grad(&db);
                }
            });
        }
        Ok(out_t)
    }

    /// Stacks same-width parts vertically.
    pub fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat_rows", "no parts".to_string()));
        };
        let n = first.cols();
        let mut rows = 0;
        for p in parts {
            if p.cols() != n {
                return Err(shape_err(
                    "concat_rows",
                    format!("width {} vs {n}", p.cols()),
                ));
            }
            rows += p.rows();
        }
        let mut out = Vec::with_capacity(rows * n);
        for p in parts {
            out.extend_from_slice(&p.values());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let out_t = Tensor::new(rows, n, out, self.track(&refs));
        if out_t.requires_grad() {
            let parts: Vec<Tensor> = parts.to_vec();
            self.push(&out_t, move |g| {
                let mut offset = 0;
                for p in &parts {
                    let len = p.len();
                    if p.requires_grad() {
                        p.accum_grad(&g[offset..offset + len]);
                    }
                    offset += len;
                }
            });
        }
        Ok(out_t)
    }

    pub fn slice_rows(&self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = (a.rows(), a.cols());
        if start > end || end > m {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start}..{end} of {m}x{n}"),
            ));
        }
        let out = a.values()[start * n..end * n].to_vec();
        let out_t = Tensor::new(end - start, n, out, self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            self.push(&out_t, move |g| {
                let mut da = vec![0.0; m * n];
                da[start * n..end * n].copy_from_slice(g);
                a.accum_grad(&da);
            });
        }
        Ok(out_t)
    }

    pub fn slice_cols(&self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = (a.rows(), a.cols());
        if start > end || end > n {
            return Err(shape_err(
                "slice_cols",
                format!("cols {start}..{end} of {m}x{n}"),
            ));
        }
        let w = end - start;
        let mut out = vec![0.0; m * w];
        {
            let av = a.values();
            for i in 0..m {
                out[i * w..(i + 1) * w].copy_from_slice(&av[i * n + start..i * n + end]);
            }
        }
        let out_t = Tensor::new(m, w, out, self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            self.push(&out_t, move |g| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                a.accum_grad(&da);
            });
        }
        Ok(out_t)
    }

    /// Numerically stable softmax of every row.
    pub fn row_softmax(&self, a: &Tensor) -> Tensor {
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![0.0; m * n];
        {
            let av = a.values();
            for i in 0..m {
                let row = &av[i * n..(i + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[i * n + j] /= sum;
                }
            }
        }
        let out_t = Tensor::new(m, n, out, self.track(&[a]));
        if out_t.requires_grad() {
            let (a, s) = (a.clone(), out_t.clone());
            self.push(&out_t, move |g| {
                let sv = s.values();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[i * n + j] * sv[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] = sv[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                a.accum_grad(&da);
            });
        }
        out_t
    }

    /// ln(max(x, LOG_CLAMP)) elementwise.
    pub fn log(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = a.values().iter().map(|x| x.max(LOG_CLAMP).ln()).collect();
        let out_t = Tensor::new(a.rows(), a.cols(), out, self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            self.push(&out_t, move |g| {
                let av = a.values();
                let da: Vec<f64> = g
                    .iter()
                    .zip(av.iter())
                    .map(|(gi, x)| if *x > LOG_CLAMP { gi / x } else { 0.0 })
                    .collect();
                drop(av);
                a.accum_grad(&da);
            });
        }
        out_t
    }

    pub fn sigmoid(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = a
            .values()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let out_t = Tensor::new(a.rows(), a.cols(), out, self.track(&[a]));
        if out_t.requires_grad() {
            let (a, s) = (a.clone(), out_t.clone());
            self.push(&out_t, move |g| {
                let sv = s.values();
                let da: Vec<f64> = g
                    .iter()
                    .zip(sv.iter())
                    .map(|(gi, si)| gi * si * (1.0 - si))
                    .collect();
                drop(sv);
                a.accum_grad(&da);
            });
        }
        out_t
    }

    /// Gaussian error linear unit, tanh approximation. Smooth everywhere,
    /// which keeps finite-difference checks clean.
    pub fn gelu(&self, a: &Tensor) -> Tensor {
        const K: f64 = 0.7978845608028654; // sqrt(2/pi)
        const C: f64 = 0.044715;
        let out: Vec<f64> = a
            .values()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (K * (x + C * x * x * x)).tanh()))
            .collect();
        let out_t = Tensor::new(a.rows(), a.cols(), out, self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            self.push(&out_t, move |g| {
                let av = a.values();
                let da: Vec<f64> = g
                    .iter()
                    .zip(av.iter())
                    .map(|(gi, &x)| {
                        let t = (K * (x + C * x * x * x)).tanh();
                        let du = K * (1.0 + 3.0 * C * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                drop(av);
                a.accum_grad(&da);
            });
        }
        out_t
    }

    /// Per-row layer normalization with learned gain and bias (both 1×d).
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, d) = (x.rows(), x.cols());
        if gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {m}x{d}, gain {}x{}, bias {}x{}",
                    gain.rows(),
                    gain.cols(),
                    bias.rows(),
                    bias.cols()
                ),
            ));
        }
        let mut out = vec![0.0; m * d];
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        {
            let xv = x.values();
            let gv = gain.values();
            let bv = bias.values();
            for i in 0..m {
                let row = &xv[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                rstd[i] = r;
                for j in 0..d {
                    let h = (row[j] - mean) * r;
                    xhat[i * d + j] = h;
                    out[i * d + j] = gv[j] * h + bv[j];
                }
            }
        }
        let out_t = Tensor::new(m, d, out, self.track(&[x, gain, bias]));
        if out_t.requires_grad() {
            let (x, gain, bias) = (x.clone(), gain.clone(), bias.clone());
            self.push(&out_t, move |g| {
                let gv = gain.values();
                if x.requires_grad() {
                    let mut dx = vec![0.0; m * d];
                    for i in 0..m {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            let gh = g[i * d + j] * gv[j];
                            mean_g += gh;
                            mean_gx += gh * xhat[i * d + j];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for j in 0..d {
                            let gh = g[i * d + j] * gv[j];
                            dx[i * d + j] =
                                rstd[i] * (gh - mean_g - xhat[i * d + j] * mean_gx);
                        }
                    }
                    x.accum_grad(&dx);
                }
                drop(gv);
                if gain.requires_grad() {
                    let mut dg = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                    gain.accum_grad(&dg);
                }
                if bias.requires_grad() {
                    let mut db = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                    bias.accum_grad(&db);
                }
            });
        }
        Ok(out_t)
    }

    /// Gathers rows of `table` by id: table V×d, ids n → n×d.
    pub fn embedding_gather(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = (table.rows(), table.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err(
                "embedding_gather",
                format!("id {bad} out of range for table {v}x{d}"),
            ));
        }
        let n = ids.len();
        let mut out = vec![0.0; n * d];
        {
            let tv = table.values();
            for (i, &id) in ids.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let out_t = Tensor::new(n, d, out, self.track(&[table]));
        if out_t.requires_grad() {
            let table = table.clone();
            let ids: Vec<usize> = ids.to_vec();
            self.push(&out_t, move |g| {
                table.accum_grad_rows(&ids, g);
            });
        }
        Ok(out_t)
    }

    /// Column means: m×n → 1×n.
    pub fn mean_rows(&self, a: &Tensor) -> Tensor {
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![0.0; n];
        {
            let av = a.values();
            for i in 0..m {
                for j in 0..n {
                    out[j] += av[i * n + j];
                }
            }
            for o in out.iter_mut() {
                *o /= m as f64;
            }
        }
        let out_t = Tensor::new(1, n, out, self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            self.push(&out_t, move |g| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j] / m as f64;
                    }
                }
                a.accum_grad(&da);
            });
        }
        out_t
    }

    /// Sum of all elements: m×n → 1×1.
    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        let s: f64 = a.values().iter().sum();
        let out_t = Tensor::new(1, 1, vec![s], self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            self.push(&out_t, move |g| {
                let da = vec![g[0]; a.len()];
                a.accum_grad(&da);
            });
        }
        out_t
    }

    /// Replaces masked positions with `fill`; gradients flow only through
    /// unmasked positions.
    pub fn masked_fill(&self, a: &Tensor, mask: &[bool], fill: f64) -> Result<Tensor> {
        if mask.len() != a.len() {
            return Err(shape_err(
                "masked_fill",
                format!("mask length {} vs tensor {}", mask.len(), a.len()),
            ));
        }
        let out: Vec<f64> = a
            .values()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &msk)| if msk { fill } else { x })
            .collect();
        let out_t = Tensor::new(a.rows(), a.cols(), out, self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            let mask: Vec<bool> = mask.to_vec();
            self.push(&out_t, move |g| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gi, &msk)| if msk { 0.0 } else { gi })
                    .collect();
                a.accum_grad(&da);
            });
        }
        Ok(out_t)
    }

    /// KL(p ‖ q) = Σ p·(ln p − ln q) for two 1×n distributions, with the log
    /// clamp applied to both arguments.
    pub fn kl_div(&self, p: &Tensor, q: &Tensor) -> Result<Tensor> {
        if p.rows() != 1 || q.rows() != 1 || p.cols() != q.cols() {
            return Err(shape_err(
                "kl_div",
                format!(
                    "{}x{} vs {}x{}",
                    p.rows(),
                    p.cols(),
                    q.rows(),
                    q.cols()
                ),
            ));
        }
        for (name, t) in [("p", p), ("q", q)] {
            let sum: f64 = t.values().iter().sum();
            if (sum - 1.0).abs() > DIST_TOL {
                return Err(TeresaError::InvalidInput(format!(
                    "kl_div {name} is not a distribution: sums to {sum}"
                )));
            }
        }
        let n = p.cols();
        let mut kl = 0.0;
        {
            let pv = p.values();
            let qv = q.values();
            for j in 0..n {
                let pj = pv[j].max(LOG_CLAMP);
                let qj = qv[j].max(LOG_CLAMP);
                kl += pv[j] * (pj.ln() - qj.ln());
            }
        }
        let out_t = Tensor::new(1, 1, vec![kl], self.track(&[p, q]));
        if out_t.requires_grad() {
            let (p, q) = (p.clone(), q.clone());
            self.push(&out_t, move |g| {
                let g0 = g[0];
                if p.requires_grad() {
                    let pv = p.values();
                    let qv = q.values();
                    let dp: Vec<f64> = (0..n)
                        .map(|j| {
                            let qj = qv[j].max(LOG_CLAMP);
                            if pv[j] > LOG_CLAMP {
                                g0 * (pv[j].ln() - qj.ln() + 1.0)
                            } else {
                                g0 * (LOG_CLAMP.ln() - qj.ln())
                            }
                        })
                        .collect();
                    drop(pv);
                    drop(qv);
                    p.accum_grad(&dp);
                }
                if q.requires_grad() {
                    let pv = p.values();
                    let qv = q.values();
                    let dq: Vec<f64> = (0..n)
                        .map(|j| {
                            if qv[j] > LOG_CLAMP {
                                -g0 * pv[j] / qv[j]
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    drop(pv);
                    drop(qv);
                    q.accum_grad(&dq);
                }
            });
        }
        Ok(out_t)
    }

    /// Picks one element per row: a m×n, idx length m → m×1.
    pub fn gather_per_row(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = (a.rows(), a.cols());
        if idx.len() != m {
            return Err(shape_err(
                "gather_per_row",
                format!("{} indices for {m} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(shape_err(
                "gather_per_row",
                format!("index {bad} out of range for width {n}"),
            ));
        }
        let out: Vec<f64> = {
            let av = a.values();
            idx.iter().enumerate().map(|(i, &j)| av[i * n + j]).collect()
        };
        let out_t = Tensor::new(m, 1, out, self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            let idx: Vec<usize> = idx.to_vec();
            self.push(&out_t, move |g| {
                let mut da = vec![0.0; m * n];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * n + j] = g[i];
                }
                a.accum_grad(&da);
            });
        }
        Ok(out_t)
    }

    /// Probability of one candidate from a 1×n distribution.
    pub fn gather_probability(&self, dist: &Tensor, index: usize) -> Result<Tensor> {
        if dist.rows() != 1 {
            return Err(shape_err(
                "gather_probability",
                format!("expected 1xN distribution, got {}x{}", dist.rows(), dist.cols()),
            ));
        }
        self.gather_per_row(dist, &[index])
    }

    /// Inverted dropout: keeps each element with probability 1−p, scaling by
    /// 1/(1−p). p = 0 returns the input unchanged.
    pub fn dropout<R: Rng>(&self, a: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TeresaError::Config(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(a.clone());
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<bool> = (0..a.len()).map(|_| rng.gen_bool(1.0 - p)).collect();
        let out: Vec<f64> = a
            .values()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &keep)| if keep { x * scale } else { 0.0 })
            .collect();
        let out_t = Tensor::new(a.rows(), a.cols(), out, self.track(&[a]));
        if out_t.requires_grad() {
            let a = a.clone();
            self.push(&out_t, move |g| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gi, &keep)| if keep { gi * scale } else { 0.0 })
                    .collect();
                a.accum_grad(&da);
            });
        }
        Ok(out_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let t = Tape::inference();
        let s = t.row_softmax(&Tensor::row(vec![0.0, 0.0]));
        assert_eq!(*s.values(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tape::inference();
        let s = t.row_softmax(&Tensor::new(2, 3, vec![1.0, -2.0, 700.0, 0.1, 0.2, 0.3], false));
        let v = s.values();
        for i in 0..2 {
            let sum: f64 = v[i * 3..(i + 1) * 3].iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(v[i * 3..(i + 1) * 3].iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let t = Tape::inference();
        assert_eq!(t.sigmoid(&Tensor::scalar(0.0)).item(), 0.5);
    }

    #[test]
    fn matmul_identity() {
        let t = Tape::inference();
        let eye = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], false);
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], false);
        let out = t.matmul(&eye, &a).unwrap();
        assert_eq!(*out.values(), *a.values());
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let t = Tape::inference();
        let a = Tensor::zeros(2, 3, false);
        let b = Tensor::zeros(2, 3, false);
        match t.matmul(&a, &b) {
            Err(TeresaError::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn kl_identity_is_zero() {
        let t = Tape::inference();
        let p = Tensor::row(vec![0.3, 0.7]);
        let kl = t.kl_div(&p, &p).unwrap();
        assert_abs_diff_eq!(kl.item(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_hand_case() {
        let t = Tape::inference();
        let p = Tensor::row(vec![0.5, 0.5]);
        let q = Tensor::row(vec![0.9, 0.1]);
        let kl = t.kl_div(&p, &q).unwrap();
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(kl.item(), want, epsilon = 1e-12);
        assert_abs_diff_eq!(kl.item(), 0.510825623765990, epsilon = 1e-9);
    }

    #[test]
    fn kl_rejects_non_distribution() {
        let t = Tape::inference();
        let p = Tensor::row(vec![0.5, 0.6]);
        let q = Tensor::row(vec![0.5, 0.5]);
        assert!(t.kl_div(&p, &q).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let t = Tape::new();
        let x = Tensor::new(1, 3, vec![1.0, 2.0, 3.0], true);
        let loss = t.sum_all(&x);
        t.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sigmoid_times_weight() {
        let t = Tape::new();
        let w = Tensor::new(1, 1, vec![1.0], true);
        let s = t.sigmoid(&Tensor::scalar(0.0));
        let loss = t.mul(&s, &w).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.5]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let t = Tape::new();
        let x = Tensor::new(1, 2, vec![1.0, 2.0], true);
        let y = t.mul_scalar(&x, 2.0);
        assert!(t.backward(&y).is_err());
    }

    #[test]
    fn shared_subexpression_sums_contributions() {
        // loss = sum(x) + sum(x) → grad 2 per element.
        let t = Tape::new();
        let x = Tensor::new(1, 2, vec![1.0, 2.0], true);
        let a = t.sum_all(&x);
        let b = t.sum_all(&x);
        let loss = t.add(&a, &b).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates_into_leaves() {
        let t = Tape::new();
        let x = Tensor::new(1, 2, vec![1.0, 2.0], true);
        let loss = t.sum_all(&x);
        t.backward(&loss).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let t = Tape::inference();
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], false);
        let b = Tensor::new(2, 1, vec![5.0, 6.0], false);
        let c = t.concat_cols(&a, &b).unwrap();
        assert_eq!(*c.values(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = t.slice_cols(&c, 0, 2).unwrap();
        assert_eq!(*back.values(), *a.values());
        let r = t.slice_rows(&c, 1, 2).unwrap();
        assert_eq!(*r.values(), vec![3.0, 4.0, 6.0]);
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let t = Tape::new();
        let x = Tensor::new(1, 3, vec![1.0, 2.0, 3.0], true);
        let y = t.masked_fill(&x, &[false, true, false], MASK_FILL).unwrap();
        assert_eq!(y.values()[1], MASK_FILL);
        let loss = t.sum_all(&y);
        t.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_gather_scatters_gradient() {
        let t = Tape::new();
        let table = Tensor::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], true);
        let e = t.embedding_gather(&table, &[2, 0, 2]).unwrap();
        assert_eq!(*e.values(), vec![4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let loss = t.sum_all(&e);
        t.backward(&loss).unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_per_row_picks_and_routes() {
        let t = Tape::new();
        let a = Tensor::new(2, 3, vec![0.1, 0.2, 0.7, 0.5, 0.3, 0.2], true);
        let g = t.gather_per_row(&a, &[2, 0]).unwrap();
        assert_eq!(*g.values(), vec![0.7, 0.5]);
        let loss = t.sum_all(&g);
        t.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let t = Tape::inference();
        let x = Tensor::new(1, 2, vec![1.0, 2.0], true);
        let y = t.mul_scalar(&x, 3.0);
        assert_eq!(t.node_count(), 0);
        assert!(!y.requires_grad());
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let t = Tape::new();
        let x = Tensor::new(1, 4, vec![1.0, 2.0, 3.0, 4.0], true);
        let mut rng = crate::rng::keyed_rng(0, "drop", 0);
        let y = t.dropout(&x, 0.0, &mut rng).unwrap();
        assert!(y.same_storage(&x));
    }

    #[test]
    fn dropout_scales_kept_values() {
        let t = Tape::inference();
        let x = Tensor::new(1, 1000, vec![1.0; 1000], false);
        let mut rng = crate::rng::keyed_rng(0, "drop", 1);
        let y = t.dropout(&x, 0.5, &mut rng).unwrap();
        for &v in y.values().iter() {
            assert!(v == 0.0 || v == 2.0);
        }
        let kept = y.values().iter().filter(|&&v| v != 0.0).count();
        assert!((300..700).contains(&kept));
    }
}

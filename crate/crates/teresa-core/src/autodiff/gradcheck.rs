//! Central finite-difference verification of tape gradients.

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Result, TeresaError};
use crate::rng::keyed_rng;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MAX_COORDS: usize = 256;

/// Worst-coordinate summary of one finite-difference run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn eval<F>(f: &F, tape: &Tape) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    let loss = f(tape)?;
    if !loss.is_scalar() {
        return Err(TeresaError::Shape {
            op: "finite_difference_check".to_string(),
            detail: format!("loss must be 1x1, got {}x{}", loss.rows(), loss.cols()),
        });
    }
    let v = loss.item();
    if !v.is_finite() {
        return Err(TeresaError::Numeric(format!("non-finite loss {v}")));
    }
    Ok(v)
}

/// Compares the tape's gradient of `f` against central differences on up to
/// `max_coords` randomly sampled parameter coordinates. `f` must be
/// deterministic in the parameter values. Relative error per coordinate is
/// |a−n| / max(1e−8, |a|+|n|).
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    for p in params {
        p.clear_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    if !loss.is_scalar() {
        return Err(TeresaError::Shape {
            op: "finite_difference_check".to_string(),
            detail: format!("loss must be 1x1, got {}x{}", loss.rows(), loss.cols()),
        });
    }
    if !loss.item().is_finite() {
        return Err(TeresaError::Numeric(format!(
            "non-finite loss {}",
            loss.item()
        )));
    }
    tape.backward(&loss)?;
    let analytic: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.grad()).collect();

    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let flat: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut rng = keyed_rng(seed, "gradcheck", 0);
        let mut idx = rand::seq::index::sample(&mut rng, total, max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: flat.len(),
        worst_param: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for flat_idx in flat {
        let mut pi = 0;
        let mut offset = flat_idx;
        while offset >= sizes[pi] {
            offset -= sizes[pi];
            pi += 1;
        }
        let orig = params[pi].values()[offset];
        params[pi].values_mut()[offset] = orig + eps;
        let fp = eval(&f, &Tape::inference())?;
        params[pi].values_mut()[offset] = orig - eps;
        let fm = eval(&f, &Tape::inference())?;
        params[pi].values_mut()[offset] = orig;

        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[pi].as_ref().map_or(0.0, |g| g[offset]);
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = pi;
            report.worst_coord = offset;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

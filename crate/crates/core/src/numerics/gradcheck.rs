//! Central finite-difference validation of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, NodeId, Tape};

/// Floor on the denominator of the per-entry relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Evaluates the recorded function at `xs` and returns the scalar value.
fn evaluate<F>(f: &F, xs: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::InvalidInput(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    let v = v.get(0, 0);
    if !v.is_finite() {
        return Err(Error::Numerical(format!("function value is not finite ({v})")));
    }
    Ok(v)
}

/// Entries of an `len`-element input to perturb: all of them, or `limit`
/// evenly spaced ones.
fn probe_entries(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares the tape gradient of `f` against central differences with step
/// `h`, for every input in `xs`. Returns one max relative error per input.
///
/// `limit` caps how many entries of each input are perturbed; `None` checks all.
pub fn grad_check_many<F>(f: F, xs: &[Matrix], h: f64, limit: Option<usize>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if !tape.value(out).is_finite() {
        return Err(Error::Numerical("function value is not finite".into()));
    }
    let grads = tape.backward(out)?;

    let mut errors = Vec::with_capacity(xs.len());
    let mut probe = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        let analytic_full = grads.wrt(ids[k]);
        let entries = probe_entries(x.len(), limit);
        let mut analytic = Vec::with_capacity(entries.len());
        let mut numeric = Vec::with_capacity(entries.len());
        for &e in &entries {
            let orig = x.data()[e];
            probe[k].data_mut()[e] = orig + h;
            let up = evaluate(&f, &probe)?;
            probe[k].data_mut()[e] = orig - h;
            let down = evaluate(&f, &probe)?;
            probe[k].data_mut()[e] = orig;
            numeric.push((up - down) / (2.0 * h));
            analytic.push(analytic_full.data()[e]);
        }
        let a = Matrix::new(1, entries.len(), analytic)?;
        let n = Matrix::new(1, entries.len(), numeric)?;
        errors.push(relative_error(&a, &n));
    }
    Ok(errors)
}

/// Single-input form of [`grad_check_many`] over every entry of `x`.
pub fn grad_check<F>(f: F, x: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let errs = grad_check_many(|t, ids| f(t, ids[0]), std::slice::from_ref(x), h, None)?;
    Ok(errs[0])
}

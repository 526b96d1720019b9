//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it is
//! independent of the backward rules it checks.

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst relative error over all checked tensors.
    pub max_rel_error: f64,
    /// Per-tensor relative errors, in the order checked.
    pub rel_errors: Vec<f64>,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Norms below this are compared absolutely; finite differences at the
/// usual step sizes carry round-off of roughly this magnitude.
pub const NORM_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

/// Checks `f` with respect to free-standing input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&tape, &vars)?;
        tape.item(loss)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rel_errors = Vec::new();
    let mut checked = 0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[idx])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut ins = inputs.to_vec();
            let mut d = input.data().to_vec();
            d[j] += h;
            ins[idx].set_data(d.clone())?;
            let up = eval(&ins)?;
            d[j] -= 2.0 * h;
            ins[idx].set_data(d)?;
            let down = eval(&ins)?;
            numeric[j] = (up - down) / (2.0 * h);
        }
        checked += input.len();
        rel_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(report(rel_errors, checked))
}

/// Checks `f` with respect to parameters of `store`.
///
/// At most `max_entries` entries per parameter are probed, spread evenly
/// over the tensor; the analytic gradient is compared on the same entries.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    h: f64,
    max_entries: usize,
) -> Result<GradReport>
where
    F: Fn(&Tape) -> Result<Var>,
{
    let tape = Tape::with_params(store);
    let loss = f(&tape)?;
    let grads = tape.backward(loss)?;

    let mut work = store.clone();
    let mut rel_errors = Vec::new();
    let mut checked = 0;
    for &id in ids {
        let n = store.get(id).len();
        let analytic_full = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let step = n.div_ceil(max_entries.max(1)).max(1);
        let entries: Vec<usize> = (0..n).step_by(step).collect();
        let mut analytic = Vec::with_capacity(entries.len());
        let mut numeric = Vec::with_capacity(entries.len());
        let base = store.get(id).data().to_vec();
        for &j in &entries {
            let mut d = base.clone();
            d[j] += h;
            work.get_mut(id).set_data(d.clone())?;
            let up = {
                let t = Tape::with_params(&work);
                let l = f(&t)?;
                t.item(l)?
            };
            d[j] -= 2.0 * h;
            work.get_mut(id).set_data(d)?;
            let down = {
                let t = Tape::with_params(&work);
                let l = f(&t)?;
                t.item(l)?
            };
            numeric.push((up - down) / (2.0 * h));
            analytic.push(analytic_full[j]);
        }
        work.get_mut(id).set_data(base)?;
        checked += entries.len();
        rel_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(report(rel_errors, checked))
}

fn report(rel_errors: Vec<f64>, checked: usize) -> GradReport {
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    GradReport {
        max_rel_error,
        rel_errors,
        checked,
    }
}

//! Central finite-difference gradient checks.
//!
//! These evaluate the forward function only; they share no code with the
//! backward rules they verify.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// turning round-off into huge relative errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Worst relative error over every element of every input.
///
/// `f` builds a scalar from the input leaves; it is re-run on a fresh tape
/// for each perturbation.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t)).collect();
        f(&tape, &leaves)?.item()
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .wrt(*leaf)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    if !worst.is_finite() {
        return Err(Error::NonFinite(
            "gradient check produced a non-finite error".into(),
        ));
    }
    Ok(worst)
}

/// Worst relative error over selected parameter entries `(param, flat index)`.
///
/// `f` maps the store to a scalar loss on the given tape. The store's
/// gradients are zeroed before and after.
pub fn check_params<F>(
    store: &mut ParamStore,
    entries: &[(ParamId, usize)],
    step: f64,
    f: F,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    store.zero_grad();
    {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        tape.backward_into(loss, store)?;
    }
    let analytic: Vec<f64> = entries
        .iter()
        .map(|&(pid, j)| store.tensor(pid).grad().map_or(0.0, |g| g[j]))
        .collect();
    store.zero_grad();

    let mut worst: f64 = 0.0;
    for (&(pid, j), a) in entries.iter().zip(analytic) {
        let x0 = store.tensor(pid).data()[j];
        store.tensor_mut(pid).data_mut()[j] = x0 + step;
        let up = f(&Tape::new(), store)?.item()?;
        store.tensor_mut(pid).data_mut()[j] = x0 - step;
        let down = f(&Tape::new(), store)?.item()?;
        store.tensor_mut(pid).data_mut()[j] = x0;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

//! Central finite-difference verification of tape gradients.
//!
//! A tensor-valued op is reduced to a scalar by a fixed random projection
//! `Σ R ⊙ y`, so every output entry contributes to the checked gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::param::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    /// Input index and flat coordinate of the worst entry.
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_ERROR_FLOOR)
}

/// Checks every coordinate of every input.
pub fn finite_diff_check<F>(name: &str, op: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |c| (i, c)))
        .collect();
    finite_diff_check_coords(name, op, inputs, &coords, step, tol)
}

/// Checks only the listed `(input, flat coordinate)` pairs.
pub fn finite_diff_check_coords<F>(
    name: &str,
    op: F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let (rows, cols) = tape.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f00d);
    let projection = Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let scalar = tape.weighted_sum(out, &projection)?;
    let grads = tape.backward(scalar);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut report = GradReport {
        op: name.to_string(),
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
        tol,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, c) in coords {
        let original = work[i].data()[c];
        work[i].data_mut()[c] = original + step;
        let plus = eval(&work)?;
        work[i].data_mut()[c] = original - step;
        let minus = eval(&work)?;
        work[i].data_mut()[c] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i].data()[c];
        let err = rel_error(a, numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = err;
            report.worst_input = i;
            report.worst_coord = c;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error.is_finite() && report.max_rel_error < tol;
    Ok(report)
}

/// Checks `op` with respect to `inputs` and every parameter in `store`.
/// Parameters are appended after `inputs`, in name order.
pub fn finite_diff_check_params<F>(
    name: &str,
    op: F,
    store: &ParamStore,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut all = inputs.to_vec();
    all.extend(store.iter().map(|(_, t)| t.clone()));
    let n = inputs.len();
    finite_diff_check(
        name,
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars[n..].iter().copied()));
            op(tape, &bound, &vars[..n])
        },
        &all,
        step,
        tol,
    )
}

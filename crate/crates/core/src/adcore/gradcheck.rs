use std::collections::BTreeMap;

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst relative error per named parameter, in input order.
    pub per_parameter_errs: Vec<(String, f64)>,
    pub passed: bool,
    pub tolerance: f64,
}

/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Builds `graph` on a fresh tape with every input as a leaf and returns the
/// scalar value together with the gradient for each input.
pub fn forward_backward<F>(
    inputs: &[(&str, Tensor)],
    graph: F,
) -> Result<(f64, BTreeMap<String, Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::NonScalarOutput {
            shape: value.shape().to_vec(),
        });
    }
    let value = value.item();
    let mut grads = tape.backward(out)?;
    let named = inputs
        .iter()
        .zip(&vars)
        .map(|((name, _), &v)| {
            let g = grads.take(v).expect("leaf gradient");
            (name.to_string(), g)
        })
        .collect();
    Ok((value, named))
}

fn evaluate<F>(graph: &F, values: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarOutput {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// Checks the tape's gradients of `loss_fn` against central differences.
pub fn grad_check<F>(loss_fn: F, params: &[(&str, Tensor)], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, grads) = forward_backward(params, &loss_fn)?;
    let analytic: Vec<Tensor> = params.iter().map(|(n, _)| grads[*n].clone()).collect();
    check_against_differences(loss_fn, params, &analytic, h, tol)
}

/// Compares caller-supplied gradients against central differences
/// `(f(p+h) - f(p-h)) / 2h`, one coordinate at a time.
pub fn check_against_differences<F>(
    loss_fn: F,
    params: &[(&str, Tensor)],
    analytic: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(invalid("one analytic gradient per parameter required"));
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let base = evaluate(&loss_fn, &values)?;
    let again = evaluate(&loss_fn, &values)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut per = Vec::with_capacity(params.len());
    let mut max_rel_err: f64 = 0.0;
    for (pi, (name, _)) in params.iter().enumerate() {
        if analytic[pi].shape() != values[pi].shape() {
            return Err(invalid(format!("gradient shape mismatch for `{name}`")));
        }
        let mut worst: f64 = 0.0;
        for j in 0..values[pi].len() {
            let orig = values[pi].data()[j];
            values[pi].data_mut()[j] = orig + h;
            let fp = evaluate(&loss_fn, &values)?;
            values[pi].data_mut()[j] = orig - h;
            let fm = evaluate(&loss_fn, &values)?;
            values[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic[pi].data()[j], numeric);
            worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
        }
        max_rel_err = max_rel_err.max(worst);
        per.push((name.to_string(), worst));
    }
    Ok(GradCheckReport {
        max_rel_err,
        per_parameter_errs: per,
        passed: max_rel_err <= tol,
        tolerance: tol,
    })
}

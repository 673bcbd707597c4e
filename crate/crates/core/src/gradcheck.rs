//! Central-difference gradient verification.
//!
//! Only smooth programs are supported: a function with a kink (clamp, abs,
//! max) at or within `step` of the evaluation point does not have the
//! derivative the check compares against, and such points are excluded from
//! the supported input class.

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Maximum relative error over all components of all inputs.
    pub max_rel_error: f64,
    /// Maximum relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub components: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate(f: &impl Fn(&GradTape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.value(&out).item()
}

/// Compares tape gradients of `f` against central differences for every
/// component of every input.
pub fn grad_check_many(
    f: impl Fn(&GradTape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let shape = tape.shape(&out);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::InvalidShape {
            shape,
            reason: "grad_check needs a scalar-valued function".into(),
        });
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut components = 0;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("marked input").clone();
        let base = inputs[idx].to_vec();
        let mut worst: f64 = 0.0;
        for c in 0..base.len() {
            let mut data = base.clone();
            data[c] = base[c] + step;
            perturbed[idx] = Tensor::new(inputs[idx].shape().to_vec(), data.clone())?;
            let plus = evaluate(&f, &perturbed)?;
            data[c] = base[c] - step;
            perturbed[idx] = Tensor::new(inputs[idx].shape().to_vec(), data)?;
            let minus = evaluate(&f, &perturbed)?;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[c], numeric));
        }
        perturbed[idx] = inputs[idx].clone();
        components += base.len();
        per_input.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        components,
    })
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check(f: impl Fn(&GradTape, Var) -> Result<Var>, x: &Tensor, step: f64) -> Result<f64> {
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)?;
    Ok(report.max_rel_error)
}

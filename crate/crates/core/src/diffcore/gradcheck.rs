use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares analytic gradients of a scalar-valued tape function against
/// central finite differences.
///
/// `f` receives the inputs as gradient-tracked leaves and must return a
/// scalar. The result is `max |analytic - numeric| / max(1, |numeric|)` over
/// every input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let base = scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let again = eval(inputs)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Usage(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut perturbed = inputs.to_vec();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        for k in 0..inputs[t].len() {
            let orig = inputs[t].data()[k];
            perturbed[t].data_mut()[k] = orig + eps;
            let plus = eval(&perturbed)?;
            perturbed[t].data_mut()[k] = orig - eps;
            let minus = eval(&perturbed)?;
            perturbed[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

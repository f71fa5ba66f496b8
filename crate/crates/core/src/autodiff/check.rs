use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and central differences with step `step`.
///
/// The error for each coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {step}")));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    let analytic = tape.backward(out)?.wrt(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let out = f(&mut tape, x)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Domain {
                op: "grad_check",
                detail: "function value is not finite".into(),
            });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

//! Central-difference gradient checking.

use super::{Tape, Tensor, TensorError, Var};

/// Floor added to the analytic magnitude in the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + REL_ERR_FLOOR)
}

/// Largest relative error between the tape gradient of the scalar function
/// `f` at `x` and its central-difference estimate with step `h`.
///
/// NaNs in either estimate propagate into the result.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let analytic = {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let y = f(&tape, v)?;
        tape.backward(y)?;
        tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |p: &Tensor| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let v = tape.constant(p.clone());
        Ok(f(&tape, v)?.value().item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic.data()[i], numeric);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

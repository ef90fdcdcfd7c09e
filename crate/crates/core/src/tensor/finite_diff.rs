use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `theta`:
/// `(f(theta + h e_i) - f(theta - h e_i)) / 2h` per coordinate.
///
/// Independent of the tape, so it serves as the oracle for `backward`.
pub fn finite_diff_gradient<F>(mut f: F, theta: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Contract(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = theta.clone();
    let mut grad = Vec::with_capacity(theta.numel());
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around coordinate {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(theta.shape(), grad)
}

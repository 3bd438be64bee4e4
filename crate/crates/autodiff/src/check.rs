//! Finite-difference gradient checking.
//!
//! These helpers only evaluate the forward function, so they stay independent
//! of the reverse sweep they are used to verify.

use crate::tensor::Tensor;

/// Central differences `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` for every element of `at`.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, at: &Tensor, h: f64) -> Tensor {
    let mut probe = at.clone();
    let mut out = Tensor::zeros(at.shape());
    for i in 0..at.numel() {
        let x0 = at.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let down = f(&probe);
        probe.data_mut()[i] = x0;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest elementwise `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

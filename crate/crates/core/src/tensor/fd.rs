//! Central finite differences, the gradient oracle used across the tests
//! and the `selftest` command.

use crate::tensor::Tensor;

/// Central-difference gradient of a deterministic scalar function:
/// `g_i = (f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = f(&probe);
        probe.values_mut()[i] = orig - h;
        let down = f(&probe);
        probe.values_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).unwrap()
}

/// Largest relative error between an analytic gradient and the central
/// difference, with an absolute floor to keep near-zero entries stable.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

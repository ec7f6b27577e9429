//! Central finite-difference utilities for validating analytic gradients.

use crate::autodiff::Arr;

/// Central-difference gradient of `f` with respect to `inputs[target]`,
/// perturbing one coordinate at a time.
pub fn central_diff_grad<F>(inputs: &[Arr], target: usize, h: f64, f: F) -> Arr
where
    F: Fn(&[Arr]) -> f64,
{
    let mut grad = Arr::zeros(inputs[target].raw_dim());
    let n = inputs[target].len();
    for k in 0..n {
        let mut plus: Vec<Arr> = inputs.to_vec();
        let mut minus: Vec<Arr> = inputs.to_vec();
        *plus[target].iter_mut().nth(k).unwrap() += h;
        *minus[target].iter_mut().nth(k).unwrap() -= h;
        let d = (f(&plus) - f(&minus)) / (2.0 * h);
        *grad.iter_mut().nth(k).unwrap() = d;
    }
    grad
}

/// Maximum relative error between an analytic gradient and its
/// finite-difference estimate, with a small absolute floor on the denominator.
pub fn max_rel_err(analytic: &Arr, fd: &Arr) -> f64 {
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

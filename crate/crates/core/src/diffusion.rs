//! Forward-process mathematics shared by the image model, the layout model,
//! and the prior model: schedules, noising, epsilon-prediction loss, timestep sets.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DiveError, Result};

/// Forward-process constants. `t` is 1-based throughout: `alpha_bar(t)` is the
/// cumulative product up to and including step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(DiveError::TimestepOutOfRange { t, max: self.t_max });
        }
        Ok(())
    }
}

/// Linear beta schedule from `beta_min` to `beta_max` over `t_max` steps.
pub fn build_schedule(t_max: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(DiveError::InvalidRange("t_max must be >= 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiveError::InvalidRange(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    for i in 0..t_max {
        let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
        betas.push(beta_min + (beta_max - beta_min) * frac);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { t_max, betas, alphas, alpha_bars })
}

/// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
///
/// Applies identically to images and embedded label sequences.
pub fn add_noise(
    x0: &ArrayD<f64>,
    t: usize,
    eps: &ArrayD<f64>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(DiveError::ShapeMismatch {
            expected: x0.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0 * sa + eps * sb)
}

/// Mean of squared elementwise differences. Mean (not sum) reduction keeps
/// image-space and label-space loss terms commensurate despite different sizes.
pub fn eps_loss(eps_true: &ArrayD<f64>, eps_pred: &ArrayD<f64>) -> Result<f64> {
    if eps_true.shape() != eps_pred.shape() {
        return Err(DiveError::ShapeMismatch {
            expected: eps_true.shape().to_vec(),
            got: eps_pred.shape().to_vec(),
        });
    }
    let n = eps_true.len() as f64;
    let mut acc = 0.0;
    for (a, b) in eps_true.iter().zip(eps_pred.iter()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / n)
}

/// Evenly spaced timesteps used for inversion and monitoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepSet {
    steps: Vec<usize>,
    interval: usize,
}

impl TimestepSet {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Arithmetic progression anchored at ceil(interval / 2), spaced by `interval`,
/// within [1, t_max]. For t_max=1000, interval=5 this yields 200 steps which
/// print as {2, 7, ..., 997} under a 0-based timestep convention.
pub fn make_timestep_set(t_max: usize, interval: usize) -> Result<TimestepSet> {
    if interval < 1 || interval > t_max {
        return Err(DiveError::InvalidInterval(format!(
            "interval must be in [1, {t_max}], got {interval}"
        )));
    }
    let start = interval.div_ceil(2);
    let steps: Vec<usize> = (start..=t_max).step_by(interval).collect();
    Ok(TimestepSet { steps, interval })
}

/// Uniformly sample one timestep from the set.
pub fn sample_timestep<R: Rng>(set: &TimestepSet, rng: &mut R) -> usize {
    set.steps[rng.random_range(0..set.steps.len())]
}

/// Standard-normal array of the given shape, drawn elementwise in row-major order.
pub fn sample_standard_normal<R: Rng>(shape: &[usize], rng: &mut R) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape/product mismatch")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn arr(shape: &[usize], v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), v)
    }

    #[test]
    fn schedule_single_step() {
        let s = build_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn schedule_two_steps_hand_product() {
        let s = build_schedule(2, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bar(2), 0.81, epsilon = 1e-15);
    }

    #[test]
    fn schedule_invariants_default_range() {
        let s = build_schedule(100, 1e-4, 0.02).unwrap();
        for t in 1..=100 {
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar not strictly decreasing");
                assert_abs_diff_eq!(
                    s.alpha_bar(t),
                    s.alpha_bar(t - 1) * s.alpha(t),
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(build_schedule(0, 0.1, 0.1).is_err());
        assert!(build_schedule(10, 0.0, 0.1).is_err());
        assert!(build_schedule(10, 0.2, 0.1).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn add_noise_noiseless_identity() {
        // eps = 0 and alpha_bar ~ 1 returns x0 up to the sqrt(alpha_bar) factor;
        // with beta tiny the first step is essentially the identity.
        let s = build_schedule(1, 1e-12, 1e-12).unwrap();
        let x0 = arr(&[2, 2], 1.5);
        let eps = arr(&[2, 2], 0.0);
        let out = add_noise(&x0, 1, &eps, &s).unwrap();
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 1.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn add_noise_zero_signal() {
        let s = build_schedule(2, 0.1, 0.1).unwrap();
        let x0 = arr(&[3], 0.0);
        let eps = arr(&[3], 2.0);
        let out = add_noise(&x0, 2, &eps, &s).unwrap();
        let expect = (1.0 - 0.81f64).sqrt() * 2.0;
        for v in out.iter() {
            assert_abs_diff_eq!(*v, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn add_noise_hand_arithmetic() {
        // alpha_bar = 0.81: 0.9 * 1 + sqrt(0.19) * 1 ~= 1.33589
        let s = build_schedule(2, 0.1, 0.1).unwrap();
        let out = add_noise(&arr(&[1], 1.0), 2, &arr(&[1], 1.0), &s).unwrap();
        assert_abs_diff_eq!(out[[0]], 1.33589, epsilon = 1e-5);
    }

    #[test]
    fn add_noise_errors() {
        let s = build_schedule(2, 0.1, 0.1).unwrap();
        assert!(add_noise(&arr(&[2], 0.0), 3, &arr(&[2], 0.0), &s).is_err());
        assert!(add_noise(&arr(&[2], 0.0), 0, &arr(&[2], 0.0), &s).is_err());
        assert!(add_noise(&arr(&[2], 0.0), 1, &arr(&[3], 0.0), &s).is_err());
    }

    #[test]
    fn add_noise_linear_in_inputs() {
        let s = build_schedule(10, 1e-3, 0.02).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x0 = sample_standard_normal(&[2, 3], &mut rng);
        let eps = sample_standard_normal(&[2, 3], &mut rng);
        let a = 2.75;
        let lhs = add_noise(&(&x0 * a), 5, &(&eps * a), &s).unwrap();
        let rhs = add_noise(&x0, 5, &eps, &s).unwrap() * a;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert_abs_diff_eq!(*l, *r, epsilon = 1e-12);
        }
    }

    #[test]
    fn eps_loss_identity_and_offset() {
        let a = arr(&[4, 4], 0.0);
        let b = arr(&[4, 4], 1.0);
        assert_eq!(eps_loss(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(eps_loss(&a, &b).unwrap(), 1.0, epsilon = 1e-15);
        assert!(eps_loss(&a, &arr(&[2], 0.0)).is_err());
    }

    #[test]
    fn eps_loss_matches_elementwise_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let a = sample_standard_normal(&[3, 5, 2], &mut rng);
        let b = sample_standard_normal(&[3, 5, 2], &mut rng);
        // independent loop oracle
        let mut acc = 0.0;
        let mut n = 0usize;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += (x - y) * (x - y);
            n += 1;
        }
        let oracle = acc / n as f64;
        assert_abs_diff_eq!(eps_loss(&a, &b).unwrap(), oracle, epsilon = 1e-6);
    }

    #[test]
    fn timestep_set_paper_pattern() {
        let set = make_timestep_set(1000, 5).unwrap();
        assert_eq!(set.len(), 200);
        // 1-based steps {3, 8, ..., 998} print as {2, 7, ..., 997} 0-based.
        let zero_based: Vec<usize> = set.steps().iter().map(|t| t - 1).collect();
        assert_eq!(zero_based[0], 2);
        assert_eq!(zero_based[1], 7);
        assert_eq!(*zero_based.last().unwrap(), 997);
        for w in set.steps().windows(2) {
            assert_eq!(w[1] - w[0], 5);
        }
        assert!(set.steps().iter().all(|&t| (1..=1000).contains(&t)));
    }

    #[test]
    fn timestep_set_dense_and_sparse() {
        let dense = make_timestep_set(10, 1).unwrap();
        assert_eq!(dense.steps(), &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
        let sparse = make_timestep_set(10, 5).unwrap();
        assert_eq!(sparse.steps(), &[3, 8]);
        assert!(make_timestep_set(10, 11).is_err());
        assert!(make_timestep_set(10, 0).is_err());
    }

    #[test]
    fn toy_inversion_set_has_20_steps() {
        let set = make_timestep_set(100, 5).unwrap();
        assert_eq!(set.len(), 20);
        assert_eq!(set.steps()[0], 3);
        assert_eq!(*set.steps().last().unwrap(), 98);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let set = make_timestep_set(100, 5).unwrap();
        let mut r1 = ChaCha12Rng::seed_from_u64(99);
        let mut r2 = ChaCha12Rng::seed_from_u64(99);
        let t1: Vec<usize> = (0..16).map(|_| sample_timestep(&set, &mut r1)).collect();
        let t2: Vec<usize> = (0..16).map(|_| sample_timestep(&set, &mut r2)).collect();
        assert_eq!(t1, t2);
        let n1 = sample_standard_normal(&[4, 4], &mut r1);
        let n2 = sample_standard_normal(&[4, 4], &mut r2);
        assert_eq!(n1, n2);
    }
}

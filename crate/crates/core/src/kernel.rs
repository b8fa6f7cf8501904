//! Squared-exponential kernel with per-axis length scales.
//!
//! k(xi, xj) = σ_f² exp(−½ (xi − xj)ᵀ L⁻² (xi − xj)) + [i = j] σ_y²
//!
//! The observation-noise term is only ever placed on the diagonal of the
//! training Gram matrix. Cross-covariances and prior variances at query points
//! use the smooth part alone.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Diagonal jitter added to the Gram matrix when the noise variance is tiny.
pub const JITTER: f64 = 1e-8;

/// Θ = {l, σ_f², σ_y²}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Hyperparameters {
    pub fn new(length_scales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let theta = Self {
            length_scales,
            signal_variance,
            noise_variance,
        };
        theta.validate()?;
        Ok(theta)
    }

    /// Same length scale on every axis.
    pub fn isotropic(dim: usize, length_scale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        Self::new(vec![length_scale; dim], signal_variance, noise_variance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_scales.is_empty() {
            return Err(Error::InvalidHyperparameters("no length scales".into()));
        }
        if let Some(l) = self.length_scales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidHyperparameters(format!(
                "length scale {l} is not strictly positive"
            )));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::InvalidHyperparameters(format!(
                "signal variance {} is not strictly positive",
                self.signal_variance
            )));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::InvalidHyperparameters(format!(
                "noise variance {} is negative",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    /// Diagonal of L⁻².
    pub fn inv_sq_length_scales(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.length_scales.iter().map(|l| 1.0 / (l * l)))
    }

    /// Diagonal of L².
    pub fn sq_length_scales(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.length_scales.iter().map(|l| l * l))
    }

    /// Value added to every Gram diagonal entry on top of σ_f²: σ_y², or the
    /// jitter floor when σ_y² is below it.
    pub fn diagonal_noise(&self) -> f64 {
        if self.noise_variance < JITTER {
            self.noise_variance + JITTER
        } else {
            self.noise_variance
        }
    }

    /// Log-space parameter vector [log l_1 .. log l_n, log σ_f², log σ_y²].
    pub fn to_log_params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.length_scales.iter().map(|l| l.ln()).collect();
        p.push(self.signal_variance.ln());
        p.push(self.noise_variance.max(f64::MIN_POSITIVE).ln());
        p
    }

    pub fn from_log_params(p: &[f64]) -> Result<Self> {
        if p.len() < 3 {
            return Err(Error::InvalidHyperparameters("log-parameter vector too short".into()));
        }
        let n = p.len() - 2;
        Self::new(p[..n].iter().map(|v| v.exp()).collect(), p[n].exp(), p[n + 1].exp())
    }
}

/// Smooth part of the kernel without dimension checks.
#[inline]
pub(crate) fn sq_exp(xi: &DVector<f64>, xj: &DVector<f64>, theta: &Hyperparameters) -> f64 {
    let mut s = 0.0;
    for ((a, b), l) in xi.iter().zip(xj.iter()).zip(theta.length_scales.iter()) {
        let d = (a - b) / l;
        s += d * d;
    }
    theta.signal_variance * (-0.5 * s).exp()
}

fn check_pair(xi: &DVector<f64>, xj: &DVector<f64>, theta: &Hyperparameters) -> Result<()> {
    check_dim(theta.dim(), xi.len(), "kernel first argument")?;
    check_dim(theta.dim(), xj.len(), "kernel second argument")
}

/// Kernel value, with the noise term added when `same_index` is set.
pub fn kernel_eval(xi: &DVector<f64>, xj: &DVector<f64>, theta: &Hyperparameters, same_index: bool) -> Result<f64> {
    check_pair(xi, xj, theta)?;
    let noise = if same_index { theta.noise_variance } else { 0.0 };
    Ok(sq_exp(xi, xj, theta) + noise)
}

/// ∂k(xi, x)/∂x at x = xq, i.e. k(xi, xq) · L⁻² (xi − xq).
pub fn kernel_grad(xi: &DVector<f64>, xq: &DVector<f64>, theta: &Hyperparameters) -> Result<DVector<f64>> {
    check_pair(xi, xq, theta)?;
    Ok(grad_unchecked(xi, xq, theta, sq_exp(xi, xq, theta)))
}

#[inline]
pub(crate) fn grad_unchecked(xi: &DVector<f64>, xq: &DVector<f64>, theta: &Hyperparameters, k: f64) -> DVector<f64> {
    DVector::from_iterator(
        xi.len(),
        xi.iter()
            .zip(xq.iter())
            .zip(theta.length_scales.iter())
            .map(|((a, b), l)| k * (a - b) / (l * l)),
    )
}

/// ∂²k(xi, x)/∂x² at x = xq, i.e. k · (L⁻²δδᵀL⁻² − L⁻²) with δ = xi − xq.
pub fn kernel_hess(xi: &DVector<f64>, xq: &DVector<f64>, theta: &Hyperparameters) -> Result<DMatrix<f64>> {
    check_pair(xi, xq, theta)?;
    Ok(hess_unchecked(xi, xq, theta, sq_exp(xi, xq, theta)))
}

#[inline]
pub(crate) fn hess_unchecked(xi: &DVector<f64>, xq: &DVector<f64>, theta: &Hyperparameters, k: f64) -> DMatrix<f64> {
    let n = xi.len();
    let w = theta.inv_sq_length_scales();
    let s = DVector::from_iterator(n, (0..n).map(|a| w[a] * (xi[a] - xq[a])));
    let mut h = &s * s.transpose();
    for a in 0..n {
        h[(a, a)] -= w[a];
    }
    h * k
}

/// Gradient of k(xi, xj) (noise term included when `same_index`) with respect
/// to the log-space parameters, ordered as in [`Hyperparameters::to_log_params`].
pub fn kernel_log_param_grad(
    xi: &DVector<f64>,
    xj: &DVector<f64>,
    theta: &Hyperparameters,
    same_index: bool,
) -> Result<Vec<f64>> {
    check_pair(xi, xj, theta)?;
    let k = sq_exp(xi, xj, theta);
    let mut g: Vec<f64> = xi
        .iter()
        .zip(xj.iter())
        .zip(theta.length_scales.iter())
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            k * d * d
        })
        .collect();
    g.push(k);
    g.push(if same_index { theta.noise_variance } else { 0.0 });
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{central_difference_gradient, central_difference_jacobian};
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn theta2() -> Hyperparameters {
        Hyperparameters::new(vec![0.1, 0.1], 1.0, 1e-4).unwrap()
    }

    #[test]
    fn eval_at_coincident_points() {
        let x = v(&[0.3, -0.2]);
        assert!((kernel_eval(&x, &x, &theta2(), true).unwrap() - 1.0001).abs() < 1e-15);
        assert_eq!(kernel_eval(&x, &x, &theta2(), false).unwrap(), 1.0);
    }

    #[test]
    fn eval_unit_mahalanobis_distance() {
        let k = kernel_eval(&v(&[0.0, 0.0]), &v(&[0.1, 0.0]), &theta2(), false).unwrap();
        assert!((k - 0.606531).abs() < 1e-6);
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn grad_hand_value() {
        let g = kernel_grad(&v(&[0.1, 0.0]), &v(&[0.0, 0.0]), &theta2()).unwrap();
        assert!((g[0] - 0.1 * (-0.5f64).exp() / 0.01).abs() < 1e-12);
        assert!((g[0] - 6.06531).abs() < 1e-5);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn grad_vanishes_at_peak() {
        let x = v(&[0.2, 0.4]);
        assert_eq!(kernel_grad(&x, &x, &theta2()).unwrap(), DVector::zeros(2));
    }

    #[test]
    fn hess_at_peak() {
        let theta = Hyperparameters::new(vec![0.2, 0.5], 2.0, 0.0).unwrap();
        let x = v(&[0.1, 0.1]);
        let h = kernel_hess(&x, &x, &theta).unwrap();
        assert!((h[(0, 0)] + 2.0 / 0.04).abs() < 1e-12);
        assert!((h[(1, 1)] + 2.0 / 0.25).abs() < 1e-12);
        assert_eq!(h[(0, 1)], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let r = kernel_eval(&v(&[0.0]), &v(&[0.0, 1.0]), &theta2(), false);
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
        assert!(kernel_grad(&v(&[0.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0]), &theta2()).is_err());
        assert!(kernel_hess(&v(&[0.0]), &v(&[0.0]), &theta2()).is_err());
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(Hyperparameters::new(vec![0.0], 1.0, 0.0).is_err());
        assert!(Hyperparameters::new(vec![1.0], 0.0, 0.0).is_err());
        assert!(Hyperparameters::new(vec![1.0], 1.0, -1e-3).is_err());
        assert!(Hyperparameters::new(vec![], 1.0, 0.0).is_err());
    }

    #[test]
    fn log_params_round_trip() {
        let theta = Hyperparameters::new(vec![0.3, 1.7], 0.4, 1e-3).unwrap();
        let back = Hyperparameters::from_log_params(&theta.to_log_params()).unwrap();
        for (a, b) in theta.length_scales.iter().zip(&back.length_scales) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((back.noise_variance - 1e-3).abs() < 1e-17);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (1usize..5).prop_flat_map(|n| {
            (
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(0.2f64..1.5, n),
                0.1f64..3.0,
            )
        })
    }

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / scale.max(1e-12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn eval_is_symmetric((xi, xj, ls, sf) in arb_case()) {
            let theta = Hyperparameters::new(ls, sf, 0.01).unwrap();
            let (a, b) = (v(&xi), v(&xj));
            prop_assert_eq!(kernel_eval(&a, &b, &theta, false).unwrap(), kernel_eval(&b, &a, &theta, false).unwrap());
        }

        #[test]
        fn grad_matches_finite_difference((xi, xq, ls, sf) in arb_case()) {
            let theta = Hyperparameters::new(ls.clone(), sf, 0.0).unwrap();
            let xi = v(&xi);
            let g = kernel_grad(&xi, &v(&xq), &theta).unwrap();
            let steps: Vec<f64> = ls.iter().map(|l| 1e-5 * l).collect();
            let fd = central_difference_gradient(|x| sq_exp(&xi, x, &theta), &v(&xq), &steps);
            let scale = g.amax().max(fd.amax());
            for k in 0..g.len() {
                prop_assert!(rel_err(g[k], fd[k], scale) <= 1e-6, "k={} g={} fd={}", k, g[k], fd[k]);
            }
        }

        #[test]
        fn hess_matches_finite_difference((xi, xq, ls, sf) in arb_case()) {
            let theta = Hyperparameters::new(ls.clone(), sf, 0.0).unwrap();
            let xi = v(&xi);
            let h = kernel_hess(&xi, &v(&xq), &theta).unwrap();
            prop_assert_eq!((&h - h.transpose()).amax(), 0.0);
            let steps: Vec<f64> = ls.iter().map(|l| 1e-5 * l).collect();
            let fd = central_difference_jacobian(|x| kernel_grad(&xi, x, &theta).unwrap(), &v(&xq), &steps);
            let scale = h.amax().max(fd.amax());
            prop_assert!((&h - &fd).amax() / scale <= 1e-5);
        }

        #[test]
        fn log_param_grad_matches_finite_difference((xi, xj, ls, sf) in arb_case(), same in any::<bool>()) {
            let theta = Hyperparameters::new(ls, sf, 0.05).unwrap();
            let (a, b) = (v(&xi), v(&xj));
            let g = kernel_log_param_grad(&a, &b, &theta, same).unwrap();
            let p0 = theta.to_log_params();
            for k in 0..p0.len() {
                let h = 1e-6;
                let mut p = p0.clone();
                p[k] += h;
                let up = kernel_eval(&a, &b, &Hyperparameters::from_log_params(&p).unwrap(), same).unwrap();
                p[k] -= 2.0 * h;
                let dn = kernel_eval(&a, &b, &Hyperparameters::from_log_params(&p).unwrap(), same).unwrap();
                let fd = (up - dn) / (2.0 * h);
                prop_assert!((g[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn gram_matrix_is_positive_definite() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..40 {
            let n = 1 + trial % 3;
            let count = 1 + rng.random_range(0..50);
            let ls: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let theta = Hyperparameters::new(ls, rng.random_range(0.1..2.0), rng.random_range(1e-4..1e-2)).unwrap();
            let pts: Vec<DVector<f64>> = (0..count)
                .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let gram = DMatrix::from_fn(count, count, |i, j| kernel_eval(&pts[i], &pts[j], &theta, i == j).unwrap());
            assert_eq!((&gram - gram.transpose()).amax(), 0.0);
            assert!(gram.cholesky().is_some(), "trial {trial}");
        }
    }
}

//! Online GP regression over gated safety samples.
//!
//! The model keeps K̄⁻¹ and β = K̄⁻¹y up to date as samples are appended, so a
//! query costs O(N²) for the variance and O(N) for the mean. A Cholesky
//! factor of K̄ grows alongside the inverse: the bordering vector K̄⁻¹b is
//! taken from it rather than from the inverse itself, which would feed the
//! inverse's own rounding error back in through the small Schur pivot.

mod dataset;
mod likelihood;
mod shared;

pub use dataset::Dataset;
pub use likelihood::{fit_hyperparameters, log_marginal_likelihood, log_marginal_likelihood_grad, FitOptions};
pub use shared::SharedModel;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{sq_exp, Hyperparameters};

/// Smallest Schur-complement pivot accepted when bordering the inverse.
pub const MIN_PIVOT: f64 = 1e-12;

/// Negative variances above this are rounding noise and clamp to zero.
pub const VARIANCE_CLAMP: f64 = -1e-10;

#[derive(Debug, Clone)]
pub struct GpModel {
    dataset: Dataset,
    theta: Hyperparameters,
    gram_inverse: DMatrix<f64>,
    /// Lower-triangular L with LLᵀ = K̄.
    factor: DMatrix<f64>,
    beta: DVector<f64>,
}

impl GpModel {
    /// Empty model.
    pub fn new(theta: Hyperparameters, capacity: usize, tau: f64) -> Result<Self> {
        theta.validate()?;
        let dataset = Dataset::new(theta.dim(), capacity, tau)?;
        Ok(Self {
            dataset,
            theta,
            gram_inverse: DMatrix::zeros(0, 0),
            factor: DMatrix::zeros(0, 0),
            beta: DVector::zeros(0),
        })
    }

    /// Model over an existing dataset; factorizes the Gram matrix directly.
    pub fn from_dataset(dataset: Dataset, theta: Hyperparameters) -> Result<Self> {
        theta.validate()?;
        check_dim(theta.dim(), dataset.dim(), "dataset dimension vs length scales")?;
        let mut model = Self {
            dataset,
            theta,
            gram_inverse: DMatrix::zeros(0, 0),
            factor: DMatrix::zeros(0, 0),
            beta: DVector::zeros(0),
        };
        model.rebuild()?;
        Ok(model)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn theta(&self) -> &Hyperparameters {
        &self.theta
    }

    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inverse
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.theta.dim()
    }

    /// K̄ = K + σ_y² I (with the jitter floor), assembled from the stored inputs.
    pub fn gram(&self) -> DMatrix<f64> {
        let x = self.dataset.inputs();
        let n = x.len();
        let noise = self.theta.diagonal_noise();
        DMatrix::from_fn(n, n, |i, j| {
            let k = sq_exp(&x[i], &x[j], &self.theta);
            if i == j {
                k + noise
            } else {
                k
            }
        })
    }

    /// Refactorize K̄ from scratch (Cholesky) and recompute β.
    pub fn rebuild(&mut self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            self.gram_inverse = DMatrix::zeros(0, 0);
            self.factor = DMatrix::zeros(0, 0);
            self.beta = DVector::zeros(0);
            return Ok(());
        }
        let chol = self
            .gram()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("Gram matrix"))?;
        self.gram_inverse = chol.inverse();
        self.factor = chol.unpack();
        self.recompute_beta();
        Ok(())
    }

    /// Replace the hyperparameters and refactorize.
    pub fn set_hyperparameters(&mut self, theta: Hyperparameters) -> Result<()> {
        theta.validate()?;
        check_dim(self.dim(), theta.dim(), "new hyperparameters")?;
        let previous = std::mem::replace(&mut self.theta, theta);
        if let Err(e) = self.rebuild() {
            self.theta = previous;
            self.rebuild()?;
            return Err(e);
        }
        Ok(())
    }

    /// β = L⁻ᵀL⁻¹y by two triangular solves.
    fn recompute_beta(&mut self) {
        let y = DVector::from_column_slice(self.dataset.targets());
        let z = self.factor.solve_lower_triangular(&y).expect("factor has a positive diagonal");
        self.beta = self.factor.tr_solve_lower_triangular(&z).expect("factor has a positive diagonal");
    }

    /// Append (x, y) if it clears the τ-gate and capacity; grows K̄⁻¹ by one
    /// bordering step. Returns `Ok(false)` when the sample is gated out and
    /// `Err(NearDuplicate)` when the new pivot collapses. The model is left
    /// untouched in both cases.
    pub fn try_add_sample(&mut self, x: &DVector<f64>, y: f64) -> Result<bool> {
        check_dim(self.dim(), x.len(), "sample input")?;
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample"));
        }
        if !self.dataset.admits(x) {
            return Ok(false);
        }
        let n = self.len();
        let b = self.cross_covariance(x);
        let c = self.theta.signal_variance + self.theta.diagonal_noise();
        // l = L⁻¹b, w = L⁻ᵀl = K̄⁻¹b, s = c − lᵀl.
        let l = self.factor.solve_lower_triangular(&b).expect("factor has a positive diagonal");
        let pivot = c - l.norm_squared();
        if !(pivot > MIN_PIVOT) {
            return Err(Error::NearDuplicate { pivot });
        }
        let w = self.factor.tr_solve_lower_triangular(&l).expect("factor has a positive diagonal");

        //  [ A  b ]⁻¹   [ A⁻¹ + wwᵀ/s   −w/s ]
        //  [ bᵀ c ]   = [ −wᵀ/s          1/s ],  w = A⁻¹b, s = c − bᵀw
        let mut inv = DMatrix::zeros(n + 1, n + 1);
        {
            let mut top = inv.view_mut((0, 0), (n, n));
            top.copy_from(&self.gram_inverse);
            top.ger(1.0 / pivot, &w, &w, 1.0);
        }
        for i in 0..n {
            inv[(i, n)] = -w[i] / pivot;
            inv[(n, i)] = -w[i] / pivot;
        }
        inv[(n, n)] = 1.0 / pivot;

        let mut factor = std::mem::take(&mut self.factor).resize(n + 1, n + 1, 0.0);
        for i in 0..n {
            factor[(n, i)] = l[i];
        }
        factor[(n, n)] = pivot.sqrt();

        self.dataset.push_unchecked(x.clone(), y);
        self.gram_inverse = inv;
        self.factor = factor;
        self.recompute_beta();
        Ok(true)
    }

    /// k(x_q) = [k(x_1, x_q), …, k(x_N, x_q)]ᵀ, noise-free.
    pub fn cross_covariance(&self, xq: &DVector<f64>) -> DVector<f64> {
        let x = self.dataset.inputs();
        DVector::from_iterator(x.len(), x.iter().map(|xi| sq_exp(xi, xq, &self.theta)))
    }

    pub(crate) fn check_query(&self, xq: &DVector<f64>) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        check_dim(self.dim(), xq.len(), "query point")
    }

    /// μ(x_q) = k(x_q)ᵀβ.
    pub fn posterior_mean(&self, xq: &DVector<f64>) -> Result<f64> {
        self.check_query(xq)?;
        Ok(self.cross_covariance(xq).dot(&self.beta))
    }

    /// σ²(x_q) = σ_f² − k(x_q)ᵀK̄⁻¹k(x_q).
    pub fn posterior_variance(&self, xq: &DVector<f64>) -> Result<f64> {
        self.check_query(xq)?;
        let k = self.cross_covariance(xq);
        let explained = k.dot(&(&self.gram_inverse * &k));
        clamp_variance(self.theta.signal_variance - explained)
    }

    /// Max-abs deviation of K̄⁻¹K̄ from the identity.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        (&self.gram_inverse * self.gram() - DMatrix::<f64>::identity(n, n)).amax()
    }
}

pub(crate) fn clamp_variance(v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= VARIANCE_CLAMP {
        Ok(0.0)
    } else {
        Err(Error::Corrupted(format!("posterior variance {v:e} is negative")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_inverse, DenseGp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn random_model(rng: &mut ChaCha8Rng, n_pts: usize, dim: usize) -> GpModel {
        let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..0.8)).collect();
        let theta = Hyperparameters::new(ls, rng.random_range(0.5..2.0), rng.random_range(1e-3..1e-1)).unwrap();
        let mut model = GpModel::new(theta, 500, 0.0).unwrap();
        while model.len() < n_pts {
            let x = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
            model.try_add_sample(&x, rng.random_range(-1.0..2.0)).unwrap();
        }
        model
    }

    #[test]
    fn first_sample_accepted() {
        let theta = Hyperparameters::isotropic(2, 0.1, 1.0, 1e-4).unwrap();
        let mut model = GpModel::new(theta, 10, 0.1).unwrap();
        assert!(model.try_add_sample(&v(&[0.3, 0.3]), 0.5).unwrap());
        assert_eq!(model.len(), 1);
    }

    #[test]
    fn tau_gate_rejects_close_sample() {
        let theta = Hyperparameters::isotropic(2, 0.1, 1.0, 1e-4).unwrap();
        let mut model = GpModel::new(theta, 10, 0.1).unwrap();
        assert!(model.try_add_sample(&v(&[0.0, 0.0]), 1.0).unwrap());
        assert!(!model.try_add_sample(&v(&[0.05, 0.0]), 1.0).unwrap());
        assert_eq!(model.len(), 1);
        assert!(model.try_add_sample(&v(&[0.1, 0.0]), 1.0).unwrap());
    }

    #[test]
    fn capacity_rejects_without_eviction() {
        let theta = Hyperparameters::isotropic(1, 0.1, 1.0, 1e-4).unwrap();
        let mut model = GpModel::new(theta, 2, 0.0).unwrap();
        assert!(model.try_add_sample(&v(&[0.0]), 1.0).unwrap());
        assert!(model.try_add_sample(&v(&[1.0]), 1.0).unwrap());
        assert!(!model.try_add_sample(&v(&[2.0]), 1.0).unwrap());
        assert_eq!(model.dataset().inputs()[0], v(&[0.0]));
    }

    #[test]
    fn exact_duplicate_is_absorbed_by_jitter() {
        // Noise-free kernel: the jitter floor keeps the bordering pivot at
        // about 2·JITTER, well above the rejection threshold.
        let theta = Hyperparameters::isotropic(1, 0.5, 1.0, 0.0).unwrap();
        let mut model = GpModel::new(theta, 10, 0.0).unwrap();
        model.try_add_sample(&v(&[0.2]), 1.0).unwrap();
        assert!(model.try_add_sample(&v(&[0.2]), 1.0).unwrap());
        assert!((model.gram_inverse()[(1, 1)] * 2.0 * crate::kernel::JITTER - 1.0).abs() < 1e-3);
        assert!((model.posterior_mean(&v(&[0.2])).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_sample_posterior() {
        let (sf2, sn2, y1) = (1.5, 0.2, 0.8);
        let theta = Hyperparameters::isotropic(2, 0.3, sf2, sn2).unwrap();
        let mut model = GpModel::new(theta, 10, 0.0).unwrap();
        let x1 = v(&[0.1, -0.2]);
        model.try_add_sample(&x1, y1).unwrap();
        let mean = model.posterior_mean(&x1).unwrap();
        assert!((mean - sf2 * y1 / (sf2 + sn2)).abs() < 1e-14);
        let var = model.posterior_variance(&x1).unwrap();
        assert!((var - sf2 * sn2 / (sf2 + sn2)).abs() < 1e-14);
    }

    #[test]
    fn noise_free_limit_interpolates() {
        let theta = Hyperparameters::isotropic(1, 0.3, 1.0, 0.0).unwrap();
        let mut model = GpModel::new(theta, 10, 0.0).unwrap();
        model.try_add_sample(&v(&[0.4]), 0.7).unwrap();
        assert!((model.posterior_mean(&v(&[0.4])).unwrap() - 0.7).abs() < 1e-7);
    }

    #[test]
    fn variance_far_from_data_is_prior() {
        let theta = Hyperparameters::isotropic(2, 0.1, 1.3, 1e-4).unwrap();
        let mut model = GpModel::new(theta, 10, 0.0).unwrap();
        model.try_add_sample(&v(&[0.0, 0.0]), 1.0).unwrap();
        model.try_add_sample(&v(&[0.1, 0.0]), 1.0).unwrap();
        let var = model.posterior_variance(&v(&[1.2, 0.0])).unwrap();
        assert!((var - 1.3).abs() < 1e-6);
    }

    #[test]
    fn empty_model_queries_fail() {
        let theta = Hyperparameters::isotropic(2, 0.1, 1.0, 1e-4).unwrap();
        let model = GpModel::new(theta, 10, 0.0).unwrap();
        assert!(matches!(model.posterior_mean(&v(&[0.0, 0.0])), Err(Error::EmptyDataset)));
        assert!(matches!(model.posterior_variance(&v(&[0.0, 0.0])), Err(Error::EmptyDataset)));
    }

    #[test]
    fn posterior_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let model = random_model(&mut rng, 10, 2);
            let dense = DenseGp::new(model.dataset().inputs(), model.dataset().targets(), model.theta());
            let xq = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            assert!((model.posterior_mean(&xq).unwrap() - dense.mean(&xq)).abs() < 1e-10);
            assert!((model.posterior_variance(&xq).unwrap() - dense.variance(&xq)).abs() < 1e-10);
        }
    }

    #[test]
    fn bordered_inverse_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(&mut rng, 20, 3);
        let direct = dense_inverse(model.dataset().inputs(), model.theta()).unwrap();
        assert!((model.gram_inverse() - direct).amax() <= 1e-8);
        assert!(model.inverse_residual() <= 1e-8);
        let y = DVector::from_column_slice(model.dataset().targets());
        assert!((model.beta() - model.gram_inverse() * y).amax() < 1e-12);
    }

    #[test]
    fn rebuild_agrees_with_bordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&mut rng, 30, 2);
        let mut rebuilt = model.clone();
        rebuilt.rebuild().unwrap();
        assert!((model.gram_inverse() - rebuilt.gram_inverse()).amax() < 1e-8);
    }

    #[test]
    fn jitter_keeps_noise_free_gram_invertible() {
        let theta = Hyperparameters::isotropic(1, 1.0, 1.0, 0.0).unwrap();
        let mut model = GpModel::new(theta, 10, 0.0).unwrap();
        for i in 0..5 {
            model.try_add_sample(&v(&[i as f64 * 0.7]), 0.0).unwrap();
        }
        assert!(model.inverse_residual() < 1e-6);
    }

    #[test]
    fn hyperparameter_swap_rebuilds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = random_model(&mut rng, 15, 2);
        model
            .set_hyperparameters(Hyperparameters::isotropic(2, 0.3, 0.7, 0.01).unwrap())
            .unwrap();
        assert!(model.inverse_residual() < 1e-8);
        assert!(model.set_hyperparameters(Hyperparameters::isotropic(3, 0.3, 0.7, 0.01).unwrap()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn gated_inputs_stay_tau_apart(seed in any::<u64>(), tau in 0.02f64..0.3) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let theta = Hyperparameters::isotropic(2, 0.2, 1.0, 1e-4).unwrap();
                let mut model = GpModel::new(theta, 300, tau).unwrap();
                for _ in 0..200 {
                    let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                    let _ = model.try_add_sample(&x, rng.random_range(-1.0..1.0)).unwrap();
                }
                let xs = model.dataset().inputs();
                for i in 0..xs.len() {
                    for j in 0..i {
                        prop_assert!((&xs[i] - &xs[j]).norm() >= tau);
                    }
                }
            }

            #[test]
            fn variance_never_exceeds_prior(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let model = random_model(&mut rng, 12, 2);
                for _ in 0..20 {
                    let xq = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
                    let var = model.posterior_variance(&xq).unwrap();
                    prop_assert!(var <= model.theta().signal_variance + 1e-10);
                    prop_assert!(var >= 0.0);
                }
            }
        }
    }
}

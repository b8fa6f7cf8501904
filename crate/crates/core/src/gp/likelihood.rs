//! Log marginal likelihood, its log-parameter gradient, and a restarted
//! gradient-ascent fit.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, GpModel};
use crate::error::{Error, Result};
use crate::kernel::{kernel_log_param_grad, sq_exp, Hyperparameters};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Box on the log-space parameters so the ascent cannot wander into
/// numerically meaningless regions.
const LOG_LENGTH_BOUNDS: (f64, f64) = (-6.9, 6.9);
const LOG_SIGNAL_BOUNDS: (f64, f64) = (-18.4, 13.8);
const LOG_NOISE_BOUNDS: (f64, f64) = (-23.0, 9.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub iterations: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Upper bound on every length scale. Smooth metrics otherwise drive
    /// l far past the sensing range and the Gram matrix towards singularity.
    pub max_length_scale: Option<f64>,
    /// Lower bound on σ_y².
    pub min_noise_variance: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 100,
            restarts: 5,
            seed: 0,
            max_length_scale: None,
            min_noise_variance: None,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_length_scale.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument("max_length_scale must be positive".into()));
        }
        if self.min_noise_variance.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("min_noise_variance must be positive".into()));
        }
        Ok(())
    }

    fn log_bounds(&self) -> LogBounds {
        LogBounds {
            length: (LOG_LENGTH_BOUNDS.0, self.max_length_scale.map_or(LOG_LENGTH_BOUNDS.1, f64::ln)),
            signal: LOG_SIGNAL_BOUNDS,
            noise: (self.min_noise_variance.map_or(LOG_NOISE_BOUNDS.0, f64::ln), LOG_NOISE_BOUNDS.1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LogBounds {
    length: (f64, f64),
    signal: (f64, f64),
    noise: (f64, f64),
}

impl LogBounds {
    fn clamp(&self, p: &mut [f64]) {
        let n = p.len() - 2;
        for v in &mut p[..n] {
            *v = v.clamp(self.length.0, self.length.1.max(self.length.0));
        }
        p[n] = p[n].clamp(self.signal.0, self.signal.1);
        p[n + 1] = p[n + 1].clamp(self.noise.0.min(self.noise.1), self.noise.1);
    }
}

fn gram(ds: &Dataset, theta: &Hyperparameters) -> DMatrix<f64> {
    let x = ds.inputs();
    let n = x.len();
    let noise = theta.diagonal_noise();
    DMatrix::from_fn(n, n, |i, j| sq_exp(&x[i], &x[j], theta) + if i == j { noise } else { 0.0 })
}

/// Value and log-parameter gradient from a fresh Cholesky factorization.
pub(crate) fn lml_with_grad(ds: &Dataset, theta: &Hyperparameters, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let chol = gram(ds, theta)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("Gram matrix"))?;
    let y = DVector::from_column_slice(ds.targets());
    let alpha = chol.solve(&y);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let value = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;
    if !want_grad {
        return Ok((value, Vec::new()));
    }

    // ∂L/∂θ = ½ tr((ααᵀ − K̄⁻¹) ∂K̄/∂θ)
    let w = &alpha * alpha.transpose() - chol.inverse();
    let x = ds.inputs();
    let mut grad = vec![0.0; theta.dim() + 2];
    for i in 0..n {
        for j in 0..=i {
            let dk = kernel_log_param_grad(&x[i], &x[j], theta, i == j)?;
            let weight = if i == j { 0.5 * w[(i, i)] } else { w[(i, j)] };
            for (g, d) in grad.iter_mut().zip(dk) {
                *g += weight * d;
            }
        }
    }
    Ok((value, grad))
}

/// log p(y | X, Θ) = −½yᵀK̄⁻¹y − ½log|K̄| − (N/2)log 2π.
pub fn log_marginal_likelihood(model: &GpModel) -> Result<f64> {
    Ok(lml_with_grad(model.dataset(), model.theta(), false)?.0)
}

/// Gradient of the log marginal likelihood with respect to
/// [log l_1 .. log l_n, log σ_f², log σ_y²].
pub fn log_marginal_likelihood_grad(model: &GpModel) -> Result<Vec<f64>> {
    Ok(lml_with_grad(model.dataset(), model.theta(), true)?.1)
}

fn ascend(ds: &Dataset, start: Vec<f64>, iterations: usize, bounds: LogBounds) -> Option<(f64, Vec<f64>)> {
    let eval = |p: &[f64]| {
        Hyperparameters::from_log_params(p)
            .and_then(|theta| lml_with_grad(ds, &theta, true))
            .ok()
    };
    let mut p = start;
    bounds.clamp(&mut p);
    let (mut f, mut g) = eval(&p)?;
    let mut step = 0.5;
    for _ in 0..iterations {
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-9 || !gnorm.is_finite() {
            break;
        }
        let mut accepted = false;
        while step > 1e-8 {
            let mut cand: Vec<f64> = p.iter().zip(&g).map(|(pi, gi)| pi + step * gi / gnorm).collect();
            bounds.clamp(&mut cand);
            match eval(&cand) {
                Some((fc, gc)) if fc > f => {
                    p = cand;
                    f = fc;
                    g = gc;
                    step = (step * 1.5).min(2.0);
                    accepted = true;
                    break;
                }
                // Cholesky failure or no improvement: backtrack.
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    Some((f, p))
}

/// Maximize the log marginal likelihood by gradient ascent in log-parameter
/// space from the current hyperparameters plus `restarts − 1` random
/// perturbations of them, all clamped into the option bounds. The result
/// never scores below the starting point; if that point lies outside the
/// bounds and nothing inside beats it, it is returned unchanged.
pub fn fit_hyperparameters(model: &GpModel, options: &FitOptions) -> Result<Hyperparameters> {
    options.validate()?;
    let bounds = options.log_bounds();
    let ds = model.dataset();
    if ds.len() < 2 {
        return Err(Error::InvalidArgument("hyperparameter fitting needs at least two samples".into()));
    }
    let initial = model.theta().clone();
    let initial_value = lml_with_grad(ds, &initial, false)?.0;
    let base = initial.to_log_params();

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..options.restarts.max(1) {
        let start: Vec<f64> = if r == 0 {
            base.clone()
        } else {
            base.iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + z
                })
                .collect()
        };
        if let Some((f, p)) = ascend(ds, start, options.iterations, bounds) {
            if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
                best = Some((f, p));
            }
        }
    }
    match best {
        Some((f, p)) if f > initial_value => Hyperparameters::from_log_params(&p),
        _ => Ok(initial),
    }
}

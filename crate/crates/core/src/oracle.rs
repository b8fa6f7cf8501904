//! Independent reference computations used to check the closed-form paths:
//! finite differences, dense-solve GP posteriors, Monte-Carlo moments of the
//! posterior under a Gaussian query, and a brute-force KKT enumeration for
//! small QPs.
//!
//! Nothing in here calls into the maintained inverse, the analytic kernel
//! derivatives, or the rectifier it is meant to check.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::kernel::Hyperparameters;

/// Central-difference gradient of a scalar function with per-axis steps.
pub fn central_difference_gradient<F>(f: F, x: &DVector<f64>, steps: &[f64]) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += steps[k];
        xm[k] -= steps[k];
        g[k] = (f(&xp) - f(&xm)) / (2.0 * steps[k]);
    }
    g
}

/// Central-difference Jacobian of a vector function; column k holds ∂f/∂x_k.
pub fn central_difference_jacobian<F>(f: F, x: &DVector<f64>, steps: &[f64]) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += steps[k];
        xm[k] -= steps[k];
        let col = (f(&xp) - f(&xm)) / (2.0 * steps[k]);
        j.set_column(k, &col);
    }
    j
}

/// Plain squared-exponential evaluation written out independently of
/// `kernel::sq_exp`.
fn se(a: &DVector<f64>, b: &DVector<f64>, theta: &Hyperparameters) -> f64 {
    let r2: f64 = (0..a.len())
        .map(|k| ((a[k] - b[k]) / theta.length_scales[k]).powi(2))
        .sum();
    theta.signal_variance * (-0.5 * r2).exp()
}

/// Gram matrix K + (σ_y² or jitter) I built from scratch.
pub fn dense_gram(inputs: &[DVector<f64>], theta: &Hyperparameters) -> DMatrix<f64> {
    let n = inputs.len();
    let noise = theta.diagonal_noise();
    DMatrix::from_fn(n, n, |i, j| {
        se(&inputs[i], &inputs[j], theta) + if i == j { noise } else { 0.0 }
    })
}

/// Inverse of the rebuilt Gram matrix via LU.
pub fn dense_inverse(inputs: &[DVector<f64>], theta: &Hyperparameters) -> Option<DMatrix<f64>> {
    dense_gram(inputs, theta).lu().try_inverse()
}

/// Posterior mean and variance from a dense LU solve, without any cached
/// inverse or weight vector.
pub struct DenseGp {
    inputs: Vec<DVector<f64>>,
    theta: Hyperparameters,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    weights: DVector<f64>,
}

impl DenseGp {
    pub fn new(inputs: &[DVector<f64>], targets: &[f64], theta: &Hyperparameters) -> Self {
        let lu = dense_gram(inputs, theta).lu();
        let weights = lu
            .solve(&DVector::from_column_slice(targets))
            .expect("dense Gram matrix is singular");
        Self {
            inputs: inputs.to_vec(),
            theta: theta.clone(),
            lu,
            weights,
        }
    }

    fn cross(&self, xq: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|xi| se(xi, xq, &self.theta)))
    }

    pub fn mean(&self, xq: &DVector<f64>) -> f64 {
        self.cross(xq).dot(&self.weights)
    }

    pub fn variance(&self, xq: &DVector<f64>) -> f64 {
        let k = self.cross(xq);
        let z = self.lu.solve(&k).expect("dense Gram matrix is singular");
        self.theta.signal_variance - k.dot(&z)
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    /// |other − value| in units of the standard error.
    pub fn z_score(&self, other: f64) -> f64 {
        (other - self.value).abs() / self.std_error.max(f64::MIN_POSITIVE)
    }
}

/// Sampling estimates of E[μ(x)] and Var[μ(x)] + E[σ²(x)] for x ~ N(mean, cov).
#[derive(Debug, Clone, Copy)]
pub struct MomentEstimates {
    pub mean: Estimate,
    pub variance: Estimate,
}

/// Draw `draws` query points from N(mean, cov) and push each through the
/// deterministic posterior of a dense-solve GP.
pub fn monte_carlo_moments<R: Rng + ?Sized>(
    gp: &DenseGp,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    draws: usize,
    rng: &mut R,
) -> MomentEstimates {
    let n = mean.len();
    let chol = cov
        .clone()
        .cholesky()
        .expect("Monte-Carlo covariance must be positive definite");
    let l = chol.l();

    let mut draws_out = Vec::with_capacity(draws);
    let mut z = DVector::zeros(n);
    for _ in 0..draws {
        for k in 0..n {
            z[k] = StandardNormal.sample(rng);
        }
        let x = mean + &l * &z;
        draws_out.push((gp.mean(&x), gp.variance(&x)));
    }
    let m = draws as f64;
    let mean_mu = draws_out.iter().map(|d| d.0).sum::<f64>() / m;
    let ss_mu: f64 = draws_out.iter().map(|d| (d.0 - mean_mu).powi(2)).sum();
    let mean_var = draws_out.iter().map(|d| d.1).sum::<f64>() / m;

    // Per-draw contribution to the total-variance target: (μ − μ̄)² + σ².
    let mean_t = ss_mu / m + mean_var;
    let var_t = draws_out
        .iter()
        .map(|(mu, var)| ((mu - mean_mu).powi(2) + var - mean_t).powi(2))
        .sum::<f64>()
        / (m - 1.0);

    MomentEstimates {
        mean: Estimate {
            value: mean_mu,
            std_error: (ss_mu / (m - 1.0) / m).sqrt(),
        },
        variance: Estimate {
            value: ss_mu / (m - 1.0) + mean_var,
            std_error: (var_t / m).sqrt(),
        },
    }
}

/// Result of the brute-force QP oracle.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub objective: f64,
}

/// Solve min ½‖u − u_nom‖² s.t. G u ≥ h by enumerating active sets and
/// solving the KKT system of each one densely. Exponential in the number of
/// rows; only meant for a handful of constraints.
pub fn kkt_enumeration_qp(u_nom: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> Option<QpSolution> {
    let m = u_nom.len();
    let rows = g.nrows();
    assert!(rows < 20, "enumeration oracle is exponential in rows");
    let tol = 1e-10;
    let mut best: Option<QpSolution> = None;
    for mask in 0u32..(1u32 << rows) {
        let active: Vec<usize> = (0..rows).filter(|r| mask & (1 << r) != 0).collect();
        let p = active.len();
        if p > m {
            continue;
        }
        // [ I   −Gₐᵀ ] [u]   [u_nom]
        // [ Gₐ   0   ] [λ] = [hₐ   ]
        let dim = m + p;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for i in 0..m {
            kkt[(i, i)] = 1.0;
            rhs[i] = u_nom[i];
        }
        for (c, &r) in active.iter().enumerate() {
            for i in 0..m {
                kkt[(i, m + c)] = -g[(r, i)];
                kkt[(m + c, i)] = g[(r, i)];
            }
            rhs[m + c] = h[r];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let u = sol.rows(0, m).into_owned();
        let multipliers_ok = (0..p).all(|c| sol[m + c] >= -tol);
        let scale = 1.0 + h.amax();
        let primal_ok = (0..rows).all(|r| (g.row(r) * &u)[0] >= h[r] - tol * scale);
        if multipliers_ok && primal_ok {
            let objective = 0.5 * (&u - u_nom).norm_squared();
            if best.as_ref().is_none_or(|b| objective < b.objective) {
                best = Some(QpSolution { u, objective });
            }
        }
    }
    best
}

//! The Gaussian control barrier function
//!
//! h_gp(x) = w_μ μ(x) − w_σ² σ²(x)
//!
//! with closed-form gradient and Hessian, and the same quantities when the
//! query point is itself Gaussian, x ~ N(m, Σ), using exact moment matching
//! for the squared-exponential kernel.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gp::{clamp_variance, GpModel};
use crate::kernel::sq_exp;

/// Noisy-query variances below this are treated as a broken model.
pub const NOISY_VARIANCE_FLOOR: f64 = -1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcbfWeights {
    pub mean_weight: f64,
    pub variance_weight: f64,
}

impl Default for GcbfWeights {
    fn default() -> Self {
        Self {
            mean_weight: 1.0,
            variance_weight: 1.0,
        }
    }
}

impl GcbfWeights {
    pub fn new(mean_weight: f64, variance_weight: f64) -> Result<Self> {
        let w = Self {
            mean_weight,
            variance_weight,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean_weight.is_finite() || !(self.variance_weight.is_finite() && self.variance_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weights ({}, {}) must be finite with a non-negative variance weight",
                self.mean_weight, self.variance_weight
            )));
        }
        Ok(())
    }
}

/// Query distribution N(mean, covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        check_dim(n, covariance.nrows(), "covariance rows")?;
        check_dim(n, covariance.ncols(), "covariance columns")?;
        if (&covariance - covariance.transpose()).amax() > 1e-12 * (1.0 + covariance.amax()) {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let min_eig = covariance.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-12 {
            return Err(Error::InvalidArgument(format!(
                "covariance has negative eigenvalue {min_eig:e}"
            )));
        }
        Ok(Self { mean, covariance })
    }

    /// Point mass at `mean`.
    pub fn deterministic(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self {
            mean,
            covariance: DMatrix::zeros(n, n),
        }
    }

    /// Marginal over a subset of coordinates.
    pub fn marginal(&self, indices: &[usize]) -> Self {
        let k = indices.len();
        Self {
            mean: DVector::from_fn(k, |i, _| self.mean[indices[i]]),
            covariance: DMatrix::from_fn(k, k, |i, j| self.covariance[(indices[i], indices[j])]),
        }
    }
}

/// h with its gradient and Hessian at one query point. `mean` and `variance`
/// are the unweighted posterior components that produced `value`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyEvaluation {
    pub value: f64,
    pub mean: f64,
    pub variance: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl SafetyEvaluation {
    /// Lift an evaluation over a subset of state coordinates into the full
    /// state space; the other coordinates get zero gradient and curvature.
    pub fn embed(&self, state_dim: usize, indices: &[usize]) -> Result<Self> {
        check_dim(self.gradient.len(), indices.len(), "embedding indices")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= state_dim) {
            return Err(Error::InvalidArgument(format!("index {bad} outside state of dimension {state_dim}")));
        }
        let mut gradient = DVector::zeros(state_dim);
        let mut hessian = DMatrix::zeros(state_dim, state_dim);
        for (a, &ia) in indices.iter().enumerate() {
            gradient[ia] = self.gradient[a];
            for (b, &ib) in indices.iter().enumerate() {
                hessian[(ia, ib)] = self.hessian[(a, b)];
            }
        }
        Ok(Self {
            gradient,
            hessian,
            ..self.clone()
        })
    }

    fn assemble(
        weights: &GcbfWeights,
        mean: f64,
        variance: f64,
        grad_mean: DVector<f64>,
        grad_var: DVector<f64>,
        hess_mean: DMatrix<f64>,
        hess_var: DMatrix<f64>,
    ) -> Self {
        let (wm, wv) = (weights.mean_weight, weights.variance_weight);
        let hessian = hess_mean * wm - hess_var * wv;
        Self {
            value: wm * mean - wv * variance,
            mean,
            variance,
            gradient: grad_mean * wm - grad_var * wv,
            hessian: (&hessian + hessian.transpose()) * 0.5,
        }
    }
}

/// Deterministic-query Gaussian CBF with gradient and Hessian.
///
/// ∂μ/∂x = Jᵀβ and ∂σ²/∂x = −2Jᵀb with J = ∂k/∂x and b = K̄⁻¹k(x);
/// H_μ = Σ βᵢ ∂²kᵢ and H_σ² = −2JᵀK̄⁻¹J − 2Σ bᵢ ∂²kᵢ.
pub fn eval(model: &GpModel, weights: &GcbfWeights, xq: &DVector<f64>) -> Result<SafetyEvaluation> {
    model.check_query(xq)?;
    let theta = model.theta();
    let n = xq.len();
    let xs = model.dataset().inputs();
    let count = xs.len();
    let inv_l2 = theta.inv_sq_length_scales();

    let k = model.cross_covariance(xq);
    // Row i of J is kᵢ L⁻²(xᵢ − x).
    let jac = DMatrix::from_fn(count, n, |i, a| k[i] * inv_l2[a] * (xs[i][a] - xq[a]));
    let beta = model.beta();
    let b = model.gram_inverse() * &k;

    let mean = k.dot(beta);
    let variance = clamp_variance(theta.signal_variance - k.dot(&b))?;

    let grad_mean = jac.transpose() * beta;
    let grad_var = jac.transpose() * &b * -2.0;

    let hess_mean = weighted_kernel_hessian_sum(xs, xq, &k, beta, &inv_l2);
    let kinv_j = model.gram_inverse() * &jac;
    let hess_var = (jac.transpose() * kinv_j) * -2.0 - weighted_kernel_hessian_sum(xs, xq, &k, &b, &inv_l2) * 2.0;

    Ok(SafetyEvaluation::assemble(
        weights, mean, variance, grad_mean, grad_var, hess_mean, hess_var,
    ))
}

/// Σᵢ cᵢ ∂²k(xᵢ, x)/∂x² = L⁻²(Σ cᵢkᵢδᵢδᵢᵀ)L⁻² − (Σ cᵢkᵢ)L⁻²,  δᵢ = xᵢ − x.
fn weighted_kernel_hessian_sum(
    xs: &[DVector<f64>],
    xq: &DVector<f64>,
    k: &DVector<f64>,
    c: &DVector<f64>,
    inv_l2: &DVector<f64>,
) -> DMatrix<f64> {
    let n = xq.len();
    let mut outer = DMatrix::zeros(n, n);
    let mut total = 0.0;
    for (i, xi) in xs.iter().enumerate() {
        let w = c[i] * k[i];
        total += w;
        let d = xi - xq;
        outer.ger(w, &d, &d, 1.0);
    }
    let mut h = DMatrix::from_fn(n, n, |a, b| inv_l2[a] * outer[(a, b)] * inv_l2[b]);
    for a in 0..n {
        h[(a, a)] -= total * inv_l2[a];
    }
    h
}

/// σ_f² |Σ L⁻² + I|^(−1/2): the amplitude of every entry of the expected
/// cross-covariance vector q.
pub fn expected_kernel_coefficient(signal_variance: f64, length_scales: &[f64], covariance: &DMatrix<f64>) -> Result<f64> {
    let n = length_scales.len();
    check_dim(n, covariance.nrows(), "covariance")?;
    let a = DMatrix::from_fn(n, n, |i, j| {
        covariance[(i, j)] / (length_scales[j] * length_scales[j]) + if i == j { 1.0 } else { 0.0 }
    });
    let det = a.determinant();
    if !(det > 0.0) {
        return Err(Error::Singular("|ΣL⁻² + I|"));
    }
    Ok(signal_variance / det.sqrt())
}

/// Quantities shared by the noisy mean, variance and their derivatives.
struct MomentKernel {
    /// xᵢ − m
    diffs: Vec<DVector<f64>>,
    q: DVector<f64>,
    r_inv: DMatrix<f64>,
    v: DMatrix<f64>,
    /// 2L⁻² − (T + Tᵀ): ∂vᵢⱼ/∂m = vᵢⱼ M (zᵢⱼ − m)
    m_mat: DMatrix<f64>,
}

impl MomentKernel {
    fn new(model: &GpModel, state: &GaussianState) -> Result<Self> {
        model.check_query(&state.mean)?;
        check_dim(model.dim(), state.covariance.nrows(), "query covariance")?;
        let theta = model.theta();
        let n = model.dim();
        let mu = &state.mean;
        let sigma = &state.covariance;
        let l2 = DMatrix::from_diagonal(&theta.sq_length_scales());
        let inv_l2 = DMatrix::from_diagonal(&theta.inv_sq_length_scales());
        let eye = DMatrix::<f64>::identity(n, n);

        let r_inv = (sigma + &l2)
            .cholesky()
            .ok_or(Error::Singular("Σ + L²"))?
            .inverse();
        let coef = expected_kernel_coefficient(theta.signal_variance, &theta.length_scales, sigma)?;

        let xs = model.dataset().inputs();
        let diffs: Vec<DVector<f64>> = xs.iter().map(|xi| xi - mu).collect();
        let q = DVector::from_iterator(
            xs.len(),
            diffs.iter().map(|d| coef * (-0.5 * d.dot(&(&r_inv * d))).exp()),
        );

        // T = (Σ + ½L²)⁻¹ Σ L⁻²
        let s_inv = (sigma + &l2 * 0.5)
            .cholesky()
            .ok_or(Error::Singular("Σ + ½L²"))?
            .inverse();
        let t = &s_inv * sigma * &inv_l2;
        let det2 = (sigma * &inv_l2 * 2.0 + &eye).determinant();
        if !(det2 > 0.0) {
            return Err(Error::Singular("|2ΣL⁻² + I|"));
        }
        let m_mat = &inv_l2 * 2.0 - (&t + t.transpose());

        // vᵢⱼ = k(xᵢ,m) k(xⱼ,m) |2ΣL⁻²+I|^(−1/2) exp((zᵢⱼ − m)ᵀ T (zᵢⱼ − m)),
        // accumulated in log space so far-away pairs underflow cleanly.
        let log_k: Vec<f64> = xs.iter().map(|xi| sq_exp(xi, mu, theta).ln()).collect();
        let log_det = 0.5 * det2.ln();
        let count = xs.len();
        let mut v = DMatrix::zeros(count, count);
        for i in 0..count {
            for j in 0..=i {
                let e = (&diffs[i] + &diffs[j]) * 0.5;
                let val = (log_k[i] + log_k[j] - log_det + e.dot(&(&t * &e))).exp();
                v[(i, j)] = val;
                v[(j, i)] = val;
            }
        }
        Ok(Self {
            diffs,
            q,
            r_inv,
            v,
            m_mat,
        })
    }
}

/// The pieces of the moment-matched variance, so alternative closing terms
/// can be compared against sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentTerms {
    /// σ_f²
    pub prior: f64,
    /// tr(K̄⁻¹V)
    pub trace: f64,
    /// βᵀVβ
    pub beta_v_beta: f64,
    /// βᵀq, which is also the noisy posterior mean
    pub beta_q: f64,
}

impl MomentTerms {
    /// σ_f² − tr(K̄⁻¹V) + βᵀVβ − (βᵀq)² = Var[μ(x)] + E[σ²(x)].
    pub fn variance(&self) -> f64 {
        self.prior - self.trace + self.beta_v_beta - self.beta_q * self.beta_q
    }

    /// σ_f² − tr(K̄⁻¹V) + βᵀ(Vβ − q); does not reduce to the deterministic
    /// variance when Σ = 0.
    pub fn variance_linear_closing(&self) -> f64 {
        self.prior - self.trace + self.beta_v_beta - self.beta_q
    }
}

pub fn moment_terms(model: &GpModel, state: &GaussianState) -> Result<MomentTerms> {
    let mk = MomentKernel::new(model, state)?;
    let beta = model.beta();
    Ok(MomentTerms {
        prior: model.theta().signal_variance,
        trace: model.gram_inverse().component_mul(&mk.v).sum(),
        beta_v_beta: beta.dot(&(&mk.v * beta)),
        beta_q: beta.dot(&mk.q),
    })
}

/// Expected cross-covariance vector q with qᵢ = E[k(xᵢ, x)], x ~ N(m, Σ).
pub fn expected_cross_covariance(model: &GpModel, state: &GaussianState) -> Result<DVector<f64>> {
    Ok(MomentKernel::new(model, state)?.q)
}

/// V with vᵢⱼ = E[k(xᵢ, x) k(xⱼ, x)], x ~ N(m, Σ).
pub fn expected_kernel_products(model: &GpModel, state: &GaussianState) -> Result<DMatrix<f64>> {
    Ok(MomentKernel::new(model, state)?.v)
}

/// E[μ(x)] = qᵀβ.
pub fn noisy_mean(model: &GpModel, state: &GaussianState) -> Result<f64> {
    Ok(expected_cross_covariance(model, state)?.dot(model.beta()))
}

fn finish_noisy_variance(v: f64) -> Result<f64> {
    if v < NOISY_VARIANCE_FLOOR {
        Err(Error::Corrupted(format!("moment-matched variance {v:e} is negative")))
    } else {
        Ok(v.max(0.0))
    }
}

/// Moment-matched predictive variance Var[μ(x)] + E[σ²(x)].
pub fn noisy_variance(model: &GpModel, state: &GaussianState) -> Result<f64> {
    finish_noisy_variance(moment_terms(model, state)?.variance())
}

/// Gaussian CBF under a Gaussian query, differentiated with respect to the
/// query mean.
pub fn noisy_eval(model: &GpModel, weights: &GcbfWeights, state: &GaussianState) -> Result<SafetyEvaluation> {
    let mk = MomentKernel::new(model, state)?;
    let n = model.dim();
    let beta = model.beta();
    let count = model.len();

    // Mean: ∂qᵢ/∂m = qᵢ R⁻¹dᵢ,  ∂²qᵢ/∂m² = qᵢ(R⁻¹dᵢdᵢᵀR⁻¹ − R⁻¹).
    let mut first = DVector::zeros(n);
    let mut second = DMatrix::zeros(n, n);
    let mut total = 0.0;
    for i in 0..count {
        let w = beta[i] * mk.q[i];
        total += w;
        first.axpy(w, &mk.diffs[i], 1.0);
        second.ger(w, &mk.diffs[i], &mk.diffs[i], 1.0);
    }
    let mean = beta.dot(&mk.q);
    let grad_mean = &mk.r_inv * first;
    let hess_mean = &mk.r_inv * second * &mk.r_inv - &mk.r_inv * total;

    // Variance: σ_f² + Σᵢⱼ Cᵢⱼvᵢⱼ − (βᵀq)²,  C = ββᵀ − K̄⁻¹.
    let kinv = model.gram_inverse();
    let mut cv_sum = 0.0;
    let mut cv_first = DVector::zeros(n);
    let mut cv_second = DMatrix::zeros(n, n);
    for i in 0..count {
        for j in 0..count {
            let w = (beta[i] * beta[j] - kinv[(i, j)]) * mk.v[(i, j)];
            if w == 0.0 {
                continue;
            }
            let e = (&mk.diffs[i] + &mk.diffs[j]) * 0.5;
            cv_sum += w;
            cv_first.axpy(w, &e, 1.0);
            cv_second.ger(w, &e, &e, 1.0);
        }
    }
    let m = &mk.m_mat;
    let variance = finish_noisy_variance(model.theta().signal_variance + cv_sum - mean * mean)?;
    let grad_var = m * cv_first - &grad_mean * (2.0 * mean);
    let hess_var = m * cv_second * m
        - m * cv_sum
        - (&grad_mean * grad_mean.transpose() + &hess_mean * mean) * 2.0;

    Ok(SafetyEvaluation::assemble(
        weights, mean, variance, grad_mean, grad_var, hess_mean, hess_var,
    ))
}

/// One row of a contour grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRow {
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Evaluate `f` on a `resolution × resolution` lattice spanning the box
/// [lo, hi] (both corners included), row-major in y then x.
pub fn evaluate_grid<F>(lo: [f64; 2], hi: [f64; 2], resolution: usize, f: F) -> Result<Vec<GridRow>>
where
    F: Fn(&DVector<f64>) -> Result<SafetyEvaluation>,
{
    if resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    if !(hi[0] > lo[0] && hi[1] > lo[1]) {
        return Err(Error::InvalidArgument("grid box is degenerate".into()));
    }
    let step = |a: usize, k: usize| lo[k] + (hi[k] - lo[k]) * a as f64 / (resolution - 1) as f64;
    let mut rows = Vec::with_capacity(resolution * resolution);
    for iy in 0..resolution {
        for ix in 0..resolution {
            let (x, y) = (step(ix, 0), step(iy, 1));
            let e = f(&DVector::from_column_slice(&[x, y]))?;
            rows.push(GridRow {
                x,
                y,
                h: e.value,
                mean: e.mean,
                variance: e.variance,
            });
        }
    }
    Ok(rows)
}

pub fn write_grid_csv<W: Write>(rows: &[GridRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "y", "h_gp", "mu", "sigma2"])?;
    for r in rows {
        w.write_record([
            r.x.to_string(),
            r.y.to_string(),
            r.h.to_string(),
            r.mean.to_string(),
            r.variance.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

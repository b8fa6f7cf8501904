//! Oracle suites: finite differences, Monte-Carlo moments, dense inverses,
//! and the KKT enumeration QP.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::barrier::{eval, expected_kernel_coefficient, moment_terms, noisy_eval, GaussianState, GcbfWeights};
use crate::error::{Error, Result};
use crate::filter::rectify;
use crate::gp::GpModel;
use crate::kernel::Hyperparameters;
use crate::oracle::{
    central_difference_gradient, central_difference_jacobian, dense_inverse, kkt_enumeration_qp, monte_carlo_moments,
    DenseGp,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Derivatives,
    Moments,
    Rank1,
    Qp,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Derivatives, Suite::Moments, Suite::Rank1, Suite::Qp];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Derivatives => "derivatives",
            Suite::Moments => "moments",
            Suite::Rank1 => "rank1",
            Suite::Qp => "qp",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite `{s}` (derivatives, moments, rank1, qp)")))
    }
}

/// One row of a suite report: the worst observed error against its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, instances: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            max_error,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {} ({:.2} s)", self.suite.name(), self.seconds)?;
        writeln!(f, "  {:<34} {:>9} {:>12} {:>12}  result", "check", "instances", "max error", "tolerance")?;
        for c in &self.checks {
            writeln!(
                f,
                "  {:<34} {:>9} {:>12.3e} {:>12.3e}  {}",
                c.name,
                c.instances,
                c.max_error,
                c.tolerance,
                if c.passed() { "pass" } else { "FAIL" }
            )?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let started = Instant::now();
    let (checks, notes) = match suite {
        Suite::Derivatives => derivatives(200, seed)?,
        Suite::Moments => moments(20, 1_000_000, seed)?,
        Suite::Rank1 => rank1(300, seed)?,
        Suite::Qp => qp(1000, seed)?,
    };
    Ok(SuiteReport {
        suite,
        checks,
        notes,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Random GP over `dim` inputs with `n` samples in [−0.5, 0.5]^dim.
pub fn random_model(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> Result<GpModel> {
    let theta = Hyperparameters::new(
        (0..dim).map(|_| rng.random_range(0.15..0.6)).collect(),
        rng.random_range(0.5..2.0),
        rng.random_range(1e-4..5e-2),
    )?;
    let mut model = GpModel::new(theta, n.max(1), 0.0)?;
    while model.len() < n {
        let x = DVector::from_fn(dim, |_, _| rng.random_range(-0.5..0.5));
        model.try_add_sample(&x, rng.random_range(-1.0..2.0))?;
    }
    Ok(model)
}

fn random_weights(rng: &mut ChaCha8Rng) -> Result<GcbfWeights> {
    GcbfWeights::new(rng.random_range(0.5..2.0), rng.random_range(0.0..5.0))
}

/// Random SPD matrix with eigenvalues in roughly [0.1, 2]·scale.
pub fn random_spd(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose()) * (scale / dim as f64) + DMatrix::identity(dim, dim) * (0.1 * scale)
}

/// ‖a − b‖∞ relative to ‖a‖∞, with a floor so vanishing derivatives far
/// from the data are compared absolutely.
fn rel_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).amax() / a.amax().max(floor)
}

fn rel_error_vec(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).amax() / a.amax().max(floor)
}

/// Running maximum that keeps a NaN once one shows up, so a broken
/// comparison can never pass silently.
fn worst(acc: f64, e: f64) -> f64 {
    if acc.is_nan() || e.is_nan() {
        f64::NAN
    } else {
        acc.max(e)
    }
}

/// Analytic gradient and Hessian of h_gp against central differences, for
/// the deterministic and the moment-matched barrier.
pub fn derivatives(instances: usize, seed: u64) -> Result<(Vec<Check>, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut g_err, mut h_err, mut ng_err, mut nh_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let noisy_instances = instances / 4;
    for i in 0..instances {
        let dim = rng.random_range(1..=3);
        let n = rng.random_range(1..=20);
        let model = random_model(&mut rng, dim, n)?;
        let w = random_weights(&mut rng)?;
        let x = DVector::from_fn(dim, |_, _| rng.random_range(-0.6..0.6));
        let steps: Vec<f64> = model.theta().length_scales.iter().map(|l| 1e-5 * l).collect();

        let e = eval(&model, &w, &x)?;
        let fd = central_difference_gradient(|p| eval(&model, &w, p).map(|e| e.value).unwrap_or(f64::NAN), &x, &steps);
        let fdh = central_difference_jacobian(
            |p| eval(&model, &w, p).map(|e| e.gradient).unwrap_or_else(|_| DVector::from_element(dim, f64::NAN)),
            &x,
            &steps,
        );
        g_err = worst(g_err, rel_error_vec(&e.gradient, &fd, 1e-3));
        h_err = worst(h_err, rel_error(&e.hessian, &fdh, 1e-2));

        if i < noisy_instances {
            let scale = rng.random_range(1e-3..5e-2);
            let cov = random_spd(&mut rng, dim, scale);
            let at = |p: &DVector<f64>| GaussianState::new(p.clone(), cov.clone()).and_then(|s| noisy_eval(&model, &w, &s));
            let e = at(&x)?;
            let fd = central_difference_gradient(|p| at(p).map(|e| e.value).unwrap_or(f64::NAN), &x, &steps);
            let fdh = central_difference_jacobian(
                |p| at(p).map(|e| e.gradient).unwrap_or_else(|_| DVector::from_element(dim, f64::NAN)),
                &x,
                &steps,
            );
            ng_err = worst(ng_err, rel_error_vec(&e.gradient, &fd, 1e-3));
            nh_err = worst(nh_err, rel_error(&e.hessian, &fdh, 1e-2));
        }
    }
    Ok((
        vec![
            Check::new("gradient rel. error", instances, g_err, 1e-5),
            Check::new("hessian rel. error", instances, h_err, 1e-4),
            Check::new("noisy gradient rel. error", noisy_instances, ng_err, 1e-4),
            Check::new("noisy hessian rel. error", noisy_instances, nh_err, 1e-3),
        ],
        vec!["relative errors use max(‖analytic‖∞, 1e-3) for gradients and 1e-2 for Hessians".into()],
    ))
}

/// Outcome of one Monte-Carlo moment comparison.
#[derive(Debug, Clone, Copy)]
pub struct MomentTrial {
    pub mean_z: f64,
    pub variance_z: f64,
    /// z-score of the alternative closing term βᵀ(Vβ − q).
    pub linear_closing_z: f64,
}

/// Closed-form noisy mean and variance against Monte Carlo at 𝚺 = 0.02·I
/// over 2-D models with N ≤ 10. Trials run on separate threads, each with
/// its own generator derived from `seed`.
pub fn moment_trials(instances: usize, draws: usize, seed: u64) -> Result<Vec<MomentTrial>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let setups: Vec<(GpModel, DVector<f64>, u64)> = (0..instances)
        .map(|_| {
            let n = rng.random_range(1..=10);
            let model = random_model(&mut rng, 2, n)?;
            let m = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
            Ok((model, m, rng.random()))
        })
        .collect::<Result<_>>()?;
    let cov = DMatrix::identity(2, 2) * 0.02;
    std::thread::scope(|s| {
        let handles: Vec<_> = setups
            .iter()
            .map(|(model, m, trial_seed)| {
                let cov = &cov;
                s.spawn(move || -> Result<MomentTrial> {
                    let state = GaussianState::new(m.clone(), cov.clone())?;
                    let terms = moment_terms(model, &state)?;
                    let gp = DenseGp::new(model.dataset().inputs(), model.dataset().targets(), model.theta());
                    let mut trng = ChaCha8Rng::seed_from_u64(*trial_seed);
                    let mc = monte_carlo_moments(&gp, m, cov, draws, &mut trng);
                    Ok(MomentTrial {
                        mean_z: mc.mean.z_score(crate::barrier::noisy_mean(model, &state)?),
                        variance_z: mc.variance.z_score(terms.variance()),
                        linear_closing_z: mc.variance.z_score(terms.variance_linear_closing()),
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("moment trial panicked")).collect()
    })
}

pub fn moments(instances: usize, draws: usize, seed: u64) -> Result<(Vec<Check>, Vec<String>)> {
    let trials = moment_trials(instances, draws, seed)?;
    let max_abs = |f: fn(&MomentTrial) -> f64| trials.iter().map(f).map(f64::abs).fold(0.0, worst);
    let mean_z = max_abs(|t| t.mean_z);
    let var_z = max_abs(|t| t.variance_z);
    let lin_z = max_abs(|t| t.linear_closing_z);

    let (collapse, collapse_n) = collapse_error(100, seed ^ 0x5eed)?;
    let coef_gap = coefficient_gap(100, seed ^ 0xc0ef)?;
    let verdict = if var_z <= 3.0 && lin_z > 3.0 {
        "Monte Carlo validates the closing term −(βᵀq)²; βᵀ(Vβ − q) is rejected"
    } else if lin_z <= 3.0 && var_z > 3.0 {
        "Monte Carlo validates the closing term βᵀ(Vβ − q); −(βᵀq)² is rejected"
    } else {
        "Monte Carlo does not separate the two closing-term forms"
    };
    Ok((
        vec![
            Check::new("noisy mean |z|", instances, mean_z, 3.0),
            Check::new("noisy variance |z|", instances, var_z, 3.0),
            Check::new("Σ = 0 collapse max-abs", collapse_n, collapse, 1e-9),
            Check::new("coefficient max(c/σ_f²) < 1", 100, coef_gap, 1.0 - f64::EPSILON),
        ],
        vec![
            format!("{draws} draws per instance, Σ = 0.02·I"),
            format!("alternative closing term βᵀ(Vβ − q): max |z| = {lin_z:.1}"),
            verdict.into(),
        ],
    ))
}

/// Max-abs gap between noisy and deterministic evaluations at 𝚺 = 0
/// (value, gradient, Hessian).
pub fn collapse_error(instances: usize, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_gap = 0.0f64;
    for _ in 0..instances {
        let dim = rng.random_range(1..=3);
        let n = rng.random_range(1..=20);
        let model = random_model(&mut rng, dim, n)?;
        let w = random_weights(&mut rng)?;
        let x = DVector::from_fn(dim, |_, _| rng.random_range(-0.6..0.6));
        let det = eval(&model, &w, &x)?;
        let noisy = noisy_eval(&model, &w, &GaussianState::deterministic(x))?;
        max_gap = [
            (det.value - noisy.value).abs(),
            (&det.gradient - &noisy.gradient).amax(),
            (&det.hessian - &noisy.hessian).amax(),
        ]
        .into_iter()
        .fold(max_gap, worst);
    }
    Ok((max_gap, instances))
}

/// Largest ratio σ_f²|𝚺L⁻² + I|^(−1/2) / σ_f² over random PD 𝚺; must stay
/// strictly below one.
pub fn coefficient_gap(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio = 0.0f64;
    for _ in 0..instances {
        let dim = rng.random_range(1..=3);
        let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..2.0)).collect();
        let sf2 = rng.random_range(0.1..5.0);
        let scale = 10f64.powf(rng.random_range(-4.0..0.0));
        let cov = random_spd(&mut rng, dim, scale);
        max_ratio = worst(max_ratio, expected_kernel_coefficient(sf2, &ls, &cov)? / sf2);
    }
    Ok(max_ratio)
}

/// Bordered inverse after `insertions` τ-gated insertions against a dense
/// LU inverse of the final Gram matrix.
pub fn rank1_error(insertions: usize, seed: u64) -> Result<(f64, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = Hyperparameters::isotropic(2, 0.3, 1.0, 1e-3)?;
    let mut model = GpModel::new(theta, insertions, 0.05)?;
    let mut attempts = 0;
    while model.len() < insertions {
        attempts += 1;
        if attempts > 100 * insertions {
            return Err(Error::InvalidArgument("τ-gate rejected too many candidate points".into()));
        }
        let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        model.try_add_sample(&x, rng.random_range(-1.0..2.0))?;
    }
    let dense = dense_inverse(model.dataset().inputs(), model.theta())
        .ok_or(Error::Singular("dense Gram matrix"))?;
    let y = DVector::from_column_slice(model.dataset().targets());
    let beta_err = (model.beta() - &dense * y).amax();
    Ok(((model.gram_inverse() - dense).amax(), beta_err, attempts))
}

fn rank1(insertions: usize, seed: u64) -> Result<(Vec<Check>, Vec<String>)> {
    let (inv_err, beta_err, attempts) = rank1_error(insertions, seed)?;
    Ok((
        vec![
            Check::new("inverse max-abs error", insertions, inv_err, 1e-8),
            Check::new("β max-abs error", insertions, beta_err, 1e-8),
        ],
        vec![format!("{attempts} candidates offered to the τ-gate (τ = 0.05)")],
    ))
}

/// Rectifier against the KKT enumeration oracle on random single-constraint
/// instances. Returns (max error, slack instances altered, slack instances).
pub fn qp_errors(instances: usize, seed: u64) -> Result<(f64, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let (mut altered, mut slack) = (0, 0);
    for _ in 0..instances {
        let m = rng.random_range(1..=6);
        let u = DVector::from_fn(m, |_, _| rng.random_range(-5.0..5.0));
        let a = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
        let b = rng.random_range(-5.0..5.0);
        let r = rectify(&u, &a, b)?;
        let g = DMatrix::from_row_slice(1, m, a.as_slice());
        let oracle = kkt_enumeration_qp(&u, &g, &DVector::from_element(1, b))
            .ok_or(Error::Infeasible { b })?;
        max_err = worst(max_err, (&r.u_rect - &oracle.u).amax());
        if a.dot(&u) >= b {
            slack += 1;
            if r.u_rect != u || r.constraint_active {
                altered += 1;
            }
        }
    }
    Ok((max_err, altered, slack))
}

fn qp(instances: usize, seed: u64) -> Result<(Vec<Check>, Vec<String>)> {
    let (worst, altered, slack) = qp_errors(instances, seed)?;
    Ok((
        vec![
            Check::new("u_rect max-abs vs KKT oracle", instances, worst, 1e-8),
            Check::new("slack instances altered", slack, altered as f64, 0.0),
        ],
        vec![],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_suite_names() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn small_suites_pass() {
        let (checks, _) = derivatives(20, 1).unwrap();
        assert!(checks.iter().all(Check::passed), "{checks:?}");
        let (checks, _) = qp(100, 1).unwrap();
        assert!(checks.iter().all(Check::passed), "{checks:?}");
        let (checks, _) = rank1(60, 1).unwrap();
        assert!(checks.iter().all(Check::passed), "{checks:?}");
    }
}

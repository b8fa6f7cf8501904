//! Lie derivatives of a barrier along control-affine dynamics, exponential
//! CBF gains, and the minimum-norm rectifier
//!
//!   u_rect = argmin ½‖u − u_nom‖²  s.t.  aᵀu ≥ b.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::SafetyEvaluation;
use crate::error::{check_dim, Error, Result};

/// Squared norm below which the constraint row counts as zero.
const ZERO_ROW: f64 = 1e-300;

/// ẋ = f(x) + g(x)u.
pub trait AffineDynamics {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn control_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Relative degree of the barrier with respect to these dynamics (1 or 2).
    fn relative_degree(&self) -> u8;
}

/// Stacked double integrator x = [r; ṙ], ẍ = u:
/// f(x) = [[0, I], [0, 0]]x, g = [0; I].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DoubleIntegrator {
    pub axes: usize,
}

impl DoubleIntegrator {
    pub fn new(axes: usize) -> Self {
        Self { axes }
    }
}

impl AffineDynamics for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2 * self.axes
    }

    fn input_dim(&self) -> usize {
        self.axes
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.axes;
        let mut f = DVector::zeros(2 * n);
        f.rows_mut(0, n).copy_from(&x.rows(n, n));
        f
    }

    fn control_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.axes;
        let mut g = DMatrix::zeros(2 * n, n);
        g.view_mut((n, 0), (n, n)).fill_with_identity();
        g
    }

    fn drift_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.axes;
        let mut j = DMatrix::zeros(2 * n, 2 * n);
        j.view_mut((0, n), (n, n)).fill_with_identity();
        j
    }

    fn relative_degree(&self) -> u8 {
        2
    }
}

type VecFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Dynamics given by closures.
pub struct FnDynamics {
    pub state_dim: usize,
    pub input_dim: usize,
    pub drift: VecFn,
    pub control_matrix: MatFn,
    pub drift_jacobian: MatFn,
    pub relative_degree: u8,
}

impl AffineDynamics for FnDynamics {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }
    fn control_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.control_matrix)(x)
    }
    fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.drift_jacobian)(x)
    }
    fn relative_degree(&self) -> u8 {
        self.relative_degree
    }
}

fn evaluate_dynamics<D: AffineDynamics + ?Sized>(
    eval: &SafetyEvaluation,
    dyn_: &D,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = dyn_.state_dim();
    check_dim(n, x.len(), "state")?;
    check_dim(n, eval.gradient.len(), "barrier gradient")?;
    let f = dyn_.drift(x);
    let g = dyn_.control_matrix(x);
    check_dim(n, f.len(), "drift")?;
    check_dim(n, g.nrows(), "control matrix rows")?;
    check_dim(dyn_.input_dim(), g.ncols(), "control matrix columns")?;
    Ok((f, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LieDegree1 {
    pub lf_h: f64,
    pub lg_h: DVector<f64>,
}

/// L_f h = ∇hᵀf(x), L_g h = ∇hᵀg(x).
pub fn lie_derivatives_deg1<D: AffineDynamics + ?Sized>(
    eval: &SafetyEvaluation,
    dyn_: &D,
    x: &DVector<f64>,
) -> Result<LieDegree1> {
    if dyn_.relative_degree() != 1 {
        return Err(Error::RelativeDegree {
            expected: 1,
            actual: dyn_.relative_degree(),
        });
    }
    let (f, g) = evaluate_dynamics(eval, dyn_, x)?;
    Ok(LieDegree1 {
        lf_h: eval.gradient.dot(&f),
        lg_h: g.transpose() * &eval.gradient,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LieDegree2 {
    pub lf_h: f64,
    pub lf2_h: f64,
    pub lglf_h: DVector<f64>,
}

/// Second-order Lie derivatives from the barrier gradient and Hessian:
///
///   L_f²h   = fᵀHf + ∇hᵀ(∇f)f
///   L_gL_fh = fᵀHg + ∇hᵀ(∇f)g
pub fn lie_derivatives_deg2<D: AffineDynamics + ?Sized>(
    eval: &SafetyEvaluation,
    dyn_: &D,
    x: &DVector<f64>,
) -> Result<LieDegree2> {
    if dyn_.relative_degree() != 2 {
        return Err(Error::RelativeDegree {
            expected: 2,
            actual: dyn_.relative_degree(),
        });
    }
    let (f, g) = evaluate_dynamics(eval, dyn_, x)?;
    let n = f.len();
    check_dim(n, eval.hessian.nrows(), "barrier Hessian")?;
    let jf = dyn_.drift_jacobian(x);
    check_dim(n, jf.nrows(), "drift Jacobian")?;
    let hf = &eval.hessian * &f;
    let grad_jf = jf.transpose() * &eval.gradient;
    Ok(LieDegree2 {
        lf_h: eval.gradient.dot(&f),
        lf2_h: f.dot(&hf) + grad_jf.dot(&f),
        lglf_h: g.transpose() * hf + g.transpose() * grad_jf,
    })
}

/// Gains of the exponential CBF condition
///
///   L_f²h + L_gL_fh·u + k1·L_fh + k0·h ≥ 0          (relative degree 2)
///   L_fh + L_gh·u + γ·h ≥ 0                          (relative degree 1)
///
/// k0 always multiplies h and k1 multiplies L_fh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcbfGains {
    pub k0: f64,
    pub k1: f64,
    #[serde(default = "default_alpha_gain")]
    pub alpha_gain: f64,
}

fn default_alpha_gain() -> f64 {
    1.0
}

impl EcbfGains {
    pub fn new(k0: f64, k1: f64, alpha_gain: f64) -> Result<Self> {
        let g = Self { k0, k1, alpha_gain };
        g.validate()?;
        Ok(g)
    }

    /// s² + k1 s + k0 Hurwitz and γ > 0.
    pub fn validate(&self) -> Result<()> {
        if !(self.k0 > 0.0 && self.k1 > 0.0 && self.k0.is_finite() && self.k1.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gains k0 = {}, k1 = {} are not Hurwitz",
                self.k0, self.k1
            )));
        }
        if !(self.alpha_gain > 0.0 && self.alpha_gain.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha gain {} must be positive", self.alpha_gain)));
        }
        Ok(())
    }
}

/// Pole placement: (s − p1)(s − p2) = s² + k1 s + k0.
pub fn ecbf_gains_from_poles(p1: f64, p2: f64) -> Result<EcbfGains> {
    if !(p1 < 0.0 && p2 < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "poles ({p1}, {p2}) must both be strictly negative"
        )));
    }
    EcbfGains::new(p1 * p2, -(p1 + p2), default_alpha_gain())
}

/// One half-space aᵀu ≥ b on the input.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierConstraint {
    pub a: DVector<f64>,
    pub b: f64,
}

impl BarrierConstraint {
    /// L_fh + L_gh·u + γh ≥ 0, with α(h) = γh.
    pub fn degree1(lie: &LieDegree1, h: f64, gains: &EcbfGains) -> Self {
        Self {
            a: lie.lg_h.clone(),
            b: -(lie.lf_h + gains.alpha_gain * h),
        }
    }

    /// L_f²h + L_gL_fh·u + k1·L_fh + k0·h ≥ 0.
    pub fn degree2(lie: &LieDegree2, h: f64, gains: &EcbfGains) -> Self {
        Self {
            a: lie.lglf_h.clone(),
            b: -(lie.lf2_h + gains.k1 * lie.lf_h + gains.k0 * h),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectificationResult {
    pub u_rect: DVector<f64>,
    pub constraint_active: bool,
    /// aᵀu_nom − b; negative when the nominal input violates the constraint.
    pub margin: f64,
    pub lhs_row: DVector<f64>,
    pub rhs: f64,
}

/// Closed-form projection of u_nom onto {u : aᵀu ≥ b}.
pub fn rectify(u_nom: &DVector<f64>, a: &DVector<f64>, b: f64) -> Result<RectificationResult> {
    check_dim(u_nom.len(), a.len(), "constraint row")?;
    if !b.is_finite() || a.iter().chain(u_nom.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rectifier input"));
    }
    let margin = a.dot(u_nom) - b;
    if margin >= 0.0 {
        return Ok(RectificationResult {
            u_rect: u_nom.clone(),
            constraint_active: false,
            margin,
            lhs_row: a.clone(),
            rhs: b,
        });
    }
    let a2 = a.norm_squared();
    if a2 <= ZERO_ROW {
        return Err(Error::Infeasible { b });
    }
    Ok(RectificationResult {
        u_rect: u_nom + a * (-margin / a2),
        constraint_active: true,
        margin,
        lhs_row: a.clone(),
        rhs: b,
    })
}

/// Box limits on each input component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Projection onto {aᵀu ≥ b} ∩ [lower, upper].
///
/// The KKT conditions give u(λ) = clamp(u_nom + λa) for the multiplier
/// λ ≥ 0, and aᵀu(λ) is non-decreasing and piecewise linear in λ. The
/// breakpoints are where components enter their bounds (the active set), so
/// walking them in order gives λ exactly.
pub fn rectify_bounded(u_nom: &DVector<f64>, a: &DVector<f64>, b: f64, bounds: &InputBounds) -> Result<RectificationResult> {
    let m = u_nom.len();
    check_dim(m, a.len(), "constraint row")?;
    check_dim(m, bounds.lower.len(), "lower bounds")?;
    check_dim(m, bounds.upper.len(), "upper bounds")?;
    if bounds.lower.iter().zip(&bounds.upper).any(|(l, u)| !(l <= u)) {
        return Err(Error::InvalidArgument("lower bound exceeds upper bound".into()));
    }
    let clamp = |lam: f64| {
        DVector::from_fn(m, |i, _| (u_nom[i] + lam * a[i]).clamp(bounds.lower[i], bounds.upper[i]))
    };
    let margin = a.dot(u_nom) - b;
    let start = clamp(0.0);
    let mut result = RectificationResult {
        u_rect: start.clone(),
        constraint_active: false,
        margin,
        lhs_row: a.clone(),
        rhs: b,
    };
    if a.dot(&start) >= b {
        return Ok(result);
    }

    let mut breaks: Vec<f64> = (0..m)
        .filter(|&i| a[i] != 0.0)
        .flat_map(|i| {
            let lo = (bounds.lower[i] - u_nom[i]) / a[i];
            let hi = (bounds.upper[i] - u_nom[i]) / a[i];
            [lo, hi]
        })
        .filter(|l| *l > 0.0 && l.is_finite())
        .collect();
    breaks.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let mut lam_prev = 0.0;
    let mut val_prev = a.dot(&start);
    for &lam in breaks.iter().chain(std::iter::once(&f64::INFINITY)) {
        // Components still free on (lam_prev, lam) move at rate aᵢ.
        let mid = if lam.is_finite() { 0.5 * (lam_prev + lam) } else { lam_prev + 1.0 };
        let slope: f64 = (0..m)
            .filter(|&i| {
                let u = u_nom[i] + mid * a[i];
                u > bounds.lower[i] && u < bounds.upper[i]
            })
            .map(|i| a[i] * a[i])
            .sum();
        let val_next = if lam.is_finite() {
            a.dot(&clamp(lam))
        } else if slope > 0.0 {
            f64::INFINITY
        } else {
            val_prev
        };
        if val_next >= b && slope > 0.0 {
            let lam_star = lam_prev + (b - val_prev) / slope;
            result.u_rect = clamp(lam_star);
            result.constraint_active = true;
            return Ok(result);
        }
        if !lam.is_finite() {
            break;
        }
        lam_prev = lam;
        val_prev = val_next;
    }
    Err(Error::Infeasible { b })
}

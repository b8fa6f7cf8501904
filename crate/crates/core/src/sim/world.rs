use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::barrier::SafetyEvaluation;
use crate::error::{Error, Result};
use crate::gp::Dataset;

/// Axis-aligned box in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain2 {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Domain2 {
    pub fn new(lo: [f64; 2], hi: [f64; 2]) -> Result<Self> {
        let d = Self { lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0..2).all(|k| self.lo[k].is_finite() && self.hi[k].is_finite() && self.lo[k] < self.hi[k]);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate box {:?} to {:?}", self.lo, self.hi)))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(2, |k, _| rng.random_range(self.lo[k]..self.hi[k]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    /// Signed squared-distance margin d = ‖r − p‖² − R².
    pub fn margin(&self, r_xy: &Vector2<f64>) -> f64 {
        (r_xy - Vector2::from(self.center)).norm_squared() - self.radius * self.radius
    }

    pub fn contains(&self, r_xy: &Vector2<f64>) -> bool {
        self.margin(r_xy) < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleWorld {
    pub obstacles: Vec<Obstacle>,
    pub sample_noise_std: f64,
}

impl ObstacleWorld {
    pub fn validate(&self) -> Result<()> {
        if self.obstacles.is_empty() {
            return Err(Error::InvalidArgument("world has no obstacles".into()));
        }
        if let Some(o) = self.obstacles.iter().find(|o| !(o.radius > 0.0 && o.radius.is_finite())) {
            return Err(Error::InvalidArgument(format!("obstacle radius {} must be positive", o.radius)));
        }
        if !(self.sample_noise_std >= 0.0 && self.sample_noise_std.is_finite()) {
            return Err(Error::InvalidArgument("sample noise std must be non-negative".into()));
        }
        Ok(())
    }

    /// Product of all margins, noise-free.
    pub fn safety_metric(&self, r_xy: &Vector2<f64>) -> f64 {
        self.obstacles.iter().map(|o| o.margin(r_xy)).product()
    }

    pub fn inside_any(&self, r_xy: &Vector2<f64>) -> bool {
        self.obstacles.iter().any(|o| o.contains(r_xy))
    }
}

/// Noisy safety sample y = d_a·d_b·… + w, w ~ N(0, σ_y²).
pub fn sample_safety_obstacles<R: Rng + ?Sized>(world: &ObstacleWorld, r_xy: &Vector2<f64>, rng: &mut R) -> f64 {
    let w = if world.sample_noise_std > 0.0 {
        Normal::new(0.0, world.sample_noise_std).expect("validated std").sample(rng)
    } else {
        0.0
    };
    world.safety_metric(r_xy) + w
}

/// `n` points uniform over the box with targets uniform over [lo, hi).
/// The dataset has capacity `n` and no τ-gate.
pub fn sample_safety_uniform<R: Rng + ?Sized>(domain: &Domain2, n: usize, lo: f64, hi: f64, rng: &mut R) -> Result<Dataset> {
    domain.validate()?;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("target range [{lo}, {hi}] is empty")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        inputs.push(domain.sample(rng));
        targets.push(rng.random_range(lo..hi));
    }
    Ok(Dataset::from_samples(2, inputs, targets, n, 0.0)?.0)
}

/// Analytic disk barrier h = D² − x² − y² over the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiskBarrier {
    pub radius: f64,
}

impl DiskBarrier {
    pub fn value(&self, r_xy: &Vector2<f64>) -> f64 {
        self.radius * self.radius - r_xy.norm_squared()
    }

    pub fn evaluate(&self, r_xy: &Vector2<f64>) -> SafetyEvaluation {
        let value = self.value(r_xy);
        SafetyEvaluation {
            value,
            mean: value,
            variance: 0.0,
            gradient: DVector::from_column_slice(&[-2.0 * r_xy.x, -2.0 * r_xy.y]),
            hessian: DMatrix::from_diagonal_element(2, 2, -2.0),
        }
    }

    /// `n` samples y ~ N(h(x), std²) at uniform points of the box.
    pub fn sample<R: Rng + ?Sized>(&self, domain: &Domain2, n: usize, std: f64, rng: &mut R) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
        domain.validate()?;
        let noise = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("noise std: {e}")))?;
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let x = domain.sample(rng);
            let r = Vector2::new(x[0], x[1]);
            targets.push(self.value(&r) + noise.sample(rng));
            inputs.push(x);
        }
        Ok((inputs, targets))
    }
}

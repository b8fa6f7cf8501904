use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::plant::PlantState;
use crate::barrier::GaussianState;
use crate::error::{Error, Result};

/// Gaussian measurement noise on position; velocity is observed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Row-major 3×3 covariance 𝚺.
    pub position_cov: [[f64; 3]; 3],
}

impl NoiseModel {
    pub fn isotropic(variance: f64) -> Self {
        let mut c = [[0.0; 3]; 3];
        for (i, row) in c.iter_mut().enumerate() {
            row[i] = variance;
        }
        Self { position_cov: c }
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.position_cov[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.covariance();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("position covariance"));
        }
        if (c - c.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidArgument("position covariance is not symmetric".into()));
        }
        if c.symmetric_eigenvalues().min() < -1e-12 {
            return Err(Error::InvalidArgument("position covariance is not PSD".into()));
        }
        Ok(())
    }

    /// Symmetric square root, so draws are exact for singular 𝚺 too.
    fn sqrt(&self) -> Matrix3<f64> {
        let eig = self.covariance().symmetric_eigen();
        let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        eig.eigenvectors * Matrix3::from_diagonal(&d) * eig.eigenvectors.transpose()
    }
}

/// One noisy reading x̲ = [r̲; ṙ] with r̲ ~ N(r, 𝚺), returned with its
/// covariance embedded in the position block.
pub fn measure_position<R: Rng + ?Sized>(state: &PlantState, noise: &NoiseModel, rng: &mut R) -> Result<GaussianState> {
    noise.validate()?;
    let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
    let r = state.position + noise.sqrt() * z;
    let mean = DVector::from_iterator(6, r.iter().chain(state.velocity.iter()).copied());
    let mut cov = DMatrix::zeros(6, 6);
    cov.view_mut((0, 0), (3, 3)).copy_from(&noise.covariance());
    GaussianState::new(mean, cov)
}

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DT: f64 = 0.1;
/// Small-angle validity limit for the attitude setpoints, in radians.
pub const SMALL_ANGLE_LIMIT: f64 = 0.5;

/// Double-integrator state x = [r; ṙ] and simulation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub time: f64,
}

impl PlantState {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>) -> Result<Self> {
        let s = Self {
            position,
            velocity,
            time: 0.0,
        };
        if !s.is_finite() {
            return Err(Error::NonFinite("plant state"));
        }
        Ok(s)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.velocity.iter()).all(|v| v.is_finite()) && self.time.is_finite()
    }

    /// Stacked state vector [r; ṙ].
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(6, self.position.iter().chain(self.velocity.iter()).copied())
    }
}

/// Exact zero-order-hold step: r⁺ = r + ṙdt + ½u·dt², ṙ⁺ = ṙ + u·dt.
pub fn step(state: &PlantState, u: &Vector3<f64>, dt: f64) -> Result<PlantState> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::InvalidArgument(format!("dt = {dt} outside (0, {MAX_DT}]")));
    }
    if !state.is_finite() || u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("plant step input"));
    }
    Ok(PlantState {
        position: state.position + state.velocity * dt + u * (0.5 * dt * dt),
        velocity: state.velocity + u * dt,
        time: state.time + dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoints {
    pub roll: f64,
    pub pitch: f64,
    pub thrust: f64,
    pub yaw: f64,
}

impl Setpoints {
    pub fn within_small_angle(&self) -> bool {
        self.roll.abs() <= SMALL_ANGLE_LIMIT && self.pitch.abs() <= SMALL_ANGLE_LIMIT
    }
}

/// Small-angle inversion of the rectified acceleration into attitude and
/// thrust setpoints:
///
///   φ = (u₁ sinψ − u₂ cosψ)/g,  θ = (u₁ cosψ + u₂ sinψ)/g,  F = m(u₃ + g).
///
/// Angles beyond the small-angle limit are still returned with a warning in
/// the log; [`Setpoints::within_small_angle`] reports the same condition.
pub fn to_setpoints(u_rect: &Vector3<f64>, psi: f64, mass: f64, gravity: f64) -> Result<Setpoints> {
    let sp = invert_setpoints(u_rect, psi, mass, gravity)?;
    if !sp.within_small_angle() {
        log::warn!(
            "setpoints roll = {:.3}, pitch = {:.3} exceed the small-angle limit",
            sp.roll,
            sp.pitch
        );
    }
    Ok(sp)
}

/// [`to_setpoints`] without the log event, for loops that aggregate warnings.
pub fn invert_setpoints(u_rect: &Vector3<f64>, psi: f64, mass: f64, gravity: f64) -> Result<Setpoints> {
    if !(mass > 0.0 && gravity > 0.0) {
        return Err(Error::InvalidArgument("mass and gravity must be positive".into()));
    }
    if !psi.is_finite() || u_rect.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("setpoint input"));
    }
    let (s, c) = psi.sin_cos();
    Ok(Setpoints {
        roll: (u_rect.x * s - u_rect.y * c) / gravity,
        pitch: (u_rect.x * c + u_rect.y * s) / gravity,
        thrust: mass * (u_rect.z + gravity),
        yaw: psi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: f64 = 9.81;

    #[test]
    fn equilibrium() {
        let s = PlantState::new(Vector3::new(0.1, 0.2, 0.3), Vector3::zeros()).unwrap();
        let n = step(&s, &Vector3::zeros(), 0.01).unwrap();
        assert_eq!(n.position, s.position);
        assert_eq!(n.velocity, s.velocity);
        assert_eq!(n.time, 0.01);
    }

    #[test]
    fn constant_acceleration_step() {
        let s = PlantState::new(Vector3::zeros(), Vector3::zeros()).unwrap();
        let n = step(&s, &Vector3::new(1.0, 0.0, 0.0), 0.1).unwrap();
        assert!((n.position - Vector3::new(0.005, 0.0, 0.0)).amax() < 1e-15);
        assert!((n.velocity - Vector3::new(0.1, 0.0, 0.0)).amax() < 1e-15);
    }

    #[test]
    fn hundred_steps_match_closed_form() {
        let u = Vector3::new(0.7, -1.3, 0.2);
        let mut s = PlantState::new(Vector3::zeros(), Vector3::zeros()).unwrap();
        for _ in 0..100 {
            s = step(&s, &u, 0.01).unwrap();
        }
        let t = s.time;
        assert!((s.position - u * (0.5 * t * t)).amax() <= 1e-12);
        assert!((s.velocity - u * t).amax() <= 1e-12);
    }

    #[test]
    fn rejects_bad_steps() {
        let s = PlantState::new(Vector3::zeros(), Vector3::zeros()).unwrap();
        assert!(step(&s, &Vector3::zeros(), 0.0).is_err());
        assert!(step(&s, &Vector3::zeros(), 0.2).is_err());
        assert!(step(&s, &Vector3::new(f64::NAN, 0.0, 0.0), 0.01).is_err());
        assert!(PlantState::new(Vector3::new(f64::INFINITY, 0.0, 0.0), Vector3::zeros()).is_err());
    }

    #[test]
    fn hover_setpoints() {
        let sp = to_setpoints(&Vector3::zeros(), 0.0, 0.033, G).unwrap();
        assert_eq!(sp.roll, 0.0);
        assert_eq!(sp.pitch, 0.0);
        assert!((sp.thrust - 0.033 * G).abs() < 1e-15);
    }

    #[test]
    fn setpoint_substitutions() {
        let sp = to_setpoints(&Vector3::new(0.0, -G, 0.0), 0.0, 1.0, G).unwrap();
        assert!((sp.roll - 1.0).abs() < 1e-15 && sp.pitch == 0.0);
        assert!(!sp.within_small_angle());
        let sp = to_setpoints(&Vector3::new(G, 0.0, 0.0), 0.0, 1.0, G).unwrap();
        assert!((sp.pitch - 1.0).abs() < 1e-15 && sp.roll == 0.0);
    }
}

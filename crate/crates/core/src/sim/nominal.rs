use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::plant::PlantState;
use crate::error::{Error, Result};

fn default_kp() -> f64 {
    4.0
}

fn default_kd() -> f64 {
    3.0
}

/// Scripted stand-ins for the human pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum NominalPolicy {
    /// Zero acceleration.
    Hold {},
    /// The same acceleration at every tick.
    ConstantPush { acceleration: [f64; 3] },
    /// PD tracking u = kp(r_des − r) − kd·ṙ of each waypoint in turn, each
    /// held for `dwell` seconds. After the last one the list repeats.
    Waypoints {
        waypoints: Vec<[f64; 3]>,
        dwell: f64,
        #[serde(default = "default_kp")]
        kp: f64,
        #[serde(default = "default_kd")]
        kd: f64,
        /// Optional cap on ‖u_nom‖.
        #[serde(default)]
        max_accel: Option<f64>,
    },
}

impl NominalPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            NominalPolicy::Hold {} => Ok(()),
            NominalPolicy::ConstantPush { acceleration } => {
                if acceleration.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::NonFinite("push acceleration"))
                }
            }
            NominalPolicy::Waypoints {
                waypoints,
                dwell,
                kp,
                kd,
                max_accel,
            } => {
                if waypoints.is_empty() {
                    return Err(Error::InvalidArgument("waypoint list is empty".into()));
                }
                if !(*dwell > 0.0) {
                    return Err(Error::InvalidArgument(format!("dwell {dwell} must be positive")));
                }
                if !(*kp >= 0.0 && *kd >= 0.0) {
                    return Err(Error::InvalidArgument("PD gains must be non-negative".into()));
                }
                if max_accel.is_some_and(|m| !(m > 0.0)) {
                    return Err(Error::InvalidArgument("max_accel must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn command(&self, state: &PlantState) -> Vector3<f64> {
        match self {
            NominalPolicy::Hold {} => Vector3::zeros(),
            NominalPolicy::ConstantPush { acceleration } => Vector3::from(*acceleration),
            NominalPolicy::Waypoints {
                waypoints,
                dwell,
                kp,
                kd,
                max_accel,
            } => {
                let idx = (state.time / dwell).floor() as usize % waypoints.len();
                let target = Vector3::from(waypoints[idx]);
                let u = (target - state.position) * *kp - state.velocity * *kd;
                match max_accel {
                    Some(m) if u.norm() > *m => u * (*m / u.norm()),
                    _ => u,
                }
            }
        }
    }
}

//! Trajectory control: the CoM-ZMP law, the swing-foot planner and a task-stack
//! differential IK that turns both into joint position commands.

mod ik;
mod layer;
mod swing;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::KinematicsError;
use crate::qpsolver::QpError;

pub use ik::{ik_step, ComTarget, FrameTarget, IkStep, IkTargets, IkTaskStack};
pub use layer::{ControlConfig, LayerInput, TickOutput, TrajectoryController};
pub use swing::{plan_swing, replan_swing, SwingPlan, SwingSample};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid control configuration: {0}")]
    Config(String),
    #[error("swing window [{t0}, {t1}] is empty")]
    EmptySwing { t0: f64, t1: f64 },
    #[error("replan at {t_now} is outside the active swing window [{t_start}, {t1})")]
    TooLate { t_now: f64, t_start: f64, t1: f64 },
    #[error("hard IK tasks could not be met: {}", format_residuals(.residuals))]
    IkInfeasible { residuals: Vec<(String, f64)> },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

fn format_residuals(r: &[(String, f64)]) -> String {
    r.iter()
        .map(|(task, v)| format!("{task} {v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Diagonal gains of the CoM-ZMP law, 1/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZmpControllerGains {
    pub k_zmp: [f64; 2],
    pub k_com: [f64; 2],
}

impl Default for ZmpControllerGains {
    fn default() -> Self {
        Self {
            k_zmp: [2.0, 2.0],
            k_com: [4.0, 4.0],
        }
    }
}

impl ZmpControllerGains {
    pub fn new(k_zmp: [f64; 2], k_com: [f64; 2]) -> Result<Self, ControlError> {
        let g = Self { k_zmp, k_com };
        g.validate()?;
        if !g.lip_stable() {
            log::warn!("CoM-ZMP gains {k_zmp:?}/{k_com:?} do not stabilize the inverted pendulum (need k_com > k_zmp)");
        }
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        for v in self.k_zmp.iter().chain(&self.k_com) {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(ControlError::Config(format!(
                    "gain {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Closed-loop stability on a linear inverted pendulum driven by the law.
    /// The error obeys `(k_zmp/ω²)ë + ė + (k_com − k_zmp)e = 0`, so every axis
    /// needs `k_com > k_zmp`, whatever the pendulum height.
    pub fn lip_stable(&self) -> bool {
        (0..2).all(|a| self.k_com[a] > self.k_zmp[a])
    }
}

/// Desired ground-plane CoM velocity
/// `ṗ* = ṗ_ref − K_zmp(zmp_ref − zmp) + K_com(p_ref − p)`.
pub fn com_zmp_law(
    com_ref: &Vector2<f64>,
    com_ref_vel: &Vector2<f64>,
    com_meas: &Vector2<f64>,
    zmp_ref: &Vector2<f64>,
    zmp_meas: &Vector2<f64>,
    gains: &ZmpControllerGains,
) -> Vector2<f64> {
    let kz = Vector2::from(gains.k_zmp);
    let kc = Vector2::from(gains.k_com);
    com_ref_vel - kz.component_mul(&(zmp_ref - zmp_meas)) + kc.component_mul(&(com_ref - com_meas))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_errors_pass_the_reference_velocity() {
        let p = Vector2::new(0.3, -0.1);
        let z = Vector2::new(0.02, 0.01);
        let v = Vector2::new(0.12, -0.04);
        let out = com_zmp_law(&p, &v, &p, &z, &z, &ZmpControllerGains::default());
        assert_eq!(out, v);
    }

    #[test]
    fn hand_evaluated_law() {
        let g = ZmpControllerGains::new([1.5, 1.5], [0.5, 0.5]).unwrap();
        let out = com_zmp_law(
            &Vector2::new(0.01, 0.0),
            &Vector2::zeros(),
            &Vector2::zeros(),
            &Vector2::new(0.02, 0.0),
            &Vector2::zeros(),
            &g,
        );
        assert!((out - Vector2::new(-0.025, 0.0)).amax() < 1e-15);
        assert!(!g.lip_stable());
    }

    #[test]
    fn default_gains_are_stable() {
        let g = ZmpControllerGains::default();
        g.validate().unwrap();
        assert!(g.lip_stable());
        assert!(ZmpControllerGains::new([-1.0, 0.0], [1.0, 1.0]).is_err());
    }
}

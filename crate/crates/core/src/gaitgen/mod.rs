//! Gait reference generation.
//!
//! A deterministic procedural walker stands in for a learned autoregressive
//! generator: it is stepped at a fixed period, fed back its own state, and
//! reset from a stored sample. Around it sit the integration stages that
//! turn its raw output into MPC references: contact detection on foot-corner
//! heights, displacement scaling, time scaling, period synchronization and
//! first-order resampling.

mod pipeline;
mod surrogate;
mod worker;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::KinematicsError;
use crate::model::ModelError;

pub use pipeline::{
    detect_contacts, detect_contacts_from, generate_horizon, nominal_forces, resample, resample_n, scale_plan,
    sync_period, sync_period_secs, write_bundle_csv, write_footsteps_csv, Detection, HorizonPlan, HorizonRequest,
    SchmittState, SyncPeriod,
};
pub use surrogate::{step_generator, Command, GaitGenerator, GeneratorSample, GeneratorState, PlanarPose};
pub use worker::GaitWorker;

#[derive(Debug, Error)]
pub enum GaitGenError {
    #[error("invalid gait configuration: {0}")]
    Config(String),
    #[error("samples are not uniformly spaced at index {0}")]
    NonUniformSampling(usize),
    #[error("empty input")]
    Empty,
    #[error("{0} is not an integer number of milliseconds")]
    NotMilliseconds(f64),
    #[error("target grid ends at {requested} s beyond the source span {span} s")]
    Extrapolation { requested: f64, span: f64 },
    #[error("leg inverse kinematics did not converge for the {0} foot")]
    LegIk(&'static str),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchmittConfig {
    /// Corner height below which a foot counts as touching, meters.
    pub height_threshold: f64,
    /// Time a foot must stay on one side of the threshold to switch, seconds.
    pub dwell_time: f64,
}

impl Default for SchmittConfig {
    fn default() -> Self {
        Self {
            height_threshold: 0.01,
            dwell_time: 0.04,
        }
    }
}

/// Generator parameters. Lengths and durations are in generator time, i.e.
/// before time scaling by `scale_eta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitGenConfig {
    /// Generator tick, seconds.
    pub period_dnn: f64,
    /// Displacement scaling of footsteps and CoM, in (0, 1].
    pub scale_gamma: f64,
    /// Integer time-scaling factor; larger is slower.
    pub scale_eta: u32,
    /// Largest forward foot offset from the stance foot per step, meters.
    pub step_length: f64,
    /// Nominal lateral distance between the feet, meters.
    pub step_width: f64,
    /// Duration of one step (double plus single support), seconds.
    pub step_duration: f64,
    /// Double-support fraction of a step.
    pub ds_ratio: f64,
    pub schmitt: SchmittConfig,
    /// Swing-foot apex above the ground, meters.
    pub swing_apex: f64,
    /// Pelvis height above the ground, meters.
    pub base_height: f64,
    /// Lateral pelvis sway toward the stance foot, meters.
    pub sway: f64,
    /// Shoulder swing amplitude at full stride, radians.
    pub arm_swing: f64,
}

impl Default for GaitGenConfig {
    fn default() -> Self {
        Self {
            period_dnn: 0.02,
            scale_gamma: 1.0,
            scale_eta: 3,
            step_length: 0.06,
            step_width: 0.09,
            step_duration: 0.2,
            ds_ratio: 0.2,
            schmitt: SchmittConfig::default(),
            swing_apex: 0.03,
            base_height: 0.28,
            sway: 0.012,
            arm_swing: 0.3,
        }
    }
}

impl GaitGenConfig {
    pub fn validate(&self) -> Result<(), GaitGenError> {
        let fail = |m: &str| Err(GaitGenError::Config(m.to_owned()));
        if !(self.period_dnn > 0.0) {
            return fail("period_dnn must be positive");
        }
        if !(self.scale_gamma > 0.0 && self.scale_gamma <= 1.0) {
            return fail("scale_gamma must lie in (0, 1]");
        }
        if self.scale_eta < 1 {
            return fail("scale_eta must be at least 1");
        }
        if !(self.ds_ratio >= 0.0 && self.ds_ratio < 1.0) {
            return fail("ds_ratio must lie in [0, 1)");
        }
        if !(self.step_duration >= 2.0 * self.period_dnn) {
            return fail("step_duration must span at least two generator ticks");
        }
        if !(self.step_length >= 0.0 && self.step_width > 0.0 && self.swing_apex >= 0.0 && self.base_height > 0.0) {
            return fail("step geometry must be non-negative");
        }
        if !(self.schmitt.height_threshold >= 0.0 && self.schmitt.dwell_time >= 0.0) {
            return fail("Schmitt parameters must be non-negative");
        }
        Ok(())
    }

    /// Real-time spacing of generator samples, `η·T_DNN`.
    pub fn scaled_period(&self) -> f64 {
        self.scale_eta as f64 * self.period_dnn
    }

    pub(crate) fn dwell_samples(&self) -> u32 {
        (self.schmitt.dwell_time / self.period_dnn).round() as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(GaitGenConfig::default().validate().is_ok());
    }

    #[test]
    fn rejects_out_of_range_values() {
        let bad = [
            GaitGenConfig {
                scale_gamma: 1.5,
                ..Default::default()
            },
            GaitGenConfig {
                scale_eta: 0,
                ..Default::default()
            },
            GaitGenConfig {
                ds_ratio: 1.0,
                ..Default::default()
            },
            GaitGenConfig {
                period_dnn: 0.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}

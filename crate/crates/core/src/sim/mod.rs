//! Simulated plant and experiment harness.
//!
//! The plant is centroidal only: the OCP's vertex forces drive the CoM and
//! momentum, while the joint commands of the control layer are played back
//! kinematically. Joint positions are the only sensed quantity subject to
//! noise; they go through the per-joint Kalman filter before feeding back.
//!
//! Trace files written by [`Traces::write_to`], all comma separated with a
//! header row:
//!
//! - `state.csv`, one row per control tick: `t`, plant CoM, linear and angular
//!   momentum, kinematic CoM, `vy_stance` (lateral CoM velocity in the yaw
//!   frame of the feet in contact), CBF value `g`, fall flag.
//! - `zmp.csv`, one row per tick: reference and measured ZMP, commanded CoM
//!   velocity.
//! - `forces.csv`, one row per OCP cycle: contact flags and the summed force
//!   of each foot over the first interval.
//! - `footsteps.csv`, one row per cycle and upcoming footstep: absolute
//!   timing, nominal and adjusted position, adjustment norm.
//! - `joints.csv`, one row per tick: commanded joint positions.
//! - `telemetry.csv`, one row per cycle with solver statistics. It holds
//!   wall-clock solve times and so is not reproducible run to run.
//! - `summary.txt`, flat `key=value` lines of [`RunMetrics`].

mod harness;
mod plant;

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlConfig, ControlError};
use crate::estimation::{EstimationError, KfConfig};
use crate::gaitgen::{Command, GaitGenConfig, GaitGenError};
use crate::kinematics::KinematicsError;
use crate::model::{ModelError, RobotParams};
use crate::ocp::{DisturbanceWrench, MpcConfig, OcpError};

pub use harness::{run_scenario, RunOutcome, Traces};
pub use plant::{has_fallen, lip_zmp, plant_step, plant_step_euler, zmp_from_forces, PlantInput, ZMP_MIN_FZ};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("ZMP undefined: total vertical force {total_fz} N")]
    UndefinedZmp { total_fz: f64 },
    #[error("{layer} failed in cycle {cycle} (t = {time} s): {message}")]
    LayerFailure {
        cycle: usize,
        time: f64,
        layer: &'static str,
        message: String,
        /// Everything recorded up to the failure, telemetry included.
        partial: Box<Traces>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    GaitGen(#[from] GaitGenError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which controller closes the loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Rhp,
    Mpc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantMode {
    /// The plant follows the OCP's own one-interval Euler prediction.
    Ideal,
    /// RK4 integration at the control period with the active disturbance.
    #[default]
    Integrating,
}

/// Velocity command from `t_start` until the next segment begins. Units are
/// those of the gait generator, before displacement and time scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSegment {
    pub t_start: f64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    #[serde(default)]
    pub wz: f64,
}

/// Constant force applied at a fixed offset from the CoM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEvent {
    pub t_start: f64,
    pub duration: f64,
    /// Newtons, world frame.
    pub force: [f64; 3],
    /// Application point relative to the CoM, meters.
    #[serde(default)]
    pub offset: [f64; 3],
}

impl DisturbanceEvent {
    pub fn is_active_at(&self, t: f64) -> bool {
        self.t_start <= t && t < self.t_start + self.duration
    }

    pub fn wrench(&self, p_com: &Vector3<f64>) -> DisturbanceWrench {
        DisturbanceWrench {
            force: Vector3::from(self.force),
            application_point: p_com + Vector3::from(self.offset),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub name: String,
    /// Simulated time, seconds.
    pub duration: f64,
    pub commands: Vec<CommandSegment>,
    pub disturbances: Vec<DisturbanceEvent>,
    /// Standard deviation of the additive joint position noise, radians.
    pub joint_noise_std: f64,
    pub plant: PlantMode,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "quiescent".into(),
            duration: 2.0,
            commands: Vec::new(),
            disturbances: Vec::new(),
            joint_noise_std: 0.0,
            plant: PlantMode::Integrating,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Scenario(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return fail("duration must be finite and positive".into());
        }
        if !(self.joint_noise_std >= 0.0 && self.joint_noise_std.is_finite()) {
            return fail("joint_noise_std must be finite and non-negative".into());
        }
        for (k, c) in self.commands.iter().enumerate() {
            if !(c.t_start >= 0.0 && [c.t_start, c.vx, c.vy, c.wz].iter().all(|v| v.is_finite())) {
                return fail(format!("command {k} must have finite values and t_start >= 0"));
            }
            if k > 0 && !(c.t_start > self.commands[k - 1].t_start) {
                return fail(format!("command {k} must start after command {}", k - 1));
            }
        }
        for (k, d) in self.disturbances.iter().enumerate() {
            let finite = d.force.iter().chain(&d.offset).all(|v| v.is_finite());
            if !finite || !(d.t_start >= 0.0 && d.duration > 0.0) {
                return fail(format!(
                    "disturbance {k} needs finite values, t_start >= 0 and duration > 0"
                ));
            }
            if d.t_start + d.duration > self.duration + 1e-12 {
                return fail(format!(
                    "disturbance {k} ends at {} s, after the scenario ({} s)",
                    d.t_start + d.duration,
                    self.duration
                ));
            }
        }
        Ok(())
    }

    /// Command in force at `t`; zero before the first segment.
    pub fn command_at(&self, t: f64) -> Command {
        self.commands
            .iter()
            .rev()
            .find(|c| c.t_start <= t)
            .map_or(Command::ZERO, |c| Command::new(c.vx, c.vy, c.wz))
    }

    /// Sum of the disturbances active at `t`, applied at the first one's point.
    pub fn disturbance_at(&self, t: f64, p_com: &Vector3<f64>) -> Option<DisturbanceWrench> {
        let mut active = self.disturbances.iter().filter(|d| d.is_active_at(t));
        let first = active.next()?.wrench(p_com);
        Some(active.fold(first, |mut w, d| {
            w.force += Vector3::from(d.force);
            w
        }))
    }
}

/// Every layer's configuration.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub robot: RobotParams,
    pub gaitgen: GaitGenConfig,
    pub mpc: MpcConfig,
    pub control: ControlConfig,
    /// The period is overridden by the control period.
    pub estimation: KfConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.robot.validate()?;
        self.gaitgen.validate()?;
        self.mpc.validate()?;
        self.control.validate()?;
        self.estimation.validate()?;
        let ratio = self.mpc.t_mpc / self.control.period;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(SimError::Scenario(format!(
                "t_mpc ({}) must be a whole multiple of the control period ({})",
                self.mpc.t_mpc, self.control.period
            )));
        }
        Ok(())
    }
}

/// Per-cycle constraint check of an accepted OCP solution.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConstraintReport {
    pub time: f64,
    pub accepted: bool,
    pub kkt_residual: f64,
    /// Largest equality residual, shooting defects included.
    pub defect: f64,
    pub barrier: f64,
    pub friction: f64,
    pub step_box: f64,
    /// Largest displacement of a frozen contact between consecutive nodes.
    pub frozen_motion: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub cycles: usize,
    pub ticks: usize,
    /// Largest horizontal distance between an adjusted footstep and its
    /// nominal counterpart, meters.
    pub max_footstep_adjustment: f64,
    /// Smallest CBF value of the plant CoM height over the run.
    pub cbf_min_margin: f64,
    pub com_z_min: f64,
    pub com_z_max: f64,
    /// Ticks at which the commanded forces leave the friction cone.
    pub friction_violations: usize,
    pub fall: bool,
    pub fall_time: Option<f64>,
    pub zmp_rmse: f64,
    pub rejected_solutions: usize,
    pub deadline_misses: usize,
    pub max_kkt_residual: f64,
    /// Wall-clock solve time per cycle, seconds.
    pub solve_times: Vec<f64>,
    pub constraints: Vec<ConstraintReport>,
}

impl RunMetrics {
    /// `key=value` lines, wall-clock figures excluded.
    pub fn summary(&self) -> String {
        let worst = |f: fn(&ConstraintReport) -> f64| {
            self.constraints
                .iter()
                .filter(|c| c.accepted)
                .map(f)
                .fold(0.0, f64::max)
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("cycles", self.cycles.to_string());
        kv("ticks", self.ticks.to_string());
        kv("fall", self.fall.to_string());
        kv("fall_time", self.fall_time.map_or("none".into(), |t| t.to_string()));
        kv("max_footstep_adjustment", self.max_footstep_adjustment.to_string());
        kv("cbf_min_margin", self.cbf_min_margin.to_string());
        kv("com_z_min", self.com_z_min.to_string());
        kv("com_z_max", self.com_z_max.to_string());
        kv("friction_violations", self.friction_violations.to_string());
        kv("zmp_rmse", self.zmp_rmse.to_string());
        kv("rejected_solutions", self.rejected_solutions.to_string());
        kv("max_kkt_residual", self.max_kkt_residual.to_string());
        kv("max_defect", worst(|c| c.defect).to_string());
        kv("max_barrier_violation", worst(|c| c.barrier).to_string());
        kv("max_friction_violation", worst(|c| c.friction).to_string());
        kv("max_step_box_violation", worst(|c| c.step_box).to_string());
        kv("max_frozen_motion", worst(|c| c.frozen_motion).to_string());
        s
    }
}

/// Runs `sc` and writes the traces under `out`.
pub fn run_to_dir(sc: &Scenario, mode: RunMode, cfg: &SimConfig, out: &Path) -> Result<RunOutcome, SimError> {
    match run_scenario(sc, mode, cfg) {
        Ok(o) => {
            o.traces.write_to(out)?;
            Ok(o)
        }
        Err(e) => {
            if let SimError::LayerFailure { partial, .. } = &e {
                partial.write_to(out)?;
            }
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disturbance_windows_must_fit() {
        let mut sc = Scenario::default();
        sc.disturbances.push(DisturbanceEvent {
            t_start: 1.95,
            duration: 0.1,
            force: [0.0, 5.0, 0.0],
            offset: [0.0; 3],
        });
        assert!(sc.validate().is_err());
        sc.disturbances[0].t_start = 1.9;
        sc.validate().unwrap();
    }

    #[test]
    fn piecewise_commands() {
        let sc = Scenario {
            commands: vec![
                CommandSegment {
                    t_start: 0.5,
                    vx: 0.1,
                    vy: 0.0,
                    wz: 0.0,
                },
                CommandSegment {
                    t_start: 2.0,
                    vx: 0.0,
                    vy: 0.0,
                    wz: 0.2,
                },
            ],
            duration: 3.0,
            ..Scenario::default()
        };
        sc.validate().unwrap();
        assert!(sc.command_at(0.2).is_zero());
        assert_eq!(sc.command_at(1.0).vx, 0.1);
        assert_eq!(sc.command_at(2.5).wz, 0.2);
    }

    #[test]
    fn overlapping_pushes_add_up() {
        let d = |t, f| DisturbanceEvent {
            t_start: t,
            duration: 1.0,
            force: [f, 0.0, 0.0],
            offset: [0.0, 0.0, 0.1],
        };
        let sc = Scenario {
            disturbances: vec![d(0.0, 1.0), d(0.5, 2.0)],
            ..Scenario::default()
        };
        let p = Vector3::new(0.0, 0.0, 0.3);
        let w = sc.disturbance_at(0.7, &p).unwrap();
        assert_eq!(w.force.x, 3.0);
        assert_eq!(w.application_point.z, 0.4);
        assert!(sc.disturbance_at(1.6, &p).is_none());
    }
}

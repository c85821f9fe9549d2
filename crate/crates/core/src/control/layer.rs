//! The periodic trajectory-control task: keeps one swing plan per foot in
//! step with the latest footstep list, applies the CoM-ZMP law and tracks
//! everything through the IK.

use nalgebra::{DVector, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::ik::{ik_step, ComTarget, FrameTarget, IkTargets, IkTaskStack};
use super::swing::{plan_swing, replan_swing, SwingPlan};
use super::{com_zmp_law, ControlError, ZmpControllerGains};
use crate::kinematics::{ChainModel, RobotState};
use crate::model::{rot_z, Foot, Footstep, Pose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Control period, seconds.
    pub period: f64,
    pub gains: ZmpControllerGains,
    pub ik: IkTaskStack,
    /// Swing clearance, meters.
    pub swing_apex: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            period: 0.002,
            gains: ZmpControllerGains::default(),
            ik: IkTaskStack::default(),
            swing_apex: 0.02,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.period > 0.0) {
            return Err(ControlError::Config("control period must be positive".into()));
        }
        if !(self.swing_apex >= 0.0 && self.swing_apex.is_finite()) {
            return Err(ControlError::Config(
                "swing_apex must be finite and non-negative".into(),
            ));
        }
        self.gains.validate()?;
        self.ik.validate()
    }
}

/// References for one control tick.
#[derive(Clone, Debug)]
pub struct LayerInput<'a> {
    pub com_ref: Vector3<f64>,
    pub com_ref_vel: Vector3<f64>,
    pub zmp_ref: Vector2<f64>,
    pub zmp_meas: Vector2<f64>,
    /// Footsteps in absolute time.
    pub footsteps: &'a [Footstep],
    pub postural: &'a DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct TickOutput {
    /// Commanded joint positions after integration.
    pub q_cmd: DVector<f64>,
    pub nu: DVector<f64>,
    /// Ground-plane CoM velocity requested by the law.
    pub com_vel_cmd: Vector2<f64>,
    pub hard_residual: f64,
}

pub struct TrajectoryController {
    model: ChainModel,
    cfg: ControlConfig,
    state: RobotState,
    landed: [Pose; 2],
    swing: [Option<SwingPlan>; 2],
}

impl TrajectoryController {
    /// Starts in double support with the feet where `state` puts them.
    pub fn new(model: ChainModel, cfg: ControlConfig, state: RobotState) -> Result<Self, ControlError> {
        cfg.validate()?;
        let landed = [0, 1].map(|i| model.forward_kinematics(&state, &cfg.ik.foot_frames[i]));
        let [l, r] = landed;
        Ok(Self {
            landed: [flatten(&l?), flatten(&r?)],
            model,
            cfg,
            state,
            swing: [None, None],
        })
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn model(&self) -> &ChainModel {
        &self.model
    }

    pub fn config(&self) -> &ControlConfig {
        &self.cfg
    }

    /// Ground placement of every foot not in swing.
    pub fn contacts(&self) -> [Option<Pose>; 2] {
        [0, 1].map(|i| self.swing[i].is_none().then_some(self.landed[i]))
    }

    pub fn swing_plan(&self, foot: Foot) -> Option<&SwingPlan> {
        self.swing[foot.index()].as_ref()
    }

    /// Runs one control period starting at `t`.
    pub fn tick(&mut self, t: f64, input: &LayerInput) -> Result<TickOutput, ControlError> {
        let mut feet = [None, None];
        for foot in Foot::ALL {
            let i = foot.index();
            feet[i] = Some(self.foot_target(foot, t, input.footsteps)?);
        }
        let com = self.model.com(&self.state)?;
        let v = com_zmp_law(
            &input.com_ref.xy(),
            &input.com_ref_vel.xy(),
            &com.xy(),
            &input.zmp_ref,
            &input.zmp_meas,
            &self.cfg.gains,
        );
        let yaw = 0.5 * (self.landed[0].yaw() + self.landed[1].yaw());
        let targets = IkTargets {
            feet,
            com: Some(ComTarget {
                position: Vector3::new(com.x, com.y, input.com_ref.z),
                velocity: Vector3::new(v.x, v.y, input.com_ref_vel.z),
            }),
            torso: Some(rot_z(yaw)),
            postural: input.postural.clone(),
        };
        let step = ik_step(&self.model, &self.state, &self.cfg.ik, &targets, self.cfg.period)?;
        self.state = step.state;
        Ok(TickOutput {
            q_cmd: self.state.q.clone(),
            nu: step.nu,
            com_vel_cmd: v,
            hard_residual: step.hard_residual,
        })
    }

    fn foot_target(&mut self, foot: Foot, t: f64, steps: &[Footstep]) -> Result<FrameTarget, ControlError> {
        let i = foot.index();
        let own = || steps.iter().filter(|f| f.contact == foot);
        let in_contact = own().any(|f| f.is_active_at(t));
        let next = own()
            .filter(|f| f.activation_time > t)
            .min_by(|a, b| a.activation_time.total_cmp(&b.activation_time));
        if in_contact || next.is_none() {
            if let Some(plan) = self.swing[i].take() {
                self.landed[i] = plan.target;
            }
            return Ok(FrameTarget::still(self.landed[i]));
        }
        let next = next.expect("checked above");
        let target = flatten(&next.pose);
        let plan = match self.swing[i].take() {
            None => plan_swing(&self.landed[i], &target, t, next.activation_time, self.cfg.swing_apex)?,
            Some(plan) if moved(&plan.target, &target) => match replan_swing(&plan, t, &target) {
                Ok(p) => p,
                // past the planned touchdown: hold the old plan until contact is reported
                Err(ControlError::TooLate { .. }) => plan,
                Err(e) => return Err(e),
            },
            Some(plan) => plan,
        };
        let s = plan.sample(t);
        self.swing[i] = Some(plan);
        let (v, w) = (s.linear_velocity, s.angular_velocity);
        Ok(FrameTarget {
            pose: s.pose,
            twist: Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z),
        })
    }
}

fn moved(a: &Pose, b: &Pose) -> bool {
    (a.translation - b.translation).amax() > 1e-9 || (a.rotation - b.rotation).amax() > 1e-9
}

/// Ground-plane pose: keeps position and yaw, drops roll and pitch.
fn flatten(p: &Pose) -> Pose {
    Pose::from_xyz_yaw(p.translation.x, p.translation.y, p.translation.z, p.yaw())
}

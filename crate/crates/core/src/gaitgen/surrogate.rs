//! Procedural walking surrogate with an autoregressive step interface.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::pipeline::SchmittState;
use super::{GaitGenConfig, GaitGenError};
use crate::kinematics::{rotation_log, ChainModel, RobotState};
use crate::model::{Foot, Pose, RobotParams};

/// Sole frames of the left and right foot.
pub const SOLE_FRAMES: [&str; 2] = ["l_sole", "r_sole"];
const ARM_JOINTS: [[&str; 2]; 2] = [["l_shoulder_pitch", "l_elbow"], ["r_shoulder_pitch", "r_elbow"]];
const ELBOW_BEND: f64 = -0.3;
/// Bent-knee leg guess ordered hip yaw, roll, pitch, knee, ankle pitch, roll.
const LEG_GUESS: [f64; 6] = [0.0, 0.0, -0.35, 0.7, -0.35, 0.0];
/// First-order convergence factor per tick for amplitudes and the resting base.
const SETTLE: f64 = 0.2;

/// Ground-plane pose.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn to_pose(self, z: f64) -> Pose {
        Pose::from_xyz_yaw(self.x, self.y, z, self.yaw)
    }

    pub fn from_pose(p: &Pose) -> Self {
        Self::new(p.translation.x, p.translation.y, p.yaw())
    }

    /// Point at local offset `(dx, dy)` in the frame rotated by `yaw`.
    fn offset(self, dx: f64, dy: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self::new(self.x + c * dx - s * dy, self.y + s * dx + c * dy, yaw)
    }

    fn lerp(self, other: Self, u: f64) -> Self {
        Self::new(
            self.x + u * (other.x - self.x),
            self.y + u * (other.y - self.y),
            self.yaw + u * wrap_angle(other.yaw - self.yaw),
        )
    }

    fn close_to(self, other: Self) -> bool {
        (self.x - other.x).hypot(self.y - other.y) < 1e-3 && wrap_angle(self.yaw - other.yaw).abs() < 1e-3
    }

    /// Affine displacement scaling about `anchor`; yaw is left untouched.
    pub fn scaled_about(self, anchor: Self, gamma: f64) -> Self {
        Self::new(
            anchor.x + gamma * (self.x - anchor.x),
            anchor.y + gamma * (self.y - anchor.y),
            self.yaw,
        )
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Planar velocity command in the heading frame, generator time.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Command {
    pub vx: f64,
    pub vy: f64,
    pub wz: f64,
}

impl Command {
    pub const ZERO: Command = Command {
        vx: 0.0,
        vy: 0.0,
        wz: 0.0,
    };

    pub fn new(vx: f64, vy: f64, wz: f64) -> Self {
        Self { vx, vy, wz }
    }

    pub fn is_zero(&self) -> bool {
        self.vx == 0.0 && self.vy == 0.0 && self.wz == 0.0
    }
}

/// Everything the surrogate needs to continue from a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorState {
    /// Gait phase in `[0, 2π)`; the right foot swings in `[0, π)`.
    pub phase: f64,
    pub walking: bool,
    /// Pelvis ground-plane pose without sway.
    pub base_center: PlanarPose,
    pub base_start: PlanarPose,
    pub base_end: PlanarPose,
    /// Last ground placement of each foot.
    pub feet: [PlanarPose; 2],
    pub swing_target: Option<PlanarPose>,
    /// Forward offset of the current step, meters.
    pub stride: f64,
    pub command: Command,
    pub joints: DVector<f64>,
    pub arm_amplitude: f64,
    pub schmitt: [SchmittState; 2],
}

impl GeneratorState {
    /// Foot that swings in the current half cycle.
    pub fn swing_foot(&self) -> Foot {
        if self.phase < PI {
            Foot::Right
        } else {
            Foot::Left
        }
    }

    /// Progress through the current half cycle, in `[0, 1)`.
    pub fn step_progress(&self) -> f64 {
        self.phase.rem_euclid(PI) / PI
    }
}

/// One generator output sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSample {
    pub base_pose: Pose,
    pub joints: DVector<f64>,
    /// Commanded sole poses (identical to the kinematics of `joints`).
    pub soles: [Pose; 2],
}

#[derive(Clone, Debug)]
pub struct GaitGenerator {
    model: ChainModel,
    cfg: GaitGenConfig,
    weight: f64,
    soles: [usize; 2],
    legs: [Vec<usize>; 2],
    arms: Option<[[usize; 2]; 2]>,
    vertices: [Vector3<f64>; 4],
}

impl GaitGenerator {
    pub fn new(model: ChainModel, cfg: GaitGenConfig, params: &RobotParams) -> Result<Self, GaitGenError> {
        cfg.validate()?;
        let soles = [model.frame_index(SOLE_FRAMES[0])?, model.frame_index(SOLE_FRAMES[1])?];
        let legs = soles.map(|s| model.chain_joints(s));
        if legs.iter().any(|l| l.len() != 6) {
            return Err(GaitGenError::Config("each leg needs six joints".into()));
        }
        let arm = |side: usize| -> Option<[usize; 2]> {
            Some([
                model.joint_index(ARM_JOINTS[side][0]).ok()?,
                model.joint_index(ARM_JOINTS[side][1]).ok()?,
            ])
        };
        let arms = arm(0).zip(arm(1)).map(|(l, r)| [l, r]);
        Ok(Self {
            model,
            cfg,
            weight: params.weight(),
            soles,
            legs,
            arms,
            vertices: params.foot_vertices(),
        })
    }

    pub fn model(&self) -> &ChainModel {
        &self.model
    }

    pub fn config(&self) -> &GaitGenConfig {
        &self.cfg
    }

    /// Robot weight `m·|g|`, newtons.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn sole_frames(&self) -> [usize; 2] {
        self.soles
    }

    /// Foot-corner positions in the sole frame.
    pub fn foot_vertices(&self) -> [Vector3<f64>; 4] {
        self.vertices
    }

    /// Output sample of `state` without advancing it.
    pub fn sample_of(&self, state: &GeneratorState) -> Result<GeneratorSample, GaitGenError> {
        self.output(state)
    }

    /// Standing on both feet centred under `base`, long settled.
    pub fn standing_state(&self, base: PlanarPose) -> Result<GeneratorState, GaitGenError> {
        let half = 0.5 * self.cfg.step_width;
        let feet = [base.offset(0.0, half, base.yaw), base.offset(0.0, -half, base.yaw)];
        let mut joints = DVector::zeros(self.model.n_joints());
        for leg in &self.legs {
            for (k, &j) in leg.iter().enumerate() {
                joints[j] = LEG_GUESS[k];
            }
        }
        let mut state = GeneratorState {
            phase: 0.0,
            walking: false,
            base_center: base,
            base_start: base,
            base_end: base,
            feet,
            swing_target: None,
            stride: 0.0,
            command: Command::ZERO,
            joints,
            arm_amplitude: 0.0,
            schmitt: [SchmittState::settled(true); 2],
        };
        let sample = self.output(&state)?;
        state.joints = sample.joints;
        Ok(state)
    }

    /// Advances one generator tick.
    pub fn step(
        &self,
        state: &GeneratorState,
        command: Command,
    ) -> Result<(GeneratorState, GeneratorSample), GaitGenError> {
        let mut n = state.clone();
        n.command = command;
        if !n.walking && !command.is_zero() {
            n.walking = true;
            self.begin_step(&mut n);
        }
        if n.walking {
            let half_before = (n.phase / PI).floor();
            let next = n.phase + PI * self.cfg.period_dnn / self.cfg.step_duration;
            if (next / PI).floor() != half_before {
                let w = n.swing_foot();
                if let Some(t) = n.swing_target.take() {
                    n.feet[w.index()] = t;
                }
                n.base_center = n.base_end;
                n.phase = next.rem_euclid(TAU);
                if command.is_zero() && self.at_rest(&n) {
                    n.walking = false;
                    n.phase = (n.phase / PI).floor() * PI;
                    n.stride = 0.0;
                } else {
                    self.begin_step(&mut n);
                }
            } else {
                n.phase = next;
            }
        }
        if n.walking {
            n.base_center = n.base_start.lerp(n.base_end, n.step_progress());
        } else {
            let rest = self.rest_base(&n.feet);
            n.base_center = n.base_center.lerp(rest, SETTLE);
        }
        let amp_target = if n.walking && self.cfg.step_length > 0.0 {
            self.cfg.arm_swing * (n.stride.abs() / self.cfg.step_length).min(1.0)
        } else {
            0.0
        };
        n.arm_amplitude += SETTLE * (amp_target - n.arm_amplitude);
        let sample = self.output(&n)?;
        n.joints = sample.joints.clone();
        Ok((n, sample))
    }

    fn rest_base(&self, feet: &[PlanarPose; 2]) -> PlanarPose {
        feet[0].lerp(feet[1], 0.5)
    }

    fn plan_target(&self, s: &GeneratorState, swing: Foot) -> (PlanarPose, f64) {
        let c = &self.cfg;
        let t = c.step_duration;
        let cmd = s.command;
        let stance = s.feet[swing.other().index()];
        let yaw = stance.yaw + (cmd.wz * t).clamp(-0.3, 0.3);
        let dx = (cmd.vx * t).clamp(-c.step_length, c.step_length);
        let dy = (cmd.vy * t).clamp(-0.5 * c.step_width, 0.5 * c.step_width);
        let side = swing.side();
        let lateral = side * (side * (side * c.step_width + dy)).max(0.6 * c.step_width);
        let mid_yaw = stance.yaw + 0.5 * wrap_angle(yaw - stance.yaw);
        let mut target = stance.offset(dx, lateral, mid_yaw);
        target.yaw = yaw;
        (target, dx)
    }

    fn at_rest(&self, s: &GeneratorState) -> bool {
        let w = s.swing_foot();
        let (target, _) = self.plan_target(s, w);
        target.close_to(s.feet[w.index()])
    }

    fn begin_step(&self, s: &mut GeneratorState) {
        let w = s.swing_foot();
        let (target, dx) = self.plan_target(s, w);
        let stance = s.feet[w.other().index()];
        s.swing_target = Some(target);
        s.stride = dx;
        s.base_start = s.base_center;
        s.base_end = stance.lerp(target, 0.5);
    }

    /// Current sole poses of both feet.
    fn sole_poses(&self, s: &GeneratorState) -> [Pose; 2] {
        let mut out = s.feet.map(|f| f.to_pose(0.0));
        if let (true, Some(target)) = (s.walking, s.swing_target) {
            let u = s.step_progress();
            let ds = self.cfg.ds_ratio;
            if u >= ds {
                let sigma = (u - ds) / (1.0 - ds);
                let w = s.swing_foot().index();
                let smooth = sigma * sigma * (3.0 - 2.0 * sigma);
                let xy = s.feet[w].lerp(target, smooth);
                out[w] = xy.to_pose(self.cfg.swing_apex * (PI * sigma).sin());
            }
        }
        out
    }

    fn base_pose(&self, s: &GeneratorState) -> Pose {
        let sway = if s.walking { self.cfg.sway * s.phase.sin() } else { 0.0 };
        let b = s.base_center.offset(0.0, sway, s.base_center.yaw);
        b.to_pose(self.cfg.base_height)
    }

    fn output(&self, s: &GeneratorState) -> Result<GeneratorSample, GaitGenError> {
        let base_pose = self.base_pose(s);
        let soles = self.sole_poses(s);
        let mut joints = s.joints.clone();
        for foot in Foot::ALL {
            self.leg_ik(&mut joints, &base_pose, foot, &soles[foot.index()])?;
        }
        if let Some(arms) = self.arms {
            let swing = s.arm_amplitude * s.phase.sin();
            joints[arms[0][0]] = -swing;
            joints[arms[1][0]] = swing;
            joints[arms[0][1]] = ELBOW_BEND;
            joints[arms[1][1]] = ELBOW_BEND;
        }
        Ok(GeneratorSample {
            base_pose,
            joints,
            soles,
        })
    }

    /// Newton iterations on the six leg joints to place the sole at `target`.
    fn leg_ik(&self, joints: &mut DVector<f64>, base: &Pose, foot: Foot, target: &Pose) -> Result<(), GaitGenError> {
        let leg = &self.legs[foot.index()];
        let sole = self.soles[foot.index()];
        let mut rs = RobotState::zeros(self.model.n_joints());
        rs.base_pose = *base;
        for _ in 0..60 {
            rs.q.copy_from(joints);
            let (pose, jac) = self.model.frames_with_jacobians(&rs, &[sole])?.remove(0);
            let ep: Vector3<f64> = target.translation - pose.translation;
            let er = rotation_log(&(target.rotation * pose.rotation.transpose()));
            let err = Vector6::new(ep.x, ep.y, ep.z, er.x, er.y, er.z);
            if err.amax() < 1e-11 {
                return Ok(());
            }
            let j = DMatrix::from_fn(6, 6, |r, c| jac[(r, 6 + leg[c])]);
            let dq = j
                .lu()
                .solve(&DVector::from_column_slice(err.as_slice()))
                .ok_or(GaitGenError::LegIk(foot.name()))?;
            let scale = (0.5 / dq.amax()).min(1.0);
            for (k, &idx) in leg.iter().enumerate() {
                joints[idx] += scale * dq[k];
            }
        }
        Err(GaitGenError::LegIk(foot.name()))
    }

    /// Kinematic robot state of a sample (zero velocities).
    pub fn robot_state(&self, sample: &GeneratorSample) -> RobotState {
        let mut rs = RobotState::zeros(self.model.n_joints());
        rs.base_pose = sample.base_pose;
        rs.q.copy_from(&sample.joints);
        rs
    }
}

/// Free-function form of [`GaitGenerator::step`] returning the base pose and
/// joint positions of the new sample.
pub fn step_generator(
    generator: &GaitGenerator,
    state: &GeneratorState,
    command: Command,
) -> Result<(GeneratorState, Pose, DVector<f64>), GaitGenError> {
    let (next, sample) = generator.step(state, command)?;
    Ok((next, sample.base_pose, sample.joints))
}

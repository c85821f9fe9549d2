//! Differential IK as one QP over the generalized velocity `ν = (base twist, dq)`.
//! Feet and CoM are equality rows; postural and torso tasks are weighted
//! least-squares terms in the cost.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::ControlError;
use crate::kinematics::{rotation_log, ChainModel, RobotState};
use crate::model::{Foot, Pose};
use crate::qpsolver::{solve_qp, CsrMatrix, QpProblem, QpSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IkTaskStack {
    /// Sole frames, left then right.
    pub foot_frames: [String; 2],
    pub torso_frame: String,
    /// Pose-error gain of the foot tasks, 1/s.
    pub foot_gain: f64,
    /// Position-error gain of the CoM task per axis, 1/s.
    pub com_gain: [f64; 3],
    pub postural_weight: f64,
    pub postural_gain: f64,
    pub torso_weight: f64,
    pub torso_gain: f64,
    /// Damping on the base twist, which no soft task observes directly.
    pub base_regularization: f64,
    /// QP tolerance; also the bound on the hard-task residual.
    pub qp_tol: f64,
}

impl Default for IkTaskStack {
    fn default() -> Self {
        Self {
            foot_frames: ["l_sole".into(), "r_sole".into()],
            torso_frame: "torso".into(),
            foot_gain: 20.0,
            com_gain: [0.0, 0.0, 10.0],
            postural_weight: 1.0,
            postural_gain: 5.0,
            torso_weight: 10.0,
            torso_gain: 10.0,
            base_regularization: 1e-6,
            qp_tol: 1e-8,
        }
    }
}

impl IkTaskStack {
    pub fn validate(&self) -> Result<(), ControlError> {
        let non_neg = [self.foot_gain, self.postural_gain, self.torso_weight, self.torso_gain]
            .into_iter()
            .chain(self.com_gain);
        for v in non_neg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ControlError::Config(format!(
                    "IK gain or weight {v} must be finite and non-negative"
                )));
            }
        }
        // the postural term is what makes the joint block of the cost definite
        if !(self.postural_weight > 0.0 && self.base_regularization > 0.0 && self.qp_tol > 0.0) {
            return Err(ControlError::Config(
                "postural_weight, base_regularization and qp_tol must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hard rows for the given target set.
    pub fn hard_rows(&self, targets: &IkTargets) -> usize {
        6 * targets.feet.iter().flatten().count() + 3 * usize::from(targets.com.is_some())
    }
}

/// Desired pose with a feed-forward twist `(linear, angular)` in the inertial frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTarget {
    pub pose: Pose,
    pub twist: Vector6<f64>,
}

impl FrameTarget {
    pub fn still(pose: Pose) -> Self {
        Self {
            pose,
            twist: Vector6::zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComTarget {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkTargets {
    /// Hard foot tasks, left then right.
    pub feet: [Option<FrameTarget>; 2],
    pub com: Option<ComTarget>,
    /// Desired torso orientation for the soft torso task.
    pub torso: Option<Matrix3<f64>>,
    pub postural: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct IkStep {
    /// Generalized velocity `(base twist, dq)`.
    pub nu: DVector<f64>,
    /// State after one explicit Euler step of length `dt`.
    pub state: RobotState,
    /// `‖Jν − v*‖∞` over the hard rows.
    pub hard_residual: f64,
    pub qp_iterations: usize,
}

impl IkStep {
    pub fn dq(&self) -> DVector<f64> {
        self.nu.rows(6, self.nu.len() - 6).into_owned()
    }
}

fn pose_error(target: &Pose, current: &Pose) -> Vector6<f64> {
    let dp = target.translation - current.translation;
    let dr = rotation_log(&(target.rotation * current.rotation.transpose()));
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// Solves the task-stack QP at `state` and integrates the result over `dt`.
pub fn ik_step(
    model: &ChainModel,
    state: &RobotState,
    stack: &IkTaskStack,
    targets: &IkTargets,
    dt: f64,
) -> Result<IkStep, ControlError> {
    stack.validate()?;
    let nv = model.nv();
    let nj = model.n_joints();
    if targets.postural.len() != nj || state.q.len() != nj {
        return Err(ControlError::Config(format!(
            "expected {nj} joints, postural has {} and state has {}",
            targets.postural.len(),
            state.q.len()
        )));
    }
    let n_hard = stack.hard_rows(targets);
    if n_hard > nv {
        return Err(ControlError::Config(format!(
            "{n_hard} hard rows exceed {nv} variables"
        )));
    }
    if !(dt > 0.0) {
        return Err(ControlError::Config("dt must be positive".into()));
    }

    let frames = [
        model.frame_index(&stack.foot_frames[0])?,
        model.frame_index(&stack.foot_frames[1])?,
        model.frame_index(&stack.torso_frame)?,
    ];
    let fj = model.frames_with_jacobians(state, &frames)?;

    let mut a = DMatrix::zeros(n_hard, nv);
    let mut b = DVector::zeros(n_hard);
    let mut labels = Vec::new();
    let mut row = 0;
    for foot in Foot::ALL {
        let i = foot.index();
        let Some(t) = &targets.feet[i] else { continue };
        let (pose, j) = &fj[i];
        let v = t.twist + pose_error(&t.pose, pose) * stack.foot_gain;
        a.rows_mut(row, 6).copy_from(j);
        b.rows_mut(row, 6).copy_from(&v);
        labels.push((format!("{foot} foot"), row, 6));
        row += 6;
    }
    if let Some(t) = &targets.com {
        let (com, jc) = model.com_jacobian(state)?;
        let v = t.velocity + (t.position - com).component_mul(&Vector3::from(stack.com_gain));
        a.rows_mut(row, 3).copy_from(&jc);
        b.rows_mut(row, 3).copy_from(&v);
        labels.push(("CoM".into(), row, 3));
    }

    let mut h = DMatrix::zeros(nv, nv);
    let mut c = DVector::zeros(nv);
    for k in 0..6 {
        h[(k, k)] += stack.base_regularization;
    }
    for k in 0..nj {
        h[(6 + k, 6 + k)] += stack.postural_weight;
        c[6 + k] -= stack.postural_weight * stack.postural_gain * (targets.postural[k] - state.q[k]);
    }
    if let Some(r_des) = &targets.torso {
        let (pose, j) = &fj[2];
        let jw = j.rows(3, 3);
        let w = rotation_log(&(r_des * pose.rotation.transpose())) * stack.torso_gain;
        h += jw.transpose() * jw * stack.torso_weight;
        c -= jw.transpose() * w * stack.torso_weight;
    }

    let qp = QpProblem::new(CsrMatrix::from_dense(&h), c).with_equalities(CsrMatrix::from_dense(&a), b.clone());
    let settings = QpSettings::default().with_tol(stack.qp_tol).with_max_iter(20_000);
    let sol = solve_qp(&qp, None, &settings)?;
    let resid = &a * &sol.x - &b;
    let hard_residual = resid.amax();
    if !sol.is_solved() || hard_residual > stack.qp_tol {
        let residuals = labels
            .into_iter()
            .map(|(name, r0, n)| (name, resid.rows(r0, n).amax()))
            .collect();
        return Err(ControlError::IkInfeasible { residuals });
    }
    let mut next = state.clone();
    next.integrate(&sol.x, dt);
    Ok(IkStep {
        nu: sol.x,
        state: next,
        hard_residual,
        qp_iterations: sol.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bent_knees(model: &ChainModel) -> RobotState {
        let mut s = RobotState::zeros(model.n_joints());
        for (name, v) in [
            ("l_hip_pitch", -0.4),
            ("r_hip_pitch", -0.4),
            ("l_knee", 0.8),
            ("r_knee", 0.8),
            ("l_ankle_pitch", -0.4),
            ("r_ankle_pitch", -0.4),
        ] {
            s.q[model.joint_index(name).unwrap()] = v;
        }
        s
    }

    #[test]
    fn postural_only_stack_is_a_joint_servo() {
        let model = ChainModel::bundled_biped();
        let state = bent_knees(&model);
        let stack = IkTaskStack::default();
        let postural = DVector::from_fn(model.n_joints(), |k, _| 0.05 * k as f64 - 0.3);
        let targets = IkTargets {
            feet: [None, None],
            com: None,
            torso: None,
            postural: postural.clone(),
        };
        let step = ik_step(&model, &state, &stack, &targets, 0.002).unwrap();
        let want = (&postural - &state.q) * stack.postural_gain;
        let err = (step.dq() - want).amax();
        assert!(err < 1e-9, "{err}");
        assert!(step.nu.rows(0, 6).amax() < 1e-9);
    }

    #[test]
    fn too_many_hard_rows_are_rejected() {
        let model = ChainModel::bundled_biped();
        let state = bent_knees(&model);
        let bad = IkTargets {
            feet: [None, None],
            com: None,
            torso: None,
            postural: DVector::zeros(3),
        };
        assert!(matches!(
            ik_step(&model, &state, &IkTaskStack::default(), &bad, 0.002),
            Err(ControlError::Config(_))
        ));
    }
}

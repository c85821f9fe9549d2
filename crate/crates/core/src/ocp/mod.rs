//! Trajectory adjustment: a centroidal optimal control problem over a fixed
//! horizon, transcribed by multiple shooting and solved by Gauss-Newton SQP on
//! top of [`crate::qpsolver`]. The controller runs it in receding horizon,
//! either fed by its own integrated plan (RHP) or by measurements (MPC).

mod controller;
mod dynamics;
mod nlp;
mod sqp;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::qpsolver::QpError;

pub use controller::{ControlOutput, Feedback, FeedbackMode, MpcController, TelemetryRecord, TelemetryWriter};
pub use dynamics::{cbf_value, centroidal_rhs, contact_rhs, friction_facets, rhs_from_points, VertexForces};
pub use nlp::{transcribe, Layout, Linearization, Nlp, OcpDecision, RowKind};
pub use sqp::{solve_sqp, violations_by_kind, OcpSolution, SolveStats, SqpStatus};

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("invalid MPC configuration: {0}")]
    Config(String),
    #[error("references hold {got} samples, the horizon needs {needed}")]
    ShortReferences { needed: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("no feedback available for the first cycle")]
    NoFeedback,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// External wrench acting on the robot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceWrench {
    /// Force, newtons.
    pub force: Vector3<f64>,
    /// Point the force acts through, meters.
    pub application_point: Vector3<f64>,
}

impl DisturbanceWrench {
    pub fn is_finite(&self) -> bool {
        self.force
            .iter()
            .chain(self.application_point.iter())
            .all(|v| v.is_finite())
    }
}

/// Diagonal cost weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcWeights {
    pub com: [f64; 3],
    pub h_ang: [f64; 3],
    pub contact: [f64; 3],
    /// Deviation of each vertex force from the foot's mean vertex force.
    pub force_spread: [f64; 3],
    /// Deviation of the foot's vertical force from its nominal value.
    pub force_nominal: f64,
    /// Forward-difference force rate.
    pub force_rate: [f64; 3],
    /// Regularization of contact velocities.
    pub contact_velocity: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self {
            com: [100.0, 100.0, 1000.0],
            h_ang: [30.0, 30.0, 30.0],
            contact: [200.0, 200.0, 200.0],
            force_spread: [1e-3, 1e-3, 1e-3],
            force_nominal: 1e-3,
            force_rate: [1e-5, 1e-5, 1e-5],
            contact_velocity: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbfConfig {
    pub alpha: f64,
    /// Decay rate in `(0, 1]`.
    pub gamma_cbf: f64,
    /// Quadratic penalty on the slack of the first barrier row.
    pub slack_penalty: f64,
}

impl Default for CbfConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma_cbf: 0.1,
            slack_penalty: 1e6,
        }
    }
}

/// Admissible contact offset in the nominal foot frame, meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepBox {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl Default for StepBox {
    fn default() -> Self {
        Self {
            lower: [-0.04, -0.04],
            upper: [0.04, 0.04],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SqpConfig {
    pub max_iter: usize,
    /// Bound on constraint violation at convergence.
    pub tol: f64,
    /// Bound on the relative Lagrangian gradient at convergence.
    pub dual_tol: f64,
    /// Sufficient-decrease fraction of the merit line search.
    pub armijo: f64,
    pub backtrack: f64,
    pub min_step: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    /// Quadratic penalty on inequality slacks when a subproblem is infeasible.
    pub relaxation_penalty: f64,
}

impl Default for SqpConfig {
    fn default() -> Self {
        Self {
            max_iter: 12,
            tol: 1e-6,
            dual_tol: 1e-4,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-4,
            qp_tol: 1e-8,
            qp_max_iter: 20000,
            relaxation_penalty: 1e6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Node spacing, seconds.
    pub t_mpc: f64,
    /// Number of intervals `N`.
    pub horizon_samples: usize,
    /// Freeze window before touchdown; `None` means two nodes.
    pub lead_window: Option<f64>,
    pub weights: MpcWeights,
    pub cbf: CbfConfig,
    pub step_box: StepBox,
    pub friction_cone_facets: usize,
    pub sqp: SqpConfig,
    /// Solve-time budget, seconds; `None` means one period.
    pub deadline: Option<f64>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            t_mpc: 0.05,
            horizon_samples: 24,
            lead_window: None,
            weights: MpcWeights::default(),
            cbf: CbfConfig::default(),
            step_box: StepBox::default(),
            friction_cone_facets: 8,
            sqp: SqpConfig::default(),
            deadline: None,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), OcpError> {
        let fail = |m: String| Err(OcpError::Config(m));
        if !(self.t_mpc > 0.0) {
            return fail("t_mpc must be positive".into());
        }
        if self.horizon_samples == 0 {
            return fail("horizon_samples must be at least 1".into());
        }
        let w = &self.weights;
        let all = w
            .com
            .iter()
            .chain(&w.h_ang)
            .chain(&w.contact)
            .chain(&w.force_spread)
            .chain(&w.force_rate)
            .chain([&w.force_nominal, &w.contact_velocity]);
        for v in all {
            if !(*v >= 0.0 && v.is_finite()) {
                return fail(format!("weight {v} must be finite and non-negative"));
            }
        }
        if !(self.cbf.alpha > 0.0) {
            return fail("cbf.alpha must be positive".into());
        }
        if !(self.cbf.gamma_cbf > 0.0 && self.cbf.gamma_cbf <= 1.0) {
            return fail("cbf.gamma_cbf must lie in (0, 1]".into());
        }
        if !(self.cbf.slack_penalty > 0.0) {
            return fail("cbf.slack_penalty must be positive".into());
        }
        for a in 0..2 {
            if !(self.step_box.lower[a] <= self.step_box.upper[a]) {
                return fail("step_box.lower must not exceed step_box.upper".into());
            }
        }
        if self.friction_cone_facets < 4 {
            return fail("friction_cone_facets must be at least 4".into());
        }
        if let Some(l) = self.lead_window {
            if !(l >= 0.0) {
                return fail("lead_window must be non-negative".into());
            }
        }
        let s = &self.sqp;
        if s.max_iter == 0 || !(s.tol > 0.0 && s.dual_tol > 0.0 && s.qp_tol > 0.0) {
            return fail("sqp iteration limit and tolerances must be positive".into());
        }
        if !(s.backtrack > 0.0 && s.backtrack < 1.0 && s.armijo > 0.0 && s.armijo < 0.5) {
            return fail("sqp line-search parameters out of range".into());
        }
        Ok(())
    }

    pub fn lead_window(&self) -> f64 {
        self.lead_window.unwrap_or(2.0 * self.t_mpc)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_samples as f64 * self.t_mpc
    }

    pub fn deadline(&self) -> f64 {
        self.deadline.unwrap_or(self.t_mpc)
    }
}

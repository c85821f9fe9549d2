//! Receding-horizon execution of the OCP.

use std::io::{self, Write};

use nalgebra::Vector3;

use super::nlp::{transcribe, Nlp};
use super::sqp::{solve_sqp, OcpSolution, SqpStatus};
use super::{DisturbanceWrench, MpcConfig, OcpError, VertexForces};
use crate::model::{CentroidalState, Footstep, ReferenceBundle, RobotParams};

/// Source of the initial condition of every solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackMode {
    /// The previous plan integrated through the model, plus the measured wrench.
    Rhp,
    /// Measured centroidal state.
    Mpc,
}

/// Measurements available at the start of a cycle.
#[derive(Clone, Debug, Default)]
pub struct Feedback {
    /// Measured centroidal state; required in MPC mode.
    pub state: Option<CentroidalState>,
    /// Ground contact of each foot currently touching down.
    pub contacts: [Option<Vector3<f64>>; 2],
    pub disturbance: Option<DisturbanceWrench>,
}

/// What the control layer consumes from one cycle.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    /// Start time of the cycle.
    pub time: f64,
    /// Initial condition the plan was computed from.
    pub state_now: CentroidalState,
    /// Planned state one period ahead.
    pub state_next: CentroidalState,
    /// Vertex forces over the first period.
    pub forces: VertexForces,
    /// World positions of the contact vertices over the first period.
    pub vertices: [[Vector3<f64>; 4]; 2],
    pub gamma: [bool; 2],
    pub adjusted_footsteps: Vec<Footstep>,
    /// Feedback was missing and the previous output is being held.
    pub stale: bool,
}

#[derive(Clone, Debug)]
pub struct TelemetryRecord {
    pub time: f64,
    pub solve_time: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub status: SqpStatus,
    pub deadline_miss: bool,
    pub stale: bool,
    pub predicted_com: Vector3<f64>,
    pub foot_forces: [Vector3<f64>; 2],
    pub next_footsteps: [Option<Vector3<f64>>; 2],
}

pub struct MpcController {
    mode: FeedbackMode,
    cfg: MpcConfig,
    params: RobotParams,
    previous: Option<(Nlp, OcpSolution)>,
    last_output: Option<ControlOutput>,
    deadline_misses: usize,
    cycles: usize,
    telemetry: Vec<TelemetryRecord>,
}

impl MpcController {
    pub fn new(mode: FeedbackMode, cfg: MpcConfig, params: RobotParams) -> Result<Self, OcpError> {
        cfg.validate()?;
        params.validate()?;
        Ok(Self {
            mode,
            cfg,
            params,
            previous: None,
            last_output: None,
            deadline_misses: 0,
            cycles: 0,
            telemetry: Vec::new(),
        })
    }

    pub fn mode(&self) -> FeedbackMode {
        self.mode
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn deadline_misses(&self) -> usize {
        self.deadline_misses
    }

    pub fn cycles(&self) -> usize {
        self.cycles
    }

    pub fn telemetry(&self) -> &[TelemetryRecord] {
        &self.telemetry
    }

    pub fn last_solution(&self) -> Option<&OcpSolution> {
        self.previous.as_ref().map(|(_, s)| s)
    }

    pub fn last_nlp(&self) -> Option<&Nlp> {
        self.previous.as_ref().map(|(n, _)| n)
    }

    /// Runs one cycle at `time` with references starting at `time`.
    pub fn advance(
        &mut self,
        time: f64,
        refs: &ReferenceBundle,
        feedback: &Feedback,
    ) -> Result<(OcpSolution, ControlOutput), OcpError> {
        let prev_plan = self.previous.as_ref().map(|(nlp, sol)| {
            let z = sol.decision.to_vector();
            let rhs = nlp.stage_rhs(&z, 0);
            let x0 = sol.decision.states[0].to_array();
            let next: Vec<f64> = (0..9).map(|a| x0[a] + nlp.t_mpc * rhs[a]).collect();
            (CentroidalState::from_slice(&next), sol.decision.contacts[1])
        });
        let state = match self.mode {
            FeedbackMode::Mpc => match feedback.state {
                Some(s) => s,
                None => return self.hold(time),
            },
            FeedbackMode::Rhp => match (&prev_plan, feedback.state) {
                (Some((s, _)), _) => *s,
                (None, Some(s)) => s,
                (None, None) => return Err(OcpError::NoFeedback),
            },
        };
        let contacts = [0, 1].map(|i| {
            let measured = if self.mode == FeedbackMode::Mpc {
                feedback.contacts[i]
            } else {
                None
            };
            measured
                .or(prev_plan.as_ref().map(|(_, c)| c[i]))
                .or(feedback.contacts[i])
                .or_else(|| {
                    refs.nominal_foot_pose(crate::model::Foot::ALL[i], 0.0)
                        .map(|p| p.translation)
                })
                .unwrap_or_else(Vector3::zeros)
        });
        let nlp = transcribe(
            refs,
            &refs.timeline,
            &state,
            &contacts,
            &self.params,
            &self.cfg,
            feedback.disturbance.as_ref(),
        )?;
        let warm = self.previous.as_ref().map(|(_, s)| s.decision.shifted());
        let sol = solve_sqp(&nlp, warm.as_ref())?;
        self.cycles += 1;
        let solve_time = sol.stats.wall_time.as_secs_f64();
        let miss = solve_time > self.cfg.deadline();
        if miss {
            self.deadline_misses += 1;
            log::warn!("OCP solve took {:.1} ms at t = {time:.3} s", solve_time * 1e3);
        }

        let z = sol.decision.to_vector();
        let rhs = nlp.stage_rhs(&z, 0);
        let x0 = state.to_array();
        let integrated: Vec<f64> = (0..9).map(|a| x0[a] + nlp.t_mpc * rhs[a]).collect();
        let integrated = CentroidalState::from_slice(&integrated);
        let state_next = match self.mode {
            FeedbackMode::Rhp => integrated,
            FeedbackMode::Mpc => sol.decision.states[1],
        };
        let vertices = [0, 1].map(|i| {
            let pc = sol.decision.contacts[0][i];
            let v = self.params.foot_vertices();
            [0, 1, 2, 3].map(|j| pc + nlp.rotations[0][i] * v[j])
        });
        let out = ControlOutput {
            time,
            state_now: state,
            state_next,
            forces: sol.decision.forces[0],
            vertices,
            gamma: nlp.flags[0].gamma,
            adjusted_footsteps: sol.adjusted_footsteps.clone(),
            stale: false,
        };
        self.telemetry.push(record(time, &sol, &out, miss));
        self.previous = Some((nlp, sol.clone()));
        self.last_output = Some(out.clone());
        Ok((sol, out))
    }

    fn hold(&mut self, time: f64) -> Result<(OcpSolution, ControlOutput), OcpError> {
        let (Some((_, sol)), Some(out)) = (&self.previous, &self.last_output) else {
            return Err(OcpError::NoFeedback);
        };
        let mut out = out.clone();
        out.stale = true;
        let sol = sol.clone();
        let mut rec = record(time, &sol, &out, false);
        rec.solve_time = 0.0;
        rec.iterations = 0;
        self.telemetry.push(rec);
        Ok((sol, out))
    }
}

fn record(time: f64, sol: &OcpSolution, out: &ControlOutput, miss: bool) -> TelemetryRecord {
    let mut next = [None; 2];
    for fs in &sol.adjusted_footsteps {
        let i = fs.contact.index();
        if fs.activation_time > 0.0 && next[i].is_none() {
            next[i] = Some(fs.pose.translation);
        }
    }
    TelemetryRecord {
        time,
        solve_time: sol.stats.wall_time.as_secs_f64(),
        iterations: sol.stats.iterations,
        kkt_residual: sol.stats.kkt_residual,
        status: sol.stats.status.clone(),
        deadline_miss: miss,
        stale: out.stale,
        predicted_com: out.state_next.p_com,
        foot_forces: [0, 1].map(|i| out.forces[i].iter().sum()),
        next_footsteps: next,
    }
}

/// Per-cycle telemetry as CSV.
pub struct TelemetryWriter<W: Write> {
    out: W,
}

impl<W: Write> TelemetryWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(
            out,
            "t,solve_ms,sqp_iter,kkt,status,deadline_miss,stale,com_x,com_y,com_z,\
             fl_x,fl_y,fl_z,fr_x,fr_y,fr_z,next_l_x,next_l_y,next_r_x,next_r_y"
        )?;
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &TelemetryRecord) -> io::Result<()> {
        let status = match &r.status {
            SqpStatus::Converged => "converged",
            SqpStatus::MaxIterations => "max_iter",
            SqpStatus::Failed(_) => "failed",
        };
        let c = r.predicted_com;
        let [fl, fr] = r.foot_forces;
        let step = |p: Option<Vector3<f64>>| p.map_or(",".to_owned(), |p| format!("{},{}", p.x, p.y));
        writeln!(
            self.out,
            "{},{:.3},{},{:e},{status},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.time,
            r.solve_time * 1e3,
            r.iterations,
            r.kkt_residual,
            u8::from(r.deadline_miss),
            u8::from(r.stale),
            c.x,
            c.y,
            c.z,
            fl.x,
            fl.y,
            fl.z,
            fr.x,
            fr.y,
            fr.z,
            step(r.next_footsteps[0]),
            step(r.next_footsteps[1]),
        )
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

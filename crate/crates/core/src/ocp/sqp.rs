//! Gauss-Newton SQP with an ℓ1 merit line search.

use std::time::{Duration, Instant};

use nalgebra::{DVector, Vector3, Vector6};

use super::nlp::{violation, Linearization, Nlp, OcpDecision, RowKind};
use super::OcpError;
use crate::model::{Footstep, Pose};
use crate::qpsolver::{solve_qp, CsrMatrix, QpProblem, QpSettings, QpSolution, QpStatus, TripletBuilder, WarmStart};

#[derive(Clone, Debug, PartialEq)]
pub enum SqpStatus {
    Converged,
    /// Iteration cap reached before the tolerances were met.
    MaxIterations,
    /// No step could be taken; the last iterate is kept.
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct SolveStats {
    pub status: SqpStatus,
    pub iterations: usize,
    /// `max(primal, dual)` at the returned iterate.
    pub kkt_residual: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub qp_iterations: usize,
    /// Merit before and after every accepted step, under the penalty in force for it.
    pub merit: Vec<[f64; 2]>,
    /// Some subproblem needed slack relaxation.
    pub relaxed: bool,
    /// Slack on the first barrier row.
    pub barrier_slack: f64,
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct OcpSolution {
    pub decision: OcpDecision,
    /// Footsteps of the references with positions replaced by the optimized ones.
    pub adjusted_footsteps: Vec<Footstep>,
    pub predicted_com: Vec<Vector3<f64>>,
    /// `(h_lin, h_ang)` per node.
    pub predicted_h: Vec<Vector6<f64>>,
    pub cost: f64,
    pub stats: SolveStats,
}

impl OcpSolution {
    /// Converged, or stopped at the iteration cap while primal feasible.
    pub fn is_accepted(&self, tol: f64) -> bool {
        match self.stats.status {
            SqpStatus::Converged => true,
            SqpStatus::MaxIterations => self.stats.primal_residual <= tol,
            SqpStatus::Failed(_) => false,
        }
    }
}

struct Point {
    z: DVector<f64>,
    res: DVector<f64>,
    eq: Linearization,
    ineq: Linearization,
    cost: f64,
    infeas_l1: f64,
    primal: f64,
}

impl Point {
    fn new(nlp: &Nlp, z: DVector<f64>) -> Self {
        let res = nlp.residuals(&z);
        let eq = nlp.equalities(&z);
        let ineq = nlp.inequalities(&z);
        let (lo, hi) = nlp.inequality_bounds();
        let viol = violation(&ineq.values, lo, hi);
        let infeas_l1 = eq.values.iter().map(|v| v.abs()).sum::<f64>() + viol.iter().sum::<f64>();
        let primal = eq.values.amax().max(viol.iter().fold(0.0, |m: f64, v| m.max(*v)));
        Self {
            cost: res.norm_squared(),
            z,
            res,
            eq,
            ineq,
            infeas_l1,
            primal,
        }
    }

    fn merit(&self, nu: f64) -> f64 {
        self.cost + nu * self.infeas_l1
    }
}

/// Solves the NLP from `warm_start`, or from the references when absent.
pub fn solve_sqp(nlp: &Nlp, warm_start: Option<&OcpDecision>) -> Result<OcpSolution, OcpError> {
    let started = Instant::now();
    let cfg = &nlp.cfg.sqp;
    let qp_settings = QpSettings::default()
        .with_tol(cfg.qp_tol)
        .with_max_iter(cfg.qp_max_iter);

    let r_red = nlp.reduce(nlp.residual_jacobian());
    let hessian = gram(&r_red, 2.0);

    let mut pt = Point::new(nlp, nlp.initial_point(warm_start));
    let mut nu = 1.0;
    let mut merit = Vec::new();
    let mut duals: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut dual_res = f64::INFINITY;
    let mut status = SqpStatus::MaxIterations;
    let mut iterations = 0;
    let mut qp_iterations = 0;
    let mut relaxed = false;

    loop {
        let grad = nlp.reduce_vector(&(2.0 * nlp.residual_jacobian().tr_mul_vec(&pt.res)));
        let j_eq = nlp.reduce(&pt.eq.jacobian);
        let j_in = nlp.reduce(&pt.ineq.jacobian);
        if let Some((y_eq, y_in)) = &duals {
            let lag = &grad + j_eq.tr_mul_vec(y_eq) + j_in.tr_mul_vec(y_in);
            dual_res = lag.amax() / (1.0 + grad.amax());
            if pt.primal <= cfg.tol && dual_res <= cfg.dual_tol {
                status = SqpStatus::Converged;
                break;
            }
        }
        if iterations == cfg.max_iter {
            break;
        }
        iterations += 1;

        let (lo, hi) = nlp.inequality_bounds();
        let qp = QpProblem::new(hessian.clone(), grad.clone())
            .with_equalities(j_eq.clone(), -&pt.eq.values)
            .with_inequalities(j_in.clone(), lo - &pt.ineq.values, hi - &pt.ineq.values);
        let warm = duals.as_ref().map(|(ye, yi)| WarmStart {
            x: DVector::zeros(nlp.n_free()),
            y_eq: Some(ye.clone()),
            y_in: Some(yi.clone()),
        });
        let mut sol = solve_qp(&qp, warm.as_ref(), &qp_settings)?;
        qp_iterations += sol.iterations;
        if !sol.is_solved() {
            let elastic = solve_relaxed(&qp, cfg.relaxation_penalty, &qp_settings)?;
            qp_iterations += elastic.iterations;
            relaxed = true;
            if !elastic.is_solved() && !usable(&elastic) {
                status = SqpStatus::Failed(format!("subproblem not solved: {:?}", kind(&sol.status)));
                break;
            }
            sol = elastic;
        }
        let d = sol.x.rows(0, nlp.n_free()).into_owned();
        let (y_eq, y_in) = (sol.y_eq.clone(), sol.y_in.rows(0, nlp.n_inequalities()).into_owned());
        let y_max = y_eq.amax().max(y_in.amax());
        if 1.1 * y_max + 1.0 > nu {
            nu = 1.1 * y_max + 1.0;
        }

        // directional derivative of the merit along d
        let slope = grad.dot(&d) - nu * pt.infeas_l1;
        let phi0 = pt.merit(nu);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= cfg.min_step {
            let trial = Point::new(nlp, nlp.apply_step(&pt.z, &d, alpha));
            let phi = trial.merit(nu);
            if phi <= phi0 + cfg.armijo * alpha * slope.min(0.0) || (phi <= phi0 && d.amax() * alpha < 1e-12) {
                accepted = Some(trial);
                break;
            }
            alpha *= cfg.backtrack;
        }
        match accepted {
            Some(next) => {
                merit.push([phi0, next.merit(nu)]);
                pt = next;
                duals = Some((y_eq, y_in));
            }
            None => {
                // the step is too short to improve the merit; stop here
                duals = Some((y_eq, y_in));
                let grad = nlp.reduce_vector(&nlp.cost_gradient(&pt.z));
                if let Some((ye, yi)) = &duals {
                    let lag = &grad + j_eq.tr_mul_vec(ye) + j_in.tr_mul_vec(yi);
                    dual_res = lag.amax() / (1.0 + grad.amax());
                }
                status = if pt.primal <= cfg.tol && dual_res <= cfg.dual_tol {
                    SqpStatus::Converged
                } else {
                    SqpStatus::Failed("line search found no merit decrease".into())
                };
                break;
            }
        }
    }

    let n = nlp.layout.n;
    let decision = OcpDecision::from_vector(n, &pt.z);
    let barrier_slack = pt.z[nlp.layout.slack()];
    let adjusted_footsteps = adjusted_footsteps(nlp, &decision);
    Ok(OcpSolution {
        predicted_com: decision.states.iter().map(|s| s.p_com).collect(),
        predicted_h: decision
            .states
            .iter()
            .map(|s| Vector6::new(s.h_lin.x, s.h_lin.y, s.h_lin.z, s.h_ang.x, s.h_ang.y, s.h_ang.z))
            .collect(),
        adjusted_footsteps,
        decision,
        cost: pt.cost,
        stats: SolveStats {
            status,
            iterations,
            kkt_residual: pt.primal.max(dual_res),
            primal_residual: pt.primal,
            dual_residual: dual_res,
            qp_iterations,
            merit,
            relaxed,
            barrier_slack,
            wall_time: started.elapsed(),
        },
    })
}

fn kind(s: &QpStatus) -> &'static str {
    match s {
        QpStatus::Solved => "solved",
        QpStatus::Infeasible { .. } => "infeasible",
        QpStatus::DualInfeasible { .. } => "unbounded",
        QpStatus::MaxIter => "iteration limit",
    }
}

fn usable(sol: &QpSolution) -> bool {
    sol.status == QpStatus::MaxIter && sol.kkt.max() < 1e-4
}

/// `scale · AᵀA`.
fn gram(a: &CsrMatrix, scale: f64) -> CsrMatrix {
    let mut b = TripletBuilder::new(a.ncols(), a.ncols());
    for i in 0..a.nrows() {
        let (cols, vals) = a.row(i);
        for (p, (&ci, &vi)) in cols.iter().zip(vals).enumerate() {
            for (&cj, &vj) in cols[..=p].iter().zip(&vals[..=p]) {
                let v = scale * vi * vj;
                b.push(ci, cj, v);
                if ci != cj {
                    b.push(cj, ci, v);
                }
            }
        }
    }
    b.build()
}

/// Same subproblem with a free, quadratically penalized slack on every
/// inequality row; always feasible.
fn solve_relaxed(qp: &QpProblem, penalty: f64, settings: &QpSettings) -> Result<QpSolution, OcpError> {
    let n = qp.dim();
    let m = qp.n_in();
    let mut h = TripletBuilder::new(n + m, n + m);
    for (i, j, v) in qp.h.iter() {
        h.push(i, j, v);
    }
    for r in 0..m {
        h.push(n + r, n + r, 2.0 * penalty);
    }
    let mut c = DVector::zeros(n + m);
    c.rows_mut(0, n).copy_from(&qp.c);
    let mut eq = TripletBuilder::new(qp.n_eq(), n + m);
    for (i, j, v) in qp.a_eq.iter() {
        eq.push(i, j, v);
    }
    let mut ain = TripletBuilder::new(m, n + m);
    for (i, j, v) in qp.a_in.iter() {
        ain.push(i, j, v);
    }
    for r in 0..m {
        ain.push(r, n + r, 1.0);
    }
    let relaxed = QpProblem::new(h.build(), c)
        .with_equalities(eq.build(), qp.b_eq.clone())
        .with_inequalities(ain.build(), qp.l_in.clone(), qp.u_in.clone());
    Ok(solve_qp(&relaxed, None, settings)?)
}

fn adjusted_footsteps(nlp: &Nlp, d: &OcpDecision) -> Vec<Footstep> {
    let n = nlp.layout.n;
    let t = nlp.t_mpc;
    let eps = 1e-9;
    nlp.footsteps
        .iter()
        .map(|fs| {
            let i = fs.contact.index();
            let mut out = fs.clone();
            if fs.deactivation_time <= 0.0 {
                return out;
            }
            let start = fs.activation_time - nlp.lead_window;
            let node = (0..=n).find(|&k| {
                let tk = k as f64 * t;
                tk + eps >= start && tk < fs.deactivation_time && matches_nominal(nlp, k, i, fs)
            });
            let node = node.or_else(|| {
                // landing beyond the horizon: the last node tracks it when still free
                let upcoming = fs.activation_time > n as f64 * t;
                (upcoming && matches_nominal(nlp, n, i, fs)).then_some(n)
            });
            if let Some(k) = node {
                let p = d.contacts[k][i];
                out.pose = Pose::new(Vector3::new(p.x, p.y, fs.pose.translation.z), fs.pose.rotation);
            }
            out
        })
        .collect()
}

fn matches_nominal(nlp: &Nlp, k: usize, i: usize, fs: &Footstep) -> bool {
    nlp.nominal[k][i].is_some_and(|p| (p.xy() - fs.pose.translation.xy()).norm() < 1e-12)
}

/// Largest violation per inequality row kind: `(barrier, friction, step box)`.
pub fn violations_by_kind(nlp: &Nlp, z: &DVector<f64>) -> (f64, f64, f64) {
    let ineq = nlp.inequalities(z);
    let (lo, hi) = nlp.inequality_bounds();
    let viol = violation(&ineq.values, lo, hi);
    let mut out = (0.0f64, 0.0f64, 0.0f64);
    for (k, v) in nlp.inequality_kinds().iter().zip(viol) {
        match k {
            RowKind::Barrier { .. } => out.0 = out.0.max(v),
            RowKind::Friction { .. } => out.1 = out.1.max(v),
            RowKind::StepBox { .. } => out.2 = out.2.max(v),
        }
    }
    out
}

//! Dense-interface convex QP solver.
//!
//! Operator splitting (ADMM, in the form popularized by OSQP) on a Ruiz
//! equilibrated problem, followed by active-set polishing. Linear systems are
//! factored with an envelope LDLᵀ, so stage-ordered optimal control problems
//! keep their band structure.
//!
//! ```text
//! minimize   ½ xᵀ H x + cᵀ x
//! subject to A_eq x = b_eq
//!            l_in ≤ A_in x ≤ u_in
//! ```
//!
//! Dual sign convention: stationarity reads `H x + c + A_eqᵀ y_eq + A_inᵀ y_in = 0`,
//! so `y_in > 0` marks an active upper bound and `y_in < 0` an active lower bound.

mod admm;
pub mod ldl;
pub mod sparse;

use std::io::{self, Write};

use nalgebra::DVector;
use thiserror::Error;

pub use sparse::{CsrMatrix, TripletBuilder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cost matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("inequality row {0} has lower bound above upper bound")]
    BoundOrder(usize),
    #[error("non-finite data in {0}")]
    NonFinite(&'static str),
    #[error("linear system factorization failed: {0}")]
    Factorization(#[from] ldl::LdlError),
}

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub h: CsrMatrix,
    pub c: DVector<f64>,
    pub a_eq: CsrMatrix,
    pub b_eq: DVector<f64>,
    pub a_in: CsrMatrix,
    pub l_in: DVector<f64>,
    pub u_in: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem.
    pub fn new(h: CsrMatrix, c: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            h,
            c,
            a_eq: CsrMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: CsrMatrix::zeros(0, n),
            l_in: DVector::zeros(0),
            u_in: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: CsrMatrix, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: CsrMatrix, l: DVector<f64>, u: DVector<f64>) -> Self {
        self.a_in = a;
        self.l_in = l;
        self.u_in = u;
        self
    }

    /// Adds the box `l ≤ x ≤ u` as inequality rows.
    pub fn with_bounds(self, l: DVector<f64>, u: DVector<f64>) -> Self {
        let n = self.dim();
        self.with_inequalities(CsrMatrix::identity(n), l, u)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn n_in(&self) -> usize {
        self.l_in.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimension("equality block".into()));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.l_in.len() || self.l_in.len() != self.u_in.len() {
            return Err(QpError::Dimension("inequality block".into()));
        }
        let asym = self.h.max_asymmetry();
        if asym > 1e-10 {
            return Err(QpError::NotSymmetric(asym));
        }
        if self.h.iter().any(|(_, _, v)| !v.is_finite()) {
            return Err(QpError::NonFinite("H"));
        }
        if self.c.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("c"));
        }
        if self.b_eq.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("b_eq"));
        }
        for i in 0..self.n_in() {
            if self.l_in[i] > self.u_in[i] {
                return Err(QpError::BoundOrder(i));
            }
            if self.l_in[i].is_nan() || self.u_in[i].is_nan() {
                return Err(QpError::NonFinite("inequality bounds"));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&self.h.mul_vec(x)) + self.c.dot(x)
    }

    /// KKT residuals of a primal/dual pair against this problem.
    pub fn kkt_residuals(&self, x: &DVector<f64>, y_eq: &DVector<f64>, y_in: &DVector<f64>) -> KktResiduals {
        let ax_eq = self.a_eq.mul_vec(x);
        let ax_in = self.a_in.mul_vec(x);
        let mut primal = (&ax_eq - &self.b_eq).amax();
        let mut compl = 0.0f64;
        for i in 0..self.n_in() {
            let v = ax_in[i];
            primal = primal.max(self.l_in[i] - v).max(v - self.u_in[i]);
            let y = y_in[i];
            // a multiplier pushing against an absent bound counts in full
            let gap = if y > 0.0 {
                y * (self.u_in[i] - v).min(1.0)
            } else if y < 0.0 {
                -y * (v - self.l_in[i]).min(1.0)
            } else {
                0.0
            };
            compl = compl.max(if gap.is_nan() { f64::INFINITY } else { gap.abs() });
        }
        let grad = self.h.mul_vec(x) + &self.c + self.a_eq.tr_mul_vec(y_eq) + self.a_in.tr_mul_vec(y_in);
        KktResiduals {
            primal: primal.max(0.0),
            dual: grad.amax(),
            complementarity: compl,
        }
    }

    /// Writes the problem as a plain-text triplet dump for offline debugging.
    pub fn dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# qp n={} m_eq={} m_in={}", self.dim(), self.n_eq(), self.n_in())?;
        let block = |name: &str, m: &CsrMatrix, w: &mut W| -> io::Result<()> {
            writeln!(w, "{name} {} {} {}", m.nrows(), m.ncols(), m.nnz())?;
            for (i, j, v) in m.iter() {
                writeln!(w, "{i} {j} {v:e}")?;
            }
            Ok(())
        };
        block("H", &self.h, &mut w)?;
        block("A_eq", &self.a_eq, &mut w)?;
        block("A_in", &self.a_in, &mut w)?;
        let vector = |name: &str, v: &DVector<f64>, w: &mut W| -> io::Result<()> {
            write!(w, "{name} {}", v.len())?;
            for x in v.iter() {
                write!(w, " {x:e}")?;
            }
            writeln!(w)
        };
        vector("c", &self.c, &mut w)?;
        vector("b_eq", &self.b_eq, &mut w)?;
        vector("l_in", &self.l_in, &mut w)?;
        vector("u_in", &self.u_in, &mut w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

#[derive(Clone, Debug)]
pub struct QpSettings {
    /// Absolute tolerance on the KKT residuals.
    pub tol: f64,
    /// Relative tolerance used by the splitting iterations.
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    pub adaptive_rho_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    /// Try polishing every this many iterations once residuals are close.
    pub polish_interval: usize,
    pub eps_infeasible: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            eps_rel: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho_interval: 25,
            scaling_iters: 10,
            polish: true,
            polish_interval: 25,
            eps_infeasible: 1e-6,
        }
    }
}

impl QpSettings {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self.eps_rel = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QpStatus {
    Solved,
    /// Primal infeasible; carries a Farkas direction on the stacked `[eq; in]` rows.
    Infeasible {
        certificate: DVector<f64>,
    },
    /// Unbounded below; carries a recession direction.
    DualInfeasible {
        direction: DVector<f64>,
    },
    /// Iteration cap reached; the solution holds the best iterate.
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y_eq: DVector<f64>,
    pub y_in: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktResiduals,
    pub objective: f64,
    pub polished: bool,
}

impl QpSolution {
    pub fn is_solved(&self) -> bool {
        self.status == QpStatus::Solved
    }
}

/// Optional warm start; duals are used when present.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y_eq: Option<DVector<f64>>,
    pub y_in: Option<DVector<f64>>,
}

impl WarmStart {
    pub fn primal(x: DVector<f64>) -> Self {
        Self {
            x,
            y_eq: None,
            y_in: None,
        }
    }

    pub fn from_solution(sol: &QpSolution) -> Self {
        Self {
            x: sol.x.clone(),
            y_eq: Some(sol.y_eq.clone()),
            y_in: Some(sol.y_in.clone()),
        }
    }
}

/// Solves a convex QP. Deterministic for identical inputs.
pub fn solve_qp(
    problem: &QpProblem,
    warm_start: Option<&WarmStart>,
    settings: &QpSettings,
) -> Result<QpSolution, QpError> {
    problem.validate()?;
    if let Some(ws) = warm_start {
        if ws.x.len() != problem.dim() {
            return Err(QpError::Dimension("warm start length".into()));
        }
    }
    admm::Solver::new(problem, settings)?.solve(warm_start)
}

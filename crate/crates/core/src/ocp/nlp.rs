//! Multiple-shooting transcription of the centroidal OCP.
//!
//! Decision variables are stored stage-wise, `[x_k, p_C,k, f_k, v_C,k]` for
//! `k < N` followed by `[x_N, p_C,N]`, with one auxiliary slack on the first
//! barrier row appended after them. Variables pinned by the problem data
//! (initial state, initial contacts, contact height, forces of inactive
//! contacts, velocities of frozen contacts) are eliminated, and a contact that
//! stays frozen between two nodes shares one column across them. The QP then
//! works on the remaining free columns only.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};

use super::dynamics::{cbf_slope, cbf_value, friction_facets, rhs_from_points, VertexForces};
use super::{DisturbanceWrench, MpcConfig, OcpError};
use crate::model::{hat, CentroidalState, ContactFlags, Foot, Footstep, GaitTimeline, ReferenceBundle, RobotParams};
use crate::qpsolver::{CsrMatrix, TripletBuilder};

const STAGE: usize = 45;
const PC: usize = 9;
const F: usize = 15;
const V: usize = 39;

/// Index arithmetic over the stage-wise decision vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
}

impl Layout {
    pub fn x(&self, k: usize) -> usize {
        k * STAGE
    }

    pub fn pc(&self, k: usize, i: usize) -> usize {
        k * STAGE + PC + 3 * i
    }

    pub fn f(&self, k: usize, i: usize, j: usize) -> usize {
        k * STAGE + F + 12 * i + 3 * j
    }

    pub fn v(&self, k: usize, i: usize) -> usize {
        k * STAGE + V + 3 * i
    }

    /// `9(N+1) + 6(N+1) + 24N + 6N`.
    pub fn decision_len(&self) -> usize {
        STAGE * self.n + 15
    }

    pub fn slack(&self) -> usize {
        self.decision_len()
    }

    /// Decision entries plus the barrier slack.
    pub fn full_len(&self) -> usize {
        self.decision_len() + 1
    }
}

/// Structured view of the decision vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OcpDecision {
    pub states: Vec<CentroidalState>,
    pub contacts: Vec<[Vector3<f64>; 2]>,
    pub forces: Vec<VertexForces>,
    pub contact_velocities: Vec<[Vector3<f64>; 2]>,
}

impl OcpDecision {
    pub fn horizon(&self) -> usize {
        self.forces.len()
    }

    pub fn validate(&self, n: usize) -> Result<(), OcpError> {
        if self.states.len() != n + 1
            || self.contacts.len() != n + 1
            || self.forces.len() != n
            || self.contact_velocities.len() != n
        {
            return Err(OcpError::Dimension(format!("decision does not match horizon {n}")));
        }
        Ok(())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let lay = Layout { n: self.horizon() };
        let mut z = DVector::zeros(lay.full_len());
        for k in 0..=lay.n {
            z.rows_mut(lay.x(k), 9).copy_from_slice(&self.states[k].to_array());
            for i in 0..2 {
                z.fixed_rows_mut::<3>(lay.pc(k, i)).copy_from(&self.contacts[k][i]);
            }
            if k < lay.n {
                for i in 0..2 {
                    for j in 0..4 {
                        z.fixed_rows_mut::<3>(lay.f(k, i, j)).copy_from(&self.forces[k][i][j]);
                    }
                    z.fixed_rows_mut::<3>(lay.v(k, i))
                        .copy_from(&self.contact_velocities[k][i]);
                }
            }
        }
        z
    }

    pub fn from_vector(n: usize, z: &DVector<f64>) -> Self {
        let lay = Layout { n };
        let v3 = |o: usize| Vector3::new(z[o], z[o + 1], z[o + 2]);
        Self {
            states: (0..=n)
                .map(|k| CentroidalState::from_slice(&z.as_slice()[lay.x(k)..lay.x(k) + 9]))
                .collect(),
            contacts: (0..=n).map(|k| [v3(lay.pc(k, 0)), v3(lay.pc(k, 1))]).collect(),
            forces: (0..n)
                .map(|k| [0, 1].map(|i| [0, 1, 2, 3].map(|j| v3(lay.f(k, i, j)))))
                .collect(),
            contact_velocities: (0..n).map(|k| [v3(lay.v(k, 0)), v3(lay.v(k, 1))]).collect(),
        }
    }

    /// Drops the first node and repeats the last one; used as the next warm start.
    pub fn shifted(&self) -> Self {
        let mut out = self.clone();
        if self.forces.is_empty() {
            return out;
        }
        out.states.remove(0);
        out.states.push(*self.states.last().unwrap());
        out.contacts.remove(0);
        out.contacts.push(*self.contacts.last().unwrap());
        out.forces.remove(0);
        out.forces.push(*self.forces.last().unwrap());
        out.contact_velocities.remove(0);
        out.contact_velocities.push([Vector3::zeros(); 2]);
        out
    }
}

/// Kind of an inequality row, for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Barrier { node: usize },
    Friction { node: usize, contact: usize, vertex: usize },
    StepBox { node: usize, contact: usize, axis: usize },
}

/// Constraint values and their Jacobian in full decision coordinates.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub values: DVector<f64>,
    pub jacobian: CsrMatrix,
}

/// Transcribed problem: parameters per node plus the elimination map.
#[derive(Clone, Debug)]
pub struct Nlp {
    pub layout: Layout,
    pub t_mpc: f64,
    pub params: RobotParams,
    pub cfg: MpcConfig,
    pub flags: Vec<ContactFlags>,
    /// Contact-frame rotation per node and contact.
    pub rotations: Vec<[Matrix3<f64>; 2]>,
    /// Nominal contact position per node and contact, when one is known.
    pub nominal: Vec<[Option<Vector3<f64>>; 2]>,
    pub com_ref: Vec<Vector3<f64>>,
    pub h_ang_ref: Vec<Vector3<f64>>,
    pub force_ref: Vec<[Vector3<f64>; 2]>,
    pub disturbance: Option<DisturbanceWrench>,
    pub footsteps: Vec<Footstep>,
    pub lead_window: f64,
    vertices: [Vector3<f64>; 4],
    facets: DMatrix<f64>,
    /// Values of eliminated entries; free entries hold the initial guess.
    base: DVector<f64>,
    /// Free column of each full entry.
    col: Vec<Option<usize>>,
    n_free: usize,
    res_jac: CsrMatrix,
    res_offset: DVector<f64>,
    ineq_kinds: Vec<RowKind>,
    ineq_lower: DVector<f64>,
    ineq_upper: DVector<f64>,
    box_rows: Vec<BoxRow>,
    n_eq: usize,
    /// Feedback CoM height lies outside the safe band.
    pub feedback_outside_band: bool,
}

#[derive(Clone, Copy, Debug)]
struct BoxRow {
    node: usize,
    contact: usize,
    /// Ground-plane rotation of the nominal foot.
    r2: Matrix2<f64>,
    nominal: Vector2<f64>,
}

/// Builds the NLP for one receding-horizon cycle. `contacts` are the current
/// contact positions; `refs` must start at the current time and be sampled at
/// `T_MPC`.
pub fn transcribe(
    refs: &ReferenceBundle,
    timeline: &GaitTimeline,
    feedback: &CentroidalState,
    contacts: &[Vector3<f64>; 2],
    params: &RobotParams,
    cfg: &MpcConfig,
    dist: Option<&DisturbanceWrench>,
) -> Result<Nlp, OcpError> {
    cfg.validate()?;
    params.validate()?;
    let n = cfg.horizon_samples;
    let t = cfg.t_mpc;
    if refs.len() < n + 1 {
        return Err(OcpError::ShortReferences {
            needed: n + 1,
            got: refs.len(),
        });
    }
    if (refs.sampling_period - t).abs() > 1e-9 {
        return Err(OcpError::Dimension(format!(
            "references sampled at {} s, expected {t} s",
            refs.sampling_period
        )));
    }
    if !feedback.is_finite() || contacts.iter().any(|c| !c.iter().all(|v| v.is_finite())) {
        return Err(OcpError::NonFinite("feedback"));
    }
    let lay = Layout { n };
    let mut flags = Vec::with_capacity(n + 1);
    let mut rotations = Vec::with_capacity(n + 1);
    let mut nominal = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let tk = k as f64 * t;
        flags.push(timeline.contact_flags_at(tk.max(timeline.start()))?);
        let mut rot = [Matrix3::identity(); 2];
        let mut nom = [None; 2];
        for foot in Foot::ALL {
            let i = foot.index();
            if let Some(p) = refs.nominal_foot_pose(foot, tk) {
                rot[i] = p.rotation;
                nom[i] = Some(Vector3::new(p.translation.x, p.translation.y, contacts[i].z));
            }
        }
        rotations.push(rot);
        nominal.push(nom);
    }
    let (facets, _) = friction_facets(params.friction_mu, cfg.friction_cone_facets)?;

    let mut nlp = Nlp {
        layout: lay,
        t_mpc: t,
        params: params.clone(),
        cfg: cfg.clone(),
        flags,
        rotations,
        nominal,
        com_ref: refs.com_ref[..=n].to_vec(),
        h_ang_ref: refs.h_ang_ref[..=n].to_vec(),
        force_ref: refs.force_ref[..n].to_vec(),
        disturbance: dist.copied(),
        footsteps: refs.footsteps.clone(),
        lead_window: timeline.lead_window,
        vertices: params.foot_vertices(),
        facets,
        base: DVector::zeros(lay.full_len()),
        col: vec![None; lay.full_len()],
        n_free: 0,
        res_jac: CsrMatrix::zeros(0, lay.full_len()),
        res_offset: DVector::zeros(0),
        ineq_kinds: Vec::new(),
        ineq_lower: DVector::zeros(0),
        ineq_upper: DVector::zeros(0),
        box_rows: Vec::new(),
        n_eq: 0,
        feedback_outside_band: !(feedback.p_com.z > params.com_z_min && feedback.p_com.z < params.com_z_max),
    };
    nlp.build_elimination(feedback, contacts);
    nlp.build_residuals();
    nlp.build_inequality_layout();
    nlp.n_eq = 9 * n
        + (0..n)
            .map(|k| (0..2).filter(|&i| !nlp.flags[k].sigma[i]).count() * 2)
            .sum::<usize>();
    Ok(nlp)
}

impl Nlp {
    /// Number of decision variables, excluding the auxiliary barrier slack.
    pub fn n_variables(&self) -> usize {
        self.layout.decision_len()
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn n_equalities(&self) -> usize {
        self.n_eq
    }

    pub fn n_inequalities(&self) -> usize {
        self.ineq_kinds.len()
    }

    pub fn inequality_kinds(&self) -> &[RowKind] {
        &self.ineq_kinds
    }

    pub fn inequality_bounds(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.ineq_lower, &self.ineq_upper)
    }

    /// Free column of a full entry, `None` when eliminated.
    pub fn column(&self, full: usize) -> Option<usize> {
        self.col[full]
    }

    pub fn is_free(&self, full: usize) -> bool {
        self.col[full].is_some()
    }

    fn build_elimination(&mut self, feedback: &CentroidalState, contacts: &[Vector3<f64>; 2]) {
        let lay = self.layout;
        let n = lay.n;
        // representative full index per entry; None = eliminated
        let mut rep: Vec<Option<usize>> = (0..lay.full_len()).map(Some).collect();
        let x0 = feedback.to_array();
        for a in 0..9 {
            self.base[lay.x(0) + a] = x0[a];
            rep[lay.x(0) + a] = None;
        }
        for i in 0..2 {
            for a in 0..3 {
                self.base[lay.pc(0, i) + a] = contacts[i][a];
                rep[lay.pc(0, i) + a] = None;
            }
            for k in 1..=n {
                let z = lay.pc(k, i) + 2;
                self.base[z] = contacts[i].z;
                rep[z] = None;
            }
            for k in 0..n {
                let frozen = self.flags[k].sigma[i];
                for a in 0..3 {
                    let v = lay.v(k, i) + a;
                    if frozen || a == 2 {
                        rep[v] = None;
                    }
                    if frozen && a < 2 {
                        rep[lay.pc(k + 1, i) + a] = rep[lay.pc(k, i) + a];
                        self.base[lay.pc(k + 1, i) + a] = self.base[lay.pc(k, i) + a];
                    }
                }
                if !self.flags[k].gamma[i] {
                    for j in 0..4 {
                        for a in 0..3 {
                            rep[lay.f(k, i, j) + a] = None;
                        }
                    }
                }
            }
        }
        // free columns ordered by the last stage they reach, so long-lived
        // contact columns only lengthen their own envelope rows
        let mut last = vec![0usize; lay.full_len()];
        for (idx, r) in rep.iter().enumerate() {
            if let Some(r) = r {
                last[*r] = last[*r].max(idx);
            }
        }
        // the barrier slack only couples to the first predicted state
        last[lay.slack()] = lay.x(1) + 8;
        let mut reps: Vec<usize> = (0..lay.full_len()).filter(|&i| rep[i] == Some(i)).collect();
        reps.sort_by_key(|&r| (last[r], r));
        let mut col_of_rep = vec![usize::MAX; lay.full_len()];
        for (c, &r) in reps.iter().enumerate() {
            col_of_rep[r] = c;
        }
        self.n_free = reps.len();
        self.col = rep.iter().map(|r| r.map(|r| col_of_rep[r])).collect();
    }

    /// Forces the eliminated and aliased entries of `z` to their pinned values.
    pub fn project(&self, z: &mut DVector<f64>) {
        let mut first: Vec<Option<f64>> = vec![None; self.n_free];
        for idx in 0..z.len() {
            match self.col[idx] {
                None => z[idx] = self.base[idx],
                Some(c) => match first[c] {
                    None => first[c] = Some(z[idx]),
                    Some(v) => z[idx] = v,
                },
            }
        }
    }

    /// Adds a reduced step to a full point.
    pub fn apply_step(&self, z: &DVector<f64>, d: &DVector<f64>, alpha: f64) -> DVector<f64> {
        let mut out = z.clone();
        for idx in 0..z.len() {
            if let Some(c) = self.col[idx] {
                out[idx] += alpha * d[c];
            }
        }
        out
    }

    /// Maps full-coordinate triplets onto free columns, summing aliases.
    pub fn reduce(&self, m: &CsrMatrix) -> CsrMatrix {
        let mut b = TripletBuilder::new(m.nrows(), self.n_free);
        for (r, c, v) in m.iter() {
            if let Some(rc) = self.col[c] {
                b.push(r, rc, v);
            }
        }
        b.build()
    }

    /// Gradient in free coordinates from a full-coordinate gradient.
    pub fn reduce_vector(&self, g: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_free);
        for idx in 0..g.len() {
            if let Some(c) = self.col[idx] {
                out[c] += g[idx];
            }
        }
        out
    }

    /// Initial guess: the given decision, or one built from the references.
    pub fn initial_point(&self, warm: Option<&OcpDecision>) -> DVector<f64> {
        let lay = self.layout;
        let n = lay.n;
        let mut z = match warm {
            Some(w) if w.validate(n).is_ok() => w.to_vector(),
            _ => {
                let m = self.params.mass;
                let mut z = DVector::zeros(lay.full_len());
                for k in 0..=n {
                    let next = self.com_ref[(k + 1).min(n)];
                    let prev = self.com_ref[k.saturating_sub(1)];
                    let span = ((k + 1).min(n) - k.saturating_sub(1)) as f64 * self.t_mpc;
                    let vel = if span > 0.0 {
                        (next - prev) / span
                    } else {
                        Vector3::zeros()
                    };
                    let s = CentroidalState {
                        p_com: self.com_ref[k],
                        h_lin: m * vel,
                        h_ang: self.h_ang_ref[k],
                    };
                    z.rows_mut(lay.x(k), 9).copy_from_slice(&s.to_array());
                    for i in 0..2 {
                        let p =
                            self.nominal[k][i].unwrap_or_else(|| self.base.fixed_rows::<3>(lay.pc(0, i)).into_owned());
                        z.fixed_rows_mut::<3>(lay.pc(k, i)).copy_from(&p);
                        if k < n && self.flags[k].gamma[i] {
                            for j in 0..4 {
                                z.fixed_rows_mut::<3>(lay.f(k, i, j))
                                    .copy_from(&(self.force_ref[k][i] / 4.0));
                            }
                        }
                    }
                }
                z
            }
        };
        z[lay.slack()] = 0.0;
        self.project(&mut z);
        // keep the guess inside the box so the first QP starts consistent
        for b in &self.box_rows {
            let o = lay.pc(b.node, b.contact);
            if self.col[o].is_none() {
                continue;
            }
            let p = Vector2::new(z[o], z[o + 1]);
            let local = b.r2.transpose() * (b.nominal - p);
            let lo = Vector2::from(self.cfg.step_box.lower);
            let hi = Vector2::from(self.cfg.step_box.upper);
            let clamped = local.zip_zip_map(&lo, &hi, |v, l, u| v.clamp(l, u));
            let q = b.nominal - b.r2 * clamped;
            z[o] = q.x;
            z[o + 1] = q.y;
        }
        self.project(&mut z);
        z
    }

    fn vertex_points(&self, z: &DVector<f64>, k: usize) -> [[Vector3<f64>; 4]; 2] {
        let lay = self.layout;
        [0, 1].map(|i| {
            let pc = z.fixed_rows::<3>(lay.pc(k, i)).into_owned();
            [0, 1, 2, 3].map(|j| pc + self.rotations[k][i] * self.vertices[j])
        })
    }

    fn forces_at(&self, z: &DVector<f64>, k: usize) -> VertexForces {
        let lay = self.layout;
        [0, 1].map(|i| [0, 1, 2, 3].map(|j| z.fixed_rows::<3>(lay.f(k, i, j)).into_owned()))
    }

    fn state_at(&self, z: &DVector<f64>, k: usize) -> CentroidalState {
        let o = self.layout.x(k);
        CentroidalState::from_slice(&z.as_slice()[o..o + 9])
    }

    fn disturbance_at(&self, k: usize) -> Option<&DisturbanceWrench> {
        if k == 0 {
            self.disturbance.as_ref()
        } else {
            None
        }
    }

    /// Right-hand side of the discretized model at node `k`.
    pub fn stage_rhs(&self, z: &DVector<f64>, k: usize) -> [f64; 9] {
        let s = self.state_at(z, k);
        let f = self.forces_at(z, k);
        let pts = self.vertex_points(z, k);
        let (hdot, pdot) = rhs_from_points(
            &s,
            &f,
            &pts,
            self.flags[k].gamma,
            self.params.mass,
            &self.params.gravity,
            self.disturbance_at(k),
        );
        [
            pdot.x, pdot.y, pdot.z, hdot[0], hdot[1], hdot[2], hdot[3], hdot[4], hdot[5],
        ]
    }

    fn build_residuals(&mut self) {
        let lay = self.layout;
        let n = lay.n;
        let w = self.cfg.weights.clone();
        let t = self.t_mpc;
        let mut b = TripletBuilder::new(0, lay.full_len());
        let mut off: Vec<f64> = Vec::new();
        let row = |b: &mut TripletBuilder, off: &mut Vec<f64>, entries: &[(usize, f64)], target: f64, weight: f64| {
            if weight <= 0.0 {
                return;
            }
            let s = weight.sqrt();
            let r = off.len();
            b.set_nrows(r + 1);
            for &(c, v) in entries {
                b.push(r, c, s * v);
            }
            off.push(s * target);
        };
        for k in 0..=n {
            for a in 0..3 {
                row(&mut b, &mut off, &[(lay.x(k) + a, 1.0)], self.com_ref[k][a], w.com[a]);
                row(
                    &mut b,
                    &mut off,
                    &[(lay.x(k) + 6 + a, 1.0)],
                    self.h_ang_ref[k][a],
                    w.h_ang[a],
                );
            }
            for i in 0..2 {
                if let Some(p) = self.nominal[k][i] {
                    for a in 0..3 {
                        row(&mut b, &mut off, &[(lay.pc(k, i) + a, 1.0)], p[a], w.contact[a]);
                    }
                }
            }
        }
        for k in 0..n {
            for i in 0..2 {
                for j in 0..4 {
                    for a in 0..3 {
                        // f_i / n_v − f_ij
                        let mut e: Vec<(usize, f64)> = (0..4).map(|l| (lay.f(k, i, l) + a, 0.25)).collect();
                        e[j].1 -= 1.0;
                        row(&mut b, &mut off, &e, 0.0, w.force_spread[a]);
                    }
                }
                let e: Vec<(usize, f64)> = (0..4).map(|l| (lay.f(k, i, l) + 2, 1.0)).collect();
                row(&mut b, &mut off, &e, self.force_ref[k][i].z, w.force_nominal);
                for a in 0..3 {
                    row(&mut b, &mut off, &[(lay.v(k, i) + a, 1.0)], 0.0, w.contact_velocity);
                }
                if k + 1 < n {
                    for j in 0..4 {
                        for a in 0..3 {
                            let e = [(lay.f(k + 1, i, j) + a, 1.0 / t), (lay.f(k, i, j) + a, -1.0 / t)];
                            row(&mut b, &mut off, &e, 0.0, w.force_rate[a]);
                        }
                    }
                }
            }
        }
        row(&mut b, &mut off, &[(lay.slack(), 1.0)], 0.0, self.cfg.cbf.slack_penalty);
        self.res_jac = b.build();
        self.res_offset = DVector::from_vec(off);
    }

    /// Weighted residuals `r(z)`; the cost is `‖r‖²`.
    pub fn residuals(&self, z: &DVector<f64>) -> DVector<f64> {
        self.res_jac.mul_vec(z) - &self.res_offset
    }

    /// Constant residual Jacobian in full coordinates.
    pub fn residual_jacobian(&self) -> &CsrMatrix {
        &self.res_jac
    }

    pub fn cost(&self, z: &DVector<f64>) -> f64 {
        self.residuals(z).norm_squared()
    }

    pub fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        2.0 * self.res_jac.tr_mul_vec(&self.residuals(z))
    }

    /// Shooting defects `x_{k+1} − x_k − T·F(x_k, u_k)` and the moving
    /// contacts' `p_{k+1} − p_k − T·v_k`, with their Jacobian.
    pub fn equalities(&self, z: &DVector<f64>) -> Linearization {
        let lay = self.layout;
        let n = lay.n;
        let t = self.t_mpc;
        let m = self.params.mass;
        let mut values = Vec::with_capacity(self.n_eq);
        let mut b = TripletBuilder::new(self.n_eq, lay.full_len());
        let mut r = 0;
        for k in 0..n {
            let rhs = self.stage_rhs(z, k);
            let (x0, x1) = (lay.x(k), lay.x(k + 1));
            for a in 0..9 {
                values.push(z[x1 + a] - z[x0 + a] - t * rhs[a]);
                b.push(r + a, x1 + a, 1.0);
                b.push(r + a, x0 + a, -1.0);
            }
            // ṗ_com = h_lin / m
            for a in 0..3 {
                b.push(r + a, x0 + 3 + a, -t / m);
            }
            // ḣ_lin = Σ Γ f
            let s = self.state_at(z, k);
            let f = self.forces_at(z, k);
            let pts = self.vertex_points(z, k);
            let mut sum_hat_f = Matrix3::zeros();
            for i in 0..2 {
                if !self.flags[k].gamma[i] {
                    continue;
                }
                let mut hat_fi = Matrix3::zeros();
                for j in 0..4 {
                    let fo = lay.f(k, i, j);
                    for a in 0..3 {
                        b.push(r + 3 + a, fo + a, -t);
                    }
                    // ∂[(p_v − p_com) × f]/∂f = hat(p_v − p_com)
                    let arm = hat(&(pts[i][j] - s.p_com));
                    push_block(&mut b, r + 6, fo, &(-t * arm));
                    hat_fi += hat(&f[i][j]);
                }
                // ∂/∂p_C = −hat(f), ∂/∂p_com = +hat(f)
                push_block(&mut b, r + 6, lay.pc(k, i), &(t * hat_fi));
                sum_hat_f += hat_fi;
            }
            if let Some(d) = self.disturbance_at(k) {
                sum_hat_f += hat(&d.force);
            }
            push_block(&mut b, r + 6, x0, &(-t * sum_hat_f));
            r += 9;
            for i in 0..2 {
                if self.flags[k].sigma[i] {
                    continue;
                }
                for a in 0..2 {
                    let p1 = lay.pc(k + 1, i) + a;
                    let p0 = lay.pc(k, i) + a;
                    let v = lay.v(k, i) + a;
                    values.push(z[p1] - z[p0] - t * z[v]);
                    b.push(r, p1, 1.0);
                    b.push(r, p0, -1.0);
                    b.push(r, v, -t);
                    r += 1;
                }
            }
        }
        debug_assert_eq!(r, self.n_eq);
        Linearization {
            values: DVector::from_vec(values),
            jacobian: b.build(),
        }
    }

    fn build_inequality_layout(&mut self) {
        let lay = self.layout;
        let n = lay.n;
        let mut kinds = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for k in 0..n {
            kinds.push(RowKind::Barrier { node: k });
            lo.push(0.0);
            hi.push(f64::INFINITY);
        }
        let nf = self.facets.nrows();
        for k in 0..n {
            for i in 0..2 {
                if !self.flags[k].gamma[i] {
                    continue;
                }
                for j in 0..4 {
                    for _ in 0..nf {
                        kinds.push(RowKind::Friction {
                            node: k,
                            contact: i,
                            vertex: j,
                        });
                        lo.push(f64::NEG_INFINITY);
                        hi.push(0.0);
                    }
                }
            }
        }
        let mut boxes = Vec::new();
        for i in 0..2 {
            let mut last: Option<(usize, Vector2<f64>)> = None;
            for k in 0..=n {
                let o = lay.pc(k, i);
                let (Some(c), Some(p)) = (self.col[o], self.nominal[k][i]) else {
                    continue;
                };
                let nom = Vector2::new(p.x, p.y);
                if last == Some((c, nom)) {
                    continue;
                }
                last = Some((c, nom));
                let yaw = self.rotations[k][i][(1, 0)].atan2(self.rotations[k][i][(0, 0)]);
                let (s, cs) = yaw.sin_cos();
                boxes.push(BoxRow {
                    node: k,
                    contact: i,
                    r2: Matrix2::new(cs, -s, s, cs),
                    nominal: nom,
                });
            }
        }
        for bx in &boxes {
            for axis in 0..2 {
                kinds.push(RowKind::StepBox {
                    node: bx.node,
                    contact: bx.contact,
                    axis,
                });
                lo.push(self.cfg.step_box.lower[axis]);
                hi.push(self.cfg.step_box.upper[axis]);
            }
        }
        self.box_rows = boxes;
        self.ineq_kinds = kinds;
        self.ineq_lower = DVector::from_vec(lo);
        self.ineq_upper = DVector::from_vec(hi);
    }

    /// Inequality row values `l ≤ a(z) ≤ u` with their Jacobian. Barrier rows
    /// read `g(z_{k+1}) − (1−γ)·g(z_k)`, the first one plus the slack.
    pub fn inequalities(&self, z: &DVector<f64>) -> Linearization {
        let lay = self.layout;
        let n = lay.n;
        let cbf = &self.cfg.cbf;
        let p = &self.params;
        let mut values = Vec::with_capacity(self.ineq_kinds.len());
        let mut b = TripletBuilder::new(self.ineq_kinds.len(), lay.full_len());
        let mut r = 0;
        for k in 0..n {
            let (z0, z1) = (z[lay.x(k) + 2], z[lay.x(k + 1) + 2]);
            let mut v = cbf_value(z1, p, cbf.alpha) - (1.0 - cbf.gamma_cbf) * cbf_value(z0, p, cbf.alpha);
            b.push(r, lay.x(k + 1) + 2, cbf_slope(z1, p, cbf.alpha));
            b.push(r, lay.x(k) + 2, -(1.0 - cbf.gamma_cbf) * cbf_slope(z0, p, cbf.alpha));
            if k == 0 {
                v += z[lay.slack()];
                b.push(r, lay.slack(), 1.0);
            }
            values.push(v);
            r += 1;
        }
        let nf = self.facets.nrows();
        for k in 0..n {
            for i in 0..2 {
                if !self.flags[k].gamma[i] {
                    continue;
                }
                // A Rᵀ f ≤ 0
                let ar = &self.facets * self.rotations[k][i].transpose();
                for j in 0..4 {
                    let fo = lay.f(k, i, j);
                    let f = z.fixed_rows::<3>(fo);
                    for l in 0..nf {
                        values.push((0..3).map(|a| ar[(l, a)] * f[a]).sum());
                        for a in 0..3 {
                            b.push(r, fo + a, ar[(l, a)]);
                        }
                        r += 1;
                    }
                }
            }
        }
        for bx in &self.box_rows {
            let o = lay.pc(bx.node, bx.contact);
            let pc = Vector2::new(z[o], z[o + 1]);
            let local = bx.r2.transpose() * (bx.nominal - pc);
            for axis in 0..2 {
                values.push(local[axis]);
                // ∂/∂p = −R₂ᵀ
                b.push(r, o, -bx.r2[(0, axis)]);
                b.push(r, o + 1, -bx.r2[(1, axis)]);
                r += 1;
            }
        }
        debug_assert_eq!(r, self.ineq_kinds.len());
        Linearization {
            values: DVector::from_vec(values),
            jacobian: b.build(),
        }
    }

    /// Largest equality defect and inequality violation at `z`.
    pub fn infeasibility(&self, z: &DVector<f64>) -> (f64, f64) {
        let eq = self.equalities(z).values.amax();
        let ineq = self.inequalities(z);
        let viol = violation(&ineq.values, &self.ineq_lower, &self.ineq_upper)
            .iter()
            .fold(0.0f64, |m, v| m.max(*v));
        (eq, viol)
    }

    /// Barrier value `g` at every state node.
    pub fn barrier_values(&self, z: &DVector<f64>) -> Vec<f64> {
        (0..=self.layout.n)
            .map(|k| cbf_value(z[self.layout.x(k) + 2], &self.params, self.cfg.cbf.alpha))
            .collect()
    }
}

/// Per-row distance outside `[l, u]`.
pub(crate) fn violation(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
    (0..v.len()).map(|i| (l[i] - v[i]).max(v[i] - u[i]).max(0.0)).collect()
}

fn push_block(b: &mut TripletBuilder, row: usize, col: usize, m: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            b.push(row + r, col + c, m[(r, c)]);
        }
    }
}

use nalgebra::DVector;

use super::ldl::EnvelopeLdl;
use super::{CsrMatrix, KktResiduals, QpError, QpProblem, QpSettings, QpSolution, QpStatus, WarmStart};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;
const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;
const POLISH_DELTA: f64 = 1e-7;
const POLISH_REFINE: usize = 6;
const POLISH_ROUNDS: usize = 6;
const CHECK_INTERVAL: usize = 5;

pub(super) struct Solver<'a> {
    orig: &'a QpProblem,
    settings: &'a QpSettings,
    n: usize,
    m_eq: usize,
    p: CsrMatrix,
    q: DVector<f64>,
    a: CsrMatrix,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    cost_scale: f64,
    rho: f64,
    rho_vec: DVector<f64>,
}

struct Iterate {
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

fn clip_scaling(v: f64) -> f64 {
    if v < MIN_SCALING {
        1.0
    } else {
        v.min(MAX_SCALING)
    }
}

impl<'a> Solver<'a> {
    pub(super) fn new(orig: &'a QpProblem, settings: &'a QpSettings) -> Result<Self, QpError> {
        let n = orig.dim();
        let m_eq = orig.n_eq();
        let a = orig.a_eq.vstack(&orig.a_in);
        let m = a.nrows();
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for i in 0..m_eq {
            l[i] = orig.b_eq[i];
            u[i] = orig.b_eq[i];
        }
        for i in 0..orig.n_in() {
            l[m_eq + i] = orig.l_in[i];
            u[m_eq + i] = orig.u_in[i];
        }

        let mut p = orig.h.clone();
        let mut q = orig.c.clone();
        let mut a = a;
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        for _ in 0..settings.scaling_iters {
            let pn = p.col_inf_norms();
            let an = a.col_inf_norms();
            let rn = a.row_inf_norms();
            let dd = DVector::from_fn(n, |j, _| 1.0 / clip_scaling(pn[j].max(an[j])).sqrt());
            let de = DVector::from_fn(m, |i, _| 1.0 / clip_scaling(rn[i]).sqrt());
            p.scale(&dd, &dd);
            a.scale(&de, &dd);
            q.component_mul_assign(&dd);
            d.component_mul_assign(&dd);
            e.component_mul_assign(&de);
        }
        let cost_scale = if n == 0 {
            1.0
        } else {
            let mean_p = p.col_inf_norms().iter().sum::<f64>() / n as f64;
            1.0 / clip_scaling(mean_p.max(q.amax()))
        };
        p.scale_values(cost_scale);
        q *= cost_scale;
        let l = l.component_mul(&e);
        let u = u.component_mul(&e);

        let mut s = Self {
            orig,
            settings,
            n,
            m_eq,
            p,
            q,
            a,
            l,
            u,
            d,
            e,
            cost_scale,
            rho: settings.rho,
            rho_vec: DVector::zeros(m),
        };
        s.set_rho(settings.rho);
        Ok(s)
    }

    fn m(&self) -> usize {
        self.l.len()
    }

    fn set_rho(&mut self, rho: f64) {
        self.rho = rho.clamp(RHO_MIN, RHO_MAX);
        for i in 0..self.m() {
            self.rho_vec[i] = if self.l[i] == self.u[i] {
                (RHO_EQ_SCALE * self.rho).min(RHO_MAX)
            } else if self.l[i] == f64::NEG_INFINITY && self.u[i] == f64::INFINITY {
                RHO_MIN
            } else {
                self.rho
            };
        }
    }

    fn factor_admm(&self) -> Result<EnvelopeLdl, QpError> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(self.p.nnz() + self.n);
        for (i, j, v) in self.p.iter() {
            if i >= j {
                entries.push((i, j, v));
            }
        }
        for j in 0..self.n {
            entries.push((j, j, self.settings.sigma));
        }
        for r in 0..self.m() {
            let (cols, vals) = self.a.row(r);
            let rho = self.rho_vec[r];
            for (ka, (&ca, &va)) in cols.iter().zip(vals).enumerate() {
                for (&cb, &vb) in cols[..=ka].iter().zip(&vals[..=ka]) {
                    entries.push((ca, cb, rho * va * vb));
                }
            }
        }
        Ok(EnvelopeLdl::factor(self.n, entries.iter().copied())?)
    }

    fn unscale(&self, it: &Iterate) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let x = it.x.component_mul(&self.d);
        let y = it.y.component_mul(&self.e) / self.cost_scale;
        let y_eq = y.rows(0, self.m_eq).into_owned();
        let y_in = y.rows(self.m_eq, self.m() - self.m_eq).into_owned();
        (x, y_eq, y_in)
    }

    fn make_solution(&self, it: &Iterate, status: QpStatus, iterations: usize, polished: bool) -> QpSolution {
        let (x, y_eq, y_in) = self.unscale(it);
        let kkt = self.orig.kkt_residuals(&x, &y_eq, &y_in);
        let objective = self.orig.objective(&x);
        QpSolution {
            x,
            y_eq,
            y_in,
            status,
            iterations,
            kkt,
            objective,
            polished,
        }
    }

    /// Accepts a candidate when each unscaled KKT residual is within tolerance.
    fn kkt_ok(&self, x: &DVector<f64>, y_eq: &DVector<f64>, y_in: &DVector<f64>) -> (bool, KktResiduals) {
        let o = self.orig;
        let k = o.kkt_residuals(x, y_eq, y_in);
        let tol = self.settings.tol;
        let rel = self.settings.eps_rel;
        let ax = o.a_eq.mul_vec(x).amax().max(o.a_in.mul_vec(x).amax());
        let b = o.b_eq.amax().max(finite_amax(&o.l_in)).max(finite_amax(&o.u_in));
        let hx = o.h.mul_vec(x).amax();
        let aty = o.a_eq.tr_mul_vec(y_eq).amax().max(o.a_in.tr_mul_vec(y_in).amax());
        let ymax = y_eq.amax().max(y_in.amax());
        let ok = k.primal <= tol + rel * ax.max(b)
            && k.dual <= tol + rel * hx.max(aty).max(o.c.amax())
            && k.complementarity <= tol + rel * ymax * (1.0 + ax.max(b));
        (ok, k)
    }

    fn trivial(&self) -> QpSolution {
        // No free variables: every row is a constant.
        let m = self.m();
        let feasible = (0..m).all(|i| self.l[i] <= 0.0 && 0.0 <= self.u[i]);
        let it = Iterate {
            x: DVector::zeros(0),
            z: DVector::zeros(m),
            y: DVector::zeros(m),
        };
        let status = if feasible {
            QpStatus::Solved
        } else {
            let cert = DVector::from_fn(m, |i, _| {
                if self.l[i] > 0.0 {
                    -1.0
                } else if self.u[i] < 0.0 {
                    1.0
                } else {
                    0.0
                }
            });
            QpStatus::Infeasible { certificate: cert }
        };
        self.make_solution(&it, status, 0, false)
    }

    pub(super) fn solve(mut self, warm: Option<&WarmStart>) -> Result<QpSolution, QpError> {
        if self.n == 0 {
            return Ok(self.trivial());
        }
        let m = self.m();
        let mut it = match warm {
            Some(ws) => {
                let x = ws.x.component_div(&self.d);
                let z = self.a.mul_vec(&x);
                let mut y = DVector::zeros(m);
                if let (Some(ye), Some(yi)) = (&ws.y_eq, &ws.y_in) {
                    if ye.len() == self.m_eq && yi.len() == m - self.m_eq {
                        for i in 0..self.m_eq {
                            y[i] = ye[i] * self.cost_scale / self.e[i];
                        }
                        for i in 0..yi.len() {
                            y[self.m_eq + i] = yi[i] * self.cost_scale / self.e[self.m_eq + i];
                        }
                    }
                }
                let z = self.project(&z);
                Iterate { x, z, y }
            }
            None => Iterate {
                x: DVector::zeros(self.n),
                z: self.project(&DVector::zeros(m)),
                y: DVector::zeros(m),
            },
        };

        if self.settings.polish && (warm.is_some() || self.orig.n_in() == 0) {
            let guess = if warm.is_some() { 1e-7 } else { 0.0 };
            if let Some(sol) = self.try_polish(&it, guess, 1) {
                return Ok(sol);
            }
        }

        let mut kkt = self.factor_admm()?;
        let sigma = self.settings.sigma;
        let alpha = self.settings.alpha;
        let mut best: Option<(f64, Iterate)> = None;

        for iter in 1..=self.settings.max_iter {
            let rz = self.rho_vec.component_mul(&it.z) - &it.y;
            let mut rhs = &it.x * sigma - &self.q + self.a.tr_mul_vec(&rz);
            kkt.solve_in_place(rhs.as_mut_slice());
            let x_tilde = rhs;
            let z_tilde = self.a.mul_vec(&x_tilde);
            let x_new = &x_tilde * alpha + &it.x * (1.0 - alpha);
            let z_relax = &z_tilde * alpha + &it.z * (1.0 - alpha);
            let z_new = self.project(&(&z_relax + it.y.component_div(&self.rho_vec)));
            let y_new = &it.y + self.rho_vec.component_mul(&(&z_relax - &z_new));
            let dx = &x_new - &it.x;
            let dy = &y_new - &it.y;
            it = Iterate {
                x: x_new,
                z: z_new,
                y: y_new,
            };

            if iter % CHECK_INTERVAL != 0 && iter != self.settings.max_iter {
                continue;
            }
            let res = self.residuals(&it);
            let score = (res.prim / res.eps_prim).max(res.dual / res.eps_dual);
            if best.as_ref().is_none_or(|(s, _)| score < *s) {
                best = Some((
                    score,
                    Iterate {
                        x: it.x.clone(),
                        z: it.z.clone(),
                        y: it.y.clone(),
                    },
                ));
            }
            if res.prim <= res.eps_prim && res.dual <= res.eps_dual {
                if self.settings.polish {
                    if let Some(sol) = self.try_polish(&it, 0.0, iter) {
                        return Ok(sol);
                    }
                }
                return Ok(self.make_solution(&it, QpStatus::Solved, iter, false));
            }
            if let Some(cert) = self.primal_infeasible(&dy) {
                let status = QpStatus::Infeasible { certificate: cert };
                return Ok(self.make_solution(&it, status, iter, false));
            }
            if let Some(dir) = self.dual_infeasible(&dx) {
                return Ok(self.make_solution(&it, QpStatus::DualInfeasible { direction: dir }, iter, false));
            }
            if self.settings.polish
                && iter % self.settings.polish_interval == 0
                && res.prim <= 1e3 * res.eps_prim
                && res.dual <= 1e3 * res.eps_dual
            {
                if let Some(sol) = self.try_polish(&it, 0.0, iter) {
                    return Ok(sol);
                }
            }
            if self.settings.adaptive_rho_interval > 0 && iter % self.settings.adaptive_rho_interval == 0 {
                let ratio = (res.prim_norm / res.dual_norm).sqrt();
                let new_rho = (self.rho * ratio).clamp(RHO_MIN, RHO_MAX);
                if new_rho > 5.0 * self.rho || new_rho < 0.2 * self.rho {
                    self.set_rho(new_rho);
                    kkt = self.factor_admm()?;
                }
            }
        }
        let it = best.map(|(_, it)| it).unwrap_or(it);
        if self.settings.polish {
            if let Some(sol) = self.try_polish(&it, 0.0, self.settings.max_iter) {
                return Ok(sol);
            }
        }
        Ok(self.make_solution(&it, QpStatus::MaxIter, self.settings.max_iter, false))
    }

    fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| z[i].max(self.l[i]).min(self.u[i]))
    }

    fn residuals(&self, it: &Iterate) -> Residuals {
        let ax = self.a.mul_vec(&it.x);
        let px = self.p.mul_vec(&it.x);
        let aty = self.a.tr_mul_vec(&it.y);
        let einv = |v: &DVector<f64>| v.component_div(&self.e).amax();
        let dinv = |v: &DVector<f64>| v.component_div(&self.d).amax() / self.cost_scale;
        let prim = einv(&(&ax - &it.z));
        let dual = dinv(&(&px + &self.q + &aty));
        let prim_scale = einv(&ax).max(einv(&it.z));
        let dual_scale = dinv(&px).max(dinv(&aty)).max(dinv(&self.q));
        let tol = self.settings.tol;
        let rel = self.settings.eps_rel;
        Residuals {
            prim,
            dual,
            eps_prim: tol + rel * prim_scale,
            eps_dual: tol + rel * dual_scale,
            prim_norm: prim / prim_scale.max(1e-10) + 1e-20,
            dual_norm: dual / dual_scale.max(1e-10) + 1e-20,
        }
    }

    fn primal_infeasible(&self, dy: &DVector<f64>) -> Option<DVector<f64>> {
        let m = self.m();
        if m == 0 {
            return None;
        }
        let dy_u = dy.component_mul(&self.e) / self.cost_scale;
        let norm = dy_u.amax();
        if norm < 1e-30 {
            return None;
        }
        let eps = self.settings.eps_infeasible;
        let at_dy = self.a.tr_mul_vec(dy).component_div(&self.d) / self.cost_scale;
        if at_dy.amax() > eps * norm {
            return None;
        }
        let mut support = 0.0;
        for i in 0..m {
            let (l, u) = (self.l[i] / self.e[i], self.u[i] / self.e[i]);
            if dy_u[i] > 0.0 {
                if u == f64::INFINITY {
                    return None;
                }
                support += u * dy_u[i];
            } else if dy_u[i] < 0.0 {
                if l == f64::NEG_INFINITY {
                    return None;
                }
                support += l * dy_u[i];
            }
        }
        (support < -eps * norm).then(|| dy_u / norm)
    }

    fn dual_infeasible(&self, dx: &DVector<f64>) -> Option<DVector<f64>> {
        let dx_u = dx.component_mul(&self.d);
        let norm = dx_u.amax();
        if norm < 1e-30 {
            return None;
        }
        let eps = self.settings.eps_infeasible;
        let pdx = self.p.mul_vec(dx).component_div(&self.d) / self.cost_scale;
        if pdx.amax() > eps * norm {
            return None;
        }
        if self.q.dot(dx) / self.cost_scale >= -eps * norm {
            return None;
        }
        let adx = self.a.mul_vec(dx).component_div(&self.e);
        for i in 0..self.m() {
            if self.u[i] < f64::INFINITY && adx[i] > eps * norm {
                return None;
            }
            if self.l[i] > f64::NEG_INFINITY && adx[i] < -eps * norm {
                return None;
            }
        }
        Some(dx_u / norm)
    }

    /// Solves the equality-constrained problem on a guessed active set.
    /// `guess_tol > 0` marks rows within that (scaled) distance of a bound as active.
    fn try_polish(&self, it: &Iterate, guess_tol: f64, iterations: usize) -> Option<QpSolution> {
        let m = self.m();
        let mut active: Vec<(usize, f64)> = Vec::new();
        for i in 0..m {
            if self.a.row(i).0.is_empty() {
                continue;
            }
            let (l, u, z, y) = (self.l[i], self.u[i], it.z[i], it.y[i]);
            if l == u {
                active.push((i, l));
                continue;
            }
            let tl = guess_tol * l.abs().max(1.0);
            let tu = guess_tol * u.abs().max(1.0);
            let lower = l > f64::NEG_INFINITY && (z - l < -y || (guess_tol > 0.0 && z - l <= tl && y <= 0.0));
            let upper = u < f64::INFINITY && (u - z < y || (guess_tol > 0.0 && u - z <= tu && y >= 0.0));
            if lower && (!upper || z - l <= u - z) {
                active.push((i, l));
            } else if upper {
                active.push((i, u));
            }
        }

        for _ in 0..POLISH_ROUNDS {
            let (x, y) = self.solve_active(&active)?;
            let z = self.a.mul_vec(&x);
            let cand = Iterate { x, z, y };
            let (xu, ye, yi) = self.unscale(&cand);
            if self.kkt_ok(&xu, &ye, &yi).0 {
                return Some(self.make_solution(&cand, QpStatus::Solved, iterations, true));
            }
            // drop rows whose multiplier pulls the wrong way, add violated rows
            let mut next: Vec<(usize, f64)> = active
                .iter()
                .copied()
                .filter(|&(r, b)| {
                    let (l, u, y) = (self.l[r], self.u[r], cand.y[r]);
                    l == u || (b == l && y <= 0.0) || (b == u && y >= 0.0)
                })
                .collect();
            let mut is_active = vec![false; m];
            for &(r, _) in &next {
                is_active[r] = true;
            }
            for r in 0..m {
                if is_active[r] || self.a.row(r).0.is_empty() {
                    continue;
                }
                let z = cand.z[r];
                if z < self.l[r] - 1e-12 * self.l[r].abs().max(1.0) {
                    next.push((r, self.l[r]));
                } else if z > self.u[r] + 1e-12 * self.u[r].abs().max(1.0) {
                    next.push((r, self.u[r]));
                }
            }
            if next == active {
                return None;
            }
            active = next;
        }
        None
    }

    /// Solves the equality-constrained QP with the given rows held at their bounds.
    fn solve_active(&self, active: &[(usize, f64)]) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.n;
        let m = self.m();
        // Interleave each active row right after the last variable it touches.
        let mut keys: Vec<(usize, usize, usize)> = (0..n).map(|j| (j, 0, j)).collect();
        for (k, &(r, _)) in active.iter().enumerate() {
            let maxcol = *self.a.row(r).0.last().unwrap();
            keys.push((maxcol, 1, k));
        }
        keys.sort_unstable();
        let dim = keys.len();
        let mut pos_var = vec![0; n];
        let mut pos_row = vec![0; active.len()];
        for (p, &(_, kind, idx)) in keys.iter().enumerate() {
            if kind == 0 {
                pos_var[idx] = p;
            } else {
                pos_row[idx] = p;
            }
        }
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, v) in self.p.iter() {
            if i >= j {
                entries.push((pos_var[i], pos_var[j], v));
            }
        }
        for &p in &pos_var {
            entries.push((p, p, POLISH_DELTA));
        }
        for (k, &(r, _)) in active.iter().enumerate() {
            let (cols, vals) = self.a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                entries.push((pos_row[k], pos_var[c], v));
            }
            entries.push((pos_row[k], pos_row[k], -POLISH_DELTA));
        }
        let fact = EnvelopeLdl::factor(dim, entries.iter().copied()).ok()?;

        let mut rhs = vec![0.0; dim];
        for j in 0..n {
            rhs[pos_var[j]] = -self.q[j];
        }
        for (k, &(_, b)) in active.iter().enumerate() {
            rhs[pos_row[k]] = b;
        }
        let mut sol = rhs.clone();
        fact.solve_in_place(&mut sol);
        for _ in 0..POLISH_REFINE {
            // Residual against the unregularized system.
            let mut res = rhs.clone();
            let xs = DVector::from_fn(n, |j, _| sol[pos_var[j]]);
            let px = self.p.mul_vec(&xs);
            for j in 0..n {
                res[pos_var[j]] -= px[j];
            }
            for (k, &(r, _)) in active.iter().enumerate() {
                let yk = sol[pos_row[k]];
                let (cols, vals) = self.a.row(r);
                let mut ax = 0.0;
                for (&c, &v) in cols.iter().zip(vals) {
                    res[pos_var[c]] -= v * yk;
                    ax += v * xs[c];
                }
                res[pos_row[k]] -= ax;
            }
            if res.iter().all(|v| v.abs() < 1e-15) {
                break;
            }
            fact.solve_in_place(&mut res);
            for (s, d) in sol.iter_mut().zip(&res) {
                *s += d;
            }
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let x = DVector::from_fn(n, |j, _| sol[pos_var[j]]);
        let mut y = DVector::zeros(m);
        for (k, &(r, _)) in active.iter().enumerate() {
            y[r] = sol[pos_row[k]];
        }
        Some((x, y))
    }
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    prim_norm: f64,
    dual_norm: f64,
}

fn finite_amax(v: &DVector<f64>) -> f64 {
    v.iter().filter(|x| x.is_finite()).fold(0.0f64, |m, x| m.max(x.abs()))
}

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{EstimationError, KfConfig};

/// Estimate `(s, ṡ, s̈)` and its covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KfState {
    pub x: Vector3<f64>,
    pub p: Matrix3<f64>,
}

impl KfState {
    /// At rest at `position` with covariance `λ·I`.
    pub fn new(position: f64, lambda0: f64) -> Self {
        Self {
            x: Vector3::new(position, 0.0, 0.0),
            p: Matrix3::identity() * lambda0,
        }
    }

    pub fn position(&self) -> f64 {
        self.x[0]
    }

    pub fn velocity(&self) -> f64 {
        self.x[1]
    }

    pub fn acceleration(&self) -> f64 {
        self.x[2]
    }
}

fn transition(t: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, t, 0.0, 0.0, 1.0, t, 0.0, 0.0, 1.0)
}

/// One predict/update cycle for the measured position `y`.
pub fn kf_step(state: &KfState, cfg: &KfConfig, y: f64) -> Result<KfState, EstimationError> {
    let f = transition(cfg.period);
    let x = f * state.x;
    let p = f * state.p * f.transpose() + Matrix3::from_diagonal(&Vector3::from(cfg.q_diag));

    let s = p[(0, 0)] + cfg.r;
    let k: Vector3<f64> = p.column(0) / s;
    let x = x + k * (y - x[0]);
    // Joseph form keeps P symmetric and positive semidefinite under rounding
    let mut ikh = Matrix3::identity();
    ikh.set_column(0, &(Vector3::x() - k));
    let p = ikh * p * ikh.transpose() + k * k.transpose() * cfg.r;
    let p = (p + p.transpose()) * 0.5;
    if !x.iter().all(|v| v.is_finite()) || p.cholesky().is_none() {
        return Err(EstimationError::Degenerate);
    }
    Ok(KfState { x, p })
}

/// Filters a whole position sequence. The first sample initializes the
/// state, every later one is a measurement.
pub fn kf_filter(cfg: &KfConfig, positions: &[f64]) -> Result<Vec<KfState>, EstimationError> {
    let Some(&first) = positions.first() else {
        return Ok(Vec::new());
    };
    let mut st = KfState::new(first, cfg.lambda0);
    let mut out = Vec::with_capacity(positions.len());
    out.push(st);
    for &y in &positions[1..] {
        st = kf_step(&st, cfg, y)?;
        out.push(st);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(t: f64, q: f64, r: f64) -> KfConfig {
        KfConfig {
            period: t,
            lambda0: 1.0,
            q_diag: [q; 3],
            r,
        }
    }

    #[test]
    fn prediction_is_the_constant_acceleration_model() {
        // an enormous R makes the update a no-op on the mean
        let c = KfConfig {
            period: 0.01,
            lambda0: 1e-6,
            q_diag: [1e-12; 3],
            r: 1e30,
        };
        let st = KfState {
            x: Vector3::new(0.0, 1.0, 0.0),
            p: Matrix3::identity() * 1e-6,
        };
        let next = kf_step(&st, &c, 123.0).unwrap();
        assert!((next.x - Vector3::new(0.01, 1.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn noiseless_constant_converges() {
        let c = cfg(0.01, 1e-12, 1e-12);
        let out = kf_filter(&c, &vec![0.7; 2000]).unwrap();
        let last = out.last().unwrap();
        assert!((last.position() - 0.7).abs() < 1e-9);
        assert!(last.velocity().abs() < 1e-7 && last.acceleration().abs() < 1e-5);
    }

    #[test]
    fn ramp_velocity_is_recovered() {
        let (t, v) = (0.001, 0.8);
        let c = cfg(t, 1e-8, 1e-6);
        let ys: Vec<f64> = (0..10_000).map(|k| k as f64 * t * v).collect();
        let out = kf_filter(&c, &ys).unwrap();
        assert!((out.last().unwrap().velocity() - v).abs() < 1e-6);
    }

    #[test]
    fn update_never_inflates_measured_variance() {
        let c = cfg(0.002, 1e-3, 1e-2);
        let mut st = KfState::new(0.0, 5.0);
        for k in 0..200 {
            let f = transition(c.period);
            let prior = (f * st.p * f.transpose())[(0, 0)] + c.q_diag[0];
            st = kf_step(&st, &c, (k as f64 * 0.1).sin()).unwrap();
            assert!(st.p[(0, 0)] <= prior);
            assert!((st.p - st.p.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn posterior_variance_matches_scalar_formula() {
        let c = cfg(0.01, 0.5, 0.25);
        let st = KfState::new(0.0, 2.0);
        let f = transition(c.period);
        let prior = (f * st.p * f.transpose())[(0, 0)] + c.q_diag[0];
        let next = kf_step(&st, &c, 1.0).unwrap();
        assert!((next.p[(0, 0)] - prior * c.r / (prior + c.r)).abs() < 1e-12);
        assert!((next.position() - prior / (prior + c.r)).abs() < 1e-12);
    }
}

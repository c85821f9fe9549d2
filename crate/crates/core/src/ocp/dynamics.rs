//! Continuous-time prediction model and the pointwise constraint building blocks.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};

use super::{DisturbanceWrench, OcpError};
use crate::model::{CentroidalState, ContactPatch, RobotParams};

/// Vertex forces, indexed `[contact][vertex]`.
pub type VertexForces = [[Vector3<f64>; 4]; 2];

/// Centroidal dynamics with the disturbance lever arm taken about the CoM.
/// Returns `(ḣ, ṗ_com)` with `ḣ = (ḣ_lin, ḣ_ang)`.
pub fn centroidal_rhs(
    state: &CentroidalState,
    forces: &VertexForces,
    contacts: &[ContactPatch; 2],
    gamma: [bool; 2],
    params: &RobotParams,
    dist: Option<&DisturbanceWrench>,
) -> (Vector6<f64>, Vector3<f64>) {
    let points = [0, 1].map(|i| [0, 1, 2, 3].map(|j| contacts[i].vertex_world(j)));
    rhs_from_points(state, forces, &points, gamma, params.mass, &params.gravity, dist)
}

/// [`centroidal_rhs`] with the contact vertices given as world points.
pub fn rhs_from_points(
    state: &CentroidalState,
    forces: &VertexForces,
    points: &[[Vector3<f64>; 4]; 2],
    gamma: [bool; 2],
    mass: f64,
    gravity: &Vector3<f64>,
    dist: Option<&DisturbanceWrench>,
) -> (Vector6<f64>, Vector3<f64>) {
    let mut lin = mass * gravity;
    let mut ang = Vector3::zeros();
    for i in 0..2 {
        if !gamma[i] {
            continue;
        }
        for j in 0..4 {
            let f = &forces[i][j];
            lin += f;
            ang += (points[i][j] - state.p_com).cross(f);
        }
    }
    if let Some(d) = dist {
        lin += d.force;
        ang += (d.application_point - state.p_com).cross(&d.force);
    }
    let mut hdot = Vector6::zeros();
    hdot.fixed_rows_mut::<3>(0).copy_from(&lin);
    hdot.fixed_rows_mut::<3>(3).copy_from(&ang);
    (hdot, state.h_lin / mass)
}

/// `ṗ_c = (1 − σ)·v_c`.
pub fn contact_rhs(sigma: bool, v_c: &Vector3<f64>) -> Vector3<f64> {
    if sigma {
        Vector3::zeros()
    } else {
        *v_c
    }
}

/// Barrier `g = −α(p_min − z)(p_max − z)`, positive strictly inside the band.
pub fn cbf_value(p_com_z: f64, params: &RobotParams, alpha: f64) -> f64 {
    -alpha * (params.com_z_min - p_com_z) * (params.com_z_max - p_com_z)
}

pub(crate) fn cbf_slope(p_com_z: f64, params: &RobotParams, alpha: f64) -> f64 {
    alpha * (params.com_z_min + params.com_z_max - 2.0 * p_com_z)
}

/// Inscribed friction pyramid `A f ≤ b` in the contact frame: `n` facet rows
/// followed by the unilateral row `−f_z ≤ 0`; `b = 0`.
pub fn friction_facets(mu: f64, n_facets: usize) -> Result<(DMatrix<f64>, DVector<f64>), OcpError> {
    if n_facets < 4 {
        return Err(OcpError::Config(format!(
            "friction cone needs at least 4 facets, got {n_facets}"
        )));
    }
    if !(mu > 0.0) {
        return Err(OcpError::Config(format!("friction coefficient {mu} must be positive")));
    }
    let n = n_facets;
    // facet l faces the bisector of the generator edges at 2πl/n and 2π(l+1)/n
    let apothem = mu * (std::f64::consts::PI / n as f64).cos();
    let mut a = DMatrix::zeros(n + 1, 3);
    for l in 0..n {
        let theta = 2.0 * std::f64::consts::PI * (l as f64 + 0.5) / n as f64;
        a[(l, 0)] = theta.cos();
        a[(l, 1)] = theta.sin();
        a[(l, 2)] = -apothem;
    }
    a[(n, 2)] = -1.0;
    Ok((a, DVector::zeros(n + 1)))
}

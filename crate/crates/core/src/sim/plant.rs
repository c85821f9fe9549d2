use nalgebra::{Vector2, Vector3};

use super::SimError;
use crate::model::{CentroidalState, RobotParams};
use crate::ocp::{rhs_from_points, DisturbanceWrench, VertexForces};

/// Minimum total vertical force for the ZMP to be defined, newtons.
pub const ZMP_MIN_FZ: f64 = 1.0;

/// Contact forces held over one plant step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantInput {
    pub forces: VertexForces,
    /// World positions of the contact vertices.
    pub vertices: [[Vector3<f64>; 4]; 2],
    pub gamma: [bool; 2],
}

impl PlantInput {
    /// No contact force at all.
    pub fn flight() -> Self {
        Self {
            forces: [[Vector3::zeros(); 4]; 2],
            vertices: [[Vector3::zeros(); 4]; 2],
            gamma: [false, false],
        }
    }

    /// `(ḣ_lin, ḣ_ang, ṗ_com)` at `state`.
    pub fn rhs(
        &self,
        state: &CentroidalState,
        dist: Option<&DisturbanceWrench>,
        params: &RobotParams,
    ) -> [Vector3<f64>; 3] {
        let (hdot, pdot) = rhs_from_points(
            state,
            &self.forces,
            &self.vertices,
            self.gamma,
            params.mass,
            &params.gravity,
            dist,
        );
        [hdot.fixed_rows::<3>(0).into(), hdot.fixed_rows::<3>(3).into(), pdot]
    }
}

fn advance(s: &CentroidalState, d: &[Vector3<f64>; 3], h: f64) -> CentroidalState {
    CentroidalState {
        p_com: s.p_com + d[2] * h,
        h_lin: s.h_lin + d[0] * h,
        h_ang: s.h_ang + d[1] * h,
    }
}

/// One RK4 step of the centroidal dynamics with forces held constant.
pub fn plant_step(
    state: &CentroidalState,
    input: &PlantInput,
    dist: Option<&DisturbanceWrench>,
    params: &RobotParams,
    dt: f64,
) -> CentroidalState {
    debug_assert!(dt > 0.0);
    let f = |s: &CentroidalState| input.rhs(s, dist, params);
    let k1 = f(state);
    let k2 = f(&advance(state, &k1, 0.5 * dt));
    let k3 = f(&advance(state, &k2, 0.5 * dt));
    let k4 = f(&advance(state, &k3, dt));
    let mix: [Vector3<f64>; 3] = std::array::from_fn(|a| (k1[a] + (k2[a] + k3[a]) * 2.0 + k4[a]) / 6.0);
    advance(state, &mix, dt)
}

/// One explicit Euler step, the discretization the OCP predicts with.
pub fn plant_step_euler(
    state: &CentroidalState,
    input: &PlantInput,
    dist: Option<&DisturbanceWrench>,
    params: &RobotParams,
    dt: f64,
) -> CentroidalState {
    advance(state, &input.rhs(state, dist, params), dt)
}

/// Force-weighted average of the active contact vertices:
/// `Σ p_xy·f_z / Σ f_z`.
pub fn zmp_from_forces(input: &PlantInput) -> Result<Vector2<f64>, SimError> {
    let mut num = Vector2::zeros();
    let mut fz = 0.0;
    for i in 0..2 {
        if !input.gamma[i] {
            continue;
        }
        for j in 0..4 {
            let f = input.forces[i][j].z;
            num += input.vertices[i][j].xy() * f;
            fz += f;
        }
    }
    if !(fz > ZMP_MIN_FZ) {
        return Err(SimError::UndefinedZmp { total_fz: fz });
    }
    Ok(num / fz)
}

/// Pendulum ZMP from the CoM height and acceleration,
/// `p_xy − p_z·p̈_xy / (p̈_z + |g|)`. This one sees external pushes.
pub fn lip_zmp(p_com: &Vector3<f64>, com_acc: &Vector3<f64>, gravity: &Vector3<f64>) -> Option<Vector2<f64>> {
    let denom = com_acc.z - gravity.z;
    (denom > 1e-6).then(|| p_com.xy() - com_acc.xy() * (p_com.z / denom))
}

/// Fall test: CoM ground projection beyond 1.5 support circumradii from the
/// support centroid, or CoM height more than 5 cm below the lower bound.
/// With no support points only the height test applies.
pub fn has_fallen(p_com: &Vector3<f64>, support: &[Vector3<f64>], params: &RobotParams) -> bool {
    if p_com.z < params.com_z_min - 0.05 || !p_com.iter().all(|v| v.is_finite()) {
        return true;
    }
    if support.is_empty() {
        return false;
    }
    let c = support.iter().map(|p| p.xy()).sum::<Vector2<f64>>() / support.len() as f64;
    let radius = support.iter().map(|p| (p.xy() - c).norm()).fold(0.0, f64::max);
    (p_com.xy() - c).norm() > 1.5 * radius
}

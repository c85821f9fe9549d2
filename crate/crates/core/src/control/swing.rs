//! Minimum-acceleration swing-foot trajectories.
//!
//! Every translation axis is two cubic segments joined at a junction time.
//! Free axes use the single cubic through both boundary states (the
//! unconstrained minimum of `∫ a²`), split at the junction. The vertical axis
//! is pinned to the apex height at the junction and takes the junction
//! velocity that minimizes `∫ a²`, which makes its acceleration continuous
//! there. Orientation follows `R(t) = R_a · exp(φ(t))` with a cubic `φ`.

use nalgebra::{Matrix3, Rotation3, Vector3};

use super::ControlError;
use crate::kinematics::rotation_log;
use crate::model::{hat, Pose};

/// `c0 + c1·τ + c2·τ² + c3·τ³` with `τ = t − start`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cubic {
    start: f64,
    c: [f64; 4],
}

impl Cubic {
    fn hermite(start: f64, h: f64, p0: f64, v0: f64, p1: f64, v1: f64) -> Self {
        let d = p1 - p0;
        Self {
            start,
            c: [
                p0,
                v0,
                (3.0 * d - h * (2.0 * v0 + v1)) / (h * h),
                (-2.0 * d + h * (v0 + v1)) / (h * h * h),
            ],
        }
    }

    /// Position, velocity, acceleration.
    fn eval(&self, t: f64) -> [f64; 3] {
        let s = t - self.start;
        let c = &self.c;
        [
            c[0] + s * (c[1] + s * (c[2] + s * c[3])),
            c[1] + s * (2.0 * c[2] + 3.0 * s * c[3]),
            2.0 * c[2] + 6.0 * s * c[3],
        ]
    }
}

/// Pose, velocity and acceleration of the swing foot at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwingSample {
    pub pose: Pose,
    pub linear_velocity: Vector3<f64>,
    /// Inertial frame.
    pub angular_velocity: Vector3<f64>,
    pub linear_acceleration: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwingPlan {
    pub start: Pose,
    pub target: Pose,
    /// Lift-off time of the original plan, seconds.
    pub t0: f64,
    /// Touchdown time, seconds.
    pub t1: f64,
    /// Clearance above the higher of start and target, meters.
    pub apex: f64,
    /// Time the current segments start (later than `t0` after a replan).
    t_start: f64,
    t_mid: f64,
    /// Whether the vertical junction is still pinned to the apex.
    pinned: bool,
    axes: [[Cubic; 2]; 3],
    rot_base: Matrix3<f64>,
    rot: [Cubic; 3],
}

/// Right Jacobian of SO(3): body angular velocity of `exp(φ)` is `Jr(φ)·φ̇`.
fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let th2 = phi.norm_squared();
    let (a, b) = if th2 < 1e-8 {
        (0.5 - th2 / 24.0, 1.0 / 6.0 - th2 / 120.0)
    } else {
        let th = th2.sqrt();
        ((1.0 - th.cos()) / th2, (th - th.sin()) / (th2 * th))
    };
    let k = hat(phi);
    Matrix3::identity() - k * a + k * k * b
}

struct Boundary {
    pose: Pose,
    velocity: Vector3<f64>,
    /// Body-frame angular velocity.
    omega_body: Vector3<f64>,
}

fn build(
    from: &Boundary,
    target: &Pose,
    t_start: f64,
    t_mid: f64,
    t1: f64,
    z_mid: Option<f64>,
) -> ([[Cubic; 2]; 3], Matrix3<f64>, [Cubic; 3]) {
    let (h1, h2) = (t_mid - t_start, t1 - t_mid);
    let h = t1 - t_start;
    let p0 = from.pose.translation;
    let p1 = target.translation;
    let axes = std::array::from_fn(|a| match (a, z_mid) {
        (2, Some(zm)) => {
            let (v0, v1) = (from.velocity[a], 0.0);
            let (d1, d2) = (zm - p0[a], p1[a] - zm);
            let vm = (3.0 * d1 / (h1 * h1) - v0 / h1 + 3.0 * d2 / (h2 * h2) - v1 / h2) / (2.0 / h1 + 2.0 / h2);
            [
                Cubic::hermite(t_start, h1, p0[a], v0, zm, vm),
                Cubic::hermite(t_mid, h2, zm, vm, p1[a], v1),
            ]
        }
        _ => {
            let whole = Cubic::hermite(t_start, h, p0[a], from.velocity[a], p1[a], 0.0);
            let [pm, vm, _] = whole.eval(t_mid);
            [
                Cubic::hermite(t_start, h1, p0[a], from.velocity[a], pm, vm),
                Cubic::hermite(t_mid, h2, pm, vm, p1[a], 0.0),
            ]
        }
    });
    let rot_base = from.pose.rotation;
    let goal = rotation_log(&(rot_base.transpose() * target.rotation));
    let rot = std::array::from_fn(|a| Cubic::hermite(t_start, h, 0.0, from.omega_body[a], goal[a], 0.0));
    (axes, rot_base, rot)
}

/// Plans a swing from `start` at `t0` to `target` at `t1`, both at rest.
pub fn plan_swing(start: &Pose, target: &Pose, t0: f64, t1: f64, apex: f64) -> Result<SwingPlan, ControlError> {
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(ControlError::EmptySwing { t0, t1 });
    }
    if !(apex >= 0.0 && apex.is_finite()) {
        return Err(ControlError::Config(format!(
            "swing apex {apex} must be finite and non-negative"
        )));
    }
    let t_mid = 0.5 * (t0 + t1);
    let z_mid = start.translation.z.max(target.translation.z) + apex;
    let from = Boundary {
        pose: *start,
        velocity: Vector3::zeros(),
        omega_body: Vector3::zeros(),
    };
    let (axes, rot_base, rot) = build(&from, target, t0, t_mid, t1, Some(z_mid));
    Ok(SwingPlan {
        start: *start,
        target: *target,
        t0,
        t1,
        apex,
        t_start: t0,
        t_mid,
        pinned: true,
        axes,
        rot_base,
        rot,
    })
}

/// Re-targets a swing in flight. The new plan leaves from the old plan's pose
/// and velocity at `t_now` and still lands at `t1`. Before the apex the
/// vertical junction stays pinned at the apex time, afterwards the remaining
/// motion is a single free cubic per axis.
pub fn replan_swing(plan: &SwingPlan, t_now: f64, new_target: &Pose) -> Result<SwingPlan, ControlError> {
    if !(t_now >= plan.t_start && t_now < plan.t1) {
        return Err(ControlError::TooLate {
            t_now,
            t_start: plan.t_start,
            t1: plan.t1,
        });
    }
    let now = plan.sample(t_now);
    let from = Boundary {
        pose: now.pose,
        velocity: now.linear_velocity,
        omega_body: now.pose.rotation.transpose() * now.angular_velocity,
    };
    let pinned = plan.pinned && t_now < plan.t_mid;
    let (t_mid, z_mid) = if pinned {
        let z = plan.start.translation.z.max(new_target.translation.z) + plan.apex;
        (plan.t_mid, Some(z))
    } else {
        (0.5 * (t_now + plan.t1), None)
    };
    let (axes, rot_base, rot) = build(&from, new_target, t_now, t_mid, plan.t1, z_mid);
    Ok(SwingPlan {
        target: *new_target,
        t_start: t_now,
        t_mid,
        pinned,
        axes,
        rot_base,
        rot,
        ..plan.clone()
    })
}

impl SwingPlan {
    /// Junction time of the two segments.
    pub fn junction_time(&self) -> f64 {
        self.t_mid
    }

    /// Start of the current segments.
    pub fn segment_start(&self) -> f64 {
        self.t_start
    }

    /// Samples the plan; times outside the window clamp to its ends.
    pub fn sample(&self, t: f64) -> SwingSample {
        let t = t.clamp(self.t_start, self.t1);
        let seg = usize::from(t >= self.t_mid);
        let mut p = Vector3::zeros();
        let mut v = Vector3::zeros();
        let mut acc = Vector3::zeros();
        for a in 0..3 {
            let [x, dx, ddx] = self.axes[a][seg].eval(t);
            p[a] = x;
            v[a] = dx;
            acc[a] = ddx;
        }
        self.finish(t, p, v, acc)
    }

    /// Samples one named segment, extrapolating past its end; used to measure
    /// the junction defect.
    pub fn sample_segment(&self, segment: usize, t: f64) -> SwingSample {
        let mut p = Vector3::zeros();
        let mut v = Vector3::zeros();
        let mut acc = Vector3::zeros();
        for a in 0..3 {
            let [x, dx, ddx] = self.axes[a][segment.min(1)].eval(t);
            p[a] = x;
            v[a] = dx;
            acc[a] = ddx;
        }
        self.finish(t, p, v, acc)
    }

    fn finish(&self, t: f64, p: Vector3<f64>, v: Vector3<f64>, acc: Vector3<f64>) -> SwingSample {
        let mut phi = Vector3::zeros();
        let mut dphi = Vector3::zeros();
        for a in 0..3 {
            let [x, dx, _] = self.rot[a].eval(t);
            phi[a] = x;
            dphi[a] = dx;
        }
        let r = self.rot_base * Rotation3::new(phi).into_inner();
        SwingSample {
            pose: Pose::new(p, r),
            linear_velocity: v,
            angular_velocity: r * right_jacobian(&phi) * dphi,
            linear_acceleration: acc,
        }
    }
}

//! Domain types shared by every layer: centroidal state, contacts, footstep
//! plans, gait timelines and robot parameters.

use std::fmt;

use nalgebra::{DVector, Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("time {t} outside timeline span [{start}, {end})")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("overlapping footsteps for {foot} around t = {t}")]
    OverlappingFootsteps { foot: Foot, t: f64 },
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },
}

fn invalid(what: &'static str, why: impl Into<String>) -> ModelError {
    ModelError::Invalid { what, why: why.into() }
}

/// The two feet. Contact `i` in every per-contact array is `Foot::ALL[i]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Foot {
    Left,
    Right,
}

impl Foot {
    pub const ALL: [Foot; 2] = [Foot::Left, Foot::Right];

    pub fn index(self) -> usize {
        match self {
            Foot::Left => 0,
            Foot::Right => 1,
        }
    }

    pub fn other(self) -> Foot {
        match self {
            Foot::Left => Foot::Right,
            Foot::Right => Foot::Left,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Foot::Left => "left",
            Foot::Right => "right",
        }
    }

    /// +1 for the left foot, −1 for the right one (lateral offset sign).
    pub fn side(self) -> f64 {
        match self {
            Foot::Left => 1.0,
            Foot::Right => -1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Foot> {
        match s {
            "left" | "l" => Some(Foot::Left),
            "right" | "r" => Some(Foot::Right),
            _ => None,
        }
    }
}

impl fmt::Display for Foot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rigid transform: `p_world = rotation · p_local + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: Matrix3<f64>) -> Self {
        Self { translation, rotation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(translation, Matrix3::identity())
    }

    /// Ground-plane pose: position `(x, y, z)` and a yaw rotation.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(Vector3::new(x, y, z), rot_z(yaw))
    }

    pub fn from_rpy(translation: Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::new(translation, *Rotation3::from_euler_angles(roll, pitch, yaw).matrix())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.translation + self.translation,
            self.rotation * other.rotation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(-(rt * self.translation), rt)
    }

    /// Heading angle of the rotation's x axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Checks orthonormality and `det = +1` within `tol`.
    pub fn rotation_is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).amax() <= tol && (r.determinant() - 1.0).abs() <= tol
    }

    pub fn is_finite(&self) -> bool {
        self.translation
            .iter()
            .chain(self.rotation.iter())
            .all(|v| v.is_finite())
    }
}

pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `x^∧` with `x^∧ y = x × y`.
pub fn hat(x: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -x.z, x.y, x.z, 0.0, -x.x, -x.y, x.x, 0.0)
}

/// CoM position plus centroidal momentum, in a CoM-centred frame oriented as
/// the inertial frame.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct CentroidalState {
    pub p_com: Vector3<f64>,
    /// Linear momentum, kg·m/s.
    pub h_lin: Vector3<f64>,
    /// Angular momentum about the CoM, kg·m²/s.
    pub h_ang: Vector3<f64>,
}

impl CentroidalState {
    pub fn at_rest(p_com: Vector3<f64>) -> Self {
        Self {
            p_com,
            ..Default::default()
        }
    }

    pub fn com_velocity(&self, mass: f64) -> Vector3<f64> {
        debug_assert!(mass > 0.0);
        self.h_lin / mass
    }

    pub fn is_finite(&self) -> bool {
        self.p_com
            .iter()
            .chain(self.h_lin.iter())
            .chain(self.h_ang.iter())
            .all(|v| v.is_finite())
    }

    /// `[p_com, h_lin, h_ang]`
    pub fn to_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out[..3].copy_from_slice(self.p_com.as_slice());
        out[3..6].copy_from_slice(self.h_lin.as_slice());
        out[6..].copy_from_slice(self.h_ang.as_slice());
        out
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            p_com: Vector3::new(v[0], v[1], v[2]),
            h_lin: Vector3::new(v[3], v[4], v[5]),
            h_ang: Vector3::new(v[6], v[7], v[8]),
        }
    }

    pub fn max_abs_diff(&self, other: &CentroidalState) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Rectangular contact surface with four vertices in the patch frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactPatch {
    pub name: String,
    pub pose: Pose,
    pub vertices: [Vector3<f64>; 4],
}

impl ContactPatch {
    /// Centred rectangle of the given length (x) and width (y).
    pub fn rectangle(name: impl Into<String>, pose: Pose, length: f64, width: f64) -> Self {
        Self {
            name: name.into(),
            pose,
            vertices: rectangle_vertices(length, width),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.pose.rotation_is_valid(1e-9) {
            return Err(invalid(
                "contact patch",
                format!("{}: rotation not in SO(3)", self.name),
            ));
        }
        if self.vertices.iter().any(|v| v.z != 0.0) {
            return Err(invalid("contact patch", format!("{}: vertices not planar", self.name)));
        }
        Ok(())
    }

    pub fn vertex_world(&self, j: usize) -> Vector3<f64> {
        self.pose.transform_point(&self.vertices[j])
    }
}

pub fn rectangle_vertices(length: f64, width: f64) -> [Vector3<f64>; 4] {
    let (a, b) = (0.5 * length, 0.5 * width);
    [
        Vector3::new(a, b, 0.0),
        Vector3::new(a, -b, 0.0),
        Vector3::new(-a, -b, 0.0),
        Vector3::new(-a, b, 0.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footstep {
    pub contact: Foot,
    pub pose: Pose,
    /// Touchdown time, seconds.
    pub activation_time: f64,
    /// Lift-off time, seconds; `+∞` when not yet known.
    pub deactivation_time: f64,
}

impl Footstep {
    pub fn new(contact: Foot, pose: Pose, activation_time: f64, deactivation_time: f64) -> Result<Self, ModelError> {
        let f = Self {
            contact,
            pose,
            activation_time,
            deactivation_time,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.activation_time < self.deactivation_time) {
            return Err(invalid(
                "footstep",
                format!(
                    "{} activation {} not before deactivation {}",
                    self.contact, self.activation_time, self.deactivation_time
                ),
            ));
        }
        if !self.pose.is_finite() {
            return Err(invalid("footstep", "non-finite pose"));
        }
        Ok(())
    }

    pub fn is_active_at(&self, t: f64) -> bool {
        self.activation_time <= t && t < self.deactivation_time
    }

    pub fn shifted(&self, dt: f64) -> Footstep {
        Footstep {
            activation_time: self.activation_time - dt,
            deactivation_time: self.deactivation_time - dt,
            ..self.clone()
        }
    }
}

/// Per-contact activity (`gamma`) and position-freeze (`sigma`) flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContactFlags {
    pub gamma: [bool; 2],
    pub sigma: [bool; 2],
}

impl ContactFlags {
    pub fn gamma_f(&self, i: usize) -> f64 {
        if self.gamma[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn sigma_f(&self, i: usize) -> f64 {
        if self.sigma[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn active_count(&self) -> usize {
        self.gamma.iter().filter(|g| **g).count()
    }
}

/// Half-open interval `[t0, t1)` with constant contact flags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub t0: f64,
    pub t1: f64,
    pub flags: ContactFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitTimeline {
    pub phases: Vec<Phase>,
    pub lead_window: f64,
}

impl GaitTimeline {
    /// Builds a timeline from explicit phases and checks its invariants.
    pub fn new(phases: Vec<Phase>, lead_window: f64) -> Result<Self, ModelError> {
        let tl = Self { phases, lead_window };
        tl.validate()?;
        Ok(tl)
    }

    /// Both feet down forever.
    pub fn standing() -> Self {
        let flags = ContactFlags {
            gamma: [true, true],
            sigma: [true, true],
        };
        Self {
            phases: vec![Phase {
                t0: 0.0,
                t1: f64::INFINITY,
                flags,
            }],
            lead_window: 0.0,
        }
    }

    pub fn start(&self) -> f64 {
        self.phases.first().map_or(0.0, |p| p.t0)
    }

    pub fn end(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.t1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.phases.is_empty() {
            return Err(invalid("timeline", "no phases"));
        }
        if !(self.lead_window >= 0.0) {
            return Err(invalid("timeline", "negative lead window"));
        }
        for (k, p) in self.phases.iter().enumerate() {
            if !(p.t0 < p.t1) {
                return Err(invalid("timeline", format!("phase {k} is empty or reversed")));
            }
            if k > 0 && self.phases[k - 1].t1 != p.t0 {
                return Err(invalid("timeline", format!("phase {k} not contiguous")));
            }
            for i in 0..2 {
                if p.flags.gamma[i] && !p.flags.sigma[i] {
                    return Err(invalid("timeline", format!("phase {k}: gamma without sigma")));
                }
            }
        }
        // sigma must cover the lead window before each touchdown
        for (k, p) in self.phases.iter().enumerate().skip(1) {
            let prev = &self.phases[k - 1];
            for i in 0..2 {
                if p.flags.gamma[i] && !prev.flags.gamma[i] {
                    let from = p.t0 - self.lead_window;
                    for q in &self.phases[..k] {
                        if q.t1 > from && !q.flags.sigma[i] {
                            return Err(invalid(
                                "timeline",
                                format!("sigma not set in the lead window before t = {}", p.t0),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Flags of the unique phase containing `t`.
    pub fn contact_flags_at(&self, t: f64) -> Result<ContactFlags, ModelError> {
        let out = || ModelError::OutOfRange {
            t,
            start: self.start(),
            end: self.end(),
        };
        if !(t >= self.start() && t < self.end()) {
            return Err(out());
        }
        let k = self.phases.partition_point(|p| p.t1 <= t);
        self.phases.get(k).map(|p| p.flags).ok_or_else(out)
    }

    /// Re-bases the timeline so that `t = dt` becomes `0`; earlier phases are dropped.
    pub fn shifted(&self, dt: f64) -> GaitTimeline {
        let mut phases: Vec<Phase> = self
            .phases
            .iter()
            .filter(|p| p.t1 > dt)
            .map(|p| Phase {
                t0: (p.t0 - dt).max(0.0),
                t1: p.t1 - dt,
                flags: p.flags,
            })
            .collect();
        if phases.is_empty() {
            if let Some(last) = self.phases.last() {
                phases.push(Phase {
                    t0: 0.0,
                    t1: f64::INFINITY,
                    flags: last.flags,
                });
            }
        }
        GaitTimeline {
            phases,
            lead_window: self.lead_window,
        }
    }
}

/// Derives the contact timeline from a footstep list.
///
/// `gamma_i(t) = 1` inside a footstep span of contact `i`; `sigma_i` is `gamma_i`
/// extended backwards by `lead_window` before every touchdown. Phases start at
/// `t = 0`, break only before `horizon_end`, and the last one is open-ended.
pub fn derive_timeline(footsteps: &[Footstep], lead_window: f64, horizon_end: f64) -> Result<GaitTimeline, ModelError> {
    if !(lead_window >= 0.0) {
        return Err(invalid("timeline", "negative lead window"));
    }
    if !(horizon_end > 0.0) {
        return Err(invalid("timeline", "horizon end must be positive"));
    }
    for f in footsteps {
        f.validate()?;
    }
    for foot in Foot::ALL {
        let mut own: Vec<&Footstep> = footsteps.iter().filter(|f| f.contact == foot).collect();
        own.sort_by(|a, b| a.activation_time.total_cmp(&b.activation_time));
        for w in own.windows(2) {
            if w[1].activation_time < w[0].deactivation_time {
                return Err(ModelError::OverlappingFootsteps {
                    foot,
                    t: w[1].activation_time,
                });
            }
        }
    }

    let mut breaks = vec![0.0];
    for f in footsteps {
        for t in [f.activation_time, f.deactivation_time, f.activation_time - lead_window] {
            if t > 0.0 && t < horizon_end {
                breaks.push(t);
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let flags_at = |t: f64| {
        let mut fl = ContactFlags::default();
        for f in footsteps {
            let i = f.contact.index();
            if f.is_active_at(t) {
                fl.gamma[i] = true;
                fl.sigma[i] = true;
            } else if f.activation_time - lead_window <= t && t < f.activation_time {
                fl.sigma[i] = true;
            }
        }
        fl
    };

    let mut phases: Vec<Phase> = Vec::new();
    for (k, &t0) in breaks.iter().enumerate() {
        let t1 = breaks.get(k + 1).copied().unwrap_or(f64::INFINITY);
        let flags = flags_at(t0);
        match phases.last_mut() {
            Some(last) if last.flags == flags => last.t1 = t1,
            _ => phases.push(Phase { t0, t1, flags }),
        }
    }
    Ok(GaitTimeline { phases, lead_window })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotParams {
    /// Total mass, kg.
    pub mass: f64,
    pub gravity: Vector3<f64>,
    pub friction_mu: f64,
    pub foot_length: f64,
    pub foot_width: f64,
    pub com_z_min: f64,
    pub com_z_max: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            mass: crate::kinematics::BUNDLED_BIPED_MASS,
            gravity: Vector3::new(0.0, 0.0, -9.81),
            friction_mu: 0.5,
            foot_length: 0.10,
            foot_width: 0.05,
            com_z_min: 0.25,
            com_z_max: 0.35,
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.mass > 0.0) {
            return Err(invalid("robot params", "mass must be positive"));
        }
        if !(self.friction_mu > 0.0) {
            return Err(invalid("robot params", "friction coefficient must be positive"));
        }
        if !(self.com_z_min < self.com_z_max) {
            return Err(invalid("robot params", "com_z_min must be below com_z_max"));
        }
        if !(self.foot_length > 0.0 && self.foot_width > 0.0) {
            return Err(invalid("robot params", "foot dimensions must be positive"));
        }
        Ok(())
    }

    pub fn weight(&self) -> f64 {
        self.mass * self.gravity.norm()
    }

    pub fn foot_vertices(&self) -> [Vector3<f64>; 4] {
        rectangle_vertices(self.foot_length, self.foot_width)
    }
}

/// Nominal trajectories over a horizon, sampled at `sampling_period`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceBundle {
    pub sampling_period: f64,
    pub com_ref: Vec<Vector3<f64>>,
    pub h_ang_ref: Vec<Vector3<f64>>,
    pub joint_postural: Vec<DVector<f64>>,
    /// Nominal per-foot contact force (sum over the foot's vertices).
    pub force_ref: Vec<[Vector3<f64>; 2]>,
    pub footsteps: Vec<Footstep>,
    pub timeline: GaitTimeline,
}

impl ReferenceBundle {
    pub fn len(&self) -> usize {
        self.com_ref.len()
    }

    pub fn is_empty(&self) -> bool {
        self.com_ref.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len().saturating_sub(1) as f64 * self.sampling_period
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.sampling_period > 0.0) {
            return Err(invalid("reference bundle", "sampling period must be positive"));
        }
        let n = self.com_ref.len();
        if self.h_ang_ref.len() != n || self.joint_postural.len() != n || self.force_ref.len() != n {
            return Err(invalid("reference bundle", "sequence lengths differ"));
        }
        for f in &self.footsteps {
            f.validate()?;
        }
        self.timeline.validate()
    }

    /// `n` samples starting at sample `offset`, with footsteps and timeline
    /// re-based so that the first kept sample is `t = 0`.
    pub fn window(&self, offset: usize, n: usize) -> Result<ReferenceBundle, ModelError> {
        if n == 0 || offset + n > self.len() {
            return Err(invalid(
                "reference bundle",
                format!("window {offset}+{n} exceeds {} samples", self.len()),
            ));
        }
        let dt = offset as f64 * self.sampling_period;
        let r = offset..offset + n;
        Ok(ReferenceBundle {
            sampling_period: self.sampling_period,
            com_ref: self.com_ref[r.clone()].to_vec(),
            h_ang_ref: self.h_ang_ref[r.clone()].to_vec(),
            joint_postural: self.joint_postural[r.clone()].to_vec(),
            force_ref: self.force_ref[r].to_vec(),
            footsteps: self
                .footsteps
                .iter()
                .filter(|f| f.deactivation_time > dt)
                .map(|f| f.shifted(dt))
                .collect(),
            timeline: self.timeline.shifted(dt),
        })
    }

    /// Nominal pose of `foot` at time `t`: the footstep in contact at `t`, else
    /// the next one to touch down, else the last one lifted.
    pub fn nominal_foot_pose(&self, foot: Foot, t: f64) -> Option<Pose> {
        let own = || self.footsteps.iter().filter(|f| f.contact == foot);
        if let Some(f) = own().find(|f| f.is_active_at(t)) {
            return Some(f.pose);
        }
        if let Some(f) = own()
            .filter(|f| f.activation_time > t)
            .min_by(|a, b| a.activation_time.total_cmp(&b.activation_time))
        {
            return Some(f.pose);
        }
        own()
            .max_by(|a, b| a.deactivation_time.total_cmp(&b.deactivation_time))
            .map(|f| f.pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(foot: Foot, x: f64, t0: f64, t1: f64) -> Footstep {
        Footstep::new(foot, Pose::from_xyz_yaw(x, foot.side() * 0.05, 0.0, 0.0), t0, t1).unwrap()
    }

    fn flags(g: [u8; 2], s: [u8; 2]) -> ContactFlags {
        ContactFlags {
            gamma: [g[0] == 1, g[1] == 1],
            sigma: [s[0] == 1, s[1] == 1],
        }
    }

    #[test]
    fn single_support_flags() {
        let tl = derive_timeline(&[step(Foot::Left, 0.0, 0.0, 2.0)], 0.0, 2.0).unwrap();
        let f = tl.contact_flags_at(0.7).unwrap();
        assert_eq!(f.gamma, [true, false]);
    }

    #[test]
    fn lead_window_freezes_before_touchdown() {
        // right touches down at 1.0 s with a 50 ms lead window
        let steps = [step(Foot::Left, 0.0, 0.0, 2.0), step(Foot::Right, 0.1, 1.0, 3.0)];
        let tl = derive_timeline(&steps, 0.05, 3.0).unwrap();
        let f = tl.contact_flags_at(1.0 - 0.03).unwrap();
        assert!(f.sigma[1]);
        assert!(!f.gamma[1]);
        let before = tl.contact_flags_at(0.9).unwrap();
        assert!(!before.sigma[1]);
    }

    #[test]
    fn boundary_belongs_to_next_phase() {
        let steps = [step(Foot::Left, 0.0, 0.0, 1.0), step(Foot::Right, 0.1, 0.5, 2.0)];
        let tl = derive_timeline(&steps, 0.0, 2.0).unwrap();
        assert_eq!(tl.contact_flags_at(0.5).unwrap().gamma, [true, true]);
        assert_eq!(tl.contact_flags_at(1.0).unwrap().gamma, [false, true]);
    }

    #[test]
    fn window_rebases_everything() {
        let steps = vec![
            step(Foot::Left, 0.0, f64::NEG_INFINITY, 0.3),
            step(Foot::Right, 0.1, 0.5, 2.0),
        ];
        let n = 11;
        let b = ReferenceBundle {
            sampling_period: 0.1,
            com_ref: (0..n).map(|k| Vector3::new(k as f64, 0.0, 0.3)).collect(),
            h_ang_ref: vec![Vector3::zeros(); n],
            joint_postural: vec![DVector::zeros(2); n],
            force_ref: vec![[Vector3::zeros(); 2]; n],
            timeline: derive_timeline(&steps, 0.0, 1.0).unwrap(),
            footsteps: steps,
        };
        let w = b.window(4, 5).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w.com_ref[0].x, 4.0);
        // the left step lifted before the window and is dropped
        assert_eq!(w.footsteps.len(), 1);
        assert!((w.footsteps[0].activation_time - 0.1).abs() < 1e-12);
        assert_eq!(w.timeline.contact_flags_at(0.05).unwrap().gamma, [false, false]);
        assert_eq!(w.timeline.contact_flags_at(0.15).unwrap().gamma, [false, true]);
        assert!(b.window(7, 5).is_err());
    }

    #[test]
    fn out_of_span_is_an_error() {
        let tl = GaitTimeline::new(
            vec![Phase {
                t0: 0.0,
                t1: 1.0,
                flags: flags([1, 1], [1, 1]),
            }],
            0.0,
        )
        .unwrap();
        assert!(matches!(tl.contact_flags_at(1.0), Err(ModelError::OutOfRange { .. })));
        assert!(matches!(tl.contact_flags_at(-0.1), Err(ModelError::OutOfRange { .. })));
    }

    #[test]
    fn single_footstep_phase_table() {
        let tl = derive_timeline(&[step(Foot::Left, 0.0, 0.0, 1.0)], 0.1, 5.0).unwrap();
        assert_eq!(tl.phases.len(), 2);
        assert_eq!((tl.phases[0].t0, tl.phases[0].t1), (0.0, 1.0));
        assert_eq!(tl.phases[0].flags, flags([1, 0], [1, 0]));
        assert_eq!(tl.phases[1].t0, 1.0);
        assert_eq!(tl.phases[1].t1, f64::INFINITY);
        assert_eq!(tl.phases[1].flags, flags([0, 0], [0, 0]));
    }

    #[test]
    fn alternating_steps_phase_table() {
        // L [0, 1.2), R [0.8, 2.4), L [2.0, ∞): double support on [0.8, 1.2) and [2.0, 2.4)
        let steps = [
            step(Foot::Left, 0.0, 0.0, 1.2),
            step(Foot::Right, 0.1, 0.8, 2.4),
            Footstep::new(Foot::Left, Pose::from_xyz_yaw(0.2, 0.05, 0.0, 0.0), 2.0, f64::INFINITY).unwrap(),
        ];
        let tl = derive_timeline(&steps, 0.1, 3.0).unwrap();
        let expect = [
            (0.0, 0.7, flags([1, 0], [1, 0])),
            (0.7, 0.8, flags([1, 0], [1, 1])),
            (0.8, 1.2, flags([1, 1], [1, 1])),
            (1.2, 1.9, flags([0, 1], [0, 1])),
            (1.9, 2.0, flags([0, 1], [1, 1])),
            (2.0, 2.4, flags([1, 1], [1, 1])),
            (2.4, f64::INFINITY, flags([1, 0], [1, 0])),
        ];
        assert_eq!(tl.phases.len(), expect.len(), "{:#?}", tl.phases);
        for (p, (t0, t1, f)) in tl.phases.iter().zip(expect) {
            let close = |a: f64, b: f64| a == b || (a - b).abs() < 1e-12;
            assert!(close(p.t0, t0) && close(p.t1, t1), "{p:?}");
            assert_eq!(p.flags, f, "{p:?}");
        }
    }

    #[test]
    fn zero_lead_sigma_equals_gamma() {
        let steps = [step(Foot::Left, 0.0, 0.0, 1.2), step(Foot::Right, 0.1, 0.8, 2.4)];
        let tl = derive_timeline(&steps, 0.0, 3.0).unwrap();
        for p in &tl.phases {
            assert_eq!(p.flags.gamma, p.flags.sigma);
        }
    }

    #[test]
    fn overlapping_footsteps_rejected() {
        let steps = [step(Foot::Left, 0.0, 0.0, 1.0), step(Foot::Left, 0.1, 0.5, 2.0)];
        assert!(matches!(
            derive_timeline(&steps, 0.0, 3.0),
            Err(ModelError::OverlappingFootsteps { foot: Foot::Left, .. })
        ));
    }

    #[test]
    fn footstep_requires_ordered_times() {
        assert!(Footstep::new(Foot::Left, Pose::identity(), 1.0, 1.0).is_err());
    }

    #[test]
    fn contact_patch_validation() {
        let ok = ContactPatch::rectangle("l", Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.3), 0.1, 0.05);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.pose.rotation[(0, 0)] = 2.0;
        assert!(bad.validate().is_err());
        let mut tilted = ok;
        tilted.vertices[2].z = 0.01;
        assert!(tilted.validate().is_err());
    }

    #[test]
    fn pose_inverse_roundtrip() {
        let p = Pose::from_rpy(Vector3::new(0.1, -0.2, 0.3), 0.2, -0.4, 1.1);
        let id = p.compose(&p.inverse());
        assert!((id.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(id.translation.amax() < 1e-12);
        assert!((Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.7).yaw() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn robot_params_validation() {
        assert!(RobotParams::default().validate().is_ok());
        let bad = RobotParams {
            com_z_min: 0.4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

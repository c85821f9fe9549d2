//! Floating-base tree kinematics: forward kinematics, mixed-representation
//! Jacobians, CoM and centroidal momentum.
//!
//! Velocities use one convention throughout: the base twist is the linear
//! velocity of the base origin and the angular velocity of the base, both in
//! inertial coordinates. Jacobians map `ν = (base twist, dq)` to the same
//! representation of the target frame.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3, Vector6};
use serde::Deserialize;
use thiserror::Error;

use crate::model::{hat, CentroidalState, Pose};

/// Total mass of the bundled biped, kg.
pub const BUNDLED_BIPED_MASS: f64 = 4.8;

const BUNDLED_BIPED: &str = include_str!("../models/biped.toml");

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("unknown frame `{0}`")]
    UnknownFrame(String),
    #[error("unknown joint `{0}`")]
    UnknownJoint(String),
    #[error("model parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("state dimension {got} does not match {expected} joints")]
    Dimension { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JointKind {
    Fixed,
    /// Rotation about a unit axis of the link frame; `index` into `q`.
    Revolute {
        axis: Unit<Vector3<f64>>,
        index: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub name: String,
    pub parent: Option<usize>,
    /// Fixed transform from the parent frame to the joint frame.
    pub origin: Pose,
    pub joint: JointKind,
    pub joint_name: Option<String>,
    pub mass: f64,
    pub com: Vector3<f64>,
    pub inertia: Matrix3<f64>,
}

/// Kinematic tree with parents stored before children.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainModel {
    name: String,
    links: Vec<Link>,
    joint_names: Vec<String>,
    joint_links: Vec<usize>,
    by_name: HashMap<String, usize>,
    total_mass: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[serde(default)]
    name: String,
    base_link: String,
    link: Vec<LinkFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkFile {
    name: String,
    parent: Option<String>,
    #[serde(default)]
    origin: OriginFile,
    joint: Option<String>,
    axis: Option<[f64; 3]>,
    #[serde(default)]
    mass: f64,
    #[serde(default)]
    com: [f64; 3],
    inertia: Option<InertiaFile>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct OriginFile {
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InertiaFile {
    Diagonal([f64; 3]),
    Full([[f64; 3]; 3]),
}

impl ChainModel {
    /// The desk-scale biped shipped with the crate.
    pub fn bundled_biped() -> ChainModel {
        Self::from_toml_str(BUNDLED_BIPED).expect("bundled model is valid")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<ChainModel, KinematicsError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml_str(text: &str) -> Result<ChainModel, KinematicsError> {
        let file: ModelFile = toml::from_str(text)?;
        let bad = |m: String| KinematicsError::InvalidModel(m);

        let mut raw: Vec<Link> = Vec::with_capacity(file.link.len());
        let mut parent_names = Vec::with_capacity(file.link.len());
        for l in &file.link {
            let [r, p, y] = l.origin.rpy;
            let origin = Pose::from_rpy(Vector3::from(l.origin.xyz), r, p, y);
            let joint = match (&l.joint, l.axis) {
                (Some(_), Some(a)) => {
                    let a = Vector3::from(a);
                    if a.norm() < 1e-12 {
                        return Err(bad(format!("link `{}`: zero joint axis", l.name)));
                    }
                    JointKind::Revolute {
                        axis: Unit::new_normalize(a),
                        index: 0,
                    }
                }
                (Some(_), None) => return Err(bad(format!("link `{}`: joint without axis", l.name))),
                (None, Some(_)) => return Err(bad(format!("link `{}`: axis without joint", l.name))),
                (None, None) => JointKind::Fixed,
            };
            let inertia = match &l.inertia {
                None => Matrix3::zeros(),
                Some(InertiaFile::Diagonal(d)) => Matrix3::from_diagonal(&Vector3::from(*d)),
                Some(InertiaFile::Full(m)) => Matrix3::from_fn(|i, j| m[i][j]),
            };
            raw.push(Link {
                name: l.name.clone(),
                parent: None,
                origin,
                joint,
                joint_name: l.joint.clone(),
                mass: l.mass,
                com: Vector3::from(l.com),
                inertia,
            });
            parent_names.push(l.parent.clone());
        }
        Self::assemble(file.name, &file.base_link, raw, parent_names)
    }

    /// Builds a model from links whose parents are given by name. Links are
    /// reordered so that parents precede children.
    pub fn from_links(
        name: impl Into<String>,
        base_link: &str,
        links: Vec<(Link, Option<String>)>,
    ) -> Result<ChainModel, KinematicsError> {
        let (raw, parents): (Vec<_>, Vec<_>) = links.into_iter().unzip();
        Self::assemble(name.into(), base_link, raw, parents)
    }

    fn assemble(
        name: String,
        base_link: &str,
        raw: Vec<Link>,
        parent_names: Vec<Option<String>>,
    ) -> Result<ChainModel, KinematicsError> {
        let bad = |m: String| KinematicsError::InvalidModel(m);
        let mut index = HashMap::new();
        for (i, l) in raw.iter().enumerate() {
            if index.insert(l.name.clone(), i).is_some() {
                return Err(bad(format!("duplicate link `{}`", l.name)));
            }
        }
        let base = *index
            .get(base_link)
            .ok_or_else(|| bad(format!("base link `{base_link}` not found")))?;
        let mut parent_of = vec![None; raw.len()];
        for (i, p) in parent_names.iter().enumerate() {
            match p {
                None if i != base => return Err(bad(format!("link `{}` has no parent", raw[i].name))),
                Some(_) if i == base => return Err(bad("base link must not have a parent".into())),
                Some(p) => parent_of[i] = Some(*index.get(p).ok_or_else(|| bad(format!("unknown parent `{p}`")))?),
                None => {}
            }
        }
        if raw[base].joint != JointKind::Fixed {
            return Err(bad("base link cannot carry a joint".into()));
        }

        // breadth-first order from the base; unreachable links imply a cycle
        let mut order = vec![base];
        let mut head = 0;
        while head < order.len() {
            let cur = order[head];
            head += 1;
            for (i, p) in parent_of.iter().enumerate() {
                if *p == Some(cur) {
                    order.push(i);
                }
            }
        }
        if order.len() != raw.len() {
            return Err(bad("link graph is not a tree rooted at the base".into()));
        }
        // keep file order among revolute joints for q indexing
        let mut joint_file_order: Vec<usize> = (0..raw.len())
            .filter(|&i| matches!(raw[i].joint, JointKind::Revolute { .. }))
            .collect();
        joint_file_order.sort_unstable();

        let mut new_pos = vec![0; raw.len()];
        for (k, &i) in order.iter().enumerate() {
            new_pos[i] = k;
        }
        let mut links: Vec<Link> = order
            .iter()
            .map(|&i| {
                let mut l = raw[i].clone();
                l.parent = parent_of[i].map(|p| new_pos[p]);
                l
            })
            .collect();
        let mut joint_names = Vec::new();
        let mut joint_links = Vec::new();
        for (j, &i) in joint_file_order.iter().enumerate() {
            let k = new_pos[i];
            if let JointKind::Revolute { axis, .. } = links[k].joint {
                links[k].joint = JointKind::Revolute { axis, index: j };
            }
            joint_names.push(links[k].joint_name.clone().unwrap_or_else(|| links[k].name.clone()));
            joint_links.push(k);
        }

        let mut total_mass = 0.0;
        for l in &links {
            if !(l.mass >= 0.0) {
                return Err(bad(format!("link `{}` has negative mass", l.name)));
            }
            if (l.inertia - l.inertia.transpose()).amax() > 1e-12 {
                return Err(bad(format!("link `{}` inertia not symmetric", l.name)));
            }
            if l.inertia.symmetric_eigenvalues().min() < -1e-12 {
                return Err(bad(format!("link `{}` inertia not PSD", l.name)));
            }
            total_mass += l.mass;
        }
        if !(total_mass > 0.0) {
            return Err(bad("total mass must be positive".into()));
        }
        let by_name = links.iter().enumerate().map(|(i, l)| (l.name.clone(), i)).collect();
        Ok(ChainModel {
            name,
            links,
            joint_names,
            joint_links,
            by_name,
            total_mass,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn n_joints(&self) -> usize {
        self.joint_names.len()
    }

    /// Size of the generalized velocity: base twist plus joints.
    pub fn nv(&self) -> usize {
        6 + self.n_joints()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn frame_index(&self, frame: &str) -> Result<usize, KinematicsError> {
        self.by_name
            .get(frame)
            .copied()
            .ok_or_else(|| KinematicsError::UnknownFrame(frame.to_owned()))
    }

    pub fn joint_index(&self, joint: &str) -> Result<usize, KinematicsError> {
        self.joint_names
            .iter()
            .position(|n| n == joint)
            .ok_or_else(|| KinematicsError::UnknownJoint(joint.to_owned()))
    }

    /// Joint indices on the path from the base to `frame`, base side first.
    pub fn chain_joints(&self, frame: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = Some(frame);
        while let Some(l) = cur {
            if let JointKind::Revolute { index, .. } = self.links[l].joint {
                out.push(index);
            }
            cur = self.links[l].parent;
        }
        out.reverse();
        out
    }

    fn check(&self, state: &RobotState) -> Result<(), KinematicsError> {
        for len in [state.q.len(), state.dq.len()] {
            if len != self.n_joints() {
                return Err(KinematicsError::Dimension {
                    expected: self.n_joints(),
                    got: len,
                });
            }
        }
        Ok(())
    }

    /// World poses of every link frame (after its joint).
    pub fn link_poses(&self, state: &RobotState) -> Result<Vec<Pose>, KinematicsError> {
        self.check(state)?;
        let mut poses: Vec<Pose> = Vec::with_capacity(self.links.len());
        for l in &self.links {
            let parent = l.parent.map_or(state.base_pose, |p| poses[p]);
            let mut pose = parent.compose(&l.origin);
            if let JointKind::Revolute { axis, index } = l.joint {
                pose.rotation *= Rotation3::from_axis_angle(&axis, state.q[index]).into_inner();
            }
            poses.push(pose);
        }
        Ok(poses)
    }

    /// World linear velocity of every link origin and angular velocity of every link.
    fn link_velocities(&self, state: &RobotState, poses: &[Pose]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let v_base: Vector3<f64> = state.base_twist.fixed_rows::<3>(0).into();
        let w_base: Vector3<f64> = state.base_twist.fixed_rows::<3>(3).into();
        let mut out: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::with_capacity(self.links.len());
        for (k, l) in self.links.iter().enumerate() {
            let (v, mut w) = match l.parent {
                None => (
                    v_base + w_base.cross(&(poses[k].translation - state.base_pose.translation)),
                    w_base,
                ),
                Some(p) => {
                    let (vp, wp) = out[p];
                    (vp + wp.cross(&(poses[k].translation - poses[p].translation)), wp)
                }
            };
            if let JointKind::Revolute { axis, index } = l.joint {
                w += poses[k].rotation * axis.into_inner() * state.dq[index];
            }
            out.push((v, w));
        }
        out
    }

    /// 6×nv Jacobian (linear rows first) of a point rigidly attached to `link`.
    fn point_jacobian(&self, state: &RobotState, poses: &[Pose], link: usize, p: &Vector3<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(6, self.nv());
        for d in 0..3 {
            j[(d, d)] = 1.0;
            j[(3 + d, 3 + d)] = 1.0;
        }
        let r = -hat(&(p - state.base_pose.translation));
        j.view_mut((0, 3), (3, 3)).copy_from(&r);
        let mut cur = Some(link);
        while let Some(l) = cur {
            if let JointKind::Revolute { axis, index } = self.links[l].joint {
                let a = poses[l].rotation * axis.into_inner();
                let lin = a.cross(&(p - poses[l].translation));
                j.view_mut((0, 6 + index), (3, 1)).copy_from(&lin);
                j.view_mut((3, 6 + index), (3, 1)).copy_from(&a);
            }
            cur = self.links[l].parent;
        }
        j
    }

    pub fn forward_kinematics(&self, state: &RobotState, frame: &str) -> Result<Pose, KinematicsError> {
        let idx = self.frame_index(frame)?;
        Ok(self.link_poses(state)?[idx])
    }

    /// 6×(6+n) Jacobian of `frame`: rows are (linear, angular) velocity.
    pub fn jacobian(&self, state: &RobotState, frame: &str) -> Result<DMatrix<f64>, KinematicsError> {
        let idx = self.frame_index(frame)?;
        let poses = self.link_poses(state)?;
        Ok(self.point_jacobian(state, &poses, idx, &poses[idx].translation))
    }

    /// Pose and Jacobian of several frames sharing one kinematics pass.
    pub fn frames_with_jacobians(
        &self,
        state: &RobotState,
        frames: &[usize],
    ) -> Result<Vec<(Pose, DMatrix<f64>)>, KinematicsError> {
        let poses = self.link_poses(state)?;
        Ok(frames
            .iter()
            .map(|&f| (poses[f], self.point_jacobian(state, &poses, f, &poses[f].translation)))
            .collect())
    }

    pub fn com(&self, state: &RobotState) -> Result<Vector3<f64>, KinematicsError> {
        let poses = self.link_poses(state)?;
        Ok(self.com_from_poses(&poses))
    }

    fn com_from_poses(&self, poses: &[Pose]) -> Vector3<f64> {
        let mut acc = Vector3::zeros();
        for (l, pose) in self.links.iter().zip(poses) {
            acc += l.mass * pose.transform_point(&l.com);
        }
        acc / self.total_mass
    }

    /// CoM position and 3×(6+n) CoM Jacobian.
    pub fn com_jacobian(&self, state: &RobotState) -> Result<(Vector3<f64>, DMatrix<f64>), KinematicsError> {
        let poses = self.link_poses(state)?;
        let mut j = DMatrix::zeros(3, self.nv());
        for (k, (l, pose)) in self.links.iter().zip(&poses).enumerate() {
            if l.mass == 0.0 {
                continue;
            }
            let c = pose.transform_point(&l.com);
            let jl = self.point_jacobian(state, &poses, k, &c);
            j += jl.rows(0, 3) * (l.mass / self.total_mass);
        }
        Ok((self.com_from_poses(&poses), j))
    }

    /// CoM position and centroidal momentum about it (inertial orientation).
    pub fn com_and_momentum(&self, state: &RobotState) -> Result<CentroidalState, KinematicsError> {
        let poses = self.link_poses(state)?;
        let vel = self.link_velocities(state, &poses);
        let p_com = self.com_from_poses(&poses);
        let mut h_lin = Vector3::zeros();
        let mut h_ang = Vector3::zeros();
        for ((l, pose), (v, w)) in self.links.iter().zip(&poses).zip(&vel) {
            if l.mass == 0.0 && l.inertia == Matrix3::zeros() {
                continue;
            }
            let c = pose.transform_point(&l.com);
            let vc = v + w.cross(&(c - pose.translation));
            let mv = l.mass * vc;
            h_lin += mv;
            h_ang += (c - p_com).cross(&mv) + pose.rotation * l.inertia * pose.rotation.transpose() * w;
        }
        Ok(CentroidalState { p_com, h_lin, h_ang })
    }
}

/// Floating-base configuration and velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub base_pose: Pose,
    /// (linear, angular), inertial coordinates.
    pub base_twist: Vector6<f64>,
    pub q: DVector<f64>,
    pub dq: DVector<f64>,
}

impl RobotState {
    pub fn zeros(n_joints: usize) -> Self {
        Self {
            base_pose: Pose::identity(),
            base_twist: Vector6::zeros(),
            q: DVector::zeros(n_joints),
            dq: DVector::zeros(n_joints),
        }
    }

    pub fn n_joints(&self) -> usize {
        self.q.len()
    }

    /// Generalized velocity `ν = (base twist, dq)`.
    pub fn velocity(&self) -> DVector<f64> {
        let mut v = DVector::zeros(6 + self.dq.len());
        v.rows_mut(0, 6).copy_from(&self.base_twist);
        v.rows_mut(6, self.dq.len()).copy_from(&self.dq);
        v
    }

    pub fn set_velocity(&mut self, nu: &DVector<f64>) {
        self.base_twist.copy_from(&nu.rows(0, 6));
        let n = self.dq.len();
        self.dq.copy_from(&nu.rows(6, n));
    }

    /// Explicit Euler step on the configuration with velocity `nu`.
    pub fn integrate(&mut self, nu: &DVector<f64>, dt: f64) {
        self.set_velocity(nu);
        let v: Vector3<f64> = nu.fixed_rows::<3>(0).into();
        let w: Vector3<f64> = nu.fixed_rows::<3>(3).into();
        self.base_pose.translation += v * dt;
        self.base_pose.rotation = Rotation3::new(w * dt).into_inner() * self.base_pose.rotation;
        let n = self.q.len();
        self.q += nu.rows(6, n) * dt;
    }
}

/// Free-function form of [`ChainModel::forward_kinematics`].
pub fn forward_kinematics(model: &ChainModel, state: &RobotState, frame: &str) -> Result<Pose, KinematicsError> {
    model.forward_kinematics(state, frame)
}

/// Free-function form of [`ChainModel::jacobian`].
pub fn jacobian(model: &ChainModel, state: &RobotState, frame: &str) -> Result<DMatrix<f64>, KinematicsError> {
    model.jacobian(state, frame)
}

/// Free-function form of [`ChainModel::com_and_momentum`].
pub fn com_and_momentum(model: &ChainModel, state: &RobotState) -> Result<CentroidalState, KinematicsError> {
    model.com_and_momentum(state)
}

/// Rotation vector `log(R)`, accurate for small angles.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let v = 0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = v.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta < 1e-6 {
        v * (1.0 + theta * theta / 6.0)
    } else if std::f64::consts::PI - theta < 1e-4 {
        Rotation3::from_matrix_unchecked(*r).scaled_axis()
    } else {
        v * (theta / s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn link(name: &str, origin: Vector3<f64>, axis: Option<Vector3<f64>>, mass: f64, com: Vector3<f64>) -> Link {
        Link {
            name: name.into(),
            parent: None,
            origin: Pose::from_translation(origin),
            joint: match axis {
                Some(a) => JointKind::Revolute {
                    axis: Unit::new_normalize(a),
                    index: 0,
                },
                None => JointKind::Fixed,
            },
            joint_name: axis.map(|_| format!("{name}_joint")),
            mass,
            com,
            inertia: Matrix3::from_diagonal_element(1e-3 * mass),
        }
    }

    fn single_joint() -> ChainModel {
        ChainModel::from_links(
            "one",
            "base",
            vec![
                (link("base", Vector3::zeros(), None, 1.0, Vector3::zeros()), None),
                (
                    link("arm", Vector3::zeros(), Some(Vector3::z()), 1.0, Vector3::zeros()),
                    Some("base".into()),
                ),
                (
                    link("tip", Vector3::x(), None, 0.0, Vector3::zeros()),
                    Some("arm".into()),
                ),
            ],
        )
        .unwrap()
    }

    #[test]
    fn revolute_quarter_turn() {
        let m = single_joint();
        let mut s = RobotState::zeros(1);
        s.q[0] = FRAC_PI_2;
        let p = m.forward_kinematics(&s, "tip").unwrap().translation;
        assert_abs_diff_eq!(p, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn unknown_frame() {
        let m = single_joint();
        assert!(matches!(
            m.forward_kinematics(&RobotState::zeros(1), "nope"),
            Err(KinematicsError::UnknownFrame(_))
        ));
    }

    #[test]
    fn zero_joints_compose_fixed_transforms() {
        let m = ChainModel::bundled_biped();
        let s = RobotState::zeros(m.n_joints());
        let sole = m.forward_kinematics(&s, "l_sole").unwrap();
        assert_abs_diff_eq!(sole.translation, Vector3::new(0.0, 0.045, -0.30), epsilon = 1e-15);
        assert_abs_diff_eq!(sole.rotation, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn bundled_model_shape() {
        let m = ChainModel::bundled_biped();
        assert_eq!(m.n_joints(), 17);
        assert_abs_diff_eq!(m.total_mass(), BUNDLED_BIPED_MASS, epsilon = 1e-12);
        assert_eq!(m.chain_joints(m.frame_index("l_sole").unwrap()).len(), 6);
        assert_eq!(m.joint_names()[0], "torso_yaw");
    }

    #[test]
    fn base_fixed_frame_has_no_joint_columns() {
        let m = ChainModel::bundled_biped();
        let mut s = RobotState::zeros(m.n_joints());
        s.q.iter_mut().enumerate().for_each(|(i, q)| *q = 0.1 * i as f64);
        let j = m.jacobian(&s, "pelvis").unwrap();
        assert!(j.columns(6, m.n_joints()).amax() == 0.0);
    }

    #[test]
    fn duplicate_joints_give_identical_columns() {
        let m = ChainModel::from_links(
            "dup",
            "base",
            vec![
                (link("base", Vector3::zeros(), None, 1.0, Vector3::zeros()), None),
                (
                    link("a", Vector3::zeros(), Some(Vector3::y()), 0.5, Vector3::zeros()),
                    Some("base".into()),
                ),
                (
                    link("b", Vector3::zeros(), Some(Vector3::y()), 0.5, Vector3::x()),
                    Some("a".into()),
                ),
                (
                    link("tip", Vector3::new(0.3, 0.0, -0.2), None, 0.0, Vector3::zeros()),
                    Some("b".into()),
                ),
            ],
        )
        .unwrap();
        let mut s = RobotState::zeros(2);
        s.q[0] = 0.4;
        s.q[1] = -0.9;
        let j = m.jacobian(&s, "tip").unwrap();
        assert_abs_diff_eq!(j.column(6).into_owned(), j.column(7).into_owned(), epsilon = 1e-15);
    }

    #[test]
    fn rigid_translation_momentum() {
        let m = ChainModel::bundled_biped();
        let mut s = RobotState::zeros(m.n_joints());
        s.base_twist = Vector6::new(0.3, -0.1, 0.2, 0.0, 0.0, 0.0);
        let h = m.com_and_momentum(&s).unwrap();
        assert_abs_diff_eq!(h.h_lin, Vector3::new(0.3, -0.1, 0.2) * m.total_mass(), epsilon = 1e-12);
        assert_abs_diff_eq!(h.h_ang, Vector3::zeros(), epsilon = 1e-12);
        let still = m.com_and_momentum(&RobotState::zeros(m.n_joints())).unwrap();
        assert_eq!(still.h_lin, Vector3::zeros());
        assert_eq!(still.h_ang, Vector3::zeros());
    }

    #[test]
    fn rejects_cycles_and_bad_inertia() {
        let cyc = ChainModel::from_links(
            "cyc",
            "base",
            vec![
                (link("base", Vector3::zeros(), None, 1.0, Vector3::zeros()), None),
                (
                    link("a", Vector3::zeros(), None, 1.0, Vector3::zeros()),
                    Some("b".into()),
                ),
                (
                    link("b", Vector3::zeros(), None, 1.0, Vector3::zeros()),
                    Some("a".into()),
                ),
            ],
        );
        assert!(matches!(cyc, Err(KinematicsError::InvalidModel(_))));
        let mut l = link("base", Vector3::zeros(), None, 1.0, Vector3::zeros());
        l.inertia[(0, 0)] = -1.0;
        assert!(ChainModel::from_links("neg", "base", vec![(l, None)]).is_err());
    }

    #[test]
    fn parses_full_inertia_and_rejects_unknown_keys() {
        let text = r#"
            base_link = "b"
            [[link]]
            name = "b"
            mass = 2.0
            inertia = [[1.0, 0.1, 0.0], [0.1, 1.0, 0.0], [0.0, 0.0, 1.0]]
        "#;
        let m = ChainModel::from_toml_str(text).unwrap();
        assert_eq!(m.links()[0].inertia[(0, 1)], 0.1);
        let bad = format!("{text}\ncolour = \"red\"");
        assert!(ChainModel::from_toml_str(&bad).is_err());
    }

    #[test]
    fn integrate_moves_base_and_joints() {
        let mut s = RobotState::zeros(1);
        let nu = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2, 2.0]);
        s.integrate(&nu, 1.0);
        assert_abs_diff_eq!(s.base_pose.translation.x, 1.0);
        assert_abs_diff_eq!(s.base_pose.yaw(), FRAC_PI_2, epsilon = 1e-12);
        assert_eq!(s.q[0], 2.0);
    }

    #[test]
    fn log_inverts_exp() {
        for w in [
            Vector3::new(1e-9, -2e-9, 0.0),
            Vector3::new(0.3, -1.1, 0.4),
            Vector3::new(0.0, 0.0, 3.1),
        ] {
            let r = Rotation3::new(w).into_inner();
            assert_abs_diff_eq!(rotation_log(&r), w, epsilon = 1e-9);
        }
    }
}

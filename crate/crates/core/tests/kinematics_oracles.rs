use nalgebra::{DVector, Matrix3, Rotation3, Unit, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walkctl::kinematics::{rotation_log, ChainModel, JointKind, Link, RobotState};
use walkctl::model::Pose;

fn link(name: &str, origin: Vector3<f64>, joint: bool, mass: f64, com: Vector3<f64>, iyy: f64) -> Link {
    Link {
        name: name.into(),
        parent: None,
        origin: Pose::from_translation(origin),
        joint: if joint {
            JointKind::Revolute {
                axis: Unit::new_normalize(Vector3::y()),
                index: 0,
            }
        } else {
            JointKind::Fixed
        },
        joint_name: joint.then(|| format!("{name}_j")),
        mass,
        com,
        inertia: Matrix3::from_diagonal(&Vector3::new(iyy, iyy, iyy)),
    }
}

/// Planar chain of pitch joints; each link hangs `len` below its joint.
fn planar_chain(lengths: &[f64], masses: &[f64]) -> ChainModel {
    let mut links = vec![(link("base", Vector3::zeros(), false, 1.0, Vector3::zeros(), 0.0), None)];
    let mut parent = "base".to_string();
    let mut offset = Vector3::zeros();
    for (i, (&l, &m)) in lengths.iter().zip(masses).enumerate() {
        let name = format!("l{i}");
        links.push((
            link(&name, offset, true, m, Vector3::new(0.0, 0.0, -0.5 * l), 1e-3),
            Some(parent.clone()),
        ));
        parent = name;
        offset = Vector3::new(0.0, 0.0, -l);
    }
    links.push((link("tip", offset, false, 0.0, Vector3::zeros(), 0.0), Some(parent)));
    ChainModel::from_links("planar", "base", links).unwrap()
}

/// Closed-form tip of a pitch chain hanging along −z.
fn planar_tip(lengths: &[f64], q: &[f64]) -> Vector3<f64> {
    let mut phi = 0.0;
    let mut p = Vector3::zeros();
    for (l, qi) in lengths.iter().zip(q) {
        phi += qi;
        p += Vector3::new(-l * phi.sin(), 0.0, -l * phi.cos());
    }
    p
}

fn random_state(model: &ChainModel, rng: &mut ChaCha8Rng) -> RobotState {
    let n = model.n_joints();
    let mut s = RobotState::zeros(n);
    s.base_pose = Pose::from_rpy(
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..1.0),
        ),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-3.0..3.0),
    );
    s.base_twist = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    s.q = DVector::from_fn(n, |_, _| rng.random_range(-1.2..1.2));
    s.dq = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    s
}

fn perturbed(s: &RobotState, k: usize, eps: f64) -> RobotState {
    let mut out = s.clone();
    match k {
        0..=2 => out.base_pose.translation[k] += eps,
        3..=5 => {
            let mut w = Vector3::zeros();
            w[k - 3] = eps;
            out.base_pose.rotation = Rotation3::new(w).into_inner() * s.base_pose.rotation;
        }
        _ => out.q[k - 6] += eps,
    }
    out
}

#[test]
fn planar_leg_matches_closed_form() {
    let lengths = [0.12, 0.12, 0.03];
    let model = planar_chain(&lengths, &[0.3, 0.2, 0.1]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let mut s = RobotState::zeros(3);
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        s.q = DVector::from_column_slice(&q);
        let p = model.forward_kinematics(&s, "tip").unwrap().translation;
        assert!((p - planar_tip(&lengths, &q)).amax() < 1e-14);
    }
}

#[test]
fn jacobian_matches_finite_differences_on_biped() {
    let model = ChainModel::bundled_biped();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eps = 1e-6;
    let frames = ["l_sole", "r_sole", "torso", "l_forearm", "pelvis"];
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let s = random_state(&model, &mut rng);
        let frame = frames[trial % frames.len()];
        let j = model.jacobian(&s, frame).unwrap();
        for k in 0..model.nv() {
            let plus = model.forward_kinematics(&perturbed(&s, k, eps), frame).unwrap();
            let minus = model.forward_kinematics(&perturbed(&s, k, -eps), frame).unwrap();
            let lin = (plus.translation - minus.translation) / (2.0 * eps);
            let ang = rotation_log(&(plus.rotation * minus.rotation.transpose())) / (2.0 * eps);
            for d in 0..3 {
                let e = (j[(d, k)] - lin[d]).abs().max((j[(3 + d, k)] - ang[d]).abs());
                worst = worst.max(e);
            }
        }
    }
    assert!(worst <= 1e-5, "worst FD mismatch {worst:e}");
}

#[test]
fn com_jacobian_matches_finite_differences() {
    let model = ChainModel::bundled_biped();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let eps = 1e-6;
    for _ in 0..20 {
        let s = random_state(&model, &mut rng);
        let (_, j) = model.com_jacobian(&s).unwrap();
        for k in 0..model.nv() {
            let fd = (model.com(&perturbed(&s, k, eps)).unwrap() - model.com(&perturbed(&s, k, -eps)).unwrap())
                / (2.0 * eps);
            assert!((j.column(k) - fd).amax() < 1e-6);
        }
    }
}

#[test]
fn two_link_pendulum_momentum_matches_per_link_sum() {
    let (l1, l2, m1, m2, inertia) = (0.4, 0.3, 1.3, 0.7, 1e-3);
    let model = planar_chain(&[l1, l2], &[m1, m2]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (q1, q2): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (d1, d2): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mut s = RobotState::zeros(2);
        s.q = DVector::from_vec(vec![q1, q2]);
        s.dq = DVector::from_vec(vec![d1, d2]);

        // link CoMs in the xz-plane and their time derivatives
        let (a1, a2) = (q1, q1 + q2);
        let c1 = Vector3::new(-0.5 * l1 * a1.sin(), 0.0, -0.5 * l1 * a1.cos());
        let v1 = Vector3::new(-0.5 * l1 * a1.cos() * d1, 0.0, 0.5 * l1 * a1.sin() * d1);
        let c2 = Vector3::new(
            -l1 * a1.sin() - 0.5 * l2 * a2.sin(),
            0.0,
            -l1 * a1.cos() - 0.5 * l2 * a2.cos(),
        );
        let v2 = Vector3::new(
            -l1 * a1.cos() * d1 - 0.5 * l2 * a2.cos() * (d1 + d2),
            0.0,
            l1 * a1.sin() * d1 + 0.5 * l2 * a2.sin() * (d1 + d2),
        );
        let base_mass = 1.0;
        let total = base_mass + m1 + m2;
        let com = (m1 * c1 + m2 * c2) / total;
        let h_lin = m1 * v1 + m2 * v2;
        // the base rests at the origin and carries no momentum
        let h_ang = (c1 - com).cross(&(m1 * v1))
            + (c2 - com).cross(&(m2 * v2))
            + Vector3::new(0.0, inertia * d1, 0.0)
            + Vector3::new(0.0, inertia * (d1 + d2), 0.0);

        let got = model.com_and_momentum(&s).unwrap();
        assert!((got.p_com - com).amax() < 1e-14);
        assert!((got.h_lin - h_lin).amax() < 1e-13);
        assert!((got.h_ang - h_ang).amax() < 1e-13, "{} vs {}", got.h_ang, h_ang);
    }
}

#[test]
fn com_rate_equals_linear_momentum_over_mass() {
    let model = ChainModel::bundled_biped();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dt = 1e-6;
    for _ in 0..20 {
        let s = random_state(&model, &mut rng);
        let nu = s.velocity();
        let mut fwd = s.clone();
        fwd.integrate(&nu, dt);
        let mut bwd = s.clone();
        bwd.integrate(&nu, -dt);
        let rate = (model.com(&fwd).unwrap() - model.com(&bwd).unwrap()) / (2.0 * dt);
        let h = model.com_and_momentum(&s).unwrap();
        assert!((rate - h.h_lin / model.total_mass()).amax() < 1e-6);
    }
}

use nalgebra::{DVector, Matrix3, Vector2, Vector3, Vector6};
use proptest::prelude::*;
use walkctl::control::{
    com_zmp_law, ik_step, plan_swing, replan_swing, ComTarget, FrameTarget, IkTargets, IkTaskStack, SwingPlan,
    ZmpControllerGains,
};
use walkctl::gaitgen::{GaitGenConfig, GaitGenerator, PlanarPose};
use walkctl::kinematics::{ChainModel, RobotState};
use walkctl::model::{Pose, RobotParams};

fn v2() -> impl Strategy<Value = Vector2<f64>> {
    (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| Vector2::new(a, b))
}

fn defect(a: &SwingPlan, b: &SwingPlan, t: f64) -> f64 {
    let (x, y) = (a.sample(t), b.sample(t));
    [
        (x.pose.translation - y.pose.translation).amax(),
        (x.pose.rotation - y.pose.rotation).amax(),
        (x.linear_velocity - y.linear_velocity).amax(),
        (x.angular_velocity - y.angular_velocity).amax(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (-0.2f64..0.2, -0.2f64..0.2, 0.0f64..0.03, -0.6f64..0.6, -0.1f64..0.1)
        .prop_map(|(x, y, z, yaw, roll)| Pose::from_rpy(Vector3::new(x, y, z), roll, 0.0, yaw))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn law_is_affine_with_the_stated_gains(
        pr in v2(), vr in v2(), pm in v2(), zr in v2(), zm in v2(),
        dp in v2(), dz in v2(), kz in prop::array::uniform2(0.0f64..5.0), kc in prop::array::uniform2(0.0f64..5.0),
    ) {
        let g = ZmpControllerGains { k_zmp: kz, k_com: kc };
        let base = com_zmp_law(&pr, &vr, &pm, &zr, &zm, &g);
        // perturb the CoM and ZMP references only
        let moved = com_zmp_law(&(pr + dp), &vr, &pm, &(zr + dz), &zm, &g);
        let expect = -Vector2::from(kz).component_mul(&dz) + Vector2::from(kc).component_mul(&dp);
        prop_assert!((moved - base - expect).amax() <= 1e-12);
        let twice = com_zmp_law(&(pr + dp * 2.0), &vr, &pm, &(zr + dz * 2.0), &zm, &g);
        prop_assert!((twice - base - expect * 2.0).amax() <= 1e-12);
    }

    #[test]
    fn replans_are_c1_and_land_on_the_new_target(
        a in pose_strategy(), b in pose_strategy(), c in pose_strategy(),
        dur in 0.2f64..1.0, frac in 0.0f64..0.99, apex in 0.0f64..0.05,
    ) {
        let plan = plan_swing(&a, &b, 1.0, 1.0 + dur, apex).unwrap();
        let t_now = 1.0 + frac * dur;
        let re = replan_swing(&plan, t_now, &c).unwrap();
        prop_assert!(defect(&plan, &re, t_now) <= 1e-9);
        let end = re.sample(1.0 + dur);
        prop_assert!((end.pose.translation - c.translation).amax() <= 1e-9);
        prop_assert!((end.pose.rotation - c.rotation).amax() <= 1e-9);
        prop_assert!(end.linear_velocity.amax() <= 1e-9 && end.angular_velocity.amax() <= 1e-9);
        // the replan's own segments agree at their junction
        let tj = re.junction_time();
        let (l, r) = (re.sample_segment(0, tj), re.sample_segment(1, tj));
        prop_assert!((l.pose.translation - r.pose.translation).amax() <= 1e-9);
        prop_assert!((l.linear_velocity - r.linear_velocity).amax() <= 1e-9);
    }

    #[test]
    fn unchanged_target_keeps_the_trajectory(
        a in pose_strategy(), b in pose_strategy(), frac in 0.0f64..0.99, apex in 0.0f64..0.05,
    ) {
        let plan = plan_swing(&a, &b, 0.0, 0.6, apex).unwrap();
        let t_now = frac * 0.6;
        let re = replan_swing(&plan, t_now, &b).unwrap();
        for k in 0..=30 {
            let t = t_now + (0.6 - t_now) * k as f64 / 30.0;
            prop_assert!(defect(&plan, &re, t) <= 1e-9, "t = {}", t);
        }
    }

    #[test]
    fn chained_replans_stay_c1(
        a in pose_strategy(), targets in prop::collection::vec(pose_strategy(), 1..5),
        fracs in prop::collection::vec(0.05f64..0.9, 5),
    ) {
        let mut plan = plan_swing(&a, &targets[0], 0.0, 0.5, 0.02).unwrap();
        let mut t = 0.0;
        for (tg, f) in targets.iter().zip(&fracs) {
            t += (0.5 - t) * f;
            let next = replan_swing(&plan, t, tg).unwrap();
            prop_assert!(defect(&plan, &next, t) <= 1e-9);
            plan = next;
        }
    }
}

#[test]
fn replan_at_lift_off_is_a_fresh_plan() {
    let (a, b, c) = (
        Pose::from_xyz_yaw(0.0, 0.05, 0.0, 0.0),
        Pose::from_xyz_yaw(0.05, 0.05, 0.0, 0.1),
        Pose::from_xyz_yaw(0.05, 0.10, 0.0, -0.1),
    );
    let plan = plan_swing(&a, &b, 0.2, 0.6, 0.03).unwrap();
    let re = replan_swing(&plan, 0.2, &c).unwrap();
    let fresh = plan_swing(&a, &c, 0.2, 0.6, 0.03).unwrap();
    for k in 0..=40 {
        assert!(defect(&re, &fresh, 0.2 + 0.01 * k as f64) <= 1e-12);
    }
}

#[test]
fn lateral_shift_mid_swing() {
    let (a, b) = (
        Pose::from_xyz_yaw(0.0, -0.05, 0.0, 0.0),
        Pose::from_xyz_yaw(0.06, -0.05, 0.0, 0.0),
    );
    let plan = plan_swing(&a, &b, 0.0, 0.4, 0.03).unwrap();
    let c = Pose::from_xyz_yaw(0.06, -0.10, 0.0, 0.0);
    let re = replan_swing(&plan, 0.2, &c).unwrap();
    assert!(defect(&plan, &re, 0.2) <= 1e-12);
    assert!((re.sample(0.4).pose.translation - c.translation).amax() <= 1e-12);
    // the apex was already reached, so the foot only descends from here
    let zs: Vec<f64> = (0..=20)
        .map(|k| re.sample(0.2 + 0.01 * k as f64).pose.translation.z)
        .collect();
    assert!(zs.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{zs:?}");
}

/// Linear inverted pendulum under velocity control by the law, integrated
/// with RK4. The measured ZMP includes the commanded acceleration, so the
/// loop closes through `p̈`: `(k_zmp/ω²)p̈ = −ṗ + k_zmp(p − z_ref) + k_com(p_ref − p)`
/// for constant references.
fn lip_zmp_error(gains: &ZmpControllerGains, step: f64, t_end: f64) -> Vec<(f64, f64)> {
    let (kz, kc) = (gains.k_zmp[0], gains.k_com[0]);
    let w2 = 9.81 / 0.28;
    let acc = |p: f64, v: f64| (-v + kz * (p - step) + kc * (step - p)) * w2 / kz;
    let dt = 1e-3;
    let (mut p, mut v) = (0.0, 0.0);
    let mut out = Vec::new();
    let mut t = 0.0;
    while t < t_end {
        let zmp = p - acc(p, v) / w2;
        out.push((t, step - zmp));
        let f = |p: f64, v: f64| (v, acc(p, v));
        let k1 = f(p, v);
        let k2 = f(p + 0.5 * dt * k1.0, v + 0.5 * dt * k1.1);
        let k3 = f(p + 0.5 * dt * k2.0, v + 0.5 * dt * k2.1);
        let k4 = f(p + dt * k3.0, v + dt * k3.1);
        p += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        v += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        t += dt;
    }
    out
}

#[test]
fn default_gains_settle_a_zmp_step_on_the_pendulum() {
    let g = ZmpControllerGains::default();
    let step = 0.02;
    // the oracle below hard-codes this same affine law for one axis
    let law = com_zmp_law(
        &Vector2::new(step, 0.0),
        &Vector2::zeros(),
        &Vector2::new(0.003, 0.0),
        &Vector2::new(step, 0.0),
        &Vector2::new(0.001, 0.0),
        &g,
    );
    assert!((law.x - (-g.k_zmp[0] * (step - 0.001) + g.k_com[0] * (step - 0.003))).abs() < 1e-15);
    let trace = lip_zmp_error(&g, step, 4.0);
    for &(t, e) in trace.iter().filter(|(t, _)| *t >= 2.0) {
        assert!(e.abs() < 0.05 * step, "error {e} at {t}");
    }
    // the unstable ordering diverges instead
    let bad = ZmpControllerGains {
        k_zmp: [1.5, 1.5],
        k_com: [0.5, 0.5],
    };
    let last = lip_zmp_error(&bad, step, 4.0).last().unwrap().1;
    assert!(last.abs() > step, "{last}");
}

fn standing() -> (ChainModel, RobotState) {
    let model = ChainModel::bundled_biped();
    let gen = GaitGenerator::new(model.clone(), GaitGenConfig::default(), &RobotParams::default()).unwrap();
    let st = gen.standing_state(PlanarPose::new(0.0, 0.0, 0.0)).unwrap();
    let rs = gen.robot_state(&gen.sample_of(&st).unwrap());
    (model, rs)
}

fn soles(model: &ChainModel, s: &RobotState) -> [Pose; 2] {
    [
        model.forward_kinematics(s, "l_sole").unwrap(),
        model.forward_kinematics(s, "r_sole").unwrap(),
    ]
}

#[test]
fn consistent_stillness_gives_zero_velocity() {
    let (model, state) = standing();
    let stack = IkTaskStack::default();
    let feet = soles(&model, &state).map(|p| Some(FrameTarget::still(p)));
    let torso = model.forward_kinematics(&state, "torso").unwrap().rotation;
    let targets = IkTargets {
        feet,
        com: Some(ComTarget {
            position: model.com(&state).unwrap(),
            velocity: Vector3::zeros(),
        }),
        torso: Some(torso),
        postural: state.q.clone(),
    };
    let step = ik_step(&model, &state, &stack, &targets, 0.002).unwrap();
    assert!(step.nu.amax() < 1e-9, "{}", step.nu.amax());
}

#[test]
fn com_task_sets_the_momentum() {
    let (model, state) = standing();
    let stack = IkTaskStack::default();
    let feet = soles(&model, &state).map(|p| Some(FrameTarget::still(p)));
    let com = model.com(&state).unwrap();
    let targets = IkTargets {
        feet,
        com: Some(ComTarget {
            position: com,
            velocity: Vector3::new(0.1, 0.0, 0.0),
        }),
        torso: Some(Matrix3::identity()),
        postural: state.q.clone(),
    };
    let step = ik_step(&model, &state, &stack, &targets, 0.002).unwrap();
    assert!(step.hard_residual <= stack.qp_tol);
    let mut moving = state.clone();
    moving.set_velocity(&step.nu);
    let h = model.com_and_momentum(&moving).unwrap();
    let v = h.h_lin / model.total_mass();
    assert!((v - Vector3::new(0.1, 0.0, 0.0)).amax() <= 1e-6, "{v}");
    // and the integrated configuration moved the CoM accordingly
    let moved = model.com(&step.state).unwrap();
    assert!(((moved - com) / 0.002 - Vector3::new(0.1, 0.0, 0.0)).amax() < 1e-3);
}

#[test]
fn stance_foot_holds_over_a_gait_cycle() {
    let (model, mut state) = standing();
    let stack = IkTaskStack::default();
    let dt = 0.002;
    let [l0, r0] = soles(&model, &state);
    let step_len = 0.04;
    let r1 = Pose::new(r0.translation + Vector3::new(step_len, 0.0, 0.0), r0.rotation);
    let l1 = Pose::new(l0.translation + Vector3::new(2.0 * step_len, 0.0, 0.0), l0.rotation);
    let swings = [
        plan_swing(&r0, &r1, 0.0, 0.4, 0.02).unwrap(),
        plan_swing(&l0, &l1, 0.4, 0.8, 0.02).unwrap(),
    ];
    let postural = state.q.clone();
    let com0 = model.com(&state).unwrap();
    let mut drift: f64 = 0.0;
    let mut worst_resid: f64 = 0.0;
    for k in 0..400 {
        let t = k as f64 * dt;
        let (stance, swing, plan, anchor) = if t < 0.4 {
            (0, 1, &swings[0], l0)
        } else {
            (1, 0, &swings[1], r1)
        };
        let s = plan.sample(t);
        let mut feet = [None, None];
        feet[stance] = Some(FrameTarget::still(anchor));
        let w = s.angular_velocity;
        feet[swing] = Some(FrameTarget {
            pose: s.pose,
            twist: Vector6::new(
                s.linear_velocity.x,
                s.linear_velocity.y,
                s.linear_velocity.z,
                w.x,
                w.y,
                w.z,
            ),
        });
        // CoM drifts forward at the mean walking speed
        let v = Vector3::new(2.0 * step_len / 0.8, 0.0, 0.0);
        let targets = IkTargets {
            feet,
            com: Some(ComTarget {
                position: com0 + v * t,
                velocity: v,
            }),
            torso: Some(Matrix3::identity()),
            postural: postural.clone(),
        };
        let out = ik_step(&model, &state, &stack, &targets, dt).unwrap();
        worst_resid = worst_resid.max(out.hard_residual);
        state = out.state;
        let now = soles(&model, &state)[stance];
        drift = drift.max((now.translation - anchor.translation).norm());
    }
    assert!(drift <= 1e-3, "stance drift {drift}");
    assert!(worst_resid <= stack.qp_tol);
    let [l, _] = soles(&model, &state);
    assert!((l.translation - l1.translation).norm() < 1e-3);
}

#[test]
fn postural_servo_on_the_full_model() {
    let (model, state) = standing();
    let stack = IkTaskStack::default();
    let postural = state.q.map(|q| q + 0.01);
    let targets = IkTargets {
        feet: [None, None],
        com: None,
        torso: None,
        postural: postural.clone(),
    };
    let out = ik_step(&model, &state, &stack, &targets, 0.002).unwrap();
    let want: DVector<f64> = (&postural - &state.q) * stack.postural_gain;
    assert!((out.dq() - &want).amax() < 1e-9);
    assert!((&out.state.q - (&state.q + want * 0.002)).amax() < 1e-12);
}

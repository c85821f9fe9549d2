use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walkctl::gaitgen::nominal_forces;
use walkctl::model::{
    derive_timeline, CentroidalState, Foot, Footstep, GaitTimeline, Pose, ReferenceBundle, RobotParams,
};
use walkctl::ocp::{
    solve_sqp, transcribe, DisturbanceWrench, Feedback, FeedbackMode, Layout, MpcConfig, MpcController, Nlp,
    OcpDecision, RowKind, SqpStatus,
};
use walkctl::qpsolver::{solve_qp, CsrMatrix, QpProblem, QpSettings, TripletBuilder};

const WIDTH: f64 = 0.045;

fn cfg(n: usize) -> MpcConfig {
    MpcConfig {
        horizon_samples: n,
        ..MpcConfig::default()
    }
}

/// Alternating steps of 0.04 m every 0.5 s, right foot first.
fn plan() -> Vec<Footstep> {
    let mut steps = vec![
        Footstep::new(
            Foot::Left,
            Pose::from_xyz_yaw(0.0, WIDTH, 0.0, 0.0),
            f64::NEG_INFINITY,
            0.8,
        )
        .unwrap(),
        Footstep::new(
            Foot::Right,
            Pose::from_xyz_yaw(0.0, -WIDTH, 0.0, 0.0),
            f64::NEG_INFINITY,
            0.3,
        )
        .unwrap(),
    ];
    for s in 0..12 {
        let foot = if s % 2 == 0 { Foot::Right } else { Foot::Left };
        let land = 0.7 + 0.5 * s as f64;
        let x = 0.04 * (s + 1) as f64;
        let lift = if s >= 10 { f64::INFINITY } else { land + 0.6 };
        steps.push(Footstep::new(foot, Pose::from_xyz_yaw(x, foot.side() * WIDTH, 0.0, 0.0), land, lift).unwrap());
    }
    steps
}

fn com_at(t: f64) -> Vector3<f64> {
    let s = (t - 0.3).max(0.0);
    let y = if t > 0.3 {
        0.012 * (2.0 * std::f64::consts::PI * s).sin()
    } else {
        0.0
    };
    Vector3::new(0.08 * s, y, 0.29)
}

/// References for a controller started at absolute time `t0`.
fn walking_refs(t0: f64, n: usize, t: f64, lead: f64, p: &RobotParams) -> ReferenceBundle {
    let footsteps: Vec<Footstep> = plan()
        .iter()
        .map(|f| f.shifted(t0))
        .filter(|f| f.deactivation_time > 0.0)
        .collect();
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * t).collect();
    ReferenceBundle {
        sampling_period: t,
        com_ref: times.iter().map(|&tk| com_at(t0 + tk)).collect(),
        h_ang_ref: vec![Vector3::zeros(); n + 1],
        joint_postural: vec![DVector::zeros(1); n + 1],
        force_ref: nominal_forces(&footsteps, &times, p.weight(), 0.1),
        timeline: derive_timeline(&footsteps, lead, n as f64 * t).unwrap(),
        footsteps,
    }
}

fn standing_refs(n: usize, t: f64, p: &RobotParams, com: Vector3<f64>) -> ReferenceBundle {
    let footsteps = vec![
        Footstep::new(
            Foot::Left,
            Pose::from_xyz_yaw(0.0, WIDTH, 0.0, 0.0),
            f64::NEG_INFINITY,
            f64::INFINITY,
        )
        .unwrap(),
        Footstep::new(
            Foot::Right,
            Pose::from_xyz_yaw(0.0, -WIDTH, 0.0, 0.0),
            f64::NEG_INFINITY,
            f64::INFINITY,
        )
        .unwrap(),
    ];
    let half = Vector3::new(0.0, 0.0, 0.5 * p.weight());
    ReferenceBundle {
        sampling_period: t,
        com_ref: vec![com; n + 1],
        h_ang_ref: vec![Vector3::zeros(); n + 1],
        joint_postural: vec![DVector::zeros(1); n + 1],
        force_ref: vec![[half, half]; n + 1],
        timeline: GaitTimeline::standing(),
        footsteps,
    }
}

fn feet() -> [Vector3<f64>; 2] {
    [Vector3::new(0.0, WIDTH, 0.0), Vector3::new(0.0, -WIDTH, 0.0)]
}

fn build(refs: &ReferenceBundle, fb: &CentroidalState, c: &MpcConfig, dist: Option<&DisturbanceWrench>) -> Nlp {
    transcribe(refs, &refs.timeline, fb, &feet(), &RobotParams::default(), c, dist).unwrap()
}

#[test]
fn variable_count_matches_formula() {
    let p = RobotParams::default();
    let n = 2;
    let refs = standing_refs(n, 0.05, &p, Vector3::new(0.0, 0.0, 0.29));
    let nlp = build(&refs, &CentroidalState::at_rest(refs.com_ref[0]), &cfg(n), None);
    let states = 9 * (n + 1);
    let contacts = 2 * 3 * (n + 1);
    let forces = 2 * 4 * 3 * n;
    let velocities = 2 * 3 * n;
    assert_eq!(nlp.n_variables(), states + contacts + forces + velocities);
    assert_eq!(nlp.n_variables(), 105);
    // 9 shooting rows per interval; frozen contacts need none
    assert_eq!(nlp.n_equalities(), 9 * n);
}

#[test]
fn frozen_contacts_eliminate_velocities() {
    let p = RobotParams::default();
    let n = 4;
    let refs = standing_refs(n, 0.05, &p, Vector3::new(0.0, 0.0, 0.29));
    let nlp = build(&refs, &CentroidalState::at_rest(refs.com_ref[0]), &cfg(n), None);
    let lay = nlp.layout;
    for k in 0..n {
        for i in 0..2 {
            for a in 0..3 {
                assert!(!nlp.is_free(lay.v(k, i) + a));
            }
        }
    }
    for k in 0..=n {
        for i in 0..2 {
            assert!(!nlp.is_free(lay.pc(k, i)));
        }
    }
}

fn standing_optimum(nlp: &Nlp, com: Vector3<f64>) -> OcpDecision {
    let p = RobotParams::default();
    let n = nlp.layout.n;
    let each = Vector3::new(0.0, 0.0, p.weight() / 8.0);
    OcpDecision {
        states: vec![CentroidalState::at_rest(com); n + 1],
        contacts: vec![feet(); n + 1],
        forces: vec![[[each; 4]; 2]; n],
        contact_velocities: vec![[Vector3::zeros(); 2]; n],
    }
}

#[test]
fn standing_optimum_converges_immediately() {
    let p = RobotParams::default();
    let n = 6;
    let com = Vector3::new(0.0, 0.0, 0.29);
    let refs = standing_refs(n, 0.05, &p, com);
    let nlp = build(&refs, &CentroidalState::at_rest(com), &cfg(n), None);
    let opt = standing_optimum(&nlp, com);
    let z = opt.to_vector();
    // analytic stationary point: zero cost and zero defects
    assert!(nlp.cost(&z) < 1e-20);
    assert!(nlp.equalities(&z).values.amax() < 1e-12);
    let sol = solve_sqp(&nlp, Some(&opt)).unwrap();
    assert_eq!(sol.stats.status, SqpStatus::Converged);
    assert!(sol.stats.iterations <= 2, "{} iterations", sol.stats.iterations);
    assert!(sol.stats.kkt_residual <= 1e-6);
}

#[test]
fn nominal_point_is_nearly_stationary() {
    let p = RobotParams::default();
    let n = 6;
    let com = Vector3::new(0.0, 0.0, 0.29);
    let refs = standing_refs(n, 0.05, &p, com);
    let nlp = build(&refs, &CentroidalState::at_rest(com), &cfg(n), None);
    let z = nlp.initial_point(None);
    let (eq, ineq) = nlp.infeasibility(&z);
    assert!(eq < 1e-12 && ineq < 1e-12);
    assert!(nlp.cost_gradient(&z).amax() < 1e-12);
}

fn dense(m: &CsrMatrix) -> DMatrix<f64> {
    m.to_dense()
}

fn random_point(nlp: &Nlp, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let lay = nlp.layout;
    let mut z = nlp.initial_point(None);
    for k in 0..=lay.n {
        z[lay.x(k) + 2] += rng.random_range(-0.05..0.05);
        for a in 0..9 {
            z[lay.x(k) + a] += rng.random_range(-0.1..0.1);
        }
        for i in 0..2 {
            for a in 0..2 {
                z[lay.pc(k, i) + a] += rng.random_range(-0.03..0.03);
            }
            if k < lay.n {
                for j in 0..4 {
                    for a in 0..3 {
                        z[lay.f(k, i, j) + a] += rng.random_range(-3.0..3.0);
                    }
                }
                for a in 0..3 {
                    z[lay.v(k, i) + a] += rng.random_range(-0.2..0.2);
                }
            }
        }
    }
    z[lay.slack()] = rng.random_range(0.0..0.01);
    z
}

fn check_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, jac: &DMatrix<f64>, z: &DVector<f64>, what: &str) {
    let h = 1e-6;
    for c in 0..z.len() {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[c] += h;
        zm[c] -= h;
        let fd = (f(&zp) - f(&zm)) / (2.0 * h);
        for r in 0..fd.len() {
            let a = jac[(r, c)];
            let err = (fd[r] - a).abs() / (1.0f64).max(a.abs());
            assert!(err < 1e-4, "{what} ({r},{c}): analytic {a} fd {}", fd[r]);
        }
    }
}

#[test]
fn jacobians_match_central_differences() {
    let p = RobotParams::default();
    let n = 4;
    let c = cfg(n);
    let dist = DisturbanceWrench {
        force: Vector3::new(2.0, -3.0, 1.0),
        application_point: Vector3::new(0.02, 0.01, 0.35),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let t0 = 0.1 * trial as f64;
        let refs = walking_refs(t0, n, c.t_mpc, c.lead_window(), &p);
        let fb = CentroidalState::at_rest(com_at(t0));
        let nlp = build(&refs, &fb, &c, Some(&dist));
        let z = random_point(&nlp, &mut rng);
        let eq = dense(&nlp.equalities(&z).jacobian);
        check_jacobian(|z| nlp.equalities(z).values, &eq, &z, "equality");
        let ineq = dense(&nlp.inequalities(&z).jacobian);
        check_jacobian(|z| nlp.inequalities(z).values, &ineq, &z, "inequality");
        let g = nlp.cost_gradient(&z);
        let gm = DMatrix::from_row_slice(1, g.len(), g.as_slice());
        check_jacobian(|z| DVector::from_element(1, nlp.cost(z)), &gm, &z, "cost");
    }
}

#[test]
fn unconstrained_reduction_matches_normal_equations() {
    let p = RobotParams::default();
    let n = 5;
    let c = cfg(n);
    let refs = walking_refs(0.2, n, c.t_mpc, c.lead_window(), &p);
    let nlp = build(
        &refs,
        &CentroidalState::at_rest(com_at(0.2) + Vector3::new(0.01, 0.0, 0.0)),
        &c,
        None,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = random_point(&nlp, &mut rng);
    let r = nlp.residuals(&z);
    let jr = nlp.reduce(nlp.residual_jacobian());
    // ridge keeps directions without any cost term identifiable
    let ridge = 1e-6;
    let nf = nlp.n_free();
    let jd = jr.to_dense();
    let normal = jd.transpose() * &jd + DMatrix::identity(nf, nf) * ridge;
    let rhs = -(jd.transpose() * &r);
    let oracle = normal.clone().cholesky().unwrap().solve(&rhs);

    let mut h = TripletBuilder::new(nf, nf);
    for (i, j, v) in CsrMatrix::from_dense(&(2.0 * normal)).iter() {
        h.push(i, j, v);
    }
    let qp = QpProblem::new(h.build(), -2.0 * rhs);
    let sol = solve_qp(&qp, None, &QpSettings::default().with_tol(1e-12)).unwrap();
    assert!(sol.is_solved());
    let err = (&sol.x - &oracle).amax();
    assert!(err <= 1e-8, "difference {err}");
}

fn check_solution(nlp: &Nlp, sol: &walkctl::ocp::OcpSolution, tol: f64) {
    let z = sol.decision.to_vector();
    let eq = nlp.equalities(&z).values.amax();
    assert!(eq <= tol, "defect {eq}");
    let ineq = nlp.inequalities(&z);
    let (lo, hi) = nlp.inequality_bounds();
    for (r, kind) in nlp.inequality_kinds().iter().enumerate() {
        let v = ineq.values[r];
        assert!(
            v >= lo[r] - tol && v <= hi[r] + tol,
            "{kind:?}: {v} not in [{}, {}]",
            lo[r],
            hi[r]
        );
    }
    for k in 0..nlp.layout.n {
        for i in 0..2 {
            if nlp.flags[k].sigma[i] {
                assert_eq!(sol.decision.contacts[k + 1][i], sol.decision.contacts[k][i]);
            }
        }
    }
    for w in &sol.stats.merit {
        assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "merit rose {:?}", w);
    }
}

#[test]
fn walking_problem_solves_feasibly() {
    let p = RobotParams::default();
    let c = cfg(24);
    for t0 in [0.0, 0.25, 0.55, 0.9] {
        let refs = walking_refs(t0, 24, c.t_mpc, c.lead_window(), &p);
        let mut fb = CentroidalState::at_rest(com_at(t0));
        fb.h_lin.x = p.mass * 0.05;
        let nlp = build(&refs, &fb, &c, None);
        let sol = solve_sqp(&nlp, None).unwrap();
        assert_eq!(sol.stats.status, SqpStatus::Converged, "t0 = {t0}: {:?}", sol.stats);
        check_solution(&nlp, &sol, 1e-6 + sol.stats.kkt_residual);
    }
}

#[test]
fn huge_push_saturates_step_box() {
    let p = RobotParams::default();
    let c = cfg(24);
    let t0 = 0.35;
    let refs = walking_refs(t0, 24, c.t_mpc, c.lead_window(), &p);
    let mut fb = CentroidalState::at_rest(com_at(t0));
    fb.h_lin.y = -p.mass * 0.6;
    let nlp = build(&refs, &fb, &c, None);
    let sol = solve_sqp(&nlp, None).unwrap();
    let z = sol.decision.to_vector();
    let ineq = nlp.inequalities(&z);
    let (lo, hi) = nlp.inequality_bounds();
    let saturated = nlp.inequality_kinds().iter().enumerate().any(|(r, k)| {
        matches!(k, RowKind::StepBox { axis: 1, .. })
            && ((ineq.values[r] - lo[r]).abs() < 1e-6 || (ineq.values[r] - hi[r]).abs() < 1e-6)
    });
    assert!(saturated, "no lateral box row active");
}

#[test]
fn rhp_and_mpc_agree_on_the_ideal_plant() {
    let p = RobotParams::default();
    let c = cfg(24);
    let lead = c.lead_window();
    let run = |mode: FeedbackMode| {
        let mut ctl = MpcController::new(mode, c.clone(), p.clone()).unwrap();
        let mut plant = CentroidalState::at_rest(com_at(0.0));
        let mut contacts = feet().map(Some);
        let mut trace = Vec::new();
        for cycle in 0..50 {
            let t = cycle as f64 * c.t_mpc;
            let refs = walking_refs(t, 24, c.t_mpc, lead, &p);
            let fb = Feedback {
                state: Some(plant),
                contacts,
                disturbance: None,
            };
            let (sol, out) = ctl.advance(t, &refs, &fb).unwrap();
            // ideal plant: one explicit Euler step of the prediction model
            let nlp = ctl.last_nlp().unwrap();
            let rhs = nlp.stage_rhs(&sol.decision.to_vector(), 0);
            let x = plant.to_array();
            plant = CentroidalState::from_slice(&(0..9).map(|a| x[a] + c.t_mpc * rhs[a]).collect::<Vec<_>>());
            let flags = nlp.flags.get(1).copied().unwrap_or_default();
            contacts = [0, 1].map(|i| flags.sigma[i].then_some(sol.decision.contacts[1][i]));
            trace.push((out.state_next.to_array(), sol.decision.contacts[1]));
        }
        trace
    };
    let rhp = run(FeedbackMode::Rhp);
    let mpc = run(FeedbackMode::Mpc);
    let mut worst: f64 = 0.0;
    for (a, b) in rhp.iter().zip(&mpc) {
        for k in 0..9 {
            worst = worst.max((a.0[k] - b.0[k]).abs());
        }
        for i in 0..2 {
            worst = worst.max((a.1[i] - b.1[i]).amax());
        }
    }
    assert!(worst <= 1e-6, "RHP and MPC differ by {worst}");
}

#[test]
fn layout_indices_are_stage_ordered() {
    let lay = Layout { n: 3 };
    assert_eq!(lay.x(1), 45);
    assert_eq!(lay.pc(0, 1), 12);
    assert_eq!(lay.f(0, 1, 3), 15 + 12 + 9);
    assert_eq!(lay.v(0, 1), 42);
    assert_eq!(lay.decision_len(), 9 * 4 + 6 * 4 + 24 * 3 + 6 * 3);
}

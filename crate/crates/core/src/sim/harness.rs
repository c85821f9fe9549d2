use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::plant::{has_fallen, lip_zmp, plant_step, plant_step_euler, zmp_from_forces, PlantInput};
use super::{ConstraintReport, PlantMode, RunMetrics, RunMode, Scenario, SimConfig, SimError};
use crate::control::{LayerInput, TrajectoryController};
use crate::estimation::{kf_step, KfConfig, KfState};
use crate::gaitgen::{generate_horizon, sync_period_secs, GaitGenerator, GeneratorState, HorizonRequest, PlanarPose};
use crate::kinematics::ChainModel;
use crate::model::{CentroidalState, Footstep, ReferenceBundle};
use crate::ocp::{
    cbf_value, friction_facets, violations_by_kind, ControlOutput, Feedback, FeedbackMode, MpcController, OcpSolution,
    TelemetryWriter,
};

/// Tolerance on the friction rows before a cycle counts as violating.
const FRICTION_TOL: f64 = 1e-6;

/// In-memory trace files, keyed by file name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Traces {
    pub state: String,
    pub zmp: String,
    pub forces: String,
    pub footsteps: String,
    pub joints: String,
    pub telemetry: String,
    pub summary: String,
}

impl Traces {
    fn new(joint_names: &[String]) -> Self {
        let mut joints = String::from("t");
        for n in joint_names {
            joints.push(',');
            joints.push_str(n);
        }
        joints.push('\n');
        Self {
            state: "t,com_x,com_y,com_z,hlin_x,hlin_y,hlin_z,hang_x,hang_y,hang_z,\
                    kin_com_x,kin_com_y,kin_com_z,vy_stance,cbf,fallen\n"
                .into(),
            zmp: "t,zmp_ref_x,zmp_ref_y,zmp_x,zmp_y,vcmd_x,vcmd_y\n".into(),
            forces: "t,gamma_l,gamma_r,fl_x,fl_y,fl_z,fr_x,fr_y,fr_z\n".into(),
            footsteps: "t,foot,t_on,t_off,nominal_x,nominal_y,adjusted_x,adjusted_y,adjustment\n".into(),
            joints,
            telemetry: String::new(),
            summary: String::new(),
        }
    }

    /// `(file name, contents)` of every reproducible trace.
    pub fn deterministic_files(&self) -> [(&'static str, &str); 6] {
        [
            ("state.csv", &self.state),
            ("zmp.csv", &self.zmp),
            ("forces.csv", &self.forces),
            ("footsteps.csv", &self.footsteps),
            ("joints.csv", &self.joints),
            ("summary.txt", &self.summary),
        ]
    }

    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, body) in self.deterministic_files() {
            fs::write(dir.join(name), body)?;
        }
        fs::write(dir.join("telemetry.csv"), &self.telemetry)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub traces: Traces,
}

/// Closes the loop gait generator → OCP → trajectory control → plant on a
/// simulated clock. The run stops early at the first fall.
pub fn run_scenario(sc: &Scenario, mode: RunMode, cfg: &SimConfig) -> Result<RunOutcome, SimError> {
    sc.validate()?;
    cfg.validate()?;
    let mut h = Harness::new(sc, mode, cfg)?;
    let n_cycles = (sc.duration / cfg.mpc.t_mpc - 1e-9).ceil() as usize;
    for c in 0..n_cycles {
        if let Err((layer, message)) = h.cycle(c) {
            h.finish();
            return Err(SimError::LayerFailure {
                cycle: c,
                time: c as f64 * cfg.mpc.t_mpc,
                layer,
                message,
                partial: Box::new(h.traces),
            });
        }
        if h.metrics.fall {
            break;
        }
    }
    h.finish();
    Ok(RunOutcome {
        metrics: h.metrics,
        traces: h.traces,
    })
}

type LayerResult<T> = Result<T, (&'static str, String)>;

fn layer<E: std::fmt::Display>(name: &'static str) -> impl FnOnce(E) -> (&'static str, String) {
    move |e| (name, e.to_string())
}

struct Harness<'a> {
    sc: &'a Scenario,
    cfg: &'a SimConfig,
    model: ChainModel,
    generator: GaitGenerator,
    gen_state: GeneratorState,
    reset_index: usize,
    cycles_per_sync: usize,
    bundle: Option<ReferenceBundle>,
    mpc: MpcController,
    control: TrajectoryController,
    plant: CentroidalState,
    kf_cfg: KfConfig,
    kf: Vec<KfState>,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    facets: DMatrix<f64>,
    zmp_ref: Vector2<f64>,
    zmp_sq: f64,
    metrics: RunMetrics,
    traces: Traces,
}

impl<'a> Harness<'a> {
    fn new(sc: &'a Scenario, mode: RunMode, cfg: &'a SimConfig) -> Result<Self, SimError> {
        let model = ChainModel::bundled_biped();
        let generator = GaitGenerator::new(model.clone(), cfg.gaitgen.clone(), &cfg.robot)?;
        let gen_state = generator.standing_state(PlanarPose::default())?;
        let start = generator.robot_state(&generator.sample_of(&gen_state)?);
        let plant = CentroidalState::at_rest(model.com(&start)?);
        let control = TrajectoryController::new(model.clone(), cfg.control.clone(), start.clone())?;

        let sync = sync_period_secs(cfg.mpc.t_mpc, cfg.gaitgen.scale_eta, cfg.gaitgen.period_dnn)?;
        let cycles_per_sync = ((sync.delta() / cfg.mpc.t_mpc).round() as usize).max(1);
        let fb_mode = match mode {
            RunMode::Rhp => FeedbackMode::Rhp,
            RunMode::Mpc => FeedbackMode::Mpc,
        };
        let mpc = MpcController::new(fb_mode, cfg.mpc.clone(), cfg.robot.clone())?;

        let kf_cfg = KfConfig {
            period: cfg.control.period,
            ..cfg.estimation.clone()
        };
        let kf = start.q.iter().map(|&q| KfState::new(q, kf_cfg.lambda0)).collect();
        let noise = (sc.joint_noise_std > 0.0)
            .then(|| Normal::new(0.0, sc.joint_noise_std))
            .transpose()
            .map_err(|e| SimError::Scenario(e.to_string()))?;
        let (facets, _) = friction_facets(cfg.robot.friction_mu, cfg.mpc.friction_cone_facets)?;

        let metrics = RunMetrics {
            cbf_min_margin: f64::INFINITY,
            com_z_min: f64::INFINITY,
            com_z_max: f64::NEG_INFINITY,
            ..RunMetrics::default()
        };
        Ok(Self {
            sc,
            cfg,
            traces: Traces::new(model.joint_names()),
            model,
            generator,
            gen_state,
            reset_index: sync.reset_index as usize,
            cycles_per_sync,
            bundle: None,
            mpc,
            control,
            plant,
            kf_cfg,
            kf,
            rng: ChaCha8Rng::seed_from_u64(sc.seed),
            noise,
            facets,
            zmp_ref: plant.p_com.xy(),
            zmp_sq: 0.0,
            metrics,
        })
    }

    fn contacts(&self) -> [Option<Vector3<f64>>; 2] {
        self.control.contacts().map(|c| c.map(|p| p.translation))
    }

    /// Regenerates references from the current contacts; the generator resumes
    /// from its state one synchronization period later.
    fn resync(&mut self, t: f64) -> LayerResult<()> {
        for (i, c) in self.control.contacts().iter().enumerate() {
            if let Some(p) = c {
                self.gen_state.feet[i] = PlanarPose::from_pose(p);
            }
        }
        let n = self.cfg.mpc.horizon_samples + self.cycles_per_sync;
        let req = HorizonRequest {
            horizon: n as f64 * self.cfg.mpc.t_mpc,
            t_mpc: self.cfg.mpc.t_mpc,
            lead_window: self.cfg.mpc.lead_window(),
        };
        let plan = generate_horizon(&self.generator, &self.gen_state, self.sc.command_at(t), &req)
            .map_err(layer("gait generation"))?;
        self.gen_state = plan.reset_state(self.reset_index).clone();
        self.bundle = Some(plan.bundle);
        Ok(())
    }

    /// Centroidal state as the MPC sees it: the plant state shifted by the
    /// error the filtered joint estimate introduces into the kinematics.
    fn measured_state(&self) -> LayerResult<CentroidalState> {
        if self.noise.is_none() {
            return Ok(self.plant);
        }
        let truth = self.control.state();
        let mut est = truth.clone();
        for (j, kf) in self.kf.iter().enumerate() {
            est.q[j] = kf.position();
            est.dq[j] = kf.velocity();
        }
        let a = self.model.com_and_momentum(truth).map_err(layer("estimation"))?;
        let b = self.model.com_and_momentum(&est).map_err(layer("estimation"))?;
        let scale = self.cfg.robot.mass / self.model.total_mass();
        Ok(CentroidalState {
            p_com: self.plant.p_com + (b.p_com - a.p_com),
            h_lin: self.plant.h_lin + (b.h_lin - a.h_lin) * scale,
            h_ang: self.plant.h_ang + (b.h_ang - a.h_ang) * scale,
        })
    }

    fn cycle(&mut self, c: usize) -> LayerResult<()> {
        let t_mpc = self.cfg.mpc.t_mpc;
        let t = c as f64 * t_mpc;
        let j = c % self.cycles_per_sync;
        if j == 0 {
            self.resync(t)?;
        }
        let bundle = self.bundle.as_ref().expect("references generated on the first cycle");
        let refs = bundle
            .window(j, self.cfg.mpc.horizon_samples + 1)
            .map_err(layer("gait generation"))?;

        let integrating = self.sc.plant == PlantMode::Integrating;
        let feedback = match self.mpc.mode() {
            FeedbackMode::Rhp => Feedback {
                state: Some(self.plant),
                contacts: self.contacts(),
                disturbance: if integrating {
                    self.sc.disturbance_at(t, &self.plant.p_com)
                } else {
                    None
                },
            },
            FeedbackMode::Mpc => Feedback {
                state: Some(self.measured_state()?),
                contacts: self.contacts(),
                disturbance: None,
            },
        };
        let (sol, out) = self.mpc.advance(t, &refs, &feedback).map_err(layer("OCP"))?;
        self.record_cycle(t, &refs, &sol, &out);

        let footsteps: Vec<Footstep> = out.adjusted_footsteps.iter().map(|f| f.shifted(-t)).collect();
        let input = PlantInput {
            forces: out.forces,
            vertices: out.vertices,
            gamma: out.gamma,
        };
        let support: Vec<Vector3<f64>> = (0..2).filter(|&i| out.gamma[i]).flat_map(|i| out.vertices[i]).collect();
        let dt = self.cfg.control.period;
        let ticks = (t_mpc / dt).round() as usize;
        for k in 0..ticks {
            let tc = t + k as f64 * dt;
            let u = k as f64 / ticks as f64;
            let dist = if integrating {
                self.sc.disturbance_at(tc, &self.plant.p_com)
            } else {
                None
            };
            let rhs = input.rhs(&self.plant, dist.as_ref(), &self.cfg.robot);
            let acc = rhs[0] / self.cfg.robot.mass;
            let zmp_meas = lip_zmp(&self.plant.p_com, &acc, &self.cfg.robot.gravity).unwrap_or(self.plant.p_com.xy());
            if let Ok(z) = zmp_from_forces(&input) {
                self.zmp_ref = z;
            }
            let (now, next) = (&out.state_now.p_com, &out.state_next.p_com);
            let postural = refs.joint_postural[0].lerp(&refs.joint_postural[1], u);
            let tick = self
                .control
                .tick(
                    tc,
                    &LayerInput {
                        com_ref: now.lerp(next, u),
                        com_ref_vel: (next - now) / t_mpc,
                        zmp_ref: self.zmp_ref,
                        zmp_meas,
                        footsteps: &footsteps,
                        postural: &postural,
                    },
                )
                .map_err(layer("trajectory control"))?;

            self.sense(&tick.q_cmd)?;
            let fallen = has_fallen(&self.plant.p_com, &support, &self.cfg.robot);
            self.record_tick(tc, zmp_meas, tick.com_vel_cmd, &tick.q_cmd, fallen)?;
            if fallen {
                self.metrics.fall = true;
                self.metrics.fall_time = Some(tc);
                return Ok(());
            }
            if integrating {
                self.plant = plant_step(&self.plant, &input, dist.as_ref(), &self.cfg.robot, dt);
            }
        }
        if !integrating {
            self.plant = plant_step_euler(&self.plant, &input, None, &self.cfg.robot, t_mpc);
        }
        Ok(())
    }

    /// Joint encoders: additive noise, then the per-joint filter.
    fn sense(&mut self, q: &DVector<f64>) -> LayerResult<()> {
        let Some(noise) = self.noise else {
            return Ok(());
        };
        for (j, kf) in self.kf.iter_mut().enumerate() {
            let y = q[j] + noise.sample(&mut self.rng);
            *kf = kf_step(kf, &self.kf_cfg, y).map_err(layer("estimation"))?;
        }
        Ok(())
    }

    fn record_cycle(&mut self, t: f64, refs: &ReferenceBundle, sol: &OcpSolution, out: &ControlOutput) {
        let m = &mut self.metrics;
        m.cycles += 1;
        let accepted = sol.is_accepted(self.cfg.mpc.sqp.tol);
        if !accepted {
            m.rejected_solutions += 1;
        }
        m.max_kkt_residual = m.max_kkt_residual.max(sol.stats.kkt_residual);
        m.solve_times.push(sol.stats.wall_time.as_secs_f64());
        if let Some(nlp) = self.mpc.last_nlp() {
            let z = sol.decision.to_vector();
            let (defect, _) = nlp.infeasibility(&z);
            let (barrier, friction, step_box) = violations_by_kind(nlp, &z);
            let mut frozen_motion = 0.0f64;
            for k in 0..nlp.layout.n {
                for i in 0..2 {
                    if nlp.flags[k].sigma[i] {
                        let d = sol.decision.contacts[k + 1][i] - sol.decision.contacts[k][i];
                        frozen_motion = frozen_motion.max(d.amax());
                    }
                }
            }
            m.constraints.push(ConstraintReport {
                time: t,
                accepted,
                kkt_residual: sol.stats.kkt_residual,
                defect,
                barrier,
                friction,
                step_box,
                frozen_motion,
            });
        }

        let mut violates = false;
        for i in 0..2 {
            if !out.gamma[i] {
                continue;
            }
            for f in &out.forces[i] {
                // rows are written in the contact frame
                let local = DVector::from_column_slice((self.contact_rotation(i).transpose() * f).as_slice());
                violates |= (&self.facets * local).max() > FRICTION_TOL;
            }
        }
        self.metrics.friction_violations += usize::from(violates);

        let tr = &mut self.traces;
        let [fl, fr] = [0, 1].map(|i| out.forces[i].iter().sum::<Vector3<f64>>());
        let _ = writeln!(
            tr.forces,
            "{t},{},{},{},{},{},{},{},{}",
            u8::from(out.gamma[0]),
            u8::from(out.gamma[1]),
            fl.x,
            fl.y,
            fl.z,
            fr.x,
            fr.y,
            fr.z
        );
        for (nominal, adjusted) in refs.footsteps.iter().zip(&out.adjusted_footsteps) {
            if nominal.deactivation_time <= 0.0 {
                continue;
            }
            let (a, b) = (nominal.pose.translation, adjusted.pose.translation);
            let shift = (b.xy() - a.xy()).norm();
            self.metrics.max_footstep_adjustment = self.metrics.max_footstep_adjustment.max(shift);
            let _ = writeln!(
                tr.footsteps,
                "{t},{},{},{},{},{},{},{},{shift}",
                nominal.contact.name(),
                nominal.activation_time + t,
                nominal.deactivation_time + t,
                a.x,
                a.y,
                b.x,
                b.y
            );
        }
    }

    fn contact_rotation(&self, i: usize) -> Matrix3<f64> {
        self.mpc
            .last_nlp()
            .map_or_else(Matrix3::identity, |n| n.rotations[0][i])
    }

    fn record_tick(
        &mut self,
        t: f64,
        zmp_meas: Vector2<f64>,
        vcmd: Vector2<f64>,
        q: &DVector<f64>,
        fallen: bool,
    ) -> LayerResult<()> {
        let p = &self.plant;
        let g = cbf_value(p.p_com.z, &self.cfg.robot, self.cfg.mpc.cbf.alpha);
        let kin = self.model.com(self.control.state()).map_err(layer("kinematics"))?;
        let yaws: Vec<f64> = self.control.contacts().iter().flatten().map(|c| c.yaw()).collect();
        let yaw = if yaws.is_empty() {
            0.0
        } else {
            yaws.iter().sum::<f64>() / yaws.len() as f64
        };
        let v = p.com_velocity(self.cfg.robot.mass);
        let vy_stance = -yaw.sin() * v.x + yaw.cos() * v.y;

        let m = &mut self.metrics;
        m.ticks += 1;
        m.cbf_min_margin = m.cbf_min_margin.min(g);
        m.com_z_min = m.com_z_min.min(p.p_com.z);
        m.com_z_max = m.com_z_max.max(p.p_com.z);
        self.zmp_sq += (self.zmp_ref - zmp_meas).norm_squared();

        let tr = &mut self.traces;
        let (c, hl, ha) = (p.p_com, p.h_lin, p.h_ang);
        let _ = writeln!(
            tr.state,
            "{t},{},{},{},{},{},{},{},{},{},{},{},{},{vy_stance},{g},{}",
            c.x,
            c.y,
            c.z,
            hl.x,
            hl.y,
            hl.z,
            ha.x,
            ha.y,
            ha.z,
            kin.x,
            kin.y,
            kin.z,
            u8::from(fallen)
        );
        let z = self.zmp_ref;
        let _ = writeln!(
            tr.zmp,
            "{t},{},{},{},{},{},{}",
            z.x, z.y, zmp_meas.x, zmp_meas.y, vcmd.x, vcmd.y
        );
        let _ = write!(tr.joints, "{t}");
        for v in q.iter() {
            let _ = write!(tr.joints, ",{v}");
        }
        tr.joints.push('\n');
        Ok(())
    }

    fn finish(&mut self) {
        let m = &mut self.metrics;
        m.deadline_misses = self.mpc.deadline_misses();
        m.zmp_rmse = if m.ticks > 0 {
            (self.zmp_sq / m.ticks as f64).sqrt()
        } else {
            0.0
        };
        if m.ticks == 0 {
            m.cbf_min_margin = 0.0;
            m.com_z_min = 0.0;
            m.com_z_max = 0.0;
        }
        let mut w = TelemetryWriter::new(Vec::new()).expect("writing to memory");
        for r in self.mpc.telemetry() {
            w.write(r).expect("writing to memory");
        }
        self.traces.telemetry = String::from_utf8(w.into_inner()).expect("telemetry is ASCII");
        self.traces.summary = m.summary();
        log::info!(
            "{}: {} cycles, fall = {}, max adjustment {:.4} m",
            self.sc.name,
            m.cycles,
            m.fall,
            m.max_footstep_adjustment
        );
    }
}

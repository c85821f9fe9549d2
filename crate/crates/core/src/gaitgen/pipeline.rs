//! Stages turning raw generator output into MPC references.

use std::io::{self, Write};

use nalgebra::{Vector3, Vector6};
use num_integer::Integer;

use super::surrogate::{Command, GaitGenerator, GeneratorSample, GeneratorState};
use super::{GaitGenError, SchmittConfig};
use crate::kinematics::rotation_log;
use crate::model::{derive_timeline, Foot, Footstep, Pose, ReferenceBundle};

/// Hysteretic contact detector state for one foot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SchmittState {
    pub active: bool,
    /// Consecutive samples seen on the opposite side of the threshold.
    pub pending: u32,
    /// Samples since the last switch; `None` when it happened before any record.
    pub since: Option<u64>,
}

impl SchmittState {
    pub fn settled(active: bool) -> Self {
        Self {
            active,
            pending: 0,
            since: None,
        }
    }

    /// Feeds one sample; switches once the opposite side has held for more
    /// than `dwell` samples after the first crossing.
    pub fn update(self, below: bool, dwell: u32) -> Self {
        let mut s = self;
        s.since = s.since.map(|k| k + 1);
        if below != s.active {
            s.pending += 1;
            if s.pending > dwell {
                s.active = below;
                s.pending = 0;
                s.since = Some(0);
            }
        } else {
            s.pending = 0;
        }
        s
    }
}

fn sample_step(times: &[f64]) -> Result<f64, GaitGenError> {
    if times.is_empty() {
        return Err(GaitGenError::Empty);
    }
    if times.len() < 2 {
        return Ok(f64::INFINITY);
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(GaitGenError::NonUniformSampling(1));
    }
    for k in 2..times.len() {
        if ((times[k] - times[k - 1]) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(GaitGenError::NonUniformSampling(k));
        }
    }
    Ok(dt)
}

/// Contact flags from uniformly sampled foot-corner heights, starting with
/// both detectors inactive.
pub fn detect_contacts(
    times: &[f64],
    heights: &[[[f64; 4]; 2]],
    cfg: &SchmittConfig,
) -> Result<Vec<[bool; 2]>, GaitGenError> {
    detect_contacts_from(times, heights, cfg, [SchmittState::default(); 2]).map(|(flags, _)| flags)
}

/// Contact flags and detector states, one entry per sample.
pub type Detection = (Vec<[bool; 2]>, Vec<[SchmittState; 2]>);

/// As [`detect_contacts`] from explicit detector states; also returns the
/// detector state after every sample.
pub fn detect_contacts_from(
    times: &[f64],
    heights: &[[[f64; 4]; 2]],
    cfg: &SchmittConfig,
    init: [SchmittState; 2],
) -> Result<Detection, GaitGenError> {
    if heights.len() != times.len() {
        return Err(GaitGenError::Config("heights and times differ in length".into()));
    }
    let dt = sample_step(times)?;
    let dwell = if dt.is_finite() {
        (cfg.dwell_time / dt).round() as u32
    } else {
        0
    };
    let mut state = init;
    let mut flags = Vec::with_capacity(times.len());
    let mut states = Vec::with_capacity(times.len());
    for h in heights {
        for i in 0..2 {
            let below = h[i].iter().any(|&z| z < cfg.height_threshold);
            state[i] = state[i].update(below, dwell);
        }
        flags.push([state[0].active, state[1].active]);
        states.push(state);
    }
    Ok((flags, states))
}

/// Scales every consecutive displacement by `gamma`, keeping the first point.
pub fn scale_plan(points: &[Vector3<f64>], gamma: f64) -> Result<Vec<Vector3<f64>>, GaitGenError> {
    let first = *points.first().ok_or(GaitGenError::Empty)?;
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(GaitGenError::Config(format!("scale factor {gamma} must be positive")));
    }
    let mut out = Vec::with_capacity(points.len());
    out.push(first);
    for w in points.windows(2) {
        let prev = *out.last().unwrap();
        out.push(prev + gamma * (w[1] - w[0]));
    }
    Ok(out)
}

/// Generator invocation period and the index of the sample used for reset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyncPeriod {
    pub delta_ms: u64,
    pub reset_index: u64,
}

impl SyncPeriod {
    pub fn delta(&self) -> f64 {
        self.delta_ms as f64 * 1e-3
    }
}

/// `δ = lcm(T_MPC, η·T_DNN)` in integer milliseconds.
pub fn sync_period(t_mpc_ms: u64, eta: u32, t_dnn_ms: u64) -> Result<SyncPeriod, GaitGenError> {
    if t_mpc_ms == 0 || t_dnn_ms == 0 || eta == 0 {
        return Err(GaitGenError::Config("periods and eta must be positive".into()));
    }
    let scaled = eta as u64 * t_dnn_ms;
    let delta_ms = t_mpc_ms.lcm(&scaled);
    Ok(SyncPeriod {
        delta_ms,
        reset_index: delta_ms / scaled,
    })
}

/// [`sync_period`] for periods given in seconds; they must be whole milliseconds.
pub fn sync_period_secs(t_mpc: f64, eta: u32, t_dnn: f64) -> Result<SyncPeriod, GaitGenError> {
    sync_period(to_ms(t_mpc)?, eta, to_ms(t_dnn)?)
}

fn to_ms(t: f64) -> Result<u64, GaitGenError> {
    let ms = t * 1e3;
    if !(ms > 0.0) || (ms - ms.round()).abs() > 1e-6 {
        return Err(GaitGenError::NotMilliseconds(t));
    }
    Ok(ms.round() as u64)
}

/// First-order resampling onto the longest `target_period` grid inside the source span.
pub fn resample(bundle: &ReferenceBundle, target_period: f64) -> Result<ReferenceBundle, GaitGenError> {
    if bundle.is_empty() {
        return Err(GaitGenError::Empty);
    }
    if !(target_period > 0.0) {
        return Err(GaitGenError::Config("target period must be positive".into()));
    }
    let n = (bundle.duration() / target_period + 1e-9).floor() as usize + 1;
    resample_n(bundle, target_period, n)
}

/// First-order resampling onto `n` samples spaced by `target_period`.
pub fn resample_n(bundle: &ReferenceBundle, target_period: f64, n: usize) -> Result<ReferenceBundle, GaitGenError> {
    if bundle.is_empty() || n == 0 {
        return Err(GaitGenError::Empty);
    }
    if !(target_period > 0.0) {
        return Err(GaitGenError::Config("target period must be positive".into()));
    }
    let span = bundle.duration();
    let requested = (n - 1) as f64 * target_period;
    if requested > span + 1e-9 {
        return Err(GaitGenError::Extrapolation { requested, span });
    }
    let last = bundle.len() - 1;
    let locate = |k: usize| -> (usize, f64) {
        let x = k as f64 * target_period / bundle.sampling_period;
        let i = (x + 1e-9).floor() as usize;
        let frac = x - i as f64;
        if i >= last || frac < 1e-9 {
            (i.min(last), 0.0)
        } else {
            (i, frac)
        }
    };
    let mut out = ReferenceBundle {
        sampling_period: target_period,
        com_ref: Vec::with_capacity(n),
        h_ang_ref: Vec::with_capacity(n),
        joint_postural: Vec::with_capacity(n),
        force_ref: Vec::with_capacity(n),
        footsteps: bundle.footsteps.clone(),
        timeline: bundle.timeline.clone(),
    };
    for k in 0..n {
        let (i, u) = locate(k);
        if u == 0.0 {
            out.com_ref.push(bundle.com_ref[i]);
            out.h_ang_ref.push(bundle.h_ang_ref[i]);
            out.joint_postural.push(bundle.joint_postural[i].clone());
            out.force_ref.push(bundle.force_ref[i]);
        } else {
            out.com_ref.push(bundle.com_ref[i].lerp(&bundle.com_ref[i + 1], u));
            out.h_ang_ref
                .push(bundle.h_ang_ref[i].lerp(&bundle.h_ang_ref[i + 1], u));
            out.joint_postural
                .push(bundle.joint_postural[i].lerp(&bundle.joint_postural[i + 1], u));
            let (a, b) = (bundle.force_ref[i], bundle.force_ref[i + 1]);
            out.force_ref.push([a[0].lerp(&b[0], u), a[1].lerp(&b[1], u)]);
        }
    }
    Ok(out)
}

/// Nominal per-foot contact forces: full weight on a single stance foot, a
/// linear transfer across double support, equal split when standing, zero
/// in flight. Horizontal components are zero.
///
/// `ramp` is the transfer duration used when only one end of a double
/// support is known.
pub fn nominal_forces(footsteps: &[Footstep], times: &[f64], weight: f64, ramp: f64) -> Vec<[Vector3<f64>; 2]> {
    times
        .iter()
        .map(|&t| {
            let active: Vec<&Footstep> = footsteps.iter().filter(|f| f.is_active_at(t)).collect();
            let mut share = [0.0; 2];
            let left = active.iter().any(|f| f.contact == Foot::Left);
            let right = active.iter().any(|f| f.contact == Foot::Right);
            match (left, right) {
                (true, false) => share[0] = 1.0,
                (false, true) => share[1] = 1.0,
                (true, true) => {
                    let lf = active.iter().find(|f| f.contact == Foot::Left).unwrap();
                    let rf = active.iter().find(|f| f.contact == Foot::Right).unwrap();
                    // the foot lifting first hands its load over
                    let left_first = match lf.deactivation_time.partial_cmp(&rf.deactivation_time) {
                        Some(std::cmp::Ordering::Less) => true,
                        Some(std::cmp::Ordering::Greater) => false,
                        _ => lf.activation_time <= rf.activation_time,
                    };
                    let (old, new) = if left_first { (lf, rf) } else { (rf, lf) };
                    let w_old = transfer_share(new.activation_time, old.deactivation_time, t, ramp);
                    share[old.contact.index()] = w_old;
                    share[new.contact.index()] = 1.0 - w_old;
                }
                (false, false) => {}
            }
            share.map(|s| Vector3::new(0.0, 0.0, s * weight))
        })
        .collect()
}

/// Weight share of the foot lifting at `b`, given the other landed at `a`.
fn transfer_share(a: f64, b: f64, t: f64, ramp: f64) -> f64 {
    match (a.is_finite(), b.is_finite()) {
        (true, true) => ((b - t) / (b - a)).clamp(0.0, 1.0),
        // standing before the first lift-off
        (false, true) => {
            if ramp <= 0.0 {
                return if t < b { 0.5 } else { 0.0 };
            }
            (0.5 * (b - t) / ramp).clamp(0.0, 0.5)
        }
        // settling into stance after the last touchdown
        (true, false) => {
            if ramp <= 0.0 {
                return 0.5;
            }
            (1.0 - 0.5 * (t - a) / ramp).clamp(0.5, 1.0)
        }
        (false, false) => 0.5,
    }
}

/// Horizon request parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonRequest {
    /// Span of the emitted references, seconds.
    pub horizon: f64,
    /// Output sampling period, seconds.
    pub t_mpc: f64,
    /// Freeze window before touchdown for the derived timeline, seconds.
    pub lead_window: f64,
}

/// Output of one horizon generation.
#[derive(Clone, Debug)]
pub struct HorizonPlan {
    /// References at the requested period.
    pub bundle: ReferenceBundle,
    /// Generator state after every tick, displacement-scaled; `states[0]` is the input.
    pub states: Vec<GeneratorState>,
    pub samples: Vec<GeneratorSample>,
    pub contacts: Vec<[bool; 2]>,
}

impl HorizonPlan {
    /// Generator state to resume from after `reset_index` ticks.
    pub fn reset_state(&self, reset_index: usize) -> &GeneratorState {
        &self.states[reset_index.min(self.states.len() - 1)]
    }
}

/// Runs the generator over the horizon and builds MPC references.
pub fn generate_horizon(
    generator: &GaitGenerator,
    state: &GeneratorState,
    command: Command,
    req: &HorizonRequest,
) -> Result<HorizonPlan, GaitGenError> {
    let cfg = generator.config();
    if !(req.t_mpc > 0.0 && req.horizon >= req.t_mpc) {
        return Err(GaitGenError::Config(
            "horizon must cover at least one MPC period".into(),
        ));
    }
    let eta_t = cfg.scaled_period();
    let gamma = cfg.scale_gamma;
    let model = generator.model();
    let n_ticks = (req.horizon / eta_t - 1e-9).ceil() as usize + cfg.dwell_samples() as usize + 2;

    let mut states = Vec::with_capacity(n_ticks + 1);
    let mut samples = Vec::with_capacity(n_ticks + 1);
    states.push(state.clone());
    samples.push(generator.sample_of(state)?);
    for k in 0..n_ticks {
        let (next, sample) = generator.step(&states[k], command)?;
        states.push(next);
        samples.push(sample);
    }

    // corner heights from the kinematics of the generated joints
    let soles = generator.sole_frames();
    let vertices = generator.foot_vertices();
    let mut sole_poses: Vec<[Pose; 2]> = Vec::with_capacity(samples.len());
    let mut heights = Vec::with_capacity(samples.len());
    for s in &samples {
        let poses = model.link_poses(&generator.robot_state(s))?;
        let pair = [poses[soles[0]], poses[soles[1]]];
        heights.push(pair.map(|p| vertices.map(|v| p.transform_point(&v).z)));
        sole_poses.push(pair);
    }
    let gen_times: Vec<f64> = (0..samples.len()).map(|k| k as f64 * cfg.period_dnn).collect();
    let (contacts, detector) = detect_contacts_from(&gen_times, &heights, &cfg.schmitt, state.schmitt)?;
    for (s, d) in states.iter_mut().zip(&detector) {
        s.schmitt = *d;
    }
    // states[0] keeps its own detector; the others hold the state after their sample
    states[0].schmitt = state.schmitt;

    // footsteps in real time, then per-foot displacement scaling; switches
    // are back-dated by the dwell so they mark the threshold crossing
    let lag = cfg.dwell_samples() as f64 * eta_t;
    let mut footsteps = Vec::new();
    for foot in Foot::ALL {
        let i = foot.index();
        let mut open: Option<(f64, Pose)> = None;
        let mut own = Vec::new();
        for (k, c) in contacts.iter().enumerate() {
            let was = if k == 0 {
                state.schmitt[i].active
            } else {
                contacts[k - 1][i]
            };
            if c[i] && (k == 0 || !was) {
                let t = if was && k == 0 {
                    state.schmitt[i]
                        .since
                        .map_or(f64::NEG_INFINITY, |n| -(n as f64) * eta_t - lag)
                } else {
                    k as f64 * eta_t - lag
                };
                let p = sole_poses[k][i];
                open = Some((t, Pose::from_xyz_yaw(p.translation.x, p.translation.y, 0.0, p.yaw())));
            } else if !c[i] && was {
                if let Some((t0, pose)) = open.take() {
                    own.push((t0, k as f64 * eta_t - lag, pose));
                }
            }
        }
        if let Some((t0, pose)) = open {
            own.push((t0, f64::INFINITY, pose));
        }
        let anchor = state.feet[i];
        let mut points = vec![Vector3::new(anchor.x, anchor.y, 0.0)];
        points.extend(own.iter().map(|(_, _, p)| p.translation));
        let scaled = scale_plan(&points, gamma)?;
        for ((t0, t1, pose), p) in own.into_iter().zip(scaled.into_iter().skip(1)) {
            footsteps.push(Footstep::new(foot, Pose::new(p, pose.rotation), t0, t1)?);
        }
    }
    footsteps.sort_by(|a, b| a.activation_time.total_cmp(&b.activation_time));

    for s in states.iter_mut().skip(1) {
        rescale_state(s, state, gamma);
    }

    // centroidal references from the generated motion
    let n = samples.len();
    let mut coms = Vec::with_capacity(n);
    let mut h_ang = Vec::with_capacity(n);
    for k in 0..n {
        let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
        let dt = (b - a) as f64 * eta_t;
        let mut rs = generator.robot_state(&samples[k]);
        let (pa, pb) = (&samples[a].base_pose, &samples[b].base_pose);
        let v = (pb.translation - pa.translation) / dt;
        let w = rotation_log(&(pb.rotation * pa.rotation.transpose())) / dt;
        rs.base_twist = Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z);
        rs.dq = (&samples[b].joints - &samples[a].joints) / dt;
        let h = model.com_and_momentum(&rs)?;
        coms.push(h.p_com);
        h_ang.push(h.h_ang);
    }
    let coms = scale_plan(&coms, gamma)?;

    let raw = ReferenceBundle {
        sampling_period: eta_t,
        com_ref: coms,
        h_ang_ref: h_ang,
        joint_postural: samples.iter().map(|s| s.joints.clone()).collect(),
        force_ref: vec![[Vector3::zeros(); 2]; n],
        footsteps: footsteps.clone(),
        timeline: derive_timeline(&footsteps, req.lead_window, req.horizon)?,
    };
    let n_out = (req.horizon / req.t_mpc).round() as usize + 1;
    let mut bundle = resample_n(&raw, req.t_mpc, n_out)?;
    let times: Vec<f64> = (0..n_out).map(|k| k as f64 * req.t_mpc).collect();
    let ramp = cfg.ds_ratio * cfg.step_duration * cfg.scale_eta as f64;
    bundle.force_ref = nominal_forces(&footsteps, &times, generator.weight(), ramp);
    Ok(HorizonPlan {
        bundle,
        states,
        samples,
        contacts,
    })
}

/// Applies the per-foot and base displacement scaling anchored at `origin`.
fn rescale_state(s: &mut GeneratorState, origin: &GeneratorState, gamma: f64) {
    if gamma == 1.0 {
        return;
    }
    for i in 0..2 {
        s.feet[i] = s.feet[i].scaled_about(origin.feet[i], gamma);
    }
    if let Some(t) = s.swing_target {
        let w = s.swing_foot().index();
        s.swing_target = Some(t.scaled_about(origin.feet[w], gamma));
    }
    let b = origin.base_center;
    s.base_center = s.base_center.scaled_about(b, gamma);
    s.base_start = s.base_start.scaled_about(b, gamma);
    s.base_end = s.base_end.scaled_about(b, gamma);
}

/// Writes per-sample references; one row per sample.
pub fn write_bundle_csv<W: Write>(bundle: &ReferenceBundle, joint_names: &[String], mut w: W) -> io::Result<()> {
    write!(
        w,
        "t,com_x,com_y,com_z,hang_x,hang_y,hang_z,f_left_z,f_right_z,gamma_left,gamma_right,sigma_left,sigma_right"
    )?;
    for n in joint_names {
        write!(w, ",q_{n}")?;
    }
    writeln!(w)?;
    for k in 0..bundle.len() {
        let t = k as f64 * bundle.sampling_period;
        let c = bundle.com_ref[k];
        let h = bundle.h_ang_ref[k];
        let f = bundle.force_ref[k];
        let fl = bundle.timeline.contact_flags_at(t).unwrap_or_default();
        write!(
            w,
            "{t:.6},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.x,
            c.y,
            c.z,
            h.x,
            h.y,
            h.z,
            f[0].z,
            f[1].z,
            fl.gamma[0] as u8,
            fl.gamma[1] as u8,
            fl.sigma[0] as u8,
            fl.sigma[1] as u8
        )?;
        for q in bundle.joint_postural[k].iter() {
            write!(w, ",{q}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_footsteps_csv<W: Write>(footsteps: &[Footstep], mut w: W) -> io::Result<()> {
    writeln!(w, "foot,x,y,z,yaw,activation,deactivation")?;
    for f in footsteps {
        let p = f.pose.translation;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            f.contact,
            p.x,
            p.y,
            p.z,
            f.pose.yaw(),
            f.activation_time,
            f.deactivation_time
        )?;
    }
    Ok(())
}

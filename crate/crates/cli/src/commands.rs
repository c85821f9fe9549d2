use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use walkctl::estimation::{ga_tune, kf_filter, JointDataset, KfConfig};
use walkctl::gaitgen::{
    generate_horizon, write_bundle_csv, write_footsteps_csv, GaitGenerator, HorizonRequest, PlanarPose,
};
use walkctl::kinematics::ChainModel;
use walkctl::sim::{run_to_dir, RunMode, SimError};

use crate::config::ConfigFile;
use crate::Failure;

fn load(path: &Path) -> Result<ConfigFile, Failure> {
    ConfigFile::load(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn io(what: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", what.display()))
}

fn echo_config(cfg: &ConfigFile, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(io(&path))
}

pub fn run(config: &Path, mode: Option<RunMode>, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load(config)?;
    if let Some(m) = mode {
        cfg.run.mode = m;
    }
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    if out.is_some() {
        cfg.run.out = out;
    }
    let dir = cfg
        .run
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(&cfg.scenario.name));
    echo_config(&cfg, &dir)?;

    match run_to_dir(&cfg.scenario, cfg.run.mode, &cfg.sim(), &dir) {
        Ok(outcome) => {
            print!("{}", outcome.traces.summary);
            println!("traces written to {}", dir.display());
            match outcome.metrics.fall_time {
                Some(t) => Err(Failure::Runtime(format!("the robot fell at t = {t} s"))),
                None => Ok(()),
            }
        }
        Err(e @ SimError::LayerFailure { .. }) => {
            Err(Failure::Runtime(format!("{e}; partial traces in {}", dir.display())))
        }
        Err(e @ (SimError::Scenario(_) | SimError::Model(_) | SimError::Ocp(_) | SimError::GaitGen(_))) => {
            Err(Failure::Usage(e.to_string()))
        }
        Err(e) => Err(Failure::Runtime(e.to_string())),
    }
}

#[derive(Serialize)]
struct Tuned {
    lambda0: f64,
    q_diag: [f64; 3],
    r: f64,
    fitness: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    kf_velocity_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fd_velocity_rmse: Option<f64>,
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn tune_kf(
    dataset: &Path,
    config: Option<&Path>,
    joints: Option<Vec<String>>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(p) => load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(j) = joints {
        cfg.estimation.joints = j;
    }
    if let Some(s) = seed {
        cfg.estimation.seed = s;
    }
    if out.is_some() {
        cfg.estimation.out = out;
    }
    let file = File::open(dataset).map_err(|e| Failure::Usage(format!("{}: {e}", dataset.display())))?;
    let data = JointDataset::read_csv(file).map_err(|e| Failure::Usage(format!("{}: {e}", dataset.display())))?;
    let selected: Vec<usize> = if cfg.estimation.joints.is_empty() {
        (0..data.names.len()).collect()
    } else {
        cfg.estimation
            .joints
            .iter()
            .map(|n| {
                data.joint(n)
                    .ok_or_else(|| Failure::Usage(format!("{}: no joint `{n}`", dataset.display())))
            })
            .collect::<Result<_, _>>()?
    };
    let dir = cfg.estimation.out.clone().unwrap_or_else(|| PathBuf::from("kf_tuning"));
    echo_config(&cfg, &dir)?;

    // the filter's start-up transient stays out of the error figures
    let skip = (data.len() / 10).clamp(1, 500);
    let mut tuned = BTreeMap::new();
    let mut histories = Vec::new();
    for &j in &selected {
        let name = &data.names[j];
        let s = &data.positions[j];
        let res = ga_tune(s, data.period, &cfg.estimation.ga, cfg.estimation.seed)
            .map_err(|e| Failure::Runtime(format!("{name}: {e}")))?;
        let xi: [f64; 5] = res.best.clone().try_into().expect("five genes");
        let (kf_err, fd_err) = match &data.true_velocities {
            Some(v) => {
                let est = kf_filter(&KfConfig::from_xi(data.period, &xi), s)
                    .map_err(|e| Failure::Runtime(format!("{name}: {e}")))?;
                let kf: Vec<f64> = est.iter().map(|e| e.velocity()).collect();
                let fd: Vec<f64> = (1..s.len()).map(|i| (s[i] - s[i - 1]) / data.period).collect();
                let truth = &v[j];
                (
                    Some(rmse(&kf[skip..], &truth[skip..])),
                    Some(rmse(&fd[skip - 1..], &truth[skip..])),
                )
            }
            None => (None, None),
        };
        println!(
            "{name}: fitness {:.6e}, xi {xi:?}{}",
            res.best_fitness,
            match (kf_err, fd_err) {
                (Some(k), Some(f)) => format!(", velocity RMSE {k:.4e} (finite differences {f:.4e})"),
                _ => String::new(),
            }
        );
        tuned.insert(
            name.clone(),
            Tuned {
                lambda0: xi[0],
                q_diag: [xi[1], xi[2], xi[3]],
                r: xi[4],
                fitness: res.best_fitness,
                kf_velocity_rmse: kf_err,
                fd_velocity_rmse: fd_err,
            },
        );
        histories.push((name.clone(), res.history));
    }

    let xi_path = dir.join("xi.toml");
    let body = toml::to_string(&BTreeMap::from([("joints", &tuned)])).expect("tuned values serialize");
    fs::write(&xi_path, body).map_err(io(&xi_path))?;
    let mut csv = String::from("generation");
    for (n, _) in &histories {
        csv.push(',');
        csv.push_str(n);
    }
    csv.push('\n');
    let gens = histories.iter().map(|(_, h)| h.len()).max().unwrap_or(0);
    for g in 0..gens {
        let _ = write!(csv, "{g}");
        for (_, h) in &histories {
            let _ = write!(csv, ",{}", h[g]);
        }
        csv.push('\n');
    }
    let hist_path = dir.join("history.csv");
    fs::write(&hist_path, csv).map_err(io(&hist_path))?;
    println!("results written to {}", dir.display());
    Ok(())
}

pub fn gen(config: &Path, horizon: Option<f64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load(config)?;
    if let Some(h) = horizon {
        if !(h >= cfg.mpc.t_mpc && h.is_finite()) {
            return Err(Failure::Usage(format!(
                "--horizon {h} must cover at least one t_mpc ({})",
                cfg.mpc.t_mpc
            )));
        }
        cfg.gen.horizon = h;
    }
    if out.is_some() {
        cfg.gen.out = out;
    }
    let dir = cfg.gen.out.clone().unwrap_or_else(|| PathBuf::from("references"));
    echo_config(&cfg, &dir)?;

    let model = ChainModel::bundled_biped();
    let generator = GaitGenerator::new(model.clone(), cfg.gaitgen.clone(), &cfg.robot)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let state = generator
        .standing_state(PlanarPose::default())
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let req = HorizonRequest {
        horizon: cfg.gen.horizon,
        t_mpc: cfg.mpc.t_mpc,
        lead_window: cfg.mpc.lead_window(),
    };
    let plan = generate_horizon(&generator, &state, cfg.scenario.command_at(0.0), &req)
        .map_err(|e| Failure::Runtime(e.to_string()))?;

    let refs = dir.join("references.csv");
    let f = File::create(&refs).map_err(io(&refs))?;
    write_bundle_csv(&plan.bundle, model.joint_names(), BufWriter::new(f)).map_err(io(&refs))?;
    let steps = dir.join("footsteps.csv");
    let f = File::create(&steps).map_err(io(&steps))?;
    write_footsteps_csv(&plan.bundle.footsteps, BufWriter::new(f)).map_err(io(&steps))?;
    println!(
        "{} reference samples at {} s, {} footsteps, written to {}",
        plan.bundle.len(),
        cfg.mpc.t_mpc,
        plan.bundle.footsteps.len(),
        dir.display()
    );
    Ok(())
}

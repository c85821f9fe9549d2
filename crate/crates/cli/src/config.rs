//! The TOML configuration file: one section per layer plus the settings of
//! each command. Every command-line flag has a key here; flags win.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkctl::control::ControlConfig;
use walkctl::estimation::{GaConfig, KfConfig};
use walkctl::gaitgen::GaitGenConfig;
use walkctl::model::RobotParams;
use walkctl::ocp::MpcConfig;
use walkctl::sim::{RunMode, Scenario, SimConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub robot: RobotParams,
    pub gaitgen: GaitGenConfig,
    pub mpc: MpcConfig,
    pub control: ControlConfig,
    pub estimation: EstimationSection,
    pub scenario: Scenario,
    pub run: RunSection,
    pub gen: GenSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub mode: RunMode,
    /// Output directory; defaults to `runs/<scenario name>`.
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: RunMode::Mpc,
            out: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    pub kf: KfConfig,
    pub ga: GaConfig,
    /// Joints to tune; empty means all.
    pub joints: Vec<String>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    /// Span of the dumped references, seconds.
    pub horizon: f64,
    pub out: Option<PathBuf>,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            horizon: 1.2,
            out: None,
        }
    }
}

/// A configuration problem, anchored to a line when one is known.
#[derive(Debug)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<(usize, usize)>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some((l, c)) => write!(f, "{}:{l}:{c}: {}", self.path.display(), self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

/// 1-based line and column of byte `offset`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Line of the `[section]` header, if the file has one.
fn section_line(text: &str, section: &str) -> Option<(usize, usize)> {
    let header = format!("[{section}");
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.starts_with(&header) && l[header.len()..].starts_with([']', '.'])
        })
        .map(|i| (i + 1, 1))
}

impl ConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| ConfigError {
            path: path.to_owned(),
            line: e.span().map(|s| line_col(text, s.start)),
            message: e.message().trim().to_owned(),
        })?;
        cfg.validate(text, path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_owned(),
            line: None,
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    /// Checks every section, pointing at its header on failure.
    pub fn validate(&self, text: &str, path: &Path) -> Result<(), ConfigError> {
        let checks: [(&str, Result<(), String>); 8] = [
            ("robot", self.robot.validate().map_err(|e| e.to_string())),
            ("gaitgen", self.gaitgen.validate().map_err(|e| e.to_string())),
            ("mpc", self.mpc.validate().map_err(|e| e.to_string())),
            ("control", self.control.validate().map_err(|e| e.to_string())),
            (
                "estimation.kf",
                self.estimation.kf.validate().map_err(|e| e.to_string()),
            ),
            (
                "estimation.ga",
                self.estimation.ga.validate().map_err(|e| e.to_string()),
            ),
            ("scenario", self.scenario.validate().map_err(|e| e.to_string())),
            ("gen", self.check_gen()),
        ];
        for (section, res) in checks {
            if let Err(message) = res {
                return Err(ConfigError {
                    path: path.to_owned(),
                    line: section_line(text, section),
                    message: format!("[{section}] {message}"),
                });
            }
        }
        self.sim().validate().map_err(|e| ConfigError {
            path: path.to_owned(),
            line: section_line(text, "mpc"),
            message: e.to_string(),
        })
    }

    fn check_gen(&self) -> Result<(), String> {
        if self.gen.horizon >= self.mpc.t_mpc && self.gen.horizon.is_finite() {
            Ok(())
        } else {
            Err(format!("horizon {} must cover at least one t_mpc", self.gen.horizon))
        }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            robot: self.robot.clone(),
            gaitgen: self.gaitgen.clone(),
            mpc: self.mpc.clone(),
            control: self.control.clone(),
            estimation: self.estimation.kf.clone(),
        }
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

//! Joint velocity estimation: a per-joint constant-acceleration Kalman filter
//! and a genetic algorithm that tunes its covariances on recorded positions.

mod dataset;
mod ga;
mod kf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{synthetic_dataset, JointDataset, SyntheticSpec};
pub use ga::{ga_maximize, ga_objective, ga_tune, GaResult, ObjectiveTerms};
pub use kf::{kf_filter, kf_step, KfState};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("invalid estimation configuration: {0}")]
    Config(String),
    #[error("covariance lost positive definiteness")]
    Degenerate,
    #[error("dataset needs at least {needed} samples, got {got}")]
    ShortDataset { needed: usize, got: usize },
    #[error("malformed dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KfConfig {
    /// Sampling period, seconds.
    pub period: f64,
    /// Initial covariance `λ·I`.
    pub lambda0: f64,
    /// Diagonal of the process noise covariance.
    pub q_diag: [f64; 3],
    /// Measurement noise variance.
    pub r: f64,
}

impl Default for KfConfig {
    fn default() -> Self {
        Self {
            period: 0.001,
            lambda0: 1e-2,
            q_diag: [1e-9, 1e-6, 1e-2],
            r: 1e-6,
        }
    }
}

impl KfConfig {
    pub fn validate(&self) -> Result<(), EstimationError> {
        let all = [self.period, self.lambda0, self.r].into_iter().chain(self.q_diag);
        for v in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EstimationError::Config(format!("{v} must be finite and positive")));
            }
        }
        Ok(())
    }

    /// Builds a filter from the tuned vector `(λ, Q₁₁, Q₂₂, Q₃₃, R)`.
    pub fn from_xi(period: f64, xi: &[f64; 5]) -> Self {
        Self {
            period,
            lambda0: xi[0],
            q_diag: [xi[1], xi[2], xi[3]],
            r: xi[4],
        }
    }

    pub fn xi(&self) -> [f64; 5] {
        [self.lambda0, self.q_diag[0], self.q_diag[1], self.q_diag[2], self.r]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub generations: usize,
    pub population: usize,
    /// Parents drawn by tournament each generation.
    pub parents: usize,
    pub tournament_k: usize,
    /// Per-gene mutation probability.
    pub mutation_rate: f64,
    /// Half-width of the uniform offset added by a mutation, in gene units.
    pub mutation_range: f64,
    /// Fraction of the population copied unchanged into the next generation.
    pub elite_fraction: f64,
    /// Bounds on `(λ, Q₁₁, Q₂₂, Q₃₃, R)`; genes are searched in log10 space.
    pub bounds: [[f64; 2]; 5],
    pub w_a: f64,
    pub w_j: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            generations: 50,
            population: 120,
            parents: 60,
            tournament_k: 4,
            mutation_rate: 0.2,
            mutation_range: 1.0,
            elite_fraction: 0.1,
            bounds: [[1e-9, 1e2]; 5],
            w_a: 1e-3,
            w_j: 1e-5,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), EstimationError> {
        let fail = |m: &str| Err(EstimationError::Config(m.to_owned()));
        if self.population < 2 || self.parents < 2 || self.parents > self.population {
            return fail("need 2 <= parents <= population");
        }
        if self.tournament_k == 0 {
            return fail("tournament_k must be at least 1");
        }
        for r in [self.mutation_rate, self.elite_fraction] {
            if !(0.0..=1.0).contains(&r) {
                return fail("rates must lie in [0, 1]");
            }
        }
        if !(self.mutation_range >= 0.0 && self.mutation_range.is_finite()) {
            return fail("mutation_range must be finite and non-negative");
        }
        for [lo, hi] in self.bounds {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return fail("gene bounds must be finite, positive and ordered");
            }
        }
        if !(self.w_a >= 0.0 && self.w_j >= 0.0) {
            return fail("objective weights must be non-negative");
        }
        Ok(())
    }

    pub fn elite_count(&self) -> usize {
        ((self.elite_fraction * self.population as f64).round() as usize).min(self.population)
    }
}

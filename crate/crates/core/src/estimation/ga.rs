use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kf::kf_filter;
use super::{EstimationError, GaConfig, KfConfig};

/// Summed, non-negative contributions to the tuning objective. The objective
/// itself is the negated weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveTerms {
    /// `Σ s⃛²`, forward difference of the estimated acceleration.
    pub jerk: f64,
    /// `Σ s̈²` of the estimate.
    pub acceleration: f64,
    /// `Σ (s − ŝ)²`.
    pub position: f64,
    /// `Σ (s − ŝᵛ)²` against the integrated velocity estimate.
    pub velocity_drift: f64,
    /// `Σ (s − ŝᵃ)²` against the twice-integrated acceleration estimate.
    pub acceleration_drift: f64,
}

impl ObjectiveTerms {
    pub fn evaluate(xi: &[f64; 5], positions: &[f64], period: f64) -> Result<Self, EstimationError> {
        if positions.len() < 3 {
            return Err(EstimationError::ShortDataset {
                needed: 3,
                got: positions.len(),
            });
        }
        let cfg = KfConfig::from_xi(period, xi);
        cfg.validate()?;
        let est = kf_filter(&cfg, positions)?;
        let half = 0.5 * period;
        let mut out = Self::default();
        // integrators start at the first measured position; the velocity
        // integrator of the acceleration starts at the estimated velocity
        let (mut sv, mut sa, mut va) = (positions[0], positions[0], est[0].velocity());
        for (i, &s) in positions.iter().enumerate() {
            let e = &est[i];
            if i > 0 {
                let p = &est[i - 1];
                sv += half * (p.velocity() + e.velocity());
                let va_next = va + half * (p.acceleration() + e.acceleration());
                sa += half * (va + va_next);
                va = va_next;
            }
            if let Some(n) = est.get(i + 1) {
                let j = (n.acceleration() - e.acceleration()) / period;
                out.jerk += j * j;
            }
            out.acceleration += e.acceleration().powi(2);
            out.position += (s - e.position()).powi(2);
            out.velocity_drift += (s - sv).powi(2);
            out.acceleration_drift += (s - sa).powi(2);
        }
        Ok(out)
    }

    pub fn objective(&self, w_a: f64, w_j: f64) -> f64 {
        -(w_j * self.jerk + w_a * self.acceleration + self.position + self.velocity_drift + self.acceleration_drift)
    }
}

/// Tuning objective of `ξ = (λ, Q₁₁, Q₂₂, Q₃₃, R)` on a position record.
pub fn ga_objective(xi: &[f64; 5], positions: &[f64], period: f64, w_a: f64, w_j: f64) -> Result<f64, EstimationError> {
    Ok(ObjectiveTerms::evaluate(xi, positions, period)?.objective(w_a, w_j))
}

#[derive(Clone, Debug)]
pub struct GaResult {
    /// Best individual ever evaluated.
    pub best: Vec<f64>,
    pub best_fitness: f64,
    /// Best fitness of the initial population, then of each generation.
    pub history: Vec<f64>,
}

/// Maximizes `fitness` over the box `bounds`.
///
/// With a non-zero elite count the best individual survives unchanged, so
/// `history` never decreases. Fitness evaluations run in parallel; every
/// random draw happens on the calling thread, so results depend only on
/// `seed`. Non-finite fitness values rank below everything else.
pub fn ga_maximize<F>(
    fitness: F,
    bounds: &[[f64; 2]],
    cfg: &GaConfig,
    seed: u64,
    initial: Option<Vec<Vec<f64>>>,
) -> Result<GaResult, EstimationError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let n = bounds.len();
    if n == 0
        || bounds
            .iter()
            .any(|[lo, hi]| !(lo <= hi && lo.is_finite() && hi.is_finite()))
    {
        return Err(EstimationError::Config("gene bounds must be finite and ordered".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pop: Vec<Vec<f64>> = match initial {
        Some(p) => {
            if p.len() != cfg.population || p.iter().any(|g| g.len() != n) {
                return Err(EstimationError::Config("initial population has the wrong shape".into()));
            }
            p
        }
        None => (0..cfg.population)
            .map(|_| bounds.iter().map(|&[lo, hi]| draw(&mut rng, lo, hi)).collect())
            .collect(),
    };
    let eval = |genes: &[Vec<f64>]| -> Vec<f64> {
        genes
            .par_iter()
            .map(|g| {
                let f = fitness(g);
                if f.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    f
                }
            })
            .collect()
    };
    let mut fit = eval(&pop);
    let mut best = (pop[0].clone(), f64::NEG_INFINITY);
    let record = |pop: &[Vec<f64>], fit: &[f64], best: &mut (Vec<f64>, f64)| -> f64 {
        let i = argmax(fit);
        if fit[i] > best.1 || best.1 == f64::NEG_INFINITY && fit[i] == f64::NEG_INFINITY {
            *best = (pop[i].clone(), fit[i]);
        }
        fit[i]
    };
    let mut history = vec![record(&pop, &fit, &mut best)];

    let elites = cfg.elite_count();
    for _ in 0..cfg.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[b].total_cmp(&fit[a]).then(a.cmp(&b)));
        let parents: Vec<usize> = (0..cfg.parents)
            .map(|_| {
                (0..cfg.tournament_k)
                    .map(|_| rng.random_range(0..pop.len()))
                    .reduce(|a, b| if fit[b] > fit[a] { b } else { a })
                    .unwrap()
            })
            .collect();
        let mut children = Vec::with_capacity(cfg.population - elites);
        for c in 0..cfg.population - elites {
            let a = &pop[parents[c % parents.len()]];
            let b = &pop[parents[(c + 1) % parents.len()]];
            let mut child = two_point(a, b, &mut rng);
            for (g, &[lo, hi]) in child.iter_mut().zip(bounds) {
                if rng.random::<f64>() < cfg.mutation_rate {
                    let d = cfg.mutation_range;
                    *g = (*g + draw(&mut rng, -d, d)).clamp(lo, hi);
                }
            }
            children.push(child);
        }
        let child_fit = eval(&children);
        let mut next: Vec<Vec<f64>> = order[..elites].iter().map(|&i| pop[i].clone()).collect();
        let mut next_fit: Vec<f64> = order[..elites].iter().map(|&i| fit[i]).collect();
        next.extend(children);
        next_fit.extend(child_fit);
        pop = next;
        fit = next_fit;
        history.push(record(&pop, &fit, &mut best));
    }
    Ok(GaResult {
        best: best.0,
        best_fitness: best.1,
        history,
    })
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Middle section from `b`, ends from `a`.
fn two_point(a: &[f64], b: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = a.len();
    if n < 2 {
        return a.to_vec();
    }
    let mut i = rng.random_range(1..n);
    let mut j = rng.random_range(1..=n);
    if i > j {
        std::mem::swap(&mut i, &mut j);
    }
    let mut c = a.to_vec();
    c[i..j].copy_from_slice(&b[i..j]);
    c
}

/// Tunes `ξ` for one joint. Genes are `log10 ξ`; `best` is returned in `ξ`
/// units.
pub fn ga_tune(positions: &[f64], period: f64, cfg: &GaConfig, seed: u64) -> Result<GaResult, EstimationError> {
    if positions.len() < 3 {
        return Err(EstimationError::ShortDataset {
            needed: 3,
            got: positions.len(),
        });
    }
    if !(period > 0.0) {
        return Err(EstimationError::Config("period must be positive".into()));
    }
    let bounds: Vec<[f64; 2]> = cfg.bounds.iter().map(|&[lo, hi]| [lo.log10(), hi.log10()]).collect();
    let objective = |g: &[f64]| {
        let xi = to_xi(g);
        ga_objective(&xi, positions, period, cfg.w_a, cfg.w_j).unwrap_or(f64::NEG_INFINITY)
    };
    let mut res = ga_maximize(objective, &bounds, cfg, seed, None)?;
    res.best = to_xi(&res.best).to_vec();
    Ok(res)
}

fn to_xi(g: &[f64]) -> [f64; 5] {
    std::array::from_fn(|i| 10f64.powf(g[i]))
}

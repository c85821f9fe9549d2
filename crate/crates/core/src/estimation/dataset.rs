use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EstimationError;

/// Uniformly sampled joint positions, optionally with true velocities.
///
/// CSV layout: a `t` column, one column per joint, and for synthetic records
/// a `<joint>.vel` column holding the noise-free velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDataset {
    pub period: f64,
    pub names: Vec<String>,
    /// `positions[j][i]`: joint `j` at sample `i`.
    pub positions: Vec<Vec<f64>>,
    pub true_velocities: Option<Vec<Vec<f64>>>,
}

impl JointDataset {
    pub fn len(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joint(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, EstimationError> {
        let bad = |m: String| EstimationError::Dataset(m);
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| bad(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        if header.first().map(String::as_str) != Some("t") {
            return Err(bad("first column must be `t`".into()));
        }
        let names: Vec<String> = header[1..].iter().filter(|h| !h.ends_with(".vel")).cloned().collect();
        if names.is_empty() {
            return Err(bad("no joint columns".into()));
        }
        let pos_col: Vec<usize> = names
            .iter()
            .map(|n| header.iter().position(|h| h == n).unwrap())
            .collect();
        let vel_col: Vec<Option<usize>> = names
            .iter()
            .map(|n| header.iter().position(|h| *h == format!("{n}.vel")))
            .collect();
        let with_truth = vel_col.iter().all(Option::is_some);
        let mut times = Vec::new();
        let mut positions = vec![Vec::new(); names.len()];
        let mut velocities = vec![Vec::new(); names.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |c: usize| -> Result<f64, EstimationError> {
                let v = rec
                    .get(c)
                    .ok_or_else(|| bad(format!("row {}: missing column {c}", line + 2)))?;
                v.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("row {}: `{v}` is not a finite number", line + 2)))
            };
            times.push(num(0)?);
            for j in 0..names.len() {
                positions[j].push(num(pos_col[j])?);
                if with_truth {
                    velocities[j].push(num(vel_col[j].unwrap())?);
                }
            }
        }
        if times.len() < 2 {
            return Err(EstimationError::ShortDataset {
                needed: 2,
                got: times.len(),
            });
        }
        let period = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        if !(period > 0.0) {
            return Err(bad("time must increase".into()));
        }
        for (i, w) in times.windows(2).enumerate() {
            if ((w[1] - w[0]) - period).abs() > 1e-6 * period.max(1e-3) {
                return Err(bad(format!("row {}: non-uniform sampling", i + 3)));
            }
        }
        Ok(Self {
            period,
            names,
            positions,
            true_velocities: with_truth.then_some(velocities),
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut head = vec!["t".to_owned()];
        head.extend(self.names.iter().cloned());
        if self.true_velocities.is_some() {
            head.extend(self.names.iter().map(|n| format!("{n}.vel")));
        }
        writeln!(out, "{}", head.join(","))?;
        for i in 0..self.len() {
            let mut row = vec![format!("{}", i as f64 * self.period)];
            row.extend(self.positions.iter().map(|p| format!("{:e}", p[i])));
            if let Some(v) = &self.true_velocities {
                row.extend(v.iter().map(|v| format!("{:e}", v[i])));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Parameters of a synthetic multi-sine record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub duration: f64,
    pub rate: f64,
    pub joints: usize,
    /// Standard deviation of the additive position noise, radians.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            duration: 60.0,
            rate: 1000.0,
            joints: 1,
            noise_std: 1e-3,
            seed: 0,
        }
    }
}

/// Sum of three sines per joint with seeded phases, plus Gaussian noise.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<JointDataset, EstimationError> {
    if !(spec.duration > 0.0 && spec.rate > 0.0 && spec.noise_std >= 0.0) || spec.joints == 0 {
        return Err(EstimationError::Config(
            "synthetic dataset parameters out of range".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| EstimationError::Config(e.to_string()))?;
    let n = (spec.duration * spec.rate).round() as usize + 1;
    let period = 1.0 / spec.rate;
    let amp = [0.3, 0.1, 0.03];
    let mut positions = Vec::new();
    let mut velocities = Vec::new();
    for j in 0..spec.joints {
        let stretch = 1.0 + 0.1 * j as f64;
        let freq = [0.4 * stretch, 1.1 * stretch, 2.7 * stretch].map(|f| std::f64::consts::TAU * f);
        let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let mut p = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 * period;
            let (mut s, mut ds) = (0.0, 0.0);
            for k in 0..3 {
                s += amp[k] * (freq[k] * t + phase[k]).sin();
                ds += amp[k] * freq[k] * (freq[k] * t + phase[k]).cos();
            }
            p.push(s + noise.sample(&mut rng));
            v.push(ds);
        }
        positions.push(p);
        velocities.push(v);
    }
    Ok(JointDataset {
        period,
        names: (0..spec.joints).map(|j| format!("joint{j}")).collect(),
        positions,
        true_velocities: Some(velocities),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let d = synthetic_dataset(&SyntheticSpec {
            duration: 0.05,
            joints: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = JointDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.names, d.names);
        assert_eq!(back.positions, d.positions);
        assert_eq!(back.true_velocities, d.true_velocities);
        assert!((back.period - 0.001).abs() < 1e-15);
    }

    #[test]
    fn malformed_rows_are_reported() {
        let bad = "t,a\n0,1\n0.001,x\n";
        let err = JointDataset::read_csv(bad.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
        assert!(JointDataset::read_csv("x,a\n0,1\n".as_bytes()).is_err());
        assert!(JointDataset::read_csv("t,a\n0,1\n0.001,1\n0.003,1\n".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_record_is_seeded() {
        let spec = SyntheticSpec {
            duration: 0.1,
            ..SyntheticSpec::default()
        };
        let a = synthetic_dataset(&spec).unwrap();
        assert_eq!(a, synthetic_dataset(&spec).unwrap());
        let b = synthetic_dataset(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.positions, b.positions);
        assert_eq!(a.len(), 101);
    }
}

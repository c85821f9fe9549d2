//! Envelope (skyline) LDLᵀ factorization.
//!
//! Fill stays inside the lower envelope, so banded systems such as stage-wise
//! ordered multiple-shooting KKT matrices factor in `O(n·b²)`. Dense input
//! simply degenerates to a full factorization. No pivoting is done: inputs
//! must be positive definite or quasi-definite.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdlError {
    #[error("zero or non-finite pivot at row {0}")]
    BadPivot(usize),
}

#[derive(Clone, Debug)]
pub struct EnvelopeLdl {
    first: Vec<usize>,
    row_start: Vec<usize>,
    lower: Vec<f64>,
    diag: Vec<f64>,
}

impl EnvelopeLdl {
    /// Factors the symmetric matrix given by `entries`. Either triangle may be
    /// supplied; entries are mirrored into the lower triangle and summed.
    pub fn factor(n: usize, entries: impl IntoIterator<Item = (usize, usize, f64)> + Clone) -> Result<Self, LdlError> {
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j, _) in entries.clone() {
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            first[r] = first[r].min(c);
        }
        let mut row_start = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for (i, &f) in first.iter().enumerate() {
            row_start.push(acc);
            acc += i - f;
        }
        row_start.push(acc);
        let mut lower = vec![0.0; acc];
        let mut diag = vec![0.0; n];
        for (i, j, v) in entries {
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            if r == c {
                diag[r] += v;
            } else {
                lower[row_start[r] + c - first[r]] += v;
            }
        }

        let mut u = Vec::new();
        for i in 0..n {
            let fi = first[i];
            let len = i - fi;
            u.clear();
            u.resize(len, 0.0);
            let base_i = row_start[i];
            let mut di = diag[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let base_j = row_start[j];
                let mut s = lower[base_i + j - fi];
                for k in k0..j {
                    s -= u[k - fi] * lower[base_j + k - fj];
                }
                u[j - fi] = s;
                let lij = s / diag[j];
                lower[base_i + j - fi] = lij;
                di -= s * lij;
            }
            if !di.is_finite() || di.abs() < 1e-300 {
                return Err(LdlError::BadPivot(i));
            }
            diag[i] = di;
        }
        Ok(Self {
            first,
            row_start,
            lower,
            diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Pivots of the `D` factor.
    pub fn pivots(&self) -> &[f64] {
        &self.diag
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.diag.len();
        assert_eq!(b.len(), n);
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.lower[self.row_start[i]..self.row_start[i + 1]];
            let mut s = b[i];
            for (k, l) in (fi..i).zip(row) {
                s -= l * b[k];
            }
            b[i] = s;
        }
        for i in 0..n {
            b[i] /= self.diag[i];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.lower[self.row_start[i]..self.row_start[i + 1]];
            let xi = b[i];
            for (k, l) in (fi..i).zip(row) {
                b[k] -= l * xi;
            }
        }
    }
}

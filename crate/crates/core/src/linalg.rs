//! Small dense complex matrices and a Hermitian Cholesky with ridge fallback.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square complex matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CMat {
    pub n: usize,
    pub data: Vec<C64>,
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        CMat {
            n,
            data: vec![C64::new(0.0, 0.0); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_columns(cols: &[Vec<C64>]) -> Self {
        let n = cols.len();
        let mut m = Self::zeros(n);
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), n);
            for i in 0..n {
                m.data[i * n + j] = col[i];
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        self.data[i * self.n + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn mul_vec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|i| {
                let row = &self.data[i * self.n..(i + 1) * self.n];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn mul(&self, other: &CMat) -> CMat {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = CMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                for j in 0..n {
                    out.data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn adjoint(&self) -> CMat {
        let n = self.n;
        let mut out = CMat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.get(i, j).conj();
            }
        }
        out
    }

    /// Max-abs entry of `self * self^H - I`.
    pub fn unitarity_defect(&self) -> f64 {
        let p = self.mul(&self.adjoint());
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..self.n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p.get(i, j) - target).norm());
            }
        }
        worst
    }

    pub fn is_identity(&self) -> bool {
        self.data.iter().enumerate().all(|(idx, v)| {
            let (i, j) = (idx / self.n, idx % self.n);
            *v == if i == j {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }
}

pub fn inner(z: &[C64], w: &[C64]) -> C64 {
    z.iter().zip(w).map(|(a, b)| a * b.conj()).sum()
}

pub fn norm_sqr(z: &[C64]) -> f64 {
    z.iter().map(|c| c.norm_sqr()).sum()
}

/// Lower-triangular factor of a Hermitian positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    pub l: CMat,
    pub ridge: f64,
}

pub const RIDGE_LADDER: [f64; 3] = [1e-12, 1e-10, 1e-8];

/// Factor `a` (Hermitian; only the lower triangle is read). On failure, retries with
/// `lambda * mean(diag)` added to the diagonal for each lambda in the ridge ladder.
pub fn cholesky_with_ridge(a: &CMat) -> Result<Cholesky> {
    let n = a.n;
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i).re).collect();
    let mean_diag = diag.iter().sum::<f64>() / n.max(1) as f64;
    let mut last = match cholesky_shifted(a, 0.0) {
        Ok(l) => return Ok(Cholesky { l, ridge: 0.0 }),
        Err(e) => e,
    };
    for lambda in RIDGE_LADDER {
        let shift = lambda * mean_diag;
        match cholesky_shifted(a, shift) {
            Ok(l) => return Ok(Cholesky { l, ridge: shift }),
            Err(e) => last = e,
        }
    }
    let (pivot, value) = last;
    Err(Error::Factorization {
        ridge: RIDGE_LADDER[RIDGE_LADDER.len() - 1] * mean_diag,
        pivot,
        value,
        diag_min: diag.iter().cloned().fold(f64::INFINITY, f64::min),
        diag_max: diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn cholesky_shifted(a: &CMat, shift: f64) -> std::result::Result<CMat, (usize, f64)> {
    let n = a.n;
    let mut l = CMat::zeros(n);
    for j in 0..n {
        let mut d = a.get(j, j).re + shift;
        for k in 0..j {
            d -= l.get(j, k).norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err((j, d));
        }
        let djj = d.sqrt();
        l.set(j, j, C64::new(djj, 0.0));
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k).conj();
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

impl Cholesky {
    /// Squared norm of `L_m^{-1} b` using the leading `m x m` block of the factor.
    /// Leading blocks of a Cholesky factor factor the leading blocks of the matrix.
    pub fn solve_norm_sqr(&self, b: &[C64], m: usize) -> f64 {
        assert!(m <= self.l.n && b.len() >= m);
        let mut y = vec![C64::new(0.0, 0.0); m];
        let mut acc = 0.0;
        for i in 0..m {
            let row = &self.l.data[i * self.l.n..i * self.l.n + i];
            let s: C64 = row.iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
            y[i] = (b[i] - s) / self.l.get(i, i).re;
            acc += y[i].norm_sqr();
        }
        acc
    }

    /// Prefix sums of `|y_i|^2` for `y = L^{-1} b`, so entry `m-1` is the value for block `m`.
    pub fn solve_norm_sqr_prefix(&self, b: &[C64]) -> Vec<f64> {
        let n = self.l.n;
        let mut y = vec![C64::new(0.0, 0.0); n];
        let mut out = Vec::with_capacity(n);
        let mut acc = 0.0;
        for i in 0..n {
            let row = &self.l.data[i * n..i * n + i];
            let s: C64 = row.iter().zip(&y[..i]).map(|(a, b)| a * b).sum();
            y[i] = (b[i] - s) / self.l.get(i, i).re;
            acc += y[i].norm_sqr();
            out.push(acc);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hermitian_from(b: &CMat) -> CMat {
        let mut a = b.mul(&b.adjoint());
        for i in 0..a.n {
            let v = a.get(i, i) + C64::new(0.5, 0.0);
            a.set(i, i, v);
        }
        a
    }

    #[test]
    fn factor_reconstructs_matrix() {
        let n = 5;
        let mut b = CMat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                b.set(
                    i,
                    j,
                    C64::new((i * 3 + j) as f64 * 0.1 - 0.7, (j as f64 - i as f64) * 0.2),
                );
            }
        }
        let a = hermitian_from(&b);
        let ch = cholesky_with_ridge(&a).unwrap();
        assert_eq!(ch.ridge, 0.0);
        let back = ch.l.mul(&ch.l.adjoint());
        for (x, y) in back.data.iter().zip(&a.data) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn prefix_matches_leading_block_solve() {
        let n = 4;
        let mut a = CMat::identity(n);
        a.set(1, 0, C64::new(0.3, 0.1));
        a.set(0, 1, C64::new(0.3, -0.1));
        a.set(3, 2, C64::new(-0.2, 0.4));
        a.set(2, 3, C64::new(-0.2, -0.4));
        let ch = cholesky_with_ridge(&a).unwrap();
        let b = vec![
            C64::new(1.0, 0.0),
            C64::new(0.5, 0.5),
            C64::new(-1.0, 0.2),
            C64::new(0.0, 1.0),
        ];
        let prefix = ch.solve_norm_sqr_prefix(&b);
        for m in 1..=n {
            assert!((prefix[m - 1] - ch.solve_norm_sqr(&b, m)).abs() < 1e-14);
        }
    }

    #[test]
    fn ridge_rescues_semidefinite() {
        // rank-one matrix: exact zero pivot without a ridge
        let v = [C64::new(1.0, 0.0), C64::new(0.0, 1.0)];
        let mut a = CMat::zeros(2);
        for i in 0..2 {
            for j in 0..2 {
                a.set(i, j, v[i] * v[j].conj());
            }
        }
        let ch = cholesky_with_ridge(&a).unwrap();
        assert!(ch.ridge > 0.0);
    }

    #[test]
    fn indefinite_matrix_is_a_hard_error() {
        let mut a = CMat::identity(2);
        a.set(1, 1, C64::new(-1.0, 0.0));
        assert!(matches!(
            cholesky_with_ridge(&a),
            Err(Error::Factorization { .. })
        ));
    }
}

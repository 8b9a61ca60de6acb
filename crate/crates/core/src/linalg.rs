//! Dense Cholesky helpers with the jitter policy shared by every consumer.
//!
//! A failed factorization is retried with `eps * scale * I` added to the
//! diagonal, `eps` growing by 10x from [`JITTER_START`] to [`JITTER_MAX`].

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;

/// Whether the first attempt is made without any jitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstTry {
    Exact,
    Jittered,
}

#[derive(Debug, Clone)]
pub struct Cholesky {
    llt: Llt<f64>,
    /// Absolute diagonal value that was added, `eps * scale`.
    jitter: f64,
}

impl Cholesky {
    /// Factors the symmetric matrix `a`, reading the lower triangle only.
    ///
    /// `scale` is the reference magnitude the relative jitter is applied to,
    /// usually `k(0)` of the kernel that produced `a`.
    pub fn factor(a: MatRef<'_, f64>, scale: f64, first: FirstTry) -> Result<Self> {
        let n = a.nrows();
        let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
        if first == FirstTry::Exact {
            if let Ok(llt) = a.llt(Side::Lower) {
                return Ok(Self { llt, jitter: 0.0 });
            }
        }
        let mut eps = JITTER_START;
        let mut work = a.to_owned();
        while eps <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = eps * scale;
            for i in 0..n {
                work[(i, i)] = a[(i, i)] + jitter;
            }
            if let Ok(llt) = work.llt(Side::Lower) {
                return Ok(Self { llt, jitter });
            }
            eps *= 10.0;
        }
        Err(Error::Conditioning {
            size: n,
            jitter: JITTER_MAX * scale,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn l(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    /// `log |A|` of the (jittered) factored matrix.
    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Overwrites `rhs` with `L^{-1} rhs`.
    pub fn solve_lower_in_place(&self, mut rhs: Mat<f64>) -> Mat<f64> {
        self.llt.L().solve_lower_triangular_in_place(rhs.as_mut());
        rhs
    }

    /// Overwrites `rhs` with `L^{-T} rhs`.
    pub fn solve_upper_in_place(&self, mut rhs: Mat<f64>) -> Mat<f64> {
        self.llt
            .L()
            .transpose()
            .solve_upper_triangular_in_place(rhs.as_mut());
        rhs
    }

    /// `A^{-1} rhs`.
    pub fn solve(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        self.llt.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let x = self.solve(column(rhs).as_ref());
        to_vec(x.as_ref())
    }

    pub fn inverse(&self) -> Mat<f64> {
        self.llt.inverse()
    }
}

pub fn column(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

/// First column of `m` as a vector.
pub fn to_vec(m: MatRef<'_, f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, 0)]).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum_ij a_ij b_ij`
pub fn frobenius_inner(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    debug_assert_eq!(a.nrows(), b.nrows());
    debug_assert_eq!(a.ncols(), b.ncols());
    let mut acc = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            acc += a[(i, j)] * b[(i, j)];
        }
    }
    acc
}

pub fn trace(a: MatRef<'_, f64>) -> f64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)]).sum()
}

pub fn mat_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.ncols(), x.len());
    let mut out = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += a[(i, j)] * xj;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_factor_has_no_jitter() {
        let a = Mat::from_fn(2, 2, |i, j| if i == j { 2.0 } else { 1.0 });
        let c = Cholesky::factor(a.as_ref(), 2.0, FirstTry::Exact).unwrap();
        assert_eq!(c.jitter(), 0.0);
        assert!((c.log_det() - 3f64.ln()).abs() < 1e-14);
        let x = c.solve_vec(&[3.0, 3.0]);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        // rank one
        let a = Mat::from_fn(3, 3, |_, _| 1.0);
        let c = Cholesky::factor(a.as_ref(), 1.0, FirstTry::Exact).unwrap();
        assert!(c.jitter() >= JITTER_START);
        assert!(c.jitter() <= JITTER_MAX);
    }

    #[test]
    fn negative_definite_fails() {
        let a = Mat::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 });
        let err = Cholesky::factor(a.as_ref(), 1.0, FirstTry::Jittered).unwrap_err();
        assert!(matches!(err, Error::Conditioning { size: 2, .. }));
    }

    #[test]
    fn triangular_solves_compose_to_full_solve() {
        let a = Mat::from_fn(4, 4, |i, j| {
            (-((i as f64) - (j as f64)).abs() / 2.0).exp() + if i == j { 0.5 } else { 0.0 }
        });
        let c = Cholesky::factor(a.as_ref(), 1.0, FirstTry::Exact).unwrap();
        let b = column(&[1.0, -2.0, 0.5, 3.0]);
        let via_tri = c.solve_upper_in_place(c.solve_lower_in_place(b.clone()));
        let direct = c.solve(b.as_ref());
        for i in 0..4 {
            assert!((via_tri[(i, 0)] - direct[(i, 0)]).abs() < 1e-12);
        }
    }
}

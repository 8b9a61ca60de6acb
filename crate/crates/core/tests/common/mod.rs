#![allow(dead_code)]

use gpss_core::gpcore::{sample_prior, GpMixturePrior};
use gpss_core::kernel::{Component, Kernel, MsmKernelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn dense_gram<K: Kernel>(k: &K, a: &[f64], b: &[f64]) -> Dense {
    a.iter()
        .map(|&x| b.iter().map(|&y| k.eval(x - y)).collect())
        .collect()
}

pub fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn add_diag(a: &Dense, d: f64) -> Dense {
    let mut out = a.clone();
    for (i, row) in out.iter_mut().enumerate() {
        row[i] += d;
    }
    out
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|r| {
            (0..cols)
                .map(|j| (0..inner).map(|k| r[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Dense) -> Dense {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

pub fn matvec(a: &Dense, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Gauss-Jordan inverse and log-determinant with partial pivoting.
pub fn inverse_and_logdet(a: &Dense) -> (Dense, f64) {
    let n = a.len();
    let mut m: Dense = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    let mut logdet = 0.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs()))
            .unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        assert!(piv != 0.0, "singular matrix");
        logdet += piv.abs().ln();
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    (m.into_iter().map(|r| r[n..].to_vec()).collect(), logdet)
}

pub fn trace(a: &Dense) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

pub struct Instance {
    pub prior: GpMixturePrior,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn random_kernel(rng: &mut ChaCha8Rng) -> MsmKernelParams {
    let d = rng.random_range(1..=3);
    let comps = (0..d)
        .map(|_| Component::from_hz(rng.random_range(0.2..1.0), rng.random_range(50.0..2500.0)))
        .collect();
    MsmKernelParams::new(
        rng.random_range(0.3..2.0),
        rng.random_range(2e-3..3e-2),
        comps,
    )
    .unwrap()
}

/// Random prior (1 to 3 sources) and a draw from it on an 8 kHz grid.
pub fn random_instance(seed: u64, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = rng.random_range(1..=3);
    let kernels: Vec<_> = (0..j).map(|_| random_kernel(&mut rng)).collect();
    let k0: f64 = kernels.iter().map(|k| k.eval(0.0)).sum();
    let noise = rng.random_range(0.05..0.5) * k0;
    let prior = GpMixturePrior::new(kernels, noise).unwrap();
    let offset = rng.random_range(0.0..1.0);
    let t: Vec<f64> = (0..n).map(|i| offset + i as f64 / 8000.0).collect();
    let y = sample_prior(&prior, &t, seed).unwrap().mixture;
    Instance { prior, t, y }
}

/// `m` distinct sorted sample positions out of `n`.
pub fn random_subset(seed: u64, n: usize, m: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let k = rng.random_range(i..n);
        idx.swap(i, k);
    }
    let mut out = idx[..m].to_vec();
    out.sort_unstable();
    out
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

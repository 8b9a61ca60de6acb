//! Separation quality metrics and synthetic benchmarks.
//!
//! `bss_eval` is the time-invariant projection variant: no filtering
//! distortion is allowed, every projection is onto whole-signal spans.

pub mod benchmark;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{self, Cholesky, FirstTry};

pub use benchmark::{make_benchmark, Benchmark, BenchmarkMetadata, BenchmarkSpec, NoteSequence};

/// Ratios are clamped to `±DB_CAP` so exact reconstructions stay finite.
pub const DB_CAP: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssMetrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    pub rmse: f64,
}

/// Orthogonal split of one estimate against the reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub target: Vec<f64>,
    pub interference: Vec<f64>,
    pub artifacts: Vec<f64>,
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::InputSize("rmse of empty vectors".into()));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// `10 log10(num / den)` clamped to `[-DB_CAP, DB_CAP]`.
pub fn db_ratio(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return if num > 0.0 { DB_CAP } else { -DB_CAP };
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

fn energy(v: &[f64]) -> f64 {
    linalg::dot(v, v)
}

struct References<'a> {
    sources: &'a [Vec<f64>],
    gram: Cholesky,
}

impl<'a> References<'a> {
    fn new(sources: &'a [Vec<f64>]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InputSize("no reference sources".into()));
        }
        let n = sources[0].len();
        for (j, s) in sources.iter().enumerate() {
            check_len(n, s.len())?;
            if energy(s) == 0.0 {
                return Err(Error::DegenerateReference(format!("reference source {j} is all zeros")));
            }
        }
        let j = sources.len();
        let g = Mat::from_fn(j, j, |a, b| linalg::dot(&sources[a], &sources[b]));
        let gram = Cholesky::factor(g.as_ref(), 0.0, FirstTry::Exact).map_err(|_| {
            Error::DegenerateReference("reference sources are linearly dependent".into())
        })?;
        if gram.jitter() > 0.0 {
            return Err(Error::DegenerateReference(
                "reference sources are linearly dependent".into(),
            ));
        }
        Ok(Self { sources, gram })
    }

    fn decompose(&self, estimate: &[f64], j: usize) -> Result<Decomposition> {
        let n = self.sources[0].len();
        check_len(n, estimate.len())?;
        let sj = &self.sources[j];
        let a = linalg::dot(estimate, sj) / energy(sj);
        let target: Vec<f64> = sj.iter().map(|v| a * v).collect();
        let rhs: Vec<f64> = self.sources.iter().map(|s| linalg::dot(s, estimate)).collect();
        let c = self.gram.solve_vec(&rhs);
        let mut proj = vec![0.0; n];
        for (ck, s) in c.iter().zip(self.sources) {
            for (p, v) in proj.iter_mut().zip(s) {
                *p += ck * v;
            }
        }
        let interference: Vec<f64> = proj.iter().zip(&target).map(|(p, t)| p - t).collect();
        let artifacts: Vec<f64> = estimate.iter().zip(&proj).map(|(e, p)| e - p).collect();
        Ok(Decomposition {
            target,
            interference,
            artifacts,
        })
    }
}

/// Splits `estimate` into target, interference and artifact components
/// relative to reference `j`.
pub fn decompose(true_sources: &[Vec<f64>], estimate: &[f64], j: usize) -> Result<Decomposition> {
    if j >= true_sources.len() {
        return Err(Error::InputSize(format!(
            "source index {j} out of range for {} references",
            true_sources.len()
        )));
    }
    References::new(true_sources)?.decompose(estimate, j)
}

pub fn bss_eval(true_sources: &[Vec<f64>], estimates: &[Vec<f64>]) -> Result<Vec<BssMetrics>> {
    check_len(true_sources.len(), estimates.len())?;
    let refs = References::new(true_sources)?;
    estimates
        .iter()
        .enumerate()
        .map(|(j, est)| {
            let d = refs.decompose(est, j)?;
            let distortion: Vec<f64> = d
                .interference
                .iter()
                .zip(&d.artifacts)
                .map(|(a, b)| a + b)
                .collect();
            let signal: Vec<f64> = d
                .target
                .iter()
                .zip(&d.interference)
                .map(|(a, b)| a + b)
                .collect();
            let et = energy(&d.target);
            Ok(BssMetrics {
                sdr: db_ratio(et, energy(&distortion)),
                sir: db_ratio(et, energy(&d.interference)),
                sar: db_ratio(energy(&signal), energy(&d.artifacts)),
                rmse: rmse(est, &true_sources[j])?,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

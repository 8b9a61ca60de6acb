//! Experiment drivers: the reference two-note benchmark, the sweep over the
//! number of kernel components, and the sparse vs dense timing comparison.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{bss_eval, median, Benchmark, BenchmarkSpec, BssMetrics};
use crate::framing::{make_plan, separate, LearningMethod, SeparateOptions, SeparationResult};
use crate::gpcore::GpMixturePrior;
use crate::kernel::{Component, MsmKernelParams};
use crate::kernelfit::{estimate_autocovariance, fit_msm, TrainingClip, DEFAULT_MAX_LAG};

pub const REFERENCE_SEED: u64 = 20_130_607;
pub const REFERENCE_RATE: f64 = 16_000.0;
pub const C4_HZ: f64 = 261.63;
pub const E4_HZ: f64 = 329.63;
pub const G4_HZ: f64 = 392.00;

/// Harmonic note prior: `harmonics` partials of `f0` with weights decaying
/// by `decay` per partial.
pub fn harmonic_kernel(f0: f64, harmonics: usize, decay: f64, lengthscale: f64) -> Result<MsmKernelParams> {
    let raw: Vec<f64> = (0..harmonics).map(|h| decay.powi(h as i32)).collect();
    let total: f64 = raw.iter().sum();
    let comps = raw
        .iter()
        .enumerate()
        .map(|(h, w)| Component::new(w / total, TAU * f0 * (h + 1) as f64))
        .collect();
    MsmKernelParams::new(1.0, lengthscale, comps)
}

/// C4 and E4 with six partials each, most of the energy in the first three.
pub fn reference_kernels() -> Result<Vec<MsmKernelParams>> {
    Ok(vec![
        harmonic_kernel(C4_HZ, 6, 0.3, 0.1)?,
        harmonic_kernel(E4_HZ, 6, 0.3, 0.1)?,
    ])
}

/// Two three-partial notes whose partials are at least 110 Hz apart.
pub fn disjoint_kernels() -> Result<Vec<MsmKernelParams>> {
    Ok(vec![
        harmonic_kernel(220.0, 3, 0.5, 0.1)?,
        harmonic_kernel(550.0, 3, 0.5, 0.1)?,
    ])
}

pub fn reference_spec(duration_s: f64, seed: u64) -> Result<BenchmarkSpec> {
    Ok(BenchmarkSpec::new(REFERENCE_RATE, duration_s, 1e-4, seed, &reference_kernels()?))
}

/// Seed of the training draw that accompanies a test benchmark.
pub fn training_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Fits one `d`-component kernel per isolated training source.
pub fn fit_kernels(training: &[Vec<f64>], rate: f64, d: usize, max_lag: f64, seed: u64) -> Result<Vec<MsmKernelParams>> {
    training
        .iter()
        .map(|src| {
            let clip = TrainingClip::new(src.clone(), rate)?;
            let target = estimate_autocovariance(&clip, max_lag, clip.default_window(max_lag))?;
            Ok(fit_msm(&target, d, seed)?.params)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub frame_seconds: f64,
    pub overlap: f64,
    pub max_lag: f64,
    pub fit_seed: u64,
    pub separate: SeparateOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            frame_seconds: 0.125,
            overlap: 0.5,
            max_lag: DEFAULT_MAX_LAG,
            fit_seed: 0,
            separate: SeparateOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub median_rmse: f64,
    pub median_sdr: f64,
    pub median_sir: f64,
    pub median_sar: f64,
    pub per_source: Vec<BssMetrics>,
    pub learn_seconds: f64,
}

impl SweepRow {
    fn from_metrics(d: usize, metrics: Vec<BssMetrics>, learn_seconds: f64) -> Self {
        let pick = |f: fn(&BssMetrics) -> f64| median(&metrics.iter().map(f).collect::<Vec<_>>());
        Self {
            d,
            median_rmse: pick(|m| m.rmse),
            median_sdr: pick(|m| m.sdr),
            median_sir: pick(|m| m.sir),
            median_sar: pick(|m| m.sar),
            per_source: metrics,
            learn_seconds,
        }
    }
}

/// Separates `bench` with a fitted prior and scores it.
pub fn separate_and_score(
    bench: &Benchmark,
    kernels: Vec<MsmKernelParams>,
    frame_seconds: f64,
    overlap: f64,
    opts: &SeparateOptions,
) -> Result<(SeparationResult, Vec<BssMetrics>)> {
    let rate = bench.metadata.sample_rate_hz;
    let plan = make_plan(bench.mixture.len(), rate, frame_seconds, overlap)?;
    let prior = GpMixturePrior::new(kernels, bench.metadata.noise_variance)?;
    let res = separate(&bench.mixture, &plan, &prior, opts)?;
    let metrics = bss_eval(&bench.true_sources, &res.sources)?;
    Ok((res, metrics))
}

/// For each `d`, refits every source kernel on `training` and separates
/// `test` with them.
pub fn d_sweep(training: &[Vec<f64>], test: &Benchmark, ds: &[usize], opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    let rate = test.metadata.sample_rate_hz;
    ds.iter()
        .map(|&d| {
            let kernels = fit_kernels(training, rate, d, opts.max_lag, opts.fit_seed)?;
            let (res, metrics) =
                separate_and_score(test, kernels, opts.frame_seconds, opts.overlap, &opts.separate)?;
            log::info!("D={d}: learning {:.2}s", res.learn_seconds());
            Ok(SweepRow::from_metrics(d, metrics, res.learn_seconds()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub sparse_learn_seconds: f64,
    pub full_learn_seconds: f64,
    pub speedup: f64,
    pub sparse_rmse: Vec<f64>,
    pub full_rmse: Vec<f64>,
    pub mean_inducing: f64,
}

/// Runs the same separation with sparse and dense amplitude learning.
pub fn compare_sparse_full(
    bench: &Benchmark,
    kernels: Vec<MsmKernelParams>,
    frame_seconds: f64,
    overlap: f64,
    base: &SeparateOptions,
) -> Result<TimingReport> {
    let sparse_opts = SeparateOptions {
        method: LearningMethod::Sparse,
        ..base.clone()
    };
    let full_opts = SeparateOptions {
        method: LearningMethod::Exact,
        ..base.clone()
    };
    let (sparse, ms) = separate_and_score(bench, kernels.clone(), frame_seconds, overlap, &sparse_opts)?;
    let (full, mf) = separate_and_score(bench, kernels, frame_seconds, overlap, &full_opts)?;
    let mean_inducing =
        sparse.per_frame.iter().map(|r| r.m as f64).sum::<f64>() / sparse.per_frame.len() as f64;
    Ok(TimingReport {
        sparse_learn_seconds: sparse.learn_seconds(),
        full_learn_seconds: full.learn_seconds(),
        speedup: full.learn_seconds() / sparse.learn_seconds(),
        sparse_rmse: ms.iter().map(|m| m.rmse).collect(),
        full_rmse: mf.iter().map(|m| m.rmse).collect(),
        mean_inducing,
    })
}

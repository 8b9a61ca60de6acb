//! Learning a source kernel from one isolated recording.
//!
//! The recording is treated as a single realization of a zero-mean,
//! covariance-ergodic process: its autocovariance is estimated by a time
//! average over a window, and an MSM kernel is fitted to that curve by
//! minimizing the mean squared difference over the lag grid.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::kernel::{Component, MsmKernelParams};
use crate::optim::{self, LbfgsOptions};

/// Default largest lag of the estimate, in seconds.
pub const DEFAULT_MAX_LAG: f64 = 0.030;

#[derive(Debug, Clone)]
pub struct TrainingClip {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl TrainingClip {
    /// Builds a clip; the sample mean is removed.
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InputSize(format!(
                "training clip needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::ParameterDomain("training clip has non-finite samples".into()));
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let samples = samples.into_iter().map(|v| v - mean).collect();
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Averaging window that uses every sample available for `max_lag`.
    pub fn default_window(&self, max_lag: f64) -> f64 {
        let lags = seconds_to_samples(max_lag, self.sample_rate) + 1;
        self.samples.len().saturating_sub(lags - 1) as f64 / self.sample_rate
    }
}

fn seconds_to_samples(seconds: f64, rate: f64) -> usize {
    (seconds * rate + 1e-9).floor().max(0.0) as usize
}

/// Empirical autocovariance on a uniform lag grid starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AutocovEstimate {
    pub lags: Vec<f64>,
    pub values: Vec<f64>,
    pub window_seconds: f64,
}

impl AutocovEstimate {
    pub fn new(lags: Vec<f64>, values: Vec<f64>, window_seconds: f64) -> Result<Self> {
        if lags.len() != values.len() {
            return Err(Error::LengthMismatch {
                expected: lags.len(),
                actual: values.len(),
            });
        }
        if lags.len() < 2 {
            return Err(Error::InputSize("autocovariance needs at least 2 lags".into()));
        }
        if lags[0] != 0.0 || lags.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::ParameterDomain(
                "lags must start at 0 and increase strictly".into(),
            ));
        }
        if !(values[0] > 0.0) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateSignal(
                "autocovariance at lag 0 must be positive".into(),
            ));
        }
        Ok(Self {
            lags,
            values,
            window_seconds,
        })
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    pub fn max_lag(&self) -> f64 {
        *self.lags.last().unwrap_or(&0.0)
    }

    fn lag_step(&self) -> f64 {
        self.lags[1] - self.lags[0]
    }
}

/// Biased time-average estimate
/// `C(k) = (1/M) Σ_{i<M} g[i+k] g[i]` for `k = 0..=⌊max_lag·fs⌋`,
/// with `M = ⌊window·fs⌋`.
pub fn estimate_autocovariance(
    clip: &TrainingClip,
    max_lag: f64,
    window: f64,
) -> Result<AutocovEstimate> {
    let rate = clip.sample_rate;
    if !(window > 0.0) || !(max_lag >= 0.0) {
        return Err(Error::ParameterDomain(format!(
            "window must be positive and max_lag non-negative (window={window}, max_lag={max_lag})"
        )));
    }
    let m = seconds_to_samples(window, rate);
    let nc = seconds_to_samples(max_lag, rate) + 1;
    let g = &clip.samples;
    if m == 0 || m + nc - 1 > g.len() {
        return Err(Error::InputSize(format!(
            "clip of {} samples is too short for window {m} + {} lags",
            g.len(),
            nc - 1
        )));
    }
    let values: Vec<f64> = (0..nc)
        .map(|k| {
            let s: f64 = g[k..k + m].iter().zip(&g[..m]).map(|(a, b)| a * b).sum();
            s / m as f64
        })
        .collect();
    if !(values[0] > 0.0) {
        return Err(Error::DegenerateSignal(
            "clip is silent: zero autocovariance at lag 0".into(),
        ));
    }
    let lags = (0..nc).map(|k| k as f64 / rate).collect();
    AutocovEstimate::new(lags, values, m as f64 / rate)
}

/// Mean squared difference between the kernel and the estimate on its lags.
pub fn msm_mse(params: &MsmKernelParams, target: &AutocovEstimate) -> f64 {
    let n = target.len() as f64;
    target
        .lags
        .iter()
        .zip(&target.values)
        .map(|(&tau, &c)| (params.eval(tau) - c).powi(2))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: MsmKernelParams,
    pub final_mse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted optimizer step of the winning start.
    pub trace: Vec<f64>,
    /// Seed of the winning start.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 4,
            max_iter: 2000,
            rel_tol: 1e-9,
        }
    }
}

/// Local maxima of a magnitude spectrum, largest first; equal magnitudes
/// keep the lower bin first.
pub(crate) fn spectral_peaks(mag: &[f64]) -> Vec<usize> {
    let n = mag.len();
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&k| {
            let left = k == 0 || mag[k] > mag[k - 1];
            let right = k + 1 == n || mag[k] > mag[k + 1];
            left && right && n > 1
        })
        .collect();
    peaks.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
    peaks
}

/// Deterministic starting point: frequencies at the `d` largest peaks of the
/// zero-padded, lag-windowed DFT of the estimate, weights proportional to peak height and
/// summing to one, `σ² = C(0)`, `ℓ = max_lag / 3`.
pub fn init_msm(target: &AutocovEstimate, d: usize, seed: u64) -> Result<MsmKernelParams> {
    if d == 0 {
        return Err(Error::ParameterDomain("need at least one component".into()));
    }
    let step = target.lag_step();
    let nfft = (8 * target.len()).next_power_of_two().max(1024);
    // Blackman-Tukey estimate: Hann lag window, even extension. Without the
    // taper the truncation sidelobes of strong partials outrank weak ones.
    let nc = target.len();
    let mut buf: Vec<Complex<f64>> = (0..nfft)
        .map(|i| {
            let v = target.values.get(i).copied().unwrap_or(0.0);
            let w = 0.5 * (1.0 + (PI * i as f64 / nc as f64).cos());
            Complex::new(v * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let c0 = target.values[0];
    let mag: Vec<f64> = buf[..=nfft / 2]
        .iter()
        .map(|c| (2.0 * c.re - c0).max(0.0))
        .collect();

    let bin_to_omega = |k: usize| 2.0 * PI * k as f64 / (nfft as f64 * step);
    let nyquist = PI / step;

    let peaks = spectral_peaks(&mag);
    let mut comps: Vec<Component> = peaks
        .iter()
        .take(d)
        .map(|&k| Component::new(mag[k], bin_to_omega(k)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = if comps.is_empty() {
        1.0
    } else {
        comps.iter().map(|c| c.weight).sum::<f64>() / comps.len() as f64
    };
    while comps.len() < d {
        comps.push(Component::new(fill, rng.random_range(0.0..nyquist)));
    }
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    let floor = 1e-12;
    for c in &mut comps {
        c.weight = (c.weight / total).max(floor);
    }
    MsmKernelParams::new(target.values[0], target.max_lag() / 3.0, comps)
}

/// Unconstrained parameterization used by the optimizer:
/// `[ln ℓ, ln a_1..a_D, u_1..u_D]` with `a_d = σ² α²_d / C(0)` and
/// `u_d = ω_d · max_lag`.
struct FitProblem<'a> {
    target: &'a AutocovEstimate,
    scale: f64,
    freq_unit: f64,
    d: usize,
}

impl<'a> FitProblem<'a> {
    fn new(target: &'a AutocovEstimate, d: usize) -> Self {
        Self {
            target,
            scale: target.values[0],
            freq_unit: target.max_lag().max(target.lag_step()),
            d,
        }
    }

    fn encode(&self, p: &MsmKernelParams) -> Vec<f64> {
        let mut x = Vec::with_capacity(1 + 2 * self.d);
        x.push(p.lengthscale().ln());
        for c in p.components() {
            x.push((p.variance() * c.weight / self.scale).max(1e-300).ln());
        }
        for c in p.components() {
            x.push(c.angular_frequency * self.freq_unit);
        }
        x
    }

    fn decode(&self, x: &[f64]) -> Result<MsmKernelParams> {
        let d = self.d;
        let a: Vec<f64> = x[1..1 + d].iter().map(|v| v.exp()).collect();
        let total: f64 = a.iter().sum();
        let comps = a
            .iter()
            .zip(&x[1 + d..])
            .map(|(&ai, &u)| Component::new(ai / total, (u / self.freq_unit).abs()))
            .collect();
        MsmKernelParams::new(total * self.scale, x[0].exp(), comps)
    }

    /// Normalized objective `mse / C(0)²` and its gradient.
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.d;
        let ell = x[0].exp();
        let a: Vec<f64> = x[1..1 + d].iter().map(|v| v.exp()).collect();
        let omega: Vec<f64> = x[1 + d..].iter().map(|u| u / self.freq_unit).collect();
        let n = self.target.len() as f64;
        let mut f = 0.0;
        let mut g = vec![0.0; 1 + 2 * d];
        let mut cs = vec![(0.0, 0.0); d];
        for (&tau, &c) in self.target.lags.iter().zip(&self.target.values) {
            let decay = (-tau / ell).exp();
            let mut mix = 0.0;
            for k in 0..d {
                let (s, co) = (omega[k] * tau).sin_cos();
                cs[k] = (s, co);
                mix += a[k] * co;
            }
            let model = decay * mix;
            let r = model - c / self.scale;
            f += r * r;
            let w = 2.0 * r / n;
            g[0] += w * model * tau / ell;
            for k in 0..d {
                g[1 + k] += w * a[k] * decay * cs[k].1;
                g[1 + d + k] -= w * a[k] * decay * cs[k].0 * tau / self.freq_unit;
            }
        }
        Ok((f / n, g))
    }
}

/// Single-start refinement from `init`.
pub fn refine_msm(
    target: &AutocovEstimate,
    init: &MsmKernelParams,
    opts: &FitOptions,
) -> Result<FitReport> {
    let d = init.num_components();
    let problem = FitProblem::new(target, d);
    let x0 = problem.encode(init);
    let lopts = LbfgsOptions {
        max_iter: opts.max_iter,
        rel_tol: opts.rel_tol,
        grad_tol: 1e-14,
        history: 10,
        ..Default::default()
    };
    let outcome = optim::minimize(|x| problem.eval(x), &x0, &lopts).map_err(|e| match e {
        Error::Optimization { reason, .. } => Error::FitFailure { reason, best: None },
        other => other,
    })?;
    let params = problem.decode(&outcome.x).map_err(|e| Error::FitFailure {
        reason: format!("fitted parameters left the valid domain: {e}"),
        best: None,
    })?;
    let final_mse = msm_mse(&params, target);
    let scale2 = problem.scale * problem.scale;
    let report = FitReport {
        params,
        final_mse,
        iterations: outcome.iterations,
        converged: outcome.converged,
        trace: outcome.trace.iter().map(|v| v * scale2).collect(),
        seed: 0,
    };
    if !final_mse.is_finite() {
        return Err(Error::FitFailure {
            reason: "non-finite objective at the final iterate".into(),
            best: Some(Box::new(report)),
        });
    }
    Ok(report)
}

/// Multi-start fit of a `d`-component kernel. Start 0 is [`init_msm`]; the
/// others are seeded log-normal perturbations of it. The best start by
/// `(mse, seed)` wins, independent of the order starts finish in.
pub fn fit_msm(target: &AutocovEstimate, d: usize, seed: u64) -> Result<FitReport> {
    fit_msm_with(target, d, seed, &FitOptions::default())
}

pub fn fit_msm_with(
    target: &AutocovEstimate,
    d: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<FitReport> {
    let base = init_msm(target, d, seed)?;
    let restarts = opts.restarts.max(1);
    let runs: Vec<(u64, Result<FitReport>)> = (0..restarts as u64)
        .into_par_iter()
        .map(|r| {
            let run_seed = seed.wrapping_add(r);
            let init = if r == 0 {
                Ok(base.clone())
            } else {
                perturb(&base, run_seed)
            };
            let res = init.and_then(|p| refine_msm(target, &p, opts)).map(|mut rep| {
                rep.seed = run_seed;
                rep
            });
            (run_seed, res)
        })
        .collect();

    let mut best: Option<FitReport> = None;
    let mut first_err = None;
    for (_, res) in runs {
        match res {
            Ok(rep) => {
                let better = match &best {
                    None => true,
                    Some(b) => rep
                        .final_mse
                        .total_cmp(&b.final_mse)
                        .then(rep.seed.cmp(&b.seed))
                        .is_lt(),
                };
                if better {
                    best = Some(rep);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some(b) => Ok(b),
        None => Err(first_err.unwrap_or_else(|| Error::FitFailure {
            reason: "no start produced a result".into(),
            best: None,
        })),
    }
}

fn perturb(base: &MsmKernelParams, seed: u64) -> Result<MsmKernelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let ell = base.lengthscale() * (0.5 * normal()).exp();
    let comps = base
        .components()
        .iter()
        .map(|c| {
            Component::new(
                c.weight * (0.5 * normal()).exp(),
                c.angular_frequency * (0.05 * normal()).exp(),
            )
        })
        .collect();
    MsmKernelParams::new(base.variance(), ell, comps)
}

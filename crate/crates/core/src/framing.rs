//! Frame-wise separation of a long mixture.
//!
//! The mixture is cut into overlapping rectangular frames. Each frame gets
//! its own source amplitudes (learned on the sparse bound, or on the exact
//! marginal likelihood for the dense baseline) and an exact posterior; the
//! per-frame source means are then windowed and overlap-added.

use std::time::Instant;

use faer::{Mat, Scale};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, domain, Error, Result};
use crate::gpcore::{posterior_with_grams, ExactObjective, GpMixturePrior};
use crate::kernel::{gram_from_lags, lag_table};
use crate::linalg;
use crate::sparsevi::{
    learn_with, select_inducing_extrema, ExactAmplitude, LearnOptions, ParamMask, SparseObjective,
};

pub const DEFAULT_FRAME_SECONDS: f64 = 0.125;
pub const DEFAULT_OVERLAP: f64 = 0.5;
/// Initial frame noise variance relative to the frame's sample variance.
pub const DEFAULT_NOISE_RATIO: f64 = 1e-3;
/// Lower limit of the initial noise variance (silent frames).
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub signal_len: usize,
    pub sample_rate: f64,
    pub frame_length: usize,
    pub hop: usize,
    pub num_frames: usize,
    /// Synthesis window, normalized so shifted copies sum to one.
    pub window: Vec<f64>,
}

impl FramePlan {
    /// Length of the zero-padded signal covered by all frames.
    pub fn padded_len(&self) -> usize {
        (self.num_frames - 1) * self.hop + self.frame_length
    }

    pub fn frame_start(&self, w: usize) -> usize {
        w * self.hop
    }

    /// Sum of the window copies covering sample `i`.
    pub fn coverage(&self, i: usize) -> f64 {
        (0..self.num_frames)
            .filter_map(|w| {
                let s = self.frame_start(w);
                (i >= s && i < s + self.frame_length).then(|| self.window[i - s])
            })
            .sum()
    }
}

/// Frame length is `round(frame_seconds · rate)` bumped to the next odd
/// number; the window is a periodic Hann (rectangular without overlap)
/// divided by its own overlap sum so it is exactly COLA at the chosen hop.
pub fn make_plan(n: usize, sample_rate: f64, frame_seconds: f64, overlap: f64) -> Result<FramePlan> {
    if n == 0 {
        return Err(Error::InputSize("cannot frame an empty signal".into()));
    }
    if !(sample_rate > 0.0 && frame_seconds > 0.0) {
        return Err(domain("sample rate and frame length must be positive"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(domain(format!("overlap must be in [0, 1), got {overlap}")));
    }
    let mut frame_length = (frame_seconds * sample_rate).round() as usize;
    if frame_length % 2 == 0 {
        frame_length += 1;
    }
    let hop = (frame_length as f64 * (1.0 - overlap)).round() as usize;
    if hop == 0 {
        return Err(domain(format!("overlap {overlap} leaves a hop of zero samples")));
    }
    let hop = hop.min(frame_length);
    let window = if hop == frame_length {
        vec![1.0; frame_length]
    } else {
        let n_f = frame_length as f64;
        let hann: Vec<f64> = (0..frame_length)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_f).cos())
            .collect();
        let mut sums = vec![0.0; hop];
        for (i, &v) in hann.iter().enumerate() {
            sums[i % hop] += v;
        }
        hann.iter()
            .enumerate()
            .map(|(i, &v)| v / sums[i % hop])
            .collect()
    };
    let num_frames = if n <= frame_length {
        1
    } else {
        (n - frame_length).div_ceil(hop) + 1
    };
    Ok(FramePlan {
        signal_len: n,
        sample_rate,
        frame_length,
        hop,
        num_frames,
        window,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub start: usize,
    /// Absolute times in seconds.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Frame `w` covers samples `[w·hop, w·hop + frame_length)`; samples past
/// the end of `y` are zero.
pub fn extract_frames(y: &[f64], plan: &FramePlan) -> Vec<Frame> {
    (0..plan.num_frames)
        .map(|w| {
            let start = plan.frame_start(w);
            let values = (start..start + plan.frame_length)
                .map(|i| y.get(i).copied().unwrap_or(0.0))
                .collect();
            let times = (start..start + plan.frame_length)
                .map(|i| i as f64 / plan.sample_rate)
                .collect();
            Frame {
                index: w,
                start,
                times,
                values,
            }
        })
        .collect()
}

/// Windowed overlap-add back to `plan.signal_len` samples. Where the window
/// copies do not sum to one (the outer half frames) the sum is renormalized
/// by the actual coverage.
pub fn overlap_add(frames: &[Vec<f64>], plan: &FramePlan) -> Result<Vec<f64>> {
    check_len(plan.num_frames, frames.len())?;
    let total = plan.padded_len();
    let mut num = vec![0.0; total];
    let mut cov = vec![0.0; total];
    let mut plain = vec![0.0; total];
    for (w, f) in frames.iter().enumerate() {
        check_len(plan.frame_length, f.len())?;
        let s = plan.frame_start(w);
        for (k, &v) in f.iter().enumerate() {
            num[s + k] += plan.window[k] * v;
            cov[s + k] += plan.window[k];
            plain[s + k] += v;
        }
    }
    let out = (0..plan.signal_len)
        .map(|i| {
            let c = cov[i];
            if (c - 1.0).abs() <= 1e-9 {
                num[i]
            } else if c > 0.0 {
                num[i] / c
            } else {
                // zero-weight endpoint of a tapered window
                let covering = (0..plan.num_frames)
                    .filter(|&w| {
                        let s = plan.frame_start(w);
                        i >= s && i < s + plan.frame_length
                    })
                    .count();
                plain[i] / covering.max(1) as f64
            }
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearningMethod {
    /// Collapsed bound with inducing points at the frame extrema.
    Sparse,
    /// Exact log marginal likelihood on the dense frame covariance.
    Exact,
}

#[derive(Debug, Clone)]
pub struct SeparateOptions {
    pub method: LearningMethod,
    /// Cap on the number of inducing points; `None` means `frame_length / 4`.
    pub m_max: Option<usize>,
    pub learn_noise: bool,
    pub noise_ratio: f64,
    pub learn: LearnOptions,
    /// Abort on the first failing frame instead of zero-filling it.
    pub strict: bool,
    /// Worker threads; 0 uses the available parallelism.
    pub jobs: usize,
}

impl Default for SeparateOptions {
    fn default() -> Self {
        Self {
            method: LearningMethod::Sparse,
            m_max: None,
            learn_noise: false,
            noise_ratio: DEFAULT_NOISE_RATIO,
            learn: LearnOptions::default(),
            strict: false,
            jobs: 0,
        }
    }
}

/// Per-frame diagnostics, one JSON-lines record each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub w: usize,
    pub elbo: f64,
    pub sigma2: Vec<f64>,
    pub noise_variance: f64,
    pub m: usize,
    /// Wall time of the whole frame, milliseconds.
    pub ms: f64,
    /// Wall time of amplitude learning only, milliseconds.
    pub learn_ms: f64,
    pub iterations: usize,
    pub converged: bool,
    pub silent: Vec<bool>,
    /// `‖Σ_j source means - frame‖₂`.
    pub residual: f64,
    /// `‖Σ_j source means - mixture mean‖₂`.
    pub additivity_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SeparationResult {
    pub sources: Vec<Vec<f64>>,
    pub per_frame: Vec<FrameRecord>,
    pub plan: FramePlan,
    pub prior_template: GpMixturePrior,
}

impl SeparationResult {
    /// Total amplitude-learning wall time over all frames, seconds.
    pub fn learn_seconds(&self) -> f64 {
        self.per_frame.iter().map(|r| r.learn_ms).sum::<f64>() / 1000.0
    }

    /// Learned prior of frame `w`.
    pub fn frame_prior(&self, w: usize) -> Result<GpMixturePrior> {
        let r = &self.per_frame[w];
        self.prior_template
            .with_variances(&r.sigma2)?
            .with_noise(r.noise_variance)
    }
}

/// Unit-variance lag tables of every source on the plan's grid.
fn unit_tables(prior: &GpMixturePrior, plan: &FramePlan) -> Result<Vec<Vec<f64>>> {
    prior
        .kernels()
        .iter()
        .map(|k| {
            let unit = k.with_variance(1.0)?;
            Ok(lag_table(&unit, 1.0 / plan.sample_rate, plan.frame_length))
        })
        .collect()
}

fn frame_noise(values: &[f64], ratio: f64) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (ratio * var).max(NOISE_FLOOR)
}

struct FrameOutput {
    means: Vec<Vec<f64>>,
    record: FrameRecord,
}

fn posterior_on_frame(
    tables: &[Vec<f64>],
    unit_grams: Option<&[Mat<f64>]>,
    prior: &GpMixturePrior,
    y: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let idx: Vec<usize> = (0..y.len()).collect();
    let grams: Vec<Mat<f64>> = prior
        .variances()
        .iter()
        .enumerate()
        .map(|(j, &s)| match unit_grams {
            Some(g) => &g[j] * Scale(s),
            None => gram_from_lags(&tables[j], &idx, &idx) * Scale(s),
        })
        .collect();
    let post = posterior_with_grams(&grams, prior.noise_variance(), prior.mixture_k0(), y, false)?;
    Ok((post.source_means, post.mixture_mean))
}

fn process_frame(
    frame: &crate::framing::Frame,
    template: &GpMixturePrior,
    tables: &[Vec<f64>],
    opts: &SeparateOptions,
) -> Result<FrameOutput> {
    let started = Instant::now();
    let j = template.num_sources();
    let y = &frame.values;
    let prior = template.with_noise(frame_noise(y, opts.noise_ratio))?;
    let mask = ParamMask::variances_only(j).with_noise(opts.learn_noise);

    let learn_start = Instant::now();
    let (report, m, unit_grams) = match opts.method {
        LearningMethod::Sparse => {
            let m_max = opts.m_max.unwrap_or(frame.values.len() / 4).max(1);
            let z = select_inducing_extrema(y, &frame.times, m_max);
            let idx = z.indices().expect("extrema are frame samples");
            let obj = SparseObjective::from_lag_tables(tables, idx, y);
            (learn_with(&prior, &obj, &mask, &opts.learn)?, z.len(), None)
        }
        LearningMethod::Exact => {
            let idx: Vec<usize> = (0..y.len()).collect();
            let grams: Vec<Mat<f64>> = tables.iter().map(|t| gram_from_lags(t, &idx, &idx)).collect();
            let k0 = tables.iter().map(|t| t[0]).collect();
            let obj = ExactObjective::from_unit_grams(grams.clone(), k0, y.clone());
            let amp = ExactAmplitude {
                objective: &obj,
                y_zero: y.iter().all(|&v| v == 0.0),
            };
            (learn_with(&prior, &amp, &mask, &opts.learn)?, y.len(), Some(grams))
        }
    };
    let learn_ms = learn_start.elapsed().as_secs_f64() * 1e3;

    let (means, mixture_mean) = posterior_on_frame(tables, unit_grams.as_deref(), &report.learned, y)?;
    let sum: Vec<f64> = (0..y.len())
        .map(|i| means.iter().map(|m| m[i]).sum())
        .collect();
    let residual = sum
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let additivity_error = sum
        .iter()
        .zip(&mixture_mean)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();

    Ok(FrameOutput {
        means,
        record: FrameRecord {
            w: frame.index,
            elbo: report.value,
            sigma2: report.learned.variances(),
            noise_variance: report.learned.noise_variance(),
            m,
            ms: started.elapsed().as_secs_f64() * 1e3,
            learn_ms,
            iterations: report.iterations,
            converged: report.converged,
            silent: report.silent,
            residual,
            additivity_error,
            error: None,
        },
    })
}

fn run_pool<T: Send, F: Fn(usize) -> T + Sync + Send>(jobs: usize, count: usize, f: F) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| domain(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| (0..count).into_par_iter().map(&f).collect()))
}

/// Separates `y` into one waveform per kernel of `prior_template`.
pub fn separate(
    y: &[f64],
    plan: &FramePlan,
    prior_template: &GpMixturePrior,
    opts: &SeparateOptions,
) -> Result<SeparationResult> {
    check_len(plan.signal_len, y.len())?;
    // frames are the unit of parallelism; keep dense kernels single-threaded
    // so results do not depend on the worker count
    faer::set_global_parallelism(faer::Par::Seq);
    let tables = unit_tables(prior_template, plan)?;
    let frames = extract_frames(y, plan);
    let j = prior_template.num_sources();

    let outputs = run_pool(opts.jobs, frames.len(), |w| {
        process_frame(&frames[w], prior_template, &tables, opts)
    })?;

    let mut per_source: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(frames.len()); j];
    let mut per_frame = Vec::with_capacity(frames.len());
    for (w, out) in outputs.into_iter().enumerate() {
        match out {
            Ok(o) => {
                for (s, m) in o.means.into_iter().enumerate() {
                    per_source[s].push(m);
                }
                per_frame.push(o.record);
            }
            Err(e) if !opts.strict => {
                log::warn!("frame {w} failed, substituting zeros: {e}");
                for src in per_source.iter_mut() {
                    src.push(vec![0.0; plan.frame_length]);
                }
                per_frame.push(FrameRecord {
                    w,
                    elbo: f64::NAN,
                    sigma2: prior_template.variances(),
                    noise_variance: prior_template.noise_variance(),
                    m: 0,
                    ms: 0.0,
                    learn_ms: 0.0,
                    iterations: 0,
                    converged: false,
                    silent: vec![false; j],
                    residual: f64::NAN,
                    additivity_error: f64::NAN,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        }
    }

    let sources = per_source
        .iter()
        .map(|frames| overlap_add(frames, plan))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparationResult {
        sources,
        per_frame,
        plan: plan.clone(),
        prior_template: prior_template.clone(),
    })
}

/// Posterior reconstruction with given per-frame priors, no learning.
pub fn reconstruct(y: &[f64], plan: &FramePlan, frame_priors: &[GpMixturePrior]) -> Result<Vec<Vec<f64>>> {
    check_len(plan.signal_len, y.len())?;
    check_len(plan.num_frames, frame_priors.len())?;
    let template = &frame_priors[0];
    let tables = unit_tables(template, plan)?;
    let frames = extract_frames(y, plan);
    let mut per_source: Vec<Vec<Vec<f64>>> = vec![Vec::new(); template.num_sources()];
    for (frame, prior) in frames.iter().zip(frame_priors) {
        let (means, _) = posterior_on_frame(&tables, None, prior, &frame.values)?;
        for (s, m) in means.into_iter().enumerate() {
            per_source[s].push(m);
        }
    }
    per_source.iter().map(|f| overlap_add(f, plan)).collect()
}

/// Mixture-consistency check: `‖Σ_j sources - y‖₂ / ‖y‖₂`.
pub fn relative_residual(sources: &[Vec<f64>], y: &[f64]) -> f64 {
    let sum: Vec<f64> = (0..y.len())
        .map(|i| sources.iter().map(|s| s[i]).sum::<f64>() - y[i])
        .collect();
    let ny = linalg::dot(y, y).sqrt();
    if ny == 0.0 {
        linalg::dot(&sum, &sum).sqrt()
    } else {
        linalg::dot(&sum, &sum).sqrt() / ny
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::MsmKernelParams;

    #[test]
    fn default_plan_at_16k_has_2001_samples() {
        let p = make_plan(32000, 16000.0, DEFAULT_FRAME_SECONDS, DEFAULT_OVERLAP).unwrap();
        assert_eq!(p.frame_length, 2001);
        assert_eq!(p.hop, 1001);
        assert_eq!(p.num_frames, (32000usize - 2001).div_ceil(1001) + 1);
    }

    #[test]
    fn no_overlap_means_rectangular() {
        let p = make_plan(1000, 1000.0, 0.1, 0.0).unwrap();
        assert_eq!(p.hop, p.frame_length);
        assert!(p.window.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn short_signal_is_a_single_padded_frame() {
        let p = make_plan(50, 1000.0, 0.1, 0.5).unwrap();
        assert_eq!(p.num_frames, 1);
        let f = extract_frames(&vec![1.0; 50], &p);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].values.len(), 101);
        assert!(f[0].values[50..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_hop_rejected() {
        assert!(make_plan(100, 10.0, 0.1, 0.99).is_err());
        assert!(make_plan(100, 1000.0, 0.1, 1.0).is_err());
        assert!(make_plan(0, 1000.0, 0.1, 0.5).is_err());
    }

    #[test]
    fn frame_of_exact_length() {
        let p = make_plan(2001, 16000.0, 0.125, 0.5).unwrap();
        assert_eq!(p.num_frames, 1);
    }

    #[test]
    fn consecutive_frames_share_overlap() {
        let p = make_plan(5000, 1000.0, 0.2, 0.5).unwrap();
        let y: Vec<f64> = (0..5000).map(|i| i as f64).collect();
        let f = extract_frames(&y, &p);
        for w in 0..f.len() {
            assert_eq!(f[w].values[0], (w * p.hop) as f64);
        }
        let shared = p.frame_length - p.hop;
        assert_eq!(&f[0].values[p.hop..], &f[1].values[..shared]);
        assert!((f[1].times[0] - p.hop as f64 / 1000.0).abs() < 1e-15);
    }

    #[test]
    fn window_is_cola_in_the_interior() {
        for (rate, secs, ov) in [(16000.0, 0.125, 0.5), (1000.0, 0.05, 0.75), (800.0, 0.1, 0.3)] {
            let p = make_plan(20_000, rate, secs, ov).unwrap();
            for i in p.frame_length..p.padded_len() - p.frame_length {
                assert!((p.coverage(i) - 1.0).abs() < 1e-10, "{rate} {ov} at {i}");
            }
        }
    }

    #[test]
    fn single_rectangular_frame_round_trips() {
        let p = make_plan(11, 100.0, 0.11, 0.0).unwrap();
        let y: Vec<f64> = (0..11).map(|i| (i as f64).sin()).collect();
        let frames: Vec<Vec<f64>> = extract_frames(&y, &p).into_iter().map(|f| f.values).collect();
        assert_eq!(overlap_add(&frames, &p).unwrap(), y);
    }

    #[test]
    fn zero_frames_give_zero_signal() {
        let p = make_plan(3000, 1000.0, 0.2, 0.5).unwrap();
        let frames = vec![vec![0.0; p.frame_length]; p.num_frames];
        assert!(overlap_add(&frames, &p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlap_add_rejects_bad_lengths() {
        let p = make_plan(3000, 1000.0, 0.2, 0.5).unwrap();
        let frames = vec![vec![0.0; p.frame_length - 1]; p.num_frames];
        assert!(overlap_add(&frames, &p).is_err());
        assert!(overlap_add(&frames[1..], &p).is_err());
    }

    #[test]
    fn extract_then_overlap_add_is_identity() {
        let p = make_plan(4321, 1000.0, 0.125, 0.5).unwrap();
        let y: Vec<f64> = (0..4321).map(|i| (0.37 * i as f64).sin() + 0.1 * i as f64).collect();
        let frames: Vec<Vec<f64>> = extract_frames(&y, &p).into_iter().map(|f| f.values).collect();
        let back = overlap_add(&frames, &p).unwrap();
        for i in 0..y.len() {
            assert!((back[i] - y[i]).abs() < 1e-10 * y[i].abs().max(1.0), "at {i}");
        }
    }

    #[test]
    fn silent_mixture_gives_silent_sources() {
        let k = MsmKernelParams::single(1.0, 0.01, 2000.0).unwrap();
        let prior = GpMixturePrior::new(vec![k.clone(), k.with_variance(0.5).unwrap()], 1e-3).unwrap();
        let p = make_plan(400, 2000.0, 0.1, 0.5).unwrap();
        let res = separate(&vec![0.0; 400], &p, &prior, &SeparateOptions::default()).unwrap();
        assert!(res.sources.iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(res.per_frame.iter().all(|r| r.silent.iter().all(|&b| b)));
    }

    #[test]
    fn single_source_reproduces_smoothed_mixture() {
        let k = MsmKernelParams::single(1.0, 0.02, 2.0 * std::f64::consts::PI * 50.0).unwrap();
        let prior = GpMixturePrior::new(vec![k], 1e-3).unwrap();
        let p = make_plan(600, 2000.0, 0.1, 0.5).unwrap();
        let y: Vec<f64> = (0..600)
            .map(|i| (2.0 * std::f64::consts::PI * 50.0 * i as f64 / 2000.0).sin())
            .collect();
        let res = separate(&y, &p, &prior, &SeparateOptions::default()).unwrap();
        for r in &res.per_frame {
            assert!(r.additivity_error <= 1e-8 * y.len() as f64);
        }
        assert!(relative_residual(&res.sources, &y) < 0.05);
    }
}

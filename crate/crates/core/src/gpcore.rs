//! Exact inference for the additive source model on one frame.
//!
//! Every source `s_j` is a zero-mean GP with kernel `k_j`, the mixture is
//! `y = Σ_j s_j + ε` with `ε ~ N(0, ν² I)`. With `H = K_f + ν² I` one Cholesky
//! factorization of `H` serves the log marginal likelihood, the mixture
//! posterior and every per-source posterior.

use std::f64::consts::PI;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, domain, Error, Result};
use crate::kernel::{gram_values, MsmKernelParams, SumKernel};
use crate::linalg::{self, Cholesky, FirstTry};

/// Largest `n` accepted by [`sample_prior`].
pub const MAX_SAMPLE_LEN: usize = 10_000;

/// Tolerance below zero under which a posterior variance is still treated as
/// round-off and clamped.
pub const VARIANCE_CLAMP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GpMixturePrior {
    kernels: Vec<MsmKernelParams>,
    noise_variance: f64,
}

impl GpMixturePrior {
    pub fn new(kernels: Vec<MsmKernelParams>, noise_variance: f64) -> Result<Self> {
        if kernels.is_empty() {
            return Err(domain("the mixture needs at least one source kernel"));
        }
        if !(noise_variance.is_finite() && noise_variance > 0.0) {
            return Err(domain(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        Ok(Self {
            kernels,
            noise_variance,
        })
    }

    pub fn kernels(&self) -> &[MsmKernelParams] {
        &self.kernels
    }

    pub fn num_sources(&self) -> usize {
        self.kernels.len()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn variances(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.variance()).collect()
    }

    /// Same kernels with new amplitudes `σ²_j`.
    pub fn with_variances(&self, variances: &[f64]) -> Result<Self> {
        check_len(self.kernels.len(), variances.len())?;
        let kernels = self
            .kernels
            .iter()
            .zip(variances)
            .map(|(k, &v)| k.with_variance(v))
            .collect::<Result<_>>()?;
        Self::new(kernels, self.noise_variance)
    }

    pub fn with_noise(&self, noise_variance: f64) -> Result<Self> {
        Self::new(self.kernels.clone(), noise_variance)
    }

    pub fn mixture_kernel(&self) -> SumKernel {
        SumKernel::new(self.kernels.clone()).expect("prior always has at least one kernel")
    }

    /// `k_f(0)`, the prior variance of the mixture function.
    pub fn mixture_k0(&self) -> f64 {
        self.kernels.iter().map(|k| k.eval(0.0)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorResult {
    pub source_means: Vec<Vec<f64>>,
    /// Diagonals of the per-source posterior covariances; empty unless
    /// requested.
    pub source_variances: Vec<Vec<f64>>,
    pub mixture_mean: Vec<f64>,
    pub log_marginal: f64,
    /// Number of slightly negative variances that were clamped to zero.
    pub clamped_variances: usize,
    /// Diagonal jitter that was needed to factor `H`.
    pub jitter: f64,
}

fn validate_data(times: &[f64], y: &[f64]) -> Result<()> {
    check_len(times.len(), y.len())?;
    if times.is_empty() {
        return Err(Error::InputSize("need at least one observation".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(domain("observations must be finite"));
    }
    Ok(())
}

fn source_grams(prior: &GpMixturePrior, times: &[f64]) -> Vec<Mat<f64>> {
    prior
        .kernels
        .iter()
        .map(|k| gram_values(k, times, times))
        .collect()
}

/// Factors `H = Σ grams + ν² I`. Returns the factor and `K_f`.
fn factor_h(grams: &[Mat<f64>], noise: f64, k0: f64) -> Result<(Cholesky, Mat<f64>)> {
    let n = grams[0].nrows();
    let mut kf = grams[0].clone();
    for g in &grams[1..] {
        kf += g;
    }
    let mut h = kf.clone();
    for i in 0..n {
        h[(i, i)] += noise;
    }
    let chol = Cholesky::factor(h.as_ref(), k0, FirstTry::Exact)?;
    Ok((chol, kf))
}

fn log_marginal_from(chol: &Cholesky, y: &[f64], alpha: &[f64]) -> f64 {
    let n = y.len() as f64;
    -0.5 * (linalg::dot(y, alpha) + chol.log_det() + n * (2.0 * PI).ln())
}

/// `log p(y) = -½ [yᵀH⁻¹y + log|H| + n log 2π]`.
pub fn log_marginal(prior: &GpMixturePrior, times: &[f64], y: &[f64]) -> Result<f64> {
    validate_data(times, y)?;
    let grams = source_grams(prior, times);
    let (chol, _) = factor_h(&grams, prior.noise_variance, prior.mixture_k0())?;
    let alpha = chol.solve_vec(y);
    Ok(log_marginal_from(&chol, y, &alpha))
}

/// Posterior means (and optionally marginal variances) of the mixture
/// function and of every source at the observation times.
pub fn posterior(
    prior: &GpMixturePrior,
    times: &[f64],
    y: &[f64],
    want_variance: bool,
) -> Result<PosteriorResult> {
    validate_data(times, y)?;
    let grams = source_grams(prior, times);
    posterior_with_grams(&grams, prior.noise_variance, prior.mixture_k0(), y, want_variance)
}

/// [`posterior`] on precomputed per-source Gram matrices `K_{s_j}`.
pub(crate) fn posterior_with_grams(
    grams: &[Mat<f64>],
    noise: f64,
    k0: f64,
    y: &[f64],
    want_variance: bool,
) -> Result<PosteriorResult> {
    check_len(grams[0].nrows(), y.len())?;
    let (chol, kf) = factor_h(grams, noise, k0)?;
    let alpha = chol.solve_vec(y);
    let log_marginal = log_marginal_from(&chol, y, &alpha);
    let source_means: Vec<Vec<f64>> = grams
        .iter()
        .map(|k| linalg::mat_vec(k.as_ref(), &alpha))
        .collect();
    let mixture_mean = linalg::mat_vec(kf.as_ref(), &alpha);

    let mut clamped = 0;
    let mut source_variances = Vec::new();
    if want_variance {
        for k in grams {
            let v = chol.solve_lower_in_place(k.clone());
            let var: Vec<f64> = (0..k.nrows())
                .map(|i| {
                    let reduction: f64 = (0..v.nrows()).map(|r| v[(r, i)] * v[(r, i)]).sum();
                    let d = k[(i, i)] - reduction;
                    if d < 0.0 {
                        if d >= -VARIANCE_CLAMP_TOL * k[(i, i)].max(1.0) {
                            clamped += 1;
                        } else {
                            log::warn!("posterior variance {d:e} below clamp tolerance");
                        }
                        0.0
                    } else {
                        d
                    }
                })
                .collect();
            source_variances.push(var);
        }
    }

    Ok(PosteriorResult {
        source_means,
        source_variances,
        mixture_mean,
        log_marginal,
        clamped_variances: clamped,
        jitter: chol.jitter(),
    })
}

/// Full posterior covariance `K_j - K_j H⁻¹ K_j` of one source. This is
/// `n x n` and only meant for small problems.
pub fn source_posterior_covariance(
    prior: &GpMixturePrior,
    times: &[f64],
    y: &[f64],
    source: usize,
) -> Result<Mat<f64>> {
    validate_data(times, y)?;
    if source >= prior.num_sources() {
        return Err(domain(format!("no source {source}")));
    }
    let grams = source_grams(prior, times);
    let (chol, _) = factor_h(&grams, prior.noise_variance, prior.mixture_k0())?;
    let k = &grams[source];
    let v = chol.solve_lower_in_place(k.clone());
    Ok(k - v.transpose() * &v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSample {
    pub sources: Vec<Vec<f64>>,
    pub mixture: Vec<f64>,
}

/// Prior sampler with the per-source Cholesky factors cached, for repeated
/// draws on the same time grid.
#[derive(Debug, Clone)]
pub struct PriorSampler {
    factors: Vec<Cholesky>,
    noise_sd: f64,
    n: usize,
}

impl PriorSampler {
    pub fn new(prior: &GpMixturePrior, times: &[f64]) -> Result<Self> {
        let n = times.len();
        if n == 0 || n > MAX_SAMPLE_LEN {
            return Err(Error::InputSize(format!(
                "dense prior sampling supports 1..={MAX_SAMPLE_LEN} points, got {n}"
            )));
        }
        let factors = prior
            .kernels
            .iter()
            .map(|k| {
                let g = gram_values(k, times, times);
                Cholesky::factor(g.as_ref(), k.eval(0.0), FirstTry::Jittered)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            factors,
            noise_sd: prior.noise_variance.sqrt(),
            n,
        })
    }

    /// Draws every source from `N(0, K_{s_j})` and the mixture as their sum
    /// plus white noise. Deterministic for a given seed.
    pub fn draw(&self, seed: u64) -> PriorSample {
        let n = self.n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources: Vec<Vec<f64>> = self
            .factors
            .iter()
            .map(|chol| {
                let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                linalg::mat_vec(chol.l(), &z)
            })
            .collect();
        let mixture = (0..n)
            .map(|i| {
                let e: f64 = rng.sample(StandardNormal);
                sources.iter().map(|s| s[i]).sum::<f64>() + self.noise_sd * e
            })
            .collect();
        PriorSample { sources, mixture }
    }
}

pub fn sample_prior(prior: &GpMixturePrior, times: &[f64], seed: u64) -> Result<PriorSample> {
    Ok(PriorSampler::new(prior, times)?.draw(seed))
}

/// Exact log marginal likelihood as a function of the source amplitudes and
/// the noise variance, with kernel shapes frozen. Holds unit-variance Gram
/// matrices so each evaluation only rescales and refactors.
#[derive(Debug, Clone)]
pub struct ExactObjective {
    unit_grams: Vec<Mat<f64>>,
    unit_k0: Vec<f64>,
    y: Vec<f64>,
}

/// Value of an amplitude objective and its gradient with respect to
/// `(σ²_1..σ²_J, ν²)` (not their logs).
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad_variances: Vec<f64>,
    pub grad_noise: f64,
}

impl ExactObjective {
    pub fn new(prior: &GpMixturePrior, times: &[f64], y: &[f64]) -> Result<Self> {
        validate_data(times, y)?;
        let mut unit_grams = Vec::with_capacity(prior.num_sources());
        let mut unit_k0 = Vec::with_capacity(prior.num_sources());
        for k in &prior.kernels {
            let unit = k.with_variance(1.0)?;
            unit_grams.push(gram_values(&unit, times, times));
            unit_k0.push(unit.eval(0.0));
        }
        Ok(Self {
            unit_grams,
            unit_k0,
            y: y.to_vec(),
        })
    }

    pub(crate) fn from_unit_grams(unit_grams: Vec<Mat<f64>>, unit_k0: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            unit_grams,
            unit_k0,
            y,
        }
    }

    pub fn evaluate(&self, variances: &[f64], noise: f64, want_grad: bool) -> Result<ObjectiveEval> {
        check_len(self.unit_grams.len(), variances.len())?;
        let scaled: Vec<Mat<f64>> = self
            .unit_grams
            .iter()
            .zip(variances)
            .map(|(g, &s)| g * faer::Scale(s))
            .collect();
        let k0: f64 = self.unit_k0.iter().zip(variances).map(|(a, b)| a * b).sum();
        let (chol, _) = factor_h(&scaled, noise, k0)?;
        let alpha = chol.solve_vec(&self.y);
        let value = log_marginal_from(&chol, &self.y, &alpha);
        if !want_grad {
            return Ok(ObjectiveEval {
                value,
                grad_variances: vec![],
                grad_noise: 0.0,
            });
        }
        let hinv = chol.inverse();
        let grad_variances = self
            .unit_grams
            .iter()
            .map(|g| {
                let ka = linalg::mat_vec(g.as_ref(), &alpha);
                0.5 * (linalg::dot(&alpha, &ka) - linalg::frobenius_inner(hinv.as_ref(), g.as_ref()))
            })
            .collect();
        let grad_noise = 0.5 * (linalg::dot(&alpha, &alpha) - linalg::trace(hinv.as_ref()));
        Ok(ObjectiveEval {
            value,
            grad_variances,
            grad_noise,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Component;

    fn unit_dc(variance: f64) -> MsmKernelParams {
        MsmKernelParams::single(variance, 0.05, 0.0).unwrap()
    }

    #[test]
    fn scalar_log_marginal() {
        let prior = GpMixturePrior::new(vec![unit_dc(1.0)], 1.0).unwrap();
        let lm = log_marginal(&prior, &[0.0], &[0.0]).unwrap();
        let expect = -0.5 * (2f64.ln() + (2.0 * PI).ln());
        assert!((lm - expect).abs() < 1e-14);
        assert!((lm - -1.265_512_123_484_645_4).abs() < 1e-12);
    }

    #[test]
    fn zero_data_log_marginal_is_determinant_only() {
        let prior = GpMixturePrior::new(vec![unit_dc(2.0), unit_dc(0.5)], 0.1).unwrap();
        let t = [0.0, 0.01, 0.03];
        let lm = log_marginal(&prior, &t, &[0.0; 3]).unwrap();
        let g = gram_values(&prior.mixture_kernel(), &t, &t);
        let mut h = g.clone();
        for i in 0..3 {
            h[(i, i)] += 0.1;
        }
        let logdet = Cholesky::factor(h.as_ref(), 1.0, FirstTry::Exact).unwrap().log_det();
        assert!((lm - -0.5 * (logdet + 3.0 * (2.0 * PI).ln())).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_closed_form() {
        let k = MsmKernelParams::single(1.5, 0.02, 100.0).unwrap();
        let prior = GpMixturePrior::new(vec![k.clone()], 0.3).unwrap();
        let t = [0.0, 0.013];
        let y = [0.7, -0.4];
        let (a, b, d) = (k.eval(0.0) + 0.3, k.eval(0.013), k.eval(0.0) + 0.3);
        let det = a * d - b * b;
        let quad = (d * y[0] * y[0] - 2.0 * b * y[0] * y[1] + a * y[1] * y[1]) / det;
        let expect = -0.5 * (quad + det.ln() + 2.0 * (2.0 * PI).ln());
        let lm = log_marginal(&prior, &t, &y).unwrap();
        assert!(((lm - expect) / expect).abs() < 1e-12);
    }

    #[test]
    fn zero_data_gives_zero_means_and_positive_variances() {
        let prior = GpMixturePrior::new(vec![unit_dc(1.0), unit_dc(2.0)], 0.05).unwrap();
        let t: Vec<f64> = (0..10).map(|i| i as f64 * 0.01).collect();
        let post = posterior(&prior, &t, &[0.0; 10], true).unwrap();
        for m in &post.source_means {
            assert!(m.iter().all(|&v| v == 0.0));
        }
        for v in &post.source_variances {
            assert!(v.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn single_source_mean_is_mixture_mean() {
        let prior = GpMixturePrior::new(vec![unit_dc(1.0)], 0.05).unwrap();
        let t: Vec<f64> = (0..8).map(|i| i as f64 * 0.01).collect();
        let y: Vec<f64> = t.iter().map(|x| (30.0 * x).sin()).collect();
        let post = posterior(&prior, &t, &y, false).unwrap();
        assert_eq!(post.source_means[0], post.mixture_mean);
        assert!(post.source_variances.is_empty());
    }

    #[test]
    fn huge_noise_shrinks_mean() {
        let k = unit_dc(1.0);
        let prior = GpMixturePrior::new(vec![k], 1e6).unwrap();
        let t: Vec<f64> = (0..16).map(|i| i as f64 * 0.003).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        let post = posterior(&prior, &t, &y, false).unwrap();
        let norm = |v: &[f64]| linalg::dot(v, v).sqrt();
        assert!(norm(&post.mixture_mean) <= 1e-4 * norm(&y));
    }

    #[test]
    fn sampling_is_deterministic() {
        let prior = GpMixturePrior::new(vec![unit_dc(1.0), unit_dc(0.3)], 0.01).unwrap();
        let t: Vec<f64> = (0..50).map(|i| i as f64 / 1000.0).collect();
        let a = sample_prior(&prior, &t, 9).unwrap();
        let b = sample_prior(&prior, &t, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sources.len(), 2);
    }

    #[test]
    fn zero_noise_is_rejected() {
        assert!(GpMixturePrior::new(vec![unit_dc(1.0)], 0.0).is_err());
        assert!(GpMixturePrior::new(vec![], 1.0).is_err());
    }

    #[test]
    fn sample_covariance_matches_kernel() {
        let k = MsmKernelParams::new(
            1.0,
            0.01,
            vec![Component::from_hz(0.6, 50.0), Component::from_hz(0.4, 120.0)],
        )
        .unwrap();
        let prior = GpMixturePrior::new(vec![k.clone()], 1e-6).unwrap();
        let t = [0.0, 0.002, 0.007];
        let draws = 200;
        let mut acc = [[0.0; 3]; 3];
        let mut sq = [[0.0; 3]; 3];
        for seed in 0..draws {
            let s = &sample_prior(&prior, &t, seed).unwrap().sources[0];
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j] += s[i] * s[j];
                    sq[i][j] += (s[i] * s[j]).powi(2);
                }
            }
        }
        let nd = draws as f64;
        for i in 0..3 {
            for j in 0..3 {
                let mean = acc[i][j] / nd;
                let var = sq[i][j] / nd - mean * mean;
                let se = (var / nd).sqrt();
                let truth = k.eval(t[i] - t[j]);
                assert!((mean - truth).abs() <= 3.0 * se, "({i},{j}) {mean} vs {truth} se {se}");
            }
        }
    }

    #[test]
    fn sample_size_limit() {
        let prior = GpMixturePrior::new(vec![unit_dc(1.0)], 0.1).unwrap();
        assert!(matches!(sample_prior(&prior, &[], 0), Err(Error::InputSize(_))));
    }

    #[test]
    fn exact_objective_value_matches_log_marginal() {
        let prior = GpMixturePrior::new(vec![unit_dc(0.7), unit_dc(1.3)], 0.2).unwrap();
        let t: Vec<f64> = (0..12).map(|i| i as f64 * 0.004).collect();
        let y: Vec<f64> = t.iter().map(|x| (80.0 * x).cos()).collect();
        let obj = ExactObjective::new(&prior, &t, &y).unwrap();
        let ev = obj.evaluate(&[0.7, 1.3], 0.2, true).unwrap();
        let lm = log_marginal(&prior, &t, &y).unwrap();
        assert!((ev.value - lm).abs() < 1e-12 * lm.abs());
        // finite differences on σ²_0 and ν²
        let h = 1e-6;
        let up = obj.evaluate(&[0.7 + h, 1.3], 0.2, false).unwrap().value;
        let dn = obj.evaluate(&[0.7 - h, 1.3], 0.2, false).unwrap().value;
        assert!(((up - dn) / (2.0 * h) - ev.grad_variances[0]).abs() < 1e-6);
        let up = obj.evaluate(&[0.7, 1.3], 0.2 + h, false).unwrap().value;
        let dn = obj.evaluate(&[0.7, 1.3], 0.2 - h, false).unwrap().value;
        assert!(((up - dn) / (2.0 * h) - ev.grad_noise).abs() < 1e-6);
    }
}

//! Collapsed variational lower bound with fixed inducing points, and the
//! per-frame amplitude learning built on it.
//!
//! For a frame `(t̂, ŷ)` and inducing inputs `z`,
//!
//! ```text
//! L = log N(ŷ | 0, Q + ν² I) - tr(K - Q) / (2ν²),   Q = K_nm K_mm⁻¹ K_mn
//! ```
//!
//! with every `K` built from the mixture kernel `k_f = Σ_j k_j`. Everything
//! is evaluated through `m x m` factorizations, `O(n m²)` per call.

use std::f64::consts::PI;

use faer::{Mat, Scale};

use crate::error::{check_len, domain, Error, Result};
use crate::gpcore::{ExactObjective, GpMixturePrior, ObjectiveEval};
use crate::kernel::{gram_from_lags, gram_values};
use crate::linalg::{self, Cholesky, FirstTry};
use crate::optim::{self, LbfgsOptions};

/// Inducing inputs, sorted and unique.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    points: Vec<f64>,
    /// Positions inside the frame, when the points are frame samples.
    indices: Option<Vec<usize>>,
}

impl InducingSet {
    pub fn new(mut points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(domain("an inducing set needs at least one point"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(domain("inducing points must be finite"));
        }
        points.sort_by(f64::total_cmp);
        points.dedup();
        Ok(Self {
            points,
            indices: None,
        })
    }

    /// Inducing set at the given sample positions of a frame.
    pub fn from_indices(frame_t: &[f64], mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(domain("an inducing set needs at least one point"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= frame_t.len()) {
            return Err(domain(format!("inducing index {bad} outside the frame")));
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(Self {
            points: indices.iter().map(|&i| frame_t[i]).collect(),
            indices: Some(indices),
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn indices(&self) -> Option<&[usize]> {
        self.indices.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Inducing points at the strict local extrema of the frame. With more than
/// `m_max` extrema the largest `|y|` are kept (earlier first on ties); with
/// fewer than two a uniform grid of `m_max` samples is used instead.
pub fn select_inducing_extrema(frame_y: &[f64], frame_t: &[f64], m_max: usize) -> InducingSet {
    let n = frame_y.len().min(frame_t.len());
    let m_max = m_max.max(1);
    let mut extrema: Vec<usize> = if n >= 3 {
        (1..n - 1)
            .filter(|&i| {
                let (a, b, c) = (frame_y[i - 1], frame_y[i], frame_y[i + 1]);
                (b > a && b > c) || (b < a && b < c)
            })
            .collect()
    } else {
        Vec::new()
    };
    if extrema.len() < 2 {
        extrema = uniform_grid(n, m_max);
    } else if extrema.len() > m_max {
        extrema.sort_by(|&a, &b| frame_y[b].abs().total_cmp(&frame_y[a].abs()).then(a.cmp(&b)));
        extrema.truncate(m_max);
    }
    InducingSet::from_indices(frame_t, extrema).expect("indices are inside the frame")
}

fn uniform_grid(n: usize, m: usize) -> Vec<usize> {
    if n == 0 {
        return vec![0];
    }
    let m = m.min(n);
    if m == 1 {
        return vec![(n - 1) / 2];
    }
    let mut v: Vec<usize> = (0..m)
        .map(|k| ((k as f64) * (n - 1) as f64 / (m - 1) as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

/// One evaluation of the bound and its gradient with respect to
/// `(σ²_1..σ²_J, ν²)`.
#[derive(Debug, Clone)]
pub struct BoundEval {
    pub value: f64,
    pub fit_term: f64,
    pub trace_term: f64,
    pub grad_variances: Vec<f64>,
    pub grad_noise: f64,
}

/// The bound as a function of source amplitudes and noise, with kernel shapes
/// and inducing points frozen. Unit-variance cross-covariances are cached.
#[derive(Debug, Clone)]
pub struct SparseObjective {
    unit_kmn: Vec<Mat<f64>>,
    unit_kmm: Vec<Mat<f64>>,
    unit_k0: Vec<f64>,
    y: Vec<f64>,
}

impl SparseObjective {
    pub fn new(
        prior: &GpMixturePrior,
        frame_t: &[f64],
        frame_y: &[f64],
        inducing: &InducingSet,
    ) -> Result<Self> {
        check_len(frame_t.len(), frame_y.len())?;
        if frame_y.is_empty() {
            return Err(Error::InputSize("empty frame".into()));
        }
        let z = inducing.points();
        let mut unit_kmn = Vec::new();
        let mut unit_kmm = Vec::new();
        let mut unit_k0 = Vec::new();
        for k in prior.kernels() {
            let unit = k.with_variance(1.0)?;
            unit_kmn.push(gram_values(&unit, z, frame_t));
            unit_kmm.push(gram_values(&unit, z, z));
            unit_k0.push(unit.eval(0.0));
        }
        Ok(Self {
            unit_kmn,
            unit_kmm,
            unit_k0,
            y: frame_y.to_vec(),
        })
    }

    /// Builds the caches from unit-variance lag tables on a uniform grid.
    pub(crate) fn from_lag_tables(
        unit_tables: &[Vec<f64>],
        inducing_idx: &[usize],
        frame_y: &[f64],
    ) -> Self {
        let frame_idx: Vec<usize> = (0..frame_y.len()).collect();
        Self {
            unit_kmn: unit_tables
                .iter()
                .map(|t| gram_from_lags(t, inducing_idx, &frame_idx))
                .collect(),
            unit_kmm: unit_tables
                .iter()
                .map(|t| gram_from_lags(t, inducing_idx, inducing_idx))
                .collect(),
            unit_k0: unit_tables.iter().map(|t| t[0]).collect(),
            y: frame_y.to_vec(),
        }
    }

    pub fn num_sources(&self) -> usize {
        self.unit_k0.len()
    }

    pub fn num_inducing(&self) -> usize {
        self.unit_kmm[0].nrows()
    }

    pub fn evaluate(&self, variances: &[f64], noise: f64, want_grad: bool) -> Result<BoundEval> {
        check_len(self.num_sources(), variances.len())?;
        let n = self.y.len();
        let m = self.num_inducing();
        let nf = n as f64;
        let nu = noise.sqrt();

        let mut kmn = Mat::<f64>::zeros(m, n);
        let mut kmm = Mat::<f64>::zeros(m, m);
        for j in 0..variances.len() {
            kmn += &self.unit_kmn[j] * Scale(variances[j]);
            kmm += &self.unit_kmm[j] * Scale(variances[j]);
        }
        let kf0: f64 = self.unit_k0.iter().zip(variances).map(|(a, b)| a * b).sum();
        let chol_mm = Cholesky::factor(kmm.as_ref(), kf0, FirstTry::Jittered)?;
        let eps = chol_mm.jitter() / kf0;

        // A = L⁻¹ K_mn / ν,  B = I + A Aᵀ
        let a = chol_mm.solve_lower_in_place(kmn) * Scale(1.0 / nu);
        let aat = &a * a.transpose();
        let mut b = aat.clone();
        for i in 0..m {
            b[(i, i)] += 1.0;
        }
        let chol_b = Cholesky::factor(b.as_ref(), 1.0, FirstTry::Exact)?;
        let ay = linalg::mat_vec(a.as_ref(), &self.y);
        let c = chol_b.solve_lower_in_place(linalg::column(&ay));
        let cc: f64 = (0..m).map(|i| c[(i, 0)] * c[(i, 0)]).sum::<f64>() / noise;
        let yy = linalg::dot(&self.y, &self.y);

        let fit_term = -0.5 * nf * (2.0 * PI).ln() - 0.5 * chol_b.log_det() - 0.5 * nf * noise.ln()
            - 0.5 * yy / noise
            + 0.5 * cc;
        let trace_knn = nf * kf0;
        let tr_aat = linalg::trace(aat.as_ref());
        let trace_term = -0.5 * trace_knn / noise + 0.5 * tr_aat;
        let value = fit_term + trace_term;
        if !want_grad {
            return Ok(BoundEval {
                value,
                fit_term,
                trace_term,
                grad_variances: vec![],
                grad_noise: 0.0,
            });
        }

        // α = Σ⁻¹ y with Σ⁻¹ = (I - Aᵀ B⁻¹ A) / ν²
        let w = chol_b.solve_vec(&ay);
        let atw = linalg::mat_vec(a.transpose(), &w);
        let alpha: Vec<f64> = self.y.iter().zip(&atw).map(|(yi, t)| (yi - t) / noise).collect();
        // R = K_mm⁻¹ K_mn = ν L⁻ᵀ A;  G = R Σ⁻¹ = (R - (R Aᵀ) B⁻¹ A) / ν²
        let r = chol_mm.solve_upper_in_place(a.clone()) * Scale(nu);
        let rat = &r * a.transpose();
        let y_mat = chol_b.solve(rat.transpose()).transpose().to_owned();
        let g = (&r - &y_mat * &a) * Scale(1.0 / noise);
        let mm = &g * r.transpose();
        let rrt = &r * r.transpose();
        let ra = linalg::mat_vec(r.as_ref(), &alpha);

        let mut grad_variances = Vec::with_capacity(variances.len());
        for j in 0..variances.len() {
            let mut dkmm = self.unit_kmm[j].clone();
            for i in 0..m {
                dkmm[(i, i)] += eps * self.unit_k0[j];
            }
            let bj = linalg::mat_vec(self.unit_kmn[j].as_ref(), &alpha);
            let dkmm_ra = linalg::mat_vec(dkmm.as_ref(), &ra);
            let quad = 2.0 * linalg::dot(&bj, &ra) - linalg::dot(&ra, &dkmm_ra);
            let tr_sinv_dq = 2.0 * linalg::frobenius_inner(g.as_ref(), self.unit_kmn[j].as_ref())
                - linalg::frobenius_inner(dkmm.as_ref(), mm.as_ref());
            let d_logn = 0.5 * (quad - tr_sinv_dq);
            let tr_dq = 2.0 * linalg::frobenius_inner(r.as_ref(), self.unit_kmn[j].as_ref())
                - linalg::frobenius_inner(dkmm.as_ref(), rrt.as_ref());
            let d_trace = -0.5 / noise * (nf * self.unit_k0[j] - tr_dq);
            grad_variances.push(d_logn + d_trace);
        }

        let binv = chol_b.inverse();
        let tr_sinv = (nf - (m as f64 - linalg::trace(binv.as_ref()))) / noise;
        let d_logn = 0.5 * (linalg::dot(&alpha, &alpha) - tr_sinv);
        let d_trace = 0.5 * (trace_knn - noise * tr_aat) / (noise * noise);

        Ok(BoundEval {
            value,
            fit_term,
            trace_term,
            grad_variances,
            grad_noise: d_logn + d_trace,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ElboReport {
    pub value: f64,
    pub fit_term: f64,
    pub trace_term: f64,
    pub learned: GpMixturePrior,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    /// Sources whose amplitude collapsed onto the floor.
    pub silent: Vec<bool>,
}

/// Evaluates the bound once for `prior` without learning anything.
pub fn elbo(
    prior: &GpMixturePrior,
    frame_t: &[f64],
    frame_y: &[f64],
    inducing: &InducingSet,
) -> Result<ElboReport> {
    if inducing.len() > frame_y.len() {
        return Err(domain(format!(
            "{} inducing points for a frame of {}",
            inducing.len(),
            frame_y.len()
        )));
    }
    let obj = SparseObjective::new(prior, frame_t, frame_y, inducing)?;
    let ev = obj.evaluate(&prior.variances(), prior.noise_variance(), false)?;
    Ok(ElboReport {
        value: ev.value,
        fit_term: ev.fit_term,
        trace_term: ev.trace_term,
        learned: prior.clone(),
        iterations: 0,
        converged: true,
        trace: vec![ev.value],
        silent: vec![false; prior.num_sources()],
    })
}

/// Which amplitudes are optimized; everything else stays frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMask {
    pub variances: Vec<bool>,
    pub noise: bool,
}

impl ParamMask {
    /// All source variances free, noise frozen.
    pub fn variances_only(num_sources: usize) -> Self {
        Self {
            variances: vec![true; num_sources],
            noise: false,
        }
    }

    pub fn with_noise(mut self, noise: bool) -> Self {
        self.noise = noise;
        self
    }

    fn count(&self) -> usize {
        self.variances.iter().filter(|&&b| b).count() + usize::from(self.noise)
    }
}

#[derive(Debug, Clone)]
pub struct LearnOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Amplitudes are kept above `floor_ratio * initial value`.
    pub floor_ratio: f64,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-7,
            floor_ratio: 1e-12,
        }
    }
}

/// Anything that yields an objective value plus amplitude gradients.
pub(crate) trait AmplitudeObjective {
    fn eval(&self, variances: &[f64], noise: f64, want_grad: bool) -> Result<(f64, f64, f64, Vec<f64>, f64)>;
    fn y_is_zero(&self) -> bool;
}

impl AmplitudeObjective for SparseObjective {
    fn eval(&self, v: &[f64], noise: f64, want_grad: bool) -> Result<(f64, f64, f64, Vec<f64>, f64)> {
        let e = self.evaluate(v, noise, want_grad)?;
        Ok((e.value, e.fit_term, e.trace_term, e.grad_variances, e.grad_noise))
    }

    fn y_is_zero(&self) -> bool {
        self.y.iter().all(|&v| v == 0.0)
    }
}

pub(crate) struct ExactAmplitude<'a> {
    pub objective: &'a ExactObjective,
    pub y_zero: bool,
}

impl AmplitudeObjective for ExactAmplitude<'_> {
    fn eval(&self, v: &[f64], noise: f64, want_grad: bool) -> Result<(f64, f64, f64, Vec<f64>, f64)> {
        let ObjectiveEval {
            value,
            grad_variances,
            grad_noise,
        } = self.objective.evaluate(v, noise, want_grad)?;
        Ok((value, value, 0.0, grad_variances, grad_noise))
    }

    fn y_is_zero(&self) -> bool {
        self.y_zero
    }
}

/// Maximizes the bound over the log of the free amplitudes.
pub fn learn_variances(
    prior: &GpMixturePrior,
    frame_t: &[f64],
    frame_y: &[f64],
    inducing: &InducingSet,
    mask: &ParamMask,
    opts: &LearnOptions,
) -> Result<ElboReport> {
    let obj = SparseObjective::new(prior, frame_t, frame_y, inducing)?;
    learn_with(prior, &obj, mask, opts)
}

/// Dense counterpart of [`learn_variances`]: maximizes the exact log
/// marginal likelihood instead of the bound. `O(n³)` per step.
pub fn learn_variances_exact(
    prior: &GpMixturePrior,
    frame_t: &[f64],
    frame_y: &[f64],
    mask: &ParamMask,
    opts: &LearnOptions,
) -> Result<ElboReport> {
    let obj = ExactObjective::new(prior, frame_t, frame_y)?;
    let amp = ExactAmplitude {
        objective: &obj,
        y_zero: frame_y.iter().all(|&v| v == 0.0),
    };
    learn_with(prior, &amp, mask, opts)
}

pub(crate) fn learn_with<O: AmplitudeObjective>(
    prior: &GpMixturePrior,
    obj: &O,
    mask: &ParamMask,
    opts: &LearnOptions,
) -> Result<ElboReport> {
    let j = prior.num_sources();
    check_len(j, mask.variances.len())?;
    if mask.count() == 0 {
        return Err(domain("parameter mask selects nothing to learn"));
    }
    let init_var = prior.variances();
    let init_noise = prior.noise_variance();
    let floors: Vec<f64> = init_var.iter().map(|v| v * opts.floor_ratio).collect();
    let noise_floor = init_noise * opts.floor_ratio;

    // free-parameter vector in log space: masked variances, then noise
    let unpack = |x: &[f64]| -> (Vec<f64>, f64) {
        let mut v = init_var.clone();
        let mut k = 0;
        for i in 0..j {
            if mask.variances[i] {
                v[i] = x[k].exp();
                k += 1;
            }
        }
        let noise = if mask.noise { x[k].exp() } else { init_noise };
        (v, noise)
    };
    let mut x0 = Vec::new();
    let mut lower = Vec::new();
    for i in 0..j {
        if mask.variances[i] {
            x0.push(init_var[i].ln());
            lower.push(floors[i].ln());
        }
    }
    if mask.noise {
        x0.push(init_noise.ln());
        lower.push(noise_floor.ln());
    }

    let finish = |x: &[f64], iterations, converged, trace: Vec<f64>| -> Result<ElboReport> {
        let (v, noise) = unpack(x);
        let (value, fit, tr, _, _) = obj.eval(&v, noise, false)?;
        let silent = (0..j)
            .map(|i| mask.variances[i] && v[i] <= floors[i] * (1.0 + 1e-9))
            .collect();
        Ok(ElboReport {
            value,
            fit_term: fit,
            trace_term: tr,
            learned: prior.with_variances(&v)?.with_noise(noise)?,
            iterations,
            converged,
            trace,
            silent,
        })
    };

    if obj.y_is_zero() {
        // zero data: the objective increases monotonically as every source
        // amplitude shrinks, so the supremum sits on the floor
        let mut x = x0.clone();
        let mut k = 0;
        for i in 0..j {
            if mask.variances[i] {
                x[k] = lower[k];
                k += 1;
            }
        }
        let start = obj.eval(&init_var, init_noise, false)?.0;
        let mut rep = finish(&x, 0, true, vec![start])?;
        rep.trace.push(rep.value);
        return Ok(rep);
    }

    let lopts = LbfgsOptions {
        max_iter: opts.max_iter,
        rel_tol: opts.rel_tol,
        grad_tol: 1e-10,
        history: 6,
        lower: Some(lower),
        upper: None,
    };
    let outcome = optim::minimize(
        |x| {
            let (v, noise) = unpack(x);
            let (value, _, _, gv, gn) = obj.eval(&v, noise, true)?;
            let mut g = Vec::with_capacity(x.len());
            for i in 0..j {
                if mask.variances[i] {
                    g.push(-gv[i] * v[i]);
                }
            }
            if mask.noise {
                g.push(-gn * noise);
            }
            Ok((-value, g))
        },
        &x0,
        &lopts,
    )?;
    let trace = outcome.trace.iter().map(|v| -v).collect();
    finish(&outcome.x, outcome.iterations, outcome.converged, trace)
}

//! Matérn-1/2 spectral mixture (MSM) kernels.
//!
//! A source kernel is
//!
//! ```text
//! k(τ) = σ² · exp(-τ/ℓ) · Σ_d α²_d · cos(ω_d τ),   τ = |t - t'|
//! ```
//!
//! whose spectral density is a mixture of Lorentzian pairs centred at
//! `±ω_d` with half-width `1/ℓ`. Frequencies are stored in rad/s; the JSON
//! file format uses Hz.

use std::f64::consts::PI;
use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// One spectral component: weight `α²` at angular frequency `ω` (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub angular_frequency: f64,
}

impl Component {
    pub fn new(weight: f64, angular_frequency: f64) -> Self {
        Self {
            weight,
            angular_frequency,
        }
    }

    pub fn from_hz(weight: f64, freq_hz: f64) -> Self {
        Self::new(weight, 2.0 * PI * freq_hz)
    }

    pub fn freq_hz(&self) -> f64 {
        self.angular_frequency / (2.0 * PI)
    }
}

/// Hyperparameters of one MSM kernel, validated and in canonical form
/// (frequencies strictly increasing, duplicates merged).
#[derive(Debug, Clone, PartialEq)]
pub struct MsmKernelParams {
    variance: f64,
    lengthscale: f64,
    components: Vec<Component>,
}

impl MsmKernelParams {
    pub fn new(variance: f64, lengthscale: f64, components: Vec<Component>) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(domain(format!("variance must be positive, got {variance}")));
        }
        if !(lengthscale.is_finite() && lengthscale > 0.0) {
            return Err(domain(format!(
                "lengthscale must be positive, got {lengthscale}"
            )));
        }
        if components.is_empty() {
            return Err(domain("at least one spectral component is required"));
        }
        for c in &components {
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(domain(format!("weight must be >= 0, got {}", c.weight)));
            }
            if !(c.angular_frequency.is_finite() && c.angular_frequency >= 0.0) {
                return Err(domain(format!(
                    "frequency must be >= 0, got {}",
                    c.angular_frequency
                )));
            }
        }
        if !components.iter().any(|c| c.weight > 0.0) {
            return Err(domain("all component weights are zero"));
        }
        Ok(Self {
            variance,
            lengthscale,
            components: canonicalize(components),
        })
    }

    /// Single-component kernel, mostly handy in tests.
    pub fn single(variance: f64, lengthscale: f64, angular_frequency: f64) -> Result<Self> {
        Self::new(
            variance,
            lengthscale,
            vec![Component::new(1.0, angular_frequency)],
        )
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// Same kernel with a different amplitude `σ²`.
    pub fn with_variance(&self, variance: f64) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(domain(format!("variance must be positive, got {variance}")));
        }
        Ok(Self {
            variance,
            ..self.clone()
        })
    }

    /// `k(τ)`. The lag is taken in absolute value.
    pub fn eval(&self, tau: f64) -> f64 {
        let tau = tau.abs();
        let mix: f64 = self
            .components
            .iter()
            .map(|c| c.weight * (c.angular_frequency * tau).cos())
            .sum();
        self.variance * (-tau / self.lengthscale).exp() * mix
    }

    /// Lorentzian-mixture spectral density at the given angular frequencies.
    /// Normalized so that its integral over the whole real line is `k(0)`.
    pub fn spectral_density(&self, freqs: &[f64]) -> Vec<f64> {
        let rate = 1.0 / self.lengthscale;
        let lorentz = |x: f64| rate / (PI * (rate * rate + x * x));
        freqs
            .iter()
            .map(|&w| {
                let s: f64 = self
                    .components
                    .iter()
                    .map(|c| {
                        0.5 * c.weight
                            * (lorentz(w - c.angular_frequency) + lorentz(w + c.angular_frequency))
                    })
                    .sum();
                self.variance * s
            })
            .collect()
    }
}

fn canonicalize(mut components: Vec<Component>) -> Vec<Component> {
    components.sort_by(|a, b| a.angular_frequency.total_cmp(&b.angular_frequency));
    let mut out: Vec<Component> = Vec::with_capacity(components.len());
    for c in components {
        match out.last_mut() {
            Some(last) if last.angular_frequency == c.angular_frequency => {
                last.weight += c.weight;
            }
            _ => out.push(c),
        }
    }
    out
}

/// Anything that can be evaluated as a stationary covariance of the lag.
pub trait Kernel {
    fn eval(&self, tau: f64) -> f64;

    fn k0(&self) -> f64 {
        self.eval(0.0)
    }
}

impl Kernel for MsmKernelParams {
    fn eval(&self, tau: f64) -> f64 {
        MsmKernelParams::eval(self, tau)
    }
}

/// Additive kernel `k_f = Σ_j k_j` of the mixture process.
#[derive(Debug, Clone, PartialEq)]
pub struct SumKernel {
    parts: Vec<MsmKernelParams>,
}

impl SumKernel {
    pub fn new(parts: Vec<MsmKernelParams>) -> Result<Self> {
        if parts.is_empty() {
            return Err(domain("a sum kernel needs at least one part"));
        }
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[MsmKernelParams] {
        &self.parts
    }
}

impl Kernel for SumKernel {
    fn eval(&self, tau: f64) -> f64 {
        self.parts.iter().map(|p| p.eval(tau)).sum()
    }
}

/// Kernel evaluated at every pair of `rows_times x cols_times`.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub rows_times: Vec<f64>,
    pub cols_times: Vec<f64>,
    pub values: Mat<f64>,
}

pub fn gram<K: Kernel + ?Sized>(kernel: &K, rows: &[f64], cols: &[f64]) -> Result<GramMatrix> {
    if rows.iter().chain(cols).any(|t| !t.is_finite()) {
        return Err(domain("time vectors must be finite"));
    }
    Ok(GramMatrix {
        rows_times: rows.to_vec(),
        cols_times: cols.to_vec(),
        values: gram_values(kernel, rows, cols),
    })
}

/// Gram values only. When `rows == cols` only one triangle is evaluated and
/// mirrored, so the result is exactly symmetric.
pub(crate) fn gram_values<K: Kernel + ?Sized>(kernel: &K, rows: &[f64], cols: &[f64]) -> Mat<f64> {
    if rows == cols {
        let n = rows.len();
        let mut m = Mat::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = kernel.eval(rows[i] - cols[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    } else {
        Mat::from_fn(rows.len(), cols.len(), |i, j| kernel.eval(rows[i] - cols[j]))
    }
}

/// `k(l·dt)` for `l = 0..len`. On a uniform sample grid every Gram entry is
/// one of these values, which turns an `O(n² D)` build into `O(n D + n²)`.
pub fn lag_table<K: Kernel + ?Sized>(kernel: &K, dt: f64, len: usize) -> Vec<f64> {
    (0..len).map(|l| kernel.eval(l as f64 * dt)).collect()
}

/// Gram matrix between two sets of integer sample positions.
pub fn gram_from_lags(table: &[f64], rows: &[usize], cols: &[usize]) -> Mat<f64> {
    Mat::from_fn(rows.len(), cols.len(), |i, j| table[rows[i].abs_diff(cols[j])])
}

/// On-disk kernel description. Frequencies are in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFile {
    pub name: String,
    pub sample_rate_hz: f64,
    pub variance: f64,
    pub lengthscale_s: f64,
    pub components: Vec<KernelFileComponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelFileComponent {
    pub weight: f64,
    pub freq_hz: f64,
}

impl KernelFile {
    pub fn from_params(name: impl Into<String>, sample_rate_hz: f64, params: &MsmKernelParams) -> Self {
        Self {
            name: name.into(),
            sample_rate_hz,
            variance: params.variance(),
            lengthscale_s: params.lengthscale(),
            components: params
                .components()
                .iter()
                .map(|c| KernelFileComponent {
                    weight: c.weight,
                    freq_hz: c.freq_hz(),
                })
                .collect(),
            final_mse: None,
            iterations: None,
        }
    }

    pub fn to_params(&self) -> Result<MsmKernelParams> {
        MsmKernelParams::new(
            self.variance,
            self.lengthscale_s,
            self.components
                .iter()
                .map(|c| Component::from_hz(c.weight, c.freq_hz))
                .collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(s)?;
        if !(file.sample_rate_hz.is_finite() && file.sample_rate_hz > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "sample_rate_hz must be positive, got {}",
                file.sample_rate_hz
            )));
        }
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

//! Synthetic mixtures drawn from known MSM priors.
//!
//! Long sources are stitched from independent prior draws on short
//! segments. Neighbouring segments overlap and are cross-faded with
//! sine/cosine gains, which keep the pointwise variance constant.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::gpcore::{GpMixturePrior, PriorSampler};
use crate::kernel::{KernelFile, MsmKernelParams};

pub const MAX_BENCHMARK_SAMPLES: usize = 1_000_000;
pub const NOISE_FLOOR: f64 = 1e-12;

fn default_segment() -> f64 {
    0.125
}

fn default_crossfade() -> f64 {
    0.25
}

fn default_ramp() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteSequence {
    /// Active source indices for each equal-length segment.
    pub pattern: Vec<Vec<usize>>,
    /// Raised-cosine on/off ramp length, seconds.
    #[serde(default = "default_ramp")]
    pub ramp_s: f64,
}

impl NoteSequence {
    /// C4, E4, G4, C4+E4, C4+G4, E4+G4, C4+E4+G4 over sources 0, 1, 2.
    pub fn triad() -> Self {
        Self {
            pattern: vec![
                vec![0],
                vec![1],
                vec![2],
                vec![0, 1],
                vec![0, 2],
                vec![1, 2],
                vec![0, 1, 2],
            ],
            ramp_s: default_ramp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub noise_variance: f64,
    pub seed: u64,
    pub sources: Vec<KernelFile>,
    /// Length of each independent prior draw, seconds.
    #[serde(default = "default_segment")]
    pub segment_s: f64,
    /// Fraction of a segment shared with its successor.
    #[serde(default = "default_crossfade")]
    pub crossfade: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note_sequence: Option<NoteSequence>,
}

impl BenchmarkSpec {
    pub fn new(sample_rate_hz: f64, duration_s: f64, noise_variance: f64, seed: u64, kernels: &[MsmKernelParams]) -> Self {
        Self {
            sample_rate_hz,
            duration_s,
            noise_variance,
            seed,
            sources: kernels
                .iter()
                .enumerate()
                .map(|(j, k)| KernelFile::from_params(format!("source{j}"), sample_rate_hz, k))
                .collect(),
            segment_s: default_segment(),
            crossfade: default_crossfade(),
            note_sequence: None,
        }
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(domain("sample_rate_hz must be positive"));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(domain("duration_s must be positive"));
        }
        let n = self.num_samples();
        if n == 0 || n > MAX_BENCHMARK_SAMPLES {
            return Err(Error::InputSize(format!(
                "benchmark must have 1..={MAX_BENCHMARK_SAMPLES} samples, got {n}"
            )));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(domain("noise_variance must be non-negative"));
        }
        if self.sources.is_empty() {
            return Err(domain("benchmark needs at least one source"));
        }
        for k in &self.sources {
            if k.sample_rate_hz != self.sample_rate_hz {
                return Err(Error::SampleRateMismatch(format!(
                    "kernel '{}' is for {} Hz, benchmark is {} Hz",
                    k.name, k.sample_rate_hz, self.sample_rate_hz
                )));
            }
            k.to_params()?;
        }
        if !(self.segment_s.is_finite() && self.segment_s > 0.0) {
            return Err(domain("segment_s must be positive"));
        }
        if !(0.0..1.0).contains(&self.crossfade) {
            return Err(domain("crossfade must be in [0, 1)"));
        }
        if let Some(seq) = &self.note_sequence {
            if seq.pattern.is_empty() || seq.pattern.len() > n {
                return Err(domain("note pattern must have between 1 and n segments"));
            }
            if seq.pattern.iter().flatten().any(|&j| j >= self.sources.len()) {
                return Err(domain("note pattern refers to a missing source"));
            }
            if !(seq.ramp_s.is_finite() && seq.ramp_s >= 0.0) {
                return Err(domain("ramp_s must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteSegment {
    pub start: usize,
    pub end: usize,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMetadata {
    pub num_sources: usize,
    pub num_samples: usize,
    pub sample_rate_hz: f64,
    pub noise_variance: f64,
    pub seed: u64,
    pub segment_samples: usize,
    pub crossfade_samples: usize,
    pub crossfade: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note_segments: Option<Vec<NoteSegment>>,
    pub warnings: Vec<String>,
    pub spec: BenchmarkSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub true_sources: Vec<Vec<f64>>,
    pub mixture: Vec<f64>,
    pub metadata: BenchmarkMetadata,
}

fn raised_cosine(x: f64, ramp: f64) -> f64 {
    if ramp <= 0.0 {
        return if x >= 0.0 { 1.0 } else { 0.0 };
    }
    let h = 0.5 * ramp;
    if x < -h {
        0.0
    } else if x >= h {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * (x + h) / ramp).cos()
    }
}

fn note_layout(n: usize, seq: &NoteSequence) -> Vec<NoteSegment> {
    let p = seq.pattern.len();
    (0..p)
        .map(|k| NoteSegment {
            start: k * n / p,
            end: (k + 1) * n / p,
            active: seq.pattern[k].clone(),
        })
        .collect()
}

/// Gain of source `j` at sample `i`: a sum of smoothed segment indicators
/// whose adjacent ramps add to one.
fn note_mask(n: usize, segs: &[NoteSegment], j: usize, ramp: f64) -> Vec<f64> {
    let last = segs.len() - 1;
    (0..n)
        .map(|i| {
            let x = i as f64;
            segs.iter()
                .enumerate()
                .filter(|(_, s)| s.active.contains(&j))
                .map(|(k, s)| {
                    let on = if k == 0 { 1.0 } else { raised_cosine(x - s.start as f64, ramp) };
                    let off = if k == last { 1.0 } else { 1.0 - raised_cosine(x - s.end as f64, ramp) };
                    on * off
                })
                .sum()
        })
        .collect()
}

pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let n = spec.num_samples();
    let rate = spec.sample_rate_hz;
    let mut warnings = Vec::new();
    let noise = if spec.noise_variance < NOISE_FLOOR {
        let msg = format!(
            "noise variance {} raised to the floor {NOISE_FLOOR}",
            spec.noise_variance
        );
        log::warn!("{msg}");
        warnings.push(msg);
        NOISE_FLOOR
    } else {
        spec.noise_variance
    };
    let kernels = spec
        .sources
        .iter()
        .map(KernelFile::to_params)
        .collect::<Result<Vec<_>>>()?;
    let prior = GpMixturePrior::new(kernels, NOISE_FLOOR)?;
    let j = prior.num_sources();

    let seg = ((spec.segment_s * rate).round() as usize).clamp(1, n);
    let fade = ((seg as f64 * spec.crossfade).round() as usize).min(seg - 1);
    let hop = seg - fade;
    let count = if n <= seg { 1 } else { (n - seg).div_ceil(hop) + 1 };

    let times: Vec<f64> = (0..seg).map(|i| i as f64 / rate).collect();
    let sampler = PriorSampler::new(&prior, &times)?;
    let mut seeder = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise_seed = seeder.next_u64();

    let mut sources = vec![vec![0.0; (count - 1) * hop + seg]; j];
    for s in 0..count {
        let draw = sampler.draw(seeder.next_u64());
        let start = s * hop;
        for k in 0..seg {
            let mut g = 1.0;
            if s > 0 && k < fade {
                g *= (FRAC_PI_2 * (k as f64 + 0.5) / fade as f64).sin();
            }
            if s + 1 < count && k >= hop {
                g *= (FRAC_PI_2 * ((k - hop) as f64 + 0.5) / fade as f64).cos();
            }
            for (out, src) in sources.iter_mut().zip(&draw.sources) {
                out[start + k] += g * src[k];
            }
        }
    }
    for s in sources.iter_mut() {
        s.truncate(n);
    }

    let note_segments = spec.note_sequence.as_ref().map(|seq| {
        let segs = note_layout(n, seq);
        let ramp = seq.ramp_s * rate;
        for (idx, src) in sources.iter_mut().enumerate() {
            let mask = note_mask(n, &segs, idx, ramp);
            for (v, m) in src.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        segs
    });

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let sd = noise.sqrt();
    let mixture = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            sources.iter().map(|s| s[i]).sum::<f64>() + sd * e
        })
        .collect();

    Ok(Benchmark {
        true_sources: sources,
        mixture,
        metadata: BenchmarkMetadata {
            num_sources: j,
            num_samples: n,
            sample_rate_hz: rate,
            noise_variance: noise,
            seed: spec.seed,
            segment_samples: seg,
            crossfade_samples: fade,
            crossfade: "independent prior draws per segment, equal-power sine/cosine cross-fade".into(),
            note_segments,
            warnings,
            spec: spec.clone(),
        },
    })
}

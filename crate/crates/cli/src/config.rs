use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Settings shared by the commands, loadable from a JSON config file.
/// Command-line flags override whatever the file sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mixture: Option<PathBuf>,
    pub kernels: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub frame_seconds: f64,
    pub overlap: f64,
    /// Number of spectral components per kernel when fitting.
    pub components: usize,
    pub max_lag_s: f64,
    /// Inducing point cap per frame; `None` uses a quarter of the frame.
    pub m_max: Option<usize>,
    pub seed: u64,
    pub strict: bool,
    /// Learn the per-frame noise variance along with the source variances.
    pub learn_noise: bool,
    /// Per-frame noise variance as a fraction of the frame variance.
    pub noise_ratio: f64,
    /// Dense exact learning instead of the inducing-point bound.
    pub full: bool,
    /// Worker threads, 0 for all available cores.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mixture: None,
            kernels: Vec::new(),
            out_dir: None,
            frame_seconds: gpss_core::framing::DEFAULT_FRAME_SECONDS,
            overlap: gpss_core::framing::DEFAULT_OVERLAP,
            components: 15,
            max_lag_s: gpss_core::kernelfit::DEFAULT_MAX_LAG,
            m_max: None,
            seed: 0,
            strict: false,
            learn_noise: false,
            noise_ratio: gpss_core::framing::DEFAULT_NOISE_RATIO,
            full: false,
            jobs: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_seconds.is_finite() && self.frame_seconds > 0.0) {
            bail!("frame_seconds must be positive, got {}", self.frame_seconds);
        }
        if !(0.0..1.0).contains(&self.overlap) {
            bail!("overlap must lie in [0, 1), got {}", self.overlap);
        }
        if self.components == 0 {
            bail!("components must be at least 1");
        }
        if !(self.max_lag_s.is_finite() && self.max_lag_s > 0.0) {
            bail!("max_lag_s must be positive, got {}", self.max_lag_s);
        }
        if self.m_max == Some(0) {
            bail!("m_max must be at least 1");
        }
        if !(self.noise_ratio.is_finite() && self.noise_ratio > 0.0) {
            bail!("noise_ratio must be positive, got {}", self.noise_ratio);
        }
        Ok(())
    }
}

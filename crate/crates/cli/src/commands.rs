use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gpss_core::audio::{read_wav, write_wav};
use gpss_core::bench::{self, SweepOptions, SweepRow, REFERENCE_SEED};
use gpss_core::eval::{bss_eval, make_benchmark, Benchmark, BenchmarkSpec, BssMetrics};
use gpss_core::framing::{make_plan, separate, LearningMethod, SeparateOptions, NOISE_FLOOR};
use gpss_core::gpcore::GpMixturePrior;
use gpss_core::kernel::KernelFile;
use gpss_core::kernelfit::{estimate_autocovariance, fit_msm, TrainingClip};
use gpss_core::sparsevi::LearnOptions;

use crate::config::RunConfig;

/// Exit status when a kernel fit fails or does not converge.
pub const EXIT_FIT_FAILURE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "gpss", version, about = "Single-channel source separation with Gaussian-process priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a spectral-mixture kernel to an isolated-source recording.
    Fit(FitArgs),
    /// Separate a mixture into one waveform per kernel.
    Separate(SeparateArgs),
    /// Score estimated sources against the true ones.
    Eval(EvalArgs),
    /// Refit kernels at several component counts and score each on a synthetic benchmark.
    BenchD(BenchDArgs),
    /// Time inducing-point learning against dense learning on a synthetic benchmark.
    BenchSpeed(BenchSpeedArgs),
    /// Write a synthetic benchmark (sources, mixture, metadata) to a directory.
    MakeBenchmark(MakeBenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Mono WAV recording of a single source.
    #[arg(long)]
    pub input: PathBuf,
    /// Output kernel JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of spectral components.
    #[arg(short = 'D', long = "D", visible_alias = "components", default_value_t = 15)]
    pub d: usize,
    /// Largest autocovariance lag in seconds.
    #[arg(long, default_value_t = gpss_core::kernelfit::DEFAULT_MAX_LAG)]
    pub max_lag: f64,
    /// Seed for the optimizer restarts.
    #[arg(long, env = "GPSS_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    /// JSON run config; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Mono WAV mixture.
    #[arg(long)]
    pub mixture: Option<PathBuf>,
    /// One kernel JSON per source, in output order.
    #[arg(long, num_args = 1..)]
    pub kernels: Vec<PathBuf>,
    /// Output directory for source WAVs, run log and timing summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Frame length in seconds [default: 0.125].
    #[arg(long)]
    pub frame_seconds: Option<f64>,
    /// Fraction of each frame shared with the next [default: 0.5].
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Learn variances on the dense exact likelihood instead of the sparse bound.
    #[arg(long)]
    pub full: bool,
    /// Inducing point cap per frame [default: a quarter of the frame].
    #[arg(long)]
    pub m_max: Option<usize>,
    /// Also learn the per-frame noise variance.
    #[arg(long)]
    pub learn_noise: bool,
    /// Noise variance as a fraction of the frame variance [default: 0.001].
    #[arg(long)]
    pub noise_ratio: Option<f64>,
    /// Stop at the first failing frame instead of zero-filling it.
    #[arg(long)]
    pub strict: bool,
    /// Worker threads, 0 for all cores [default: 0].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Write the effective configuration to this file.
    #[arg(long)]
    pub save_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of true source WAVs (mixture.wav is ignored).
    #[arg(long = "true")]
    pub truth: PathBuf,
    /// Directory of estimated source WAVs, same count and order.
    #[arg(long)]
    pub est: PathBuf,
    /// Metrics CSV; a JSON copy is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Benchmark spec JSON [default: the built-in two-note reference].
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Duration of the built-in reference benchmark in seconds.
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    /// Seed of the built-in reference benchmark.
    #[arg(long, env = "GPSS_SEED", default_value_t = REFERENCE_SEED)]
    pub seed: u64,
    /// Frame length in seconds.
    #[arg(long, default_value_t = gpss_core::framing::DEFAULT_FRAME_SECONDS)]
    pub frame_seconds: f64,
    /// Fraction of each frame shared with the next.
    #[arg(long, default_value_t = gpss_core::framing::DEFAULT_OVERLAP)]
    pub overlap: f64,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchDArgs {
    /// Comma-separated component counts.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8, 15])]
    pub sweep: Vec<usize>,
    /// Largest autocovariance lag in seconds.
    #[arg(long, default_value_t = gpss_core::kernelfit::DEFAULT_MAX_LAG)]
    pub max_lag: f64,
    #[command(flatten)]
    pub bench: BenchmarkArgs,
}

#[derive(Debug, Args)]
pub struct BenchSpeedArgs {
    /// Inducing point cap per frame.
    #[arg(long, default_value_t = 200)]
    pub m_max: usize,
    #[command(flatten)]
    pub bench: BenchmarkArgs,
}

#[derive(Debug, Args)]
pub struct MakeBenchmarkArgs {
    /// Benchmark spec JSON.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Separate(a) => cmd_separate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::BenchD(a) => cmd_bench_d(&a),
        Command::BenchSpeed(a) => cmd_bench_speed(&a),
        Command::MakeBenchmark(a) => cmd_make_benchmark(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn wav_rate(rate_hz: f64) -> Result<u32> {
    ensure!(
        rate_hz.fract() == 0.0 && rate_hz > 0.0 && rate_hz <= f64::from(u32::MAX),
        "sample rate {rate_hz} Hz cannot be stored in a WAV header"
    );
    Ok(rate_hz as u32)
}

pub fn cmd_fit(a: &FitArgs) -> Result<u8> {
    let audio = read_wav(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    ensure!(!audio.samples.is_empty(), "{} contains no samples", a.input.display());
    let rate = audio.sample_rate_hz();
    let clip = TrainingClip::new(audio.samples, rate)?;
    let target = estimate_autocovariance(&clip, a.max_lag, clip.default_window(a.max_lag))?;
    let report = match fit_msm(&target, a.d, a.seed) {
        Ok(r) => r,
        Err(e @ gpss_core::Error::FitFailure { .. }) => {
            eprintln!("error: {e}");
            return Ok(EXIT_FIT_FAILURE);
        }
        Err(e) => return Err(e.into()),
    };
    let name = a.input.file_stem().map_or_else(|| "source".into(), |s| s.to_string_lossy().into_owned());
    let mut file = KernelFile::from_params(name, rate, &report.params);
    file.final_mse = Some(report.final_mse);
    file.iterations = Some(report.iterations);
    file.save(&a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    println!(
        "fit D={} mse={:.6e} iterations={} converged={}",
        a.d, report.final_mse, report.iterations, report.converged
    );
    if !report.converged {
        eprintln!("warning: the fit stopped before converging");
        return Ok(EXIT_FIT_FAILURE);
    }
    Ok(0)
}

fn effective_config(a: &SeparateArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.mixture {
        cfg.mixture = Some(p.clone());
    }
    if !a.kernels.is_empty() {
        cfg.kernels = a.kernels.clone();
    }
    if let Some(p) = &a.out {
        cfg.out_dir = Some(p.clone());
    }
    cfg.frame_seconds = a.frame_seconds.unwrap_or(cfg.frame_seconds);
    cfg.overlap = a.overlap.unwrap_or(cfg.overlap);
    cfg.m_max = a.m_max.or(cfg.m_max);
    cfg.noise_ratio = a.noise_ratio.unwrap_or(cfg.noise_ratio);
    cfg.jobs = a.jobs.unwrap_or(cfg.jobs);
    cfg.full |= a.full;
    cfg.strict |= a.strict;
    cfg.learn_noise |= a.learn_noise;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct TimingSummary {
    method: LearningMethod,
    frames: usize,
    failed_frames: usize,
    mean_inducing: f64,
    learn_seconds: f64,
    total_optimization_minutes: f64,
    wall_seconds: f64,
}

pub fn cmd_separate(a: &SeparateArgs) -> Result<u8> {
    let started = Instant::now();
    let cfg = effective_config(a)?;
    if let Some(path) = &a.save_config {
        cfg.save(path)?;
    }
    let Some(mixture) = &cfg.mixture else { bail!("no mixture given (--mixture or config)") };
    let Some(out) = &cfg.out_dir else { bail!("no output directory given (--out or config)") };
    ensure!(!cfg.kernels.is_empty(), "no kernel files given (--kernels or config)");

    let audio = read_wav(mixture).with_context(|| format!("cannot read {}", mixture.display()))?;
    ensure!(!audio.samples.is_empty(), "{} contains no samples", mixture.display());
    let rate = audio.sample_rate_hz();
    let mut kernels = Vec::with_capacity(cfg.kernels.len());
    for path in &cfg.kernels {
        let file = KernelFile::load(path).with_context(|| format!("cannot load kernel {}", path.display()))?;
        ensure!(
            file.sample_rate_hz == rate,
            "kernel {} was fitted at {} Hz but the mixture is {} Hz",
            path.display(),
            file.sample_rate_hz,
            rate
        );
        kernels.push(file.to_params()?);
    }

    let plan = make_plan(audio.samples.len(), rate, cfg.frame_seconds, cfg.overlap)?;
    let prior = GpMixturePrior::new(kernels, NOISE_FLOOR)?;
    let opts = SeparateOptions {
        method: if cfg.full { LearningMethod::Exact } else { LearningMethod::Sparse },
        m_max: cfg.m_max,
        learn_noise: cfg.learn_noise,
        noise_ratio: cfg.noise_ratio,
        learn: LearnOptions::default(),
        strict: cfg.strict,
        jobs: cfg.jobs,
    };
    let res = separate(&audio.samples, &plan, &prior, &opts)?;

    create_dir(out)?;
    for (j, src) in res.sources.iter().enumerate() {
        write_wav(out.join(format!("source_{j}.wav")), src, audio.sample_rate)?;
    }
    let mut log = String::new();
    for r in &res.per_frame {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    std::fs::write(out.join("run_log.jsonl"), log)?;
    let failed = res.per_frame.iter().filter(|r| r.error.is_some()).count();
    let timing = TimingSummary {
        method: opts.method,
        frames: res.per_frame.len(),
        failed_frames: failed,
        mean_inducing: res.per_frame.iter().map(|r| r.m as f64).sum::<f64>() / res.per_frame.len() as f64,
        learn_seconds: res.learn_seconds(),
        total_optimization_minutes: res.learn_seconds() / 60.0,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("timing.json"), &timing)?;
    println!(
        "separated {} sources over {} frames ({} failed), optimization {:.3} min",
        res.sources.len(),
        timing.frames,
        failed,
        timing.total_optimization_minutes
    );
    Ok(0)
}

/// Trailing number of a file stem, so `source_10` sorts after `source_9`.
fn sort_key(path: &Path) -> (String, u64) {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let digits = stem.len() - stem.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let (head, tail) = stem.split_at(stem.len() - digits);
    (head.to_string(), tail.parse().unwrap_or(0))
}

fn source_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .filter(|p| p.file_stem().is_some_and(|s| s != "mixture"))
        .collect();
    paths.sort_by_key(|p| sort_key(p));
    ensure!(!paths.is_empty(), "no WAV files in {}", dir.display());
    Ok(paths)
}

fn load_sources(dir: &Path) -> Result<(Vec<Vec<f64>>, u32)> {
    let mut out = Vec::new();
    let mut rate = None;
    for p in source_wavs(dir)? {
        let audio = read_wav(&p).with_context(|| format!("cannot read {}", p.display()))?;
        if let Some(r) = rate {
            ensure!(r == audio.sample_rate, "{} has a different sample rate", p.display());
        }
        rate = Some(audio.sample_rate);
        out.push(audio.samples);
    }
    Ok((out, rate.unwrap_or(0)))
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    source_id: usize,
    sdr_db: f64,
    sir_db: f64,
    sar_db: f64,
    rmse: f64,
}

fn metric_rows(metrics: &[BssMetrics]) -> Vec<MetricsRow> {
    metrics
        .iter()
        .enumerate()
        .map(|(j, m)| MetricsRow {
            source_id: j,
            sdr_db: m.sdr,
            sir_db: m.sir,
            sar_db: m.sar,
            rmse: m.rmse,
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<u8> {
    let (truth, rate_t) = load_sources(&a.truth)?;
    let (est, rate_e) = load_sources(&a.est)?;
    ensure!(
        truth.len() == est.len(),
        "{} true sources but {} estimates",
        truth.len(),
        est.len()
    );
    ensure!(rate_t == rate_e, "true sources are {rate_t} Hz but estimates are {rate_e} Hz");
    let rows = metric_rows(&bss_eval(&truth, &est)?);
    write_csv(&a.out, &rows)?;
    write_json(&a.out.with_extension("json"), &rows)?;
    for r in &rows {
        println!(
            "source {}: SDR {:.2} dB  SIR {:.2} dB  SAR {:.2} dB  RMSE {:.5}",
            r.source_id, r.sdr_db, r.sir_db, r.sar_db, r.rmse
        );
    }
    Ok(0)
}

fn load_spec(path: &Path) -> Result<BenchmarkSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let spec = BenchmarkSpec::from_json(&text).with_context(|| format!("invalid spec {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

/// Test benchmark plus an independent draw of the same sources for fitting.
fn benchmark_pair(a: &BenchmarkArgs) -> Result<(Benchmark, Benchmark)> {
    let spec = match &a.spec {
        Some(path) => load_spec(path)?,
        None => bench::reference_spec(a.duration, a.seed)?,
    };
    let mut train_spec = spec.clone();
    train_spec.seed = bench::training_seed(spec.seed);
    Ok((make_benchmark(&spec)?, make_benchmark(&train_spec)?))
}

#[derive(Debug, Serialize)]
struct SweepCsvRow {
    d: usize,
    median_rmse: f64,
    median_sdr_db: f64,
    median_sir_db: f64,
    median_sar_db: f64,
    learn_seconds: f64,
}

impl From<&SweepRow> for SweepCsvRow {
    fn from(r: &SweepRow) -> Self {
        Self {
            d: r.d,
            median_rmse: r.median_rmse,
            median_sdr_db: r.median_sdr,
            median_sir_db: r.median_sir,
            median_sar_db: r.median_sar,
            learn_seconds: r.learn_seconds,
        }
    }
}

pub fn cmd_bench_d(a: &BenchDArgs) -> Result<u8> {
    ensure!(!a.sweep.is_empty(), "--sweep needs at least one component count");
    ensure!(a.sweep.iter().all(|&d| d > 0), "component counts must be positive");
    let (test, train) = benchmark_pair(&a.bench)?;
    let opts = SweepOptions {
        frame_seconds: a.bench.frame_seconds,
        overlap: a.bench.overlap,
        max_lag: a.max_lag,
        fit_seed: 0,
        separate: SeparateOptions {
            jobs: a.bench.jobs,
            ..Default::default()
        },
    };
    let rows = bench::d_sweep(&train.true_sources, &test, &a.sweep, &opts)?;
    create_dir(&a.bench.out)?;
    let table: Vec<SweepCsvRow> = rows.iter().map(SweepCsvRow::from).collect();
    write_csv(&a.bench.out.join("d_sweep.csv"), &table)?;
    write_json(&a.bench.out.join("d_sweep.json"), &rows)?;
    println!("{:>4} {:>10} {:>9} {:>9} {:>9}", "D", "RMSE", "SDR", "SIR", "SAR");
    for r in &rows {
        println!(
            "{:>4} {:>10.5} {:>9.2} {:>9.2} {:>9.2}",
            r.d, r.median_rmse, r.median_sdr, r.median_sir, r.median_sar
        );
    }
    Ok(0)
}

pub fn cmd_bench_speed(a: &BenchSpeedArgs) -> Result<u8> {
    ensure!(a.m_max > 0, "--m-max must be positive");
    let spec = match &a.bench.spec {
        Some(path) => load_spec(path)?,
        None => bench::reference_spec(a.bench.duration, a.bench.seed)?,
    };
    let test = make_benchmark(&spec)?;
    let kernels = spec.sources.iter().map(KernelFile::to_params).collect::<Result<Vec<_>, _>>()?;
    let opts = SeparateOptions {
        m_max: Some(a.m_max),
        jobs: a.bench.jobs,
        ..Default::default()
    };
    let report = bench::compare_sparse_full(&test, kernels, a.bench.frame_seconds, a.bench.overlap, &opts)?;
    create_dir(&a.bench.out)?;
    write_json(&a.bench.out.join("timing.json"), &report)?;
    println!(
        "sparse {:.2}s, dense {:.2}s, speedup {:.2}x, RMSE {:?} vs {:?}",
        report.sparse_learn_seconds, report.full_learn_seconds, report.speedup, report.sparse_rmse, report.full_rmse
    );
    Ok(0)
}

pub fn cmd_make_benchmark(a: &MakeBenchmarkArgs) -> Result<u8> {
    let spec = load_spec(&a.spec)?;
    let rate = wav_rate(spec.sample_rate_hz)?;
    let b = make_benchmark(&spec)?;
    create_dir(&a.out)?;
    for (j, src) in b.true_sources.iter().enumerate() {
        write_wav(a.out.join(format!("source_{j}.wav")), src, rate)?;
    }
    write_wav(a.out.join("mixture.wav"), &b.mixture, rate)?;
    write_json(&a.out.join("metadata.json"), &b.metadata)?;
    for w in &b.metadata.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {} sources and the mixture to {}", b.true_sources.len(), a.out.display());
    Ok(0)
}

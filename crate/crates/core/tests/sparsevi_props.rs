mod common;

use std::f64::consts::{PI, TAU};
use std::time::Instant;

use common::*;
use gpss_core::eval::median;
use gpss_core::gpcore::{log_marginal, sample_prior, GpMixturePrior};
use gpss_core::kernel::{MsmKernelParams, SumKernel};
use gpss_core::linalg::JITTER_START;
use gpss_core::sparsevi::{
    elbo, learn_variances, learn_variances_exact, InducingSet, LearnOptions, ParamMask, SparseObjective,
};

#[test]
fn bound_never_exceeds_log_marginal() {
    for seed in 0..200u64 {
        let n = 4 + (seed as usize * 13) % 125;
        let m = 1 + (seed as usize * 7) % n;
        let inst = random_instance(seed, n);
        let z = InducingSet::from_indices(&inst.t, random_subset(seed, n, m)).unwrap();
        let lb = elbo(&inst.prior, &inst.t, &inst.y, &z).unwrap().value;
        let lm = log_marginal(&inst.prior, &inst.t, &inst.y).unwrap();
        assert!(lm - lb >= -1e-8, "seed {seed} n {n} m {m}: {lb} > {lm}");
    }
}

#[test]
fn full_inducing_set_is_tight() {
    for seed in 1000..1040u64 {
        let n = 8 + (seed as usize * 11) % 120;
        let inst = random_instance(seed, n);
        let z = InducingSet::from_indices(&inst.t, (0..n).collect()).unwrap();
        let lb = elbo(&inst.prior, &inst.t, &inst.y, &z).unwrap();
        let lm = log_marginal(&inst.prior, &inst.t, &inst.y).unwrap();
        assert!(rel(lb.value, lm) <= 1e-6, "seed {seed}: {} vs {lm}", lb.value);
        assert!(lb.trace_term <= 1e-10);
    }
}

/// Bound assembled from explicit n x n matrices, with the same first
/// jitter on `K_mm` the library applies.
fn dense_bound(inst: &Instance, z: &[f64]) -> f64 {
    let kf = SumKernel::new(inst.prior.kernels().to_vec()).unwrap();
    let k0: f64 = inst.prior.mixture_k0();
    let knn = dense_gram(&kf, &inst.t, &inst.t);
    let knm = dense_gram(&kf, &inst.t, z);
    let kmm = add_diag(&dense_gram(&kf, z, z), JITTER_START * k0);
    let (kmm_inv, _) = inverse_and_logdet(&kmm);
    let q = matmul(&matmul(&knm, &kmm_inv), &transpose(&knm));
    let nu = inst.prior.noise_variance();
    let (c_inv, logdet) = inverse_and_logdet(&add_diag(&q, nu));
    let n = inst.t.len() as f64;
    let fit = -0.5 * (dot(&inst.y, &matvec(&c_inv, &inst.y)) + logdet + n * (2.0 * PI).ln());
    fit - 0.5 / nu * (trace(&knn) - trace(&q))
}

#[test]
fn matches_dense_construction() {
    for seed in 0..30u64 {
        let inst = random_instance(5000 + seed, 16);
        let idx = random_subset(seed, 16, 4);
        let z = InducingSet::from_indices(&inst.t, idx).unwrap();
        let got = elbo(&inst.prior, &inst.t, &inst.y, &z).unwrap();
        let expect = dense_bound(&inst, z.points());
        assert!(rel(got.value, expect) < 1e-10, "seed {seed}: {} vs {expect}", got.value);
        assert!((got.value - got.fit_term - got.trace_term).abs() <= 1e-12 * got.value.abs());
    }
}

#[test]
fn log_variance_gradient_matches_central_differences() {
    for seed in 0..50u64 {
        let n = 20 + (seed as usize * 3) % 60;
        let m = 2 + (seed as usize) % (n / 2);
        let inst = random_instance(7000 + seed, n);
        let z = InducingSet::from_indices(&inst.t, random_subset(seed, n, m)).unwrap();
        let obj = SparseObjective::new(&inst.prior, &inst.t, &inst.y, &z).unwrap();
        let v = inst.prior.variances();
        let nu = inst.prior.noise_variance();
        let ev = obj.evaluate(&v, nu, true).unwrap();
        let h = 1e-5;
        for j in 0..v.len() {
            let mut up = v.clone();
            let mut dn = v.clone();
            up[j] *= f64::exp(h);
            dn[j] *= f64::exp(-h);
            let fd = (obj.evaluate(&up, nu, false).unwrap().value - obj.evaluate(&dn, nu, false).unwrap().value) / (2.0 * h);
            let an = ev.grad_variances[j] * v[j];
            let err = (fd - an).abs() / an.abs().max(fd.abs());
            assert!(err < 1e-4, "seed {seed} source {j}: {fd} vs {an}");
        }
    }
}

#[test]
fn recovers_source_variances_when_the_bound_is_tight() {
    // 8 kHz frames spanning many lengthscales, noise comparable to the
    // signal, inducing points on every second sample
    let truth = [1.0, 0.5];
    let kernels = vec![
        MsmKernelParams::single(truth[0], 0.005, TAU * 200.0).unwrap(),
        MsmKernelParams::single(truth[1], 0.005, TAU * 900.0).unwrap(),
    ];
    let gen = GpMixturePrior::new(kernels, 1.5).unwrap();
    let start = gen.with_variances(&[1.0, 1.0]).unwrap();
    let n = 501;
    let t: Vec<f64> = (0..n).map(|i| i as f64 / 8000.0).collect();
    let mut errs = [Vec::new(), Vec::new()];
    for seed in 0..20 {
        let y = sample_prior(&gen, &t, seed).unwrap().mixture;
        let z = InducingSet::from_indices(&t, (0..n).step_by(2).collect()).unwrap();
        let rep = learn_variances(&start, &t, &y, &z, &ParamMask::variances_only(2), &LearnOptions::default()).unwrap();
        for (j, v) in rep.learned.variances().iter().enumerate() {
            errs[j].push((v / truth[j] - 1.0).abs());
        }
        assert!(rep.trace.windows(2).all(|w| w[1] >= w[0]));
    }
    for (j, e) in errs.iter().enumerate() {
        assert!(median(e) < 0.25, "source {j}: median relative error {}", median(e));
    }
}

#[test]
fn exact_regime_matches_grid_search() {
    let k = MsmKernelParams::single(1.0, 0.004, TAU * 500.0).unwrap();
    let gen = GpMixturePrior::new(vec![k.with_variance(0.7).unwrap()], 0.1).unwrap();
    let t: Vec<f64> = (0..80).map(|i| i as f64 / 8000.0).collect();
    let y = sample_prior(&gen, &t, 3).unwrap().mixture;
    let start = gen.with_variances(&[1.0]).unwrap();
    let z = InducingSet::from_indices(&t, (0..80).collect()).unwrap();
    let opts = LearnOptions {
        rel_tol: 1e-12,
        ..Default::default()
    };
    let learned = learn_variances(&start, &t, &y, &z, &ParamMask::variances_only(1), &opts)
        .unwrap()
        .learned
        .variances()[0];
    let (mut best, mut best_v) = (f64::NEG_INFINITY, 0.0);
    for i in 0..4000 {
        let v = (0.01f64.ln() + i as f64 * (1e4f64.ln() / 4000.0)).exp();
        let lm = log_marginal(&gen.with_variances(&[v]).unwrap(), &t, &y).unwrap();
        if lm > best {
            best = lm;
            best_v = v;
        }
    }
    assert!(rel(learned, best_v) < 0.01, "{learned} vs grid {best_v}");
    let exact = learn_variances_exact(&start, &t, &y, &ParamMask::variances_only(1), &opts).unwrap();
    assert!(rel(exact.learned.variances()[0], best_v) < 0.01);
}

#[test]
fn cost_grows_linearly_in_frame_length() {
    let k = MsmKernelParams::single(1.0, 0.01, TAU * 300.0).unwrap();
    let prior = GpMixturePrior::new(vec![k.clone(), k.with_variance(0.5).unwrap()], 0.01).unwrap();
    let m = 100;
    let sizes = [500usize, 1000, 2000, 4000];
    let mut times = Vec::new();
    for &n in &sizes {
        let t: Vec<f64> = (0..n).map(|i| i as f64 / 16000.0).collect();
        let y: Vec<f64> = t.iter().map(|x| (1900.0 * x).sin()).collect();
        let z = InducingSet::from_indices(&t, (0..n).step_by(n / m).take(m).collect()).unwrap();
        let best = (0..5)
            .map(|_| {
                let s = Instant::now();
                elbo(&prior, &t, &y, &z).unwrap();
                s.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min);
        times.push(best);
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let mx = xs.iter().sum::<f64>() / 4.0;
    let my = ys.iter().sum::<f64>() / 4.0;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!(slope <= 1.3, "empirical exponent {slope:.3}, times {times:?}");
}

mod common;

use common::*;
use gpss_core::gpcore::{log_marginal, posterior, source_posterior_covariance, GpMixturePrior};
use gpss_core::kernel::{Kernel, MsmKernelParams};

fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

struct Oracle {
    h_inv: Dense,
    logdet: f64,
    grams: Vec<Dense>,
}

fn oracle(inst: &Instance) -> Oracle {
    let grams: Vec<Dense> = inst
        .prior
        .kernels()
        .iter()
        .map(|k| dense_gram(k, &inst.t, &inst.t))
        .collect();
    let kf = grams[1..].iter().fold(grams[0].clone(), |acc, g| add(&acc, g));
    let (h_inv, logdet) = inverse_and_logdet(&add_diag(&kf, inst.prior.noise_variance()));
    Oracle { h_inv, logdet, grams }
}

#[test]
fn log_marginal_matches_dense_inverse() {
    for seed in 0..40 {
        let n = 1 + (seed as usize * 7) % 32;
        let inst = random_instance(seed, n);
        let o = oracle(&inst);
        let quad = dot(&inst.y, &matvec(&o.h_inv, &inst.y));
        let expect = -0.5 * (quad + o.logdet + n as f64 * (2.0 * std::f64::consts::PI).ln());
        let got = log_marginal(&inst.prior, &inst.t, &inst.y).unwrap();
        assert!(rel(got, expect) < 1e-10, "seed {seed}: {got} vs {expect}");
    }
}

#[test]
fn posterior_means_match_dense_inverse() {
    for seed in 100..140 {
        let n = 2 + (seed as usize * 5) % 31;
        let inst = random_instance(seed, n);
        let o = oracle(&inst);
        let alpha = matvec(&o.h_inv, &inst.y);
        let post = posterior(&inst.prior, &inst.t, &inst.y, true).unwrap();
        for (j, g) in o.grams.iter().enumerate() {
            let expect = matvec(g, &alpha);
            assert!(vec_rel(&post.source_means[j], &expect) < 1e-10, "seed {seed} source {j}");
            let cov = add(g, &matmul(&matmul(g, &o.h_inv), g).iter().map(|r| r.iter().map(|v| -v).collect()).collect());
            for i in 0..n {
                let d = post.source_variances[j][i];
                assert!((d - cov[i][i].max(0.0)).abs() <= 1e-10 * g[i][i], "seed {seed} var {i}");
            }
        }
    }
}

#[test]
fn full_covariance_matches_dense_inverse() {
    let inst = random_instance(7, 12);
    let o = oracle(&inst);
    let g = &o.grams[0];
    let expect = add(g, &matmul(&matmul(g, &o.h_inv), g).iter().map(|r| r.iter().map(|v| -v).collect()).collect());
    let got = source_posterior_covariance(&inst.prior, &inst.t, &inst.y, 0).unwrap();
    for i in 0..12 {
        for k in 0..12 {
            assert!((got[(i, k)] - expect[i][k]).abs() < 1e-10 * g[0][0]);
        }
    }
}

#[test]
fn source_means_add_up_to_mixture_mean() {
    for seed in 200..230 {
        let inst = random_instance(seed, 64);
        let post = posterior(&inst.prior, &inst.t, &inst.y, false).unwrap();
        let sum: Vec<f64> = (0..64)
            .map(|i| post.source_means.iter().map(|m| m[i]).sum())
            .collect();
        assert!(vec_rel(&sum, &post.mixture_mean) < 1e-10, "seed {seed}");
    }
}

#[test]
fn posterior_variance_never_exceeds_prior() {
    for seed in 300..320 {
        let inst = random_instance(seed, 48);
        let post = posterior(&inst.prior, &inst.t, &inst.y, true).unwrap();
        for (k, var) in inst.prior.kernels().iter().zip(&post.source_variances) {
            let prior_var = k.eval(0.0);
            assert!(var.iter().all(|&v| (0.0..=prior_var * (1.0 + 1e-12)).contains(&v)));
        }
    }
}

#[test]
fn vanishing_noise_interpolates() {
    let k = MsmKernelParams::single(1.0, 0.01, 2.0 * std::f64::consts::PI * 300.0).unwrap();
    let prior = GpMixturePrior::new(vec![k.clone()], 1e-8 * k.k0()).unwrap();
    let t: Vec<f64> = (0..30).map(|i| i as f64 / 4000.0).collect();
    let y: Vec<f64> = t.iter().map(|x| (900.0 * x).sin() + 0.3 * (2100.0 * x).cos()).collect();
    let post = posterior(&prior, &t, &y, false).unwrap();
    let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in post.mixture_mean.iter().zip(&y) {
        assert!((a - b).abs() < 1e-3 * ymax);
    }
}

#[test]
fn huge_noise_shrinks_to_zero() {
    let inst = random_instance(9, 40);
    let big = inst.prior.with_noise(1e6 * inst.prior.mixture_k0()).unwrap();
    let post = posterior(&big, &inst.t, &inst.y, false).unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&post.mixture_mean) <= 1e-4 * norm(&inst.y));
}

//! Property checks against independent oracles, run by `pfl verify` and the
//! acceptance tests.

use std::fmt;

use nalgebra::DMatrix;

use pfl_core::fixtures::{random_model, random_spec, BaseKind, ALL_FAMILIES};
use pfl_core::objectives::{Blocks, QuadraticBase, QuadraticTerm, Samples};
use pfl_core::optimizers::{
    acd_params, scd_estimate, svrg_estimate, theory_p_w, LsgdParams, Optimizer, Params, SampleDraw, StepSchedule,
};
use pfl_core::rng::{RngStream, StreamId};
use pfl_core::verify::{fd_gradient, hessian_block_norm, hessian_block_norm_samples, monte_carlo_mean, reference_solve, relative_error, HessianBlock};
use pfl_core::{eval_loss, BaseLoss, Block, Family, FamilyKind, ObjectiveSpec, PartitionedModel, Result};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{status}] {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn stream(seed: u64, tag: u64) -> RngStream {
    RngStream::new(seed, StreamId::new(0x0AC1E, tag, 0))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Analytic versus central-difference gradients (`h = 1e-5`) for every
/// family and base on random instances with `d <= 10`, `M <= 5`, `n <= 8`.
pub fn gradient_check(instances: usize, seed: u64) -> Result<Check> {
    const TOL: f64 = 1e-6;
    let mut r = stream(seed, 1);
    let mut worst = 0.0f64;
    let mut count = 0;
    for base in [BaseKind::Quadratic, BaseKind::Logistic] {
        for kind in ALL_FAMILIES {
            for i in 0..instances {
                let (m, n, d) = (1 + r.index(5), 1 + r.index(8), 1 + r.index(10));
                let spec = random_spec(&mut r, kind, base, m, n, d, i % 2 == 0);
                let x = random_model(&mut r, &spec.shape()?, 1.0);
                let analytic = spec.gradient(&x, Samples::All, Blocks::BOTH)?.flatten();
                worst = worst.max(relative_error(&analytic, &fd_gradient(&spec, &x, 1e-5)?));
                count += 1;
            }
        }
    }
    Ok(check(
        "gradient correctness",
        worst <= TOL,
        format!("{count} instances, worst relative error {worst:.2e} (tol {TOL:.0e})"),
    ))
}

/// Block Hessian norms (and per-sample norms) stay below the profile
/// constants times `1 + 1e-3`.
pub fn smoothness_check(instances: usize, seed: u64) -> Result<Check> {
    const SLACK: f64 = 1e-3;
    let mut r = stream(seed, 2);
    let mut worst = 0.0f64;
    let mut count = 0;
    for base in [BaseKind::Quadratic, BaseKind::Logistic] {
        for kind in ALL_FAMILIES {
            for i in 0..instances {
                let (m, n, d) = (1 + r.index(4), 1 + r.index(5), 1 + r.index(5));
                let spec = random_spec(&mut r, kind, base, m, n, d, i % 2 == 0);
                let c = spec.base().constants();
                let p = pfl_core::smoothness_profile(&spec, c.mu_prime, c.l_prime, c.ll_prime)?;
                let x = random_model(&mut r, &spec.shape()?, 1.0);
                let j = r.index(n);
                let pairs = [
                    (hessian_block_norm(&spec, &x, HessianBlock::W)?, p.l_w),
                    (hessian_block_norm(&spec, &x, HessianBlock::Beta)?, p.l_beta),
                    (hessian_block_norm_samples(&spec, &x, HessianBlock::W, Samples::One(j))?, p.ll_w),
                    (hessian_block_norm_samples(&spec, &x, HessianBlock::Beta, Samples::One(j))?, p.ll_beta),
                ];
                for (h, bound) in pairs {
                    let ratio = if bound > 0.0 {
                        h / bound
                    } else if h <= 1e-9 {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                    worst = worst.max(ratio);
                }
                count += 1;
            }
        }
    }
    Ok(check(
        "smoothness constants",
        worst <= 1.0 + SLACK,
        format!("{count} instances, worst norm / constant {worst:.6} (limit {})", 1.0 + SLACK),
    ))
}

/// Monte Carlo means of the SCD, SVRCD and ASVRCD estimators against the
/// full gradient, within 3 standard errors in l2.
pub fn unbiasedness_check(points: usize, draws: usize, seed: u64) -> Result<Check> {
    const K_SE: f64 = 3.0;
    let mut r = stream(seed, 3);
    let spec = random_spec(&mut r, FamilyKind::Mx2, BaseKind::Logistic, 4, 6, 4, true);
    let shape = spec.shape()?;
    let c = spec.base().constants();
    let profile = pfl_core::smoothness_profile(&spec, c.mu_prime.max(1e-2), c.l_prime, c.ll_prime)?;
    let p_w = theory_p_w(&profile)?.max(0.2);
    let n = spec.n();
    let mut worst = 0.0f64;
    for point in 0..points {
        let [y, z, v] = [0, 1, 2].map(|_| random_model(&mut r, &shape, 1.0));
        let anchor = spec.gradient(&v, Samples::All, Blocks::BOTH)?;
        let (t1, t2) = (0.3, 0.5);
        let mut x_acc = PartitionedModel::lincomb(t1, &z, t2, &v);
        x_acc.add_scaled(1.0 - t1 - t2, &y);
        for (estimator, x) in [("scd", &y), ("svrcd", &y), ("asvrcd", &x_acc)] {
            let full = spec.gradient(x, Samples::All, Blocks::BOTH)?.flatten();
            let mut s = stream(seed, 100 + point as u64);
            let (mean, se) = monte_carlo_mean(draws, |_| {
                let draw = SampleDraw::Shared(s.index(n));
                let live = if s.uniform() < p_w { Block::W } else { Block::Beta };
                let g = match estimator {
                    "scd" => scd_estimate(&spec, x, &draw, live, p_w)?,
                    _ => svrg_estimate(&spec, x, &v, &anchor, &draw, live, p_w)?,
                };
                Ok(g.flatten())
            })?;
            let err = mean.iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(err / se.max(f64::MIN_POSITIVE));
        }
    }
    Ok(check(
        "estimator unbiasedness",
        worst <= K_SE,
        format!("{points} points x 3 estimators x {draws} draws, worst |mean - grad| / SE = {worst:.3} (limit {K_SE})"),
    ))
}

fn rotated_quadratic(r: &mut RngStream, eigenvalues: &[f64]) -> DMatrix<f64> {
    let d = eigenvalues.len();
    let g = DMatrix::from_fn(d, d, |_, _| r.normal());
    let q = g.qr().q();
    let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(eigenvalues));
    let a = &q * diag * q.transpose();
    (&a + a.transpose()) * 0.5
}

fn quadratic_spec(family: Family, matrices: Vec<DMatrix<f64>>, r: &mut RngStream) -> Result<ObjectiveSpec> {
    let d = matrices[0].nrows();
    let terms = matrices
        .into_iter()
        .map(|a| {
            let b = (0..d).map(|_| r.uniform_range(-1.0, 1.0)).collect();
            QuadraticTerm::new(a, b).map(|t| vec![t])
        })
        .collect::<Result<Vec<_>>>()?;
    ObjectiveSpec::new(family, BaseLoss::Quadratic(QuadraticBase::new(terms)?), true)
}

/// Fraction of ACD w-branch events with `L^w = 1`, `L^beta = 4`, whose
/// theory probability is `1/3`.
pub fn block_frequency_check(iterations: u64, seed: u64) -> Result<Check> {
    const BAND: (f64, f64) = (0.323, 0.343);
    let mut r = stream(seed, 4);
    // MX2 with M = 1, lambda = 1 and base eigenvalues in [0.3, 3]:
    // L^w = lambda = 1, L^beta = L' + lambda = 4.
    let a = rotated_quadratic(&mut r, &[0.3, 3.0]);
    let spec = quadratic_spec(Family::Mx2 { lambda: 1.0 }, vec![a], &mut r)?;
    let c = spec.base().constants();
    let profile = pfl_core::smoothness_profile(&spec, c.mu_prime, c.l_prime, c.ll_prime)?;
    let params = acd_params(&profile)?;
    let init = PartitionedModel::zeros(&spec.shape()?);
    let mut opt = Optimizer::new(&spec, Params::Acd(params), &init, seed, 0, false)?;
    for _ in 0..iterations {
        opt.step()?;
    }
    let freq = opt.events().w_branch as f64 / iterations as f64;
    Ok(check(
        "block sampling frequency",
        (BAND.0..=BAND.1).contains(&freq),
        format!(
            "L^w = {}, L^beta = {}, p_w = {:.6}, w-branch fraction {freq:.4} over {iterations} iterations (band [{}, {}])",
            profile.l_w, profile.l_beta, params.p_w, BAND.0, BAND.1
        ),
    ))
}

/// Iterations for ACD to reach `F - F* <= 1e-10` on strongly convex MX2
/// quadratics (`M = 10`, `d = 5`), relative to
/// `20 sqrt((L^w + L^beta) / mu) ln((F0 - F*) / 1e-10)`; median over seeds.
pub fn rate_envelope_check(seeds: u64) -> Result<Check> {
    const EPS: f64 = 1e-10;
    const FACTOR: f64 = 20.0;
    let (m, d) = (10, 5);
    let (mu_prime, l_prime, lambda): (f64, f64, f64) = (0.004, 1.0, 0.01);
    let mut ratios = Vec::new();
    let mut kappas = Vec::new();
    let mut detail_iters = Vec::new();
    for seed in 0..seeds {
        let mut r = stream(seed, 5);
        let eig: Vec<f64> = (0..d)
            .map(|i| mu_prime * (l_prime / mu_prime).powf(i as f64 / (d - 1) as f64))
            .collect();
        let matrices = (0..m).map(|_| rotated_quadratic(&mut r, &eig)).collect();
        let spec = quadratic_spec(Family::Mx2 { lambda }, matrices, &mut r)?;
        let c = spec.base().constants();
        let profile = pfl_core::smoothness_profile(&spec, c.mu_prime, c.l_prime, c.ll_prime)?;
        let kappa = (profile.l_w + profile.l_beta) / profile.mu;
        let f_star = eval_loss(&spec, &reference_solve(&spec, 1e-13)?)?;
        let init = PartitionedModel::zeros(&spec.shape()?);
        let f0 = eval_loss(&spec, &init)?;
        let budget = FACTOR * kappa.sqrt() * ((f0 - f_star) / EPS).ln();
        let mut opt = Optimizer::new(&spec, Params::Acd(acd_params(&profile)?), &init, seed, 0, false)?;
        let cap = (10.0 * budget) as u64;
        while eval_loss(&spec, &opt.output())? - f_star > EPS && opt.iteration() < cap {
            opt.step()?;
        }
        let iters = if opt.iteration() >= cap { f64::INFINITY } else { opt.iteration() as f64 };
        ratios.push(iters / budget);
        kappas.push(kappa);
        detail_iters.push(iters);
    }
    let med = median(ratios);
    Ok(check(
        "ACD rate envelope",
        med <= 1.0,
        format!(
            "kappa ~ {:.0}, median iterations-to-1e-10 / envelope = {med:.3} (limit 1; median iterations {:.0})",
            median(kappas),
            median(detail_iters)
        ),
    ))
}

fn lsgd(eta: f64, tau: usize, batch: usize) -> Params {
    Params::Lsgd(LsgdParams {
        schedule: StepSchedule::Constant { eta },
        tau,
        batch,
        weighted_average: false,
        mu: 0.0,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// LSGD with one client against single-machine SGD, and LSGD with `tau = 1`
/// and no local block against minibatch SGD on the average loss; worst
/// per-step l2 distance under the same index streams.
pub fn reduction_check(steps: u64, seed: u64) -> Result<Check> {
    const TOL: f64 = 1e-12;
    let (eta, batch, n) = (0.05, 2, 6);
    let mut r = stream(seed, 6);
    let indices = |m: usize, k: u64| -> Vec<usize> {
        let mut s = RngStream::new(seed, StreamId::new(0, m as u64, k));
        (0..batch).map(|_| s.index(n)).collect()
    };

    let single = random_spec(&mut r, FamilyKind::Mx2, BaseKind::Logistic, 1, n, 4, true);
    let init = random_model(&mut r, &single.shape()?, 0.5);
    let mut opt = Optimizer::new(&single, lsgd(eta, 4, batch), &init, seed, 0, false)?;
    let mut sgd = init.clone();
    let mut worst_single = 0.0f64;
    for k in 0..steps {
        opt.step()?;
        let idx = indices(0, k);
        let g = single.gradient(&sgd, Samples::Batch(&idx), Blocks::BOTH)?;
        sgd.add_scaled(-eta, &g);
        worst_single = worst_single.max(distance(&opt.output().flatten(), &sgd.flatten()));
    }

    let m = 4;
    let trad = random_spec(&mut r, FamilyKind::Trad, BaseKind::Logistic, m, n, 4, true);
    let init = random_model(&mut r, &trad.shape()?, 0.5);
    let mut opt = Optimizer::new(&trad, lsgd(eta, 1, batch), &init, seed, 0, false)?;
    let mut w = init.w().to_vec();
    let mut worst_trad = 0.0f64;
    for k in 0..steps {
        opt.step()?;
        let mut g = vec![0.0; w.len()];
        for client in 0..m {
            let idx = indices(client, k);
            let (gw, _) = trad.client_gradient(client, &w, &[], Samples::Batch(&idx), Blocks::BOTH);
            g.iter_mut().zip(gw).for_each(|(a, b)| *a += b / m as f64);
        }
        w.iter_mut().zip(&g).for_each(|(v, gv)| *v -= eta * gv);
        worst_trad = worst_trad.max(distance(opt.output().w(), &w));
    }
    Ok(check(
        "LSGD reductions",
        worst_single <= TOL && worst_trad <= TOL,
        format!("{steps} steps: M = 1 vs SGD {worst_single:.1e}, tau = 1 TRAD vs minibatch SGD {worst_trad:.1e} (tol {TOL:.0e})"),
    ))
}

/// The shared block of the MX2 reference solution equals
/// `M^{1/2} mean(beta)` on random quadratic instances.
pub fn mx2_equivalence_check(instances: usize, seed: u64) -> Result<Check> {
    const TOL: f64 = 1e-10;
    let mut r = stream(seed, 7);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (m, d, n) = (2 + r.index(6), 1 + r.index(6), 1 + r.index(4));
        let spec = random_spec(&mut r, FamilyKind::Mx2, BaseKind::Quadratic, m, n, d, true);
        let x = reference_solve(&spec, 1e-12)?;
        let scale = (m as f64).sqrt();
        let closed: Vec<f64> = (0..d)
            .map(|k| scale * x.betas().iter().map(|b| b[k]).sum::<f64>() / m as f64)
            .collect();
        worst = worst.max(distance(x.w(), &closed));
    }
    Ok(check(
        "MX2 partial minimization",
        worst <= TOL,
        format!("{instances} instances, worst |w - M^(1/2) mean(beta)| = {worst:.1e} (tol {TOL:.0e})"),
    ))
}

/// The property suite; `full` uses the acceptance sample sizes.
pub fn suite(full: bool) -> Result<Vec<Check>> {
    let scale = |quick: usize, full_size: usize| if full { full_size } else { quick };
    Ok(vec![
        gradient_check(scale(5, 20), 1)?,
        smoothness_check(scale(3, 10), 2)?,
        unbiasedness_check(scale(2, 5), scale(20_000, 100_000), 3)?,
        block_frequency_check(scale(20_000, 100_000) as u64, 4)?,
        rate_envelope_check(scale(3, 10) as u64)?,
        reduction_check(scale(50, 200) as u64, 6)?,
        mx2_equivalence_check(scale(5, 10), 7)?,
    ])
}

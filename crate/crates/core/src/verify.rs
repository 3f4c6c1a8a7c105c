//! Independent oracles: finite differences, Hessian spectral bounds, Monte
//! Carlo means and high-accuracy reference solves.
//!
//! Finite-difference Hessian-vector products use the step
//! `h = 1e-5 * (1 + |x|)`; power iteration starts from a fixed seeded
//! direction.

use nalgebra::{DMatrix, DVector};

use crate::error::{PflError, Result};
use crate::model::{PartitionedModel, Shape};
use crate::objectives::{eval_loss, BaseLoss, Blocks, ObjectiveSpec, Samples};
use crate::rng::{RngStream, StreamId};

/// Central-difference gradient of an arbitrary scalar function.
pub fn fd_gradient_fn(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(PflError::InvalidParameter {
            name: "h",
            reason: format!("finite-difference step must be positive, got {h}"),
        });
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(PflError::Overflow(format!("finite-difference probe at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference gradient of `F` over the flattened model.
pub fn fd_gradient(spec: &ObjectiveSpec, model: &PartitionedModel, h: f64) -> Result<Vec<f64>> {
    let shape = model.shape();
    fd_gradient_fn(
        |x| eval_loss(spec, &PartitionedModel::unflatten(&shape, x)?),
        &model.flatten(),
        h,
    )
}

/// Central-difference gradient of `F_j`.
pub fn fd_gradient_sample(spec: &ObjectiveSpec, model: &PartitionedModel, j: usize, h: f64) -> Result<Vec<f64>> {
    let shape = model.shape();
    fd_gradient_fn(
        |x| spec.loss(&PartitionedModel::unflatten(&shape, x)?, Samples::One(j)),
        &model.flatten(),
        h,
    )
}

/// `|a - b| / max(|b|, floor)` in the l2 norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

/// Coordinates on which a Hessian block is restricted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianBlock {
    W,
    Beta,
    Client(usize),
}

fn block_range(shape: &Shape, block: HessianBlock) -> Result<std::ops::Range<usize>> {
    let total = shape.total();
    Ok(match block {
        HessianBlock::W => 0..shape.d0,
        HessianBlock::Beta => shape.d0..total,
        HessianBlock::Client(m) => {
            if m >= shape.num_clients() {
                return Err(PflError::IndexOutOfRange {
                    index: m,
                    n: shape.num_clients(),
                });
            }
            let start = shape.d0 + shape.dims[..m].iter().sum::<usize>();
            start..start + shape.dims[m]
        }
    })
}

/// Top eigenvalue of a symmetric PSD operator by power iteration; stops once
/// the Rayleigh quotient changes by at most `1e-6` relatively and the
/// eigen-residual is below `1e-3` of it.
pub fn power_iteration(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    dim: usize,
    seed: u64,
    max_iters: usize,
) -> Result<f64> {
    if dim == 0 {
        return Ok(0.0);
    }
    let mut rng = RngStream::new(seed, StreamId::new(0x5EC7, 0, 0));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    normalize(&mut v);
    let mut rq = f64::NAN;
    for _ in 0..max_iters {
        let hv = apply(&v)?;
        let next_rq: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let hv_norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if hv_norm <= 1e-300 {
            return Ok(0.0);
        }
        let residual = hv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - next_rq * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let settled = rq.is_finite() && (next_rq - rq).abs() <= 1e-6 * next_rq.abs();
        rq = next_rq;
        if settled && residual <= 1e-3 * rq.abs() {
            return Ok(rq);
        }
        v = hv;
        normalize(&mut v);
    }
    Err(PflError::NoConvergence {
        what: "power iteration",
        iterations: max_iters,
        last: rq,
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Largest eigenvalue of the Hessian of `F` (or `F_j` via `samples`)
/// restricted to `block`, from finite differences of the analytic gradient.
pub fn hessian_block_norm_samples(
    spec: &ObjectiveSpec,
    model: &PartitionedModel,
    block: HessianBlock,
    samples: Samples<'_>,
) -> Result<f64> {
    let shape = model.shape();
    let range = block_range(&shape, block)?;
    let x = model.flatten();
    let norm_x = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-5 * (1.0 + norm_x);
    let grad_at = |p: &[f64]| -> Result<Vec<f64>> {
        let m = PartitionedModel::unflatten(&shape, p)?;
        Ok(spec.gradient(&m, samples, Blocks::BOTH)?.flatten())
    };
    let apply = |v: &[f64]| -> Result<Vec<f64>> {
        let mut plus = x.clone();
        let mut minus = x.clone();
        for (k, idx) in range.clone().enumerate() {
            plus[idx] += h * v[k];
            minus[idx] -= h * v[k];
        }
        let gp = grad_at(&plus)?;
        let gm = grad_at(&minus)?;
        Ok(range.clone().map(|i| (gp[i] - gm[i]) / (2.0 * h)).collect())
    };
    power_iteration(apply, range.len(), 0x4E55, 1000)
}

pub fn hessian_block_norm(spec: &ObjectiveSpec, model: &PartitionedModel, block: HessianBlock) -> Result<f64> {
    hessian_block_norm_samples(spec, model, block, Samples::All)
}

/// Per-coordinate Monte Carlo mean of `draw(i)` over `count` draws together
/// with its l2 standard error `sqrt(sum_k var_k / count)`.
pub fn monte_carlo_mean(count: usize, mut draw: impl FnMut(usize) -> Result<Vec<f64>>) -> Result<(Vec<f64>, f64)> {
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for i in 0..count {
        let x = draw(i)?;
        if i == 0 {
            mean = vec![0.0; x.len()];
            m2 = vec![0.0; x.len()];
        }
        let k = (i + 1) as f64;
        for ((mu, s), xi) in mean.iter_mut().zip(m2.iter_mut()).zip(&x) {
            let delta = xi - *mu;
            *mu += delta / k;
            *s += delta * (xi - *mu);
        }
    }
    let var_sum: f64 = m2.iter().map(|s| s / (count.max(2) - 1) as f64).sum();
    Ok((mean, (var_sum / count as f64).sqrt()))
}

fn grad_flat(spec: &ObjectiveSpec, x: &[f64], shape: &Shape) -> Result<Vec<f64>> {
    let m = PartitionedModel::unflatten(shape, x)?;
    Ok(spec.gradient(&m, Samples::All, Blocks::BOTH)?.flatten())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dense Hessian of `F` at `x`: exact columns `g(e_i) - g(0)` for quadratic
/// bases, central differences of the gradient otherwise.
fn dense_hessian(spec: &ObjectiveSpec, x: &[f64], shape: &Shape) -> Result<DMatrix<f64>> {
    let dim = x.len();
    let mut hess = DMatrix::zeros(dim, dim);
    match spec.base() {
        BaseLoss::Quadratic(_) => {
            let zero = vec![0.0; dim];
            let g0 = grad_flat(spec, &zero, shape)?;
            let mut e = zero;
            for i in 0..dim {
                e[i] = 1.0;
                let gi = grad_flat(spec, &e, shape)?;
                e[i] = 0.0;
                for r in 0..dim {
                    hess[(r, i)] = gi[r] - g0[r];
                }
            }
        }
        BaseLoss::Logistic(_) => {
            let h = 1e-5 * (1.0 + norm(x));
            let mut p = x.to_vec();
            for i in 0..dim {
                p[i] = x[i] + h;
                let gp = grad_flat(spec, &p, shape)?;
                p[i] = x[i] - h;
                let gm = grad_flat(spec, &p, shape)?;
                p[i] = x[i];
                for r in 0..dim {
                    hess[(r, i)] = (gp[r] - gm[r]) / (2.0 * h);
                }
            }
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

fn newton_direction(hess: &DMatrix<f64>, g: &[f64]) -> Result<Vec<f64>> {
    let rhs = DVector::from_column_slice(g);
    let scale = hess.diagonal().abs().max().max(1e-300);
    let mut damping = 0.0;
    for _ in 0..40 {
        let mut h = hess.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += damping;
        }
        if let Some(ch) = h.cholesky() {
            let step = ch.solve(&rhs);
            return Ok(step.iter().map(|v| -v).collect());
        }
        damping = if damping == 0.0 { 1e-12 * scale } else { damping * 10.0 };
    }
    Err(PflError::NoConvergence {
        what: "Newton factorization",
        iterations: 40,
        last: damping,
    })
}

/// High-accuracy minimizer of `F` starting at zero.
pub fn reference_solve(spec: &ObjectiveSpec, tol: f64) -> Result<PartitionedModel> {
    reference_solve_from(spec, &PartitionedModel::zeros(&spec.shape()?), tol)
}

/// Damped Newton iterations until `|grad F| <= tol`. Quadratic bases use the
/// exact Hessian (a direct linear solve plus refinement steps).
pub fn reference_solve_from(spec: &ObjectiveSpec, start: &PartitionedModel, tol: f64) -> Result<PartitionedModel> {
    const MAX_STEPS: usize = 200;
    let shape = spec.shape()?;
    start.check_same_shape(&PartitionedModel::zeros(&shape))?;
    let mut x = start.flatten();
    let f = |p: &[f64]| eval_loss(spec, &PartitionedModel::unflatten(&shape, p)?);
    let quadratic = matches!(spec.base(), BaseLoss::Quadratic(_));
    let fixed_hessian = if quadratic {
        Some(dense_hessian(spec, &x, &shape)?)
    } else {
        None
    };
    let mut g = grad_flat(spec, &x, &shape)?;
    for _ in 0..MAX_STEPS {
        if norm(&g) <= tol {
            return PartitionedModel::unflatten(&shape, &x);
        }
        let hess = match &fixed_hessian {
            Some(h) => h.clone(),
            None => dense_hessian(spec, &x, &shape)?,
        };
        let dir = newton_direction(&hess, &g)?;
        let mut t = 1.0;
        let fx = f(&x)?;
        let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let mut next: Vec<f64>;
        loop {
            next = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            // Full steps near the optimum: the decrease can drown in rounding.
            if quadratic || t < 1e-10 || f(&next)? <= fx + 1e-4 * t * slope || norm(&g) < 1e-6 {
                break;
            }
            t *= 0.5;
        }
        x = next;
        g = grad_flat(spec, &x, &shape)?;
    }
    if norm(&g) <= tol {
        return PartitionedModel::unflatten(&shape, &x);
    }
    Err(PflError::NoConvergence {
        what: "reference solve",
        iterations: MAX_STEPS,
        last: norm(&g),
    })
}

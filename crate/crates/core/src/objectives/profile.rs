//! Smoothness and strong convexity constants per objective family.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::base::{sigmoid, BaseLoss};
use super::{Family, ObjectiveSpec};
use crate::error::{PflError, Result};
use crate::model::{dot, PartitionedModel};

/// `mu`: strong convexity of `F`. `l_w`: smoothness of `f_m` in `w`.
/// `l_beta`: `f_m` is `M * l_beta` smooth in `beta_m`, i.e. `F` is `l_beta`
/// smooth in each `beta_m`. `ll_*`: the same for the per-sample `f_{m,i}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessProfile {
    pub mu: f64,
    pub l_w: f64,
    pub l_beta: f64,
    pub ll_w: f64,
    pub ll_beta: f64,
}

impl SmoothnessProfile {
    /// Checks `ll >= l >= ll / n` per block, non-negativity, and that `mu`
    /// does not exceed any positive smoothness constant.
    pub fn check_ordering(&self, n: usize) -> Result<()> {
        let tol = 1e-12;
        let fields = [self.mu, self.l_w, self.l_beta, self.ll_w, self.ll_beta];
        if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(PflError::InvalidParameter {
                name: "profile",
                reason: format!("constants must be finite and non-negative: {self:?}"),
            });
        }
        let n = n as f64;
        for (name, l, ll) in [("w", self.l_w, self.ll_w), ("beta", self.l_beta, self.ll_beta)] {
            if l > ll * (1.0 + tol) || l < ll / n * (1.0 - tol) {
                return Err(PflError::InvalidParameter {
                    name: "profile",
                    reason: format!("ordering violated for block {name}: L = {l}, per-sample L = {ll}, n = {n}"),
                });
            }
        }
        let min_smooth = [self.l_w, self.l_beta, self.ll_w, self.ll_beta]
            .into_iter()
            .filter(|v| *v > 0.0)
            .fold(f64::INFINITY, f64::min);
        if self.mu > min_smooth * (1.0 + tol) {
            return Err(PflError::InvalidParameter {
                name: "profile",
                reason: format!("mu = {} exceeds smallest smoothness constant {min_smooth}", self.mu),
            });
        }
        Ok(())
    }
}

/// Human-readable notes for hyperparameters outside the regime in which the
/// family's constants were derived. The objective stays evaluatable.
pub fn regime_warnings(spec: &ObjectiveSpec, mu_prime: f64) -> Vec<String> {
    let mut out = Vec::new();
    match spec.family() {
        Family::Mt2 { lambda, relax } => {
            if mu_prime > 0.0 && *relax < 1.5 * lambda / mu_prime {
                out.push(format!(
                    "MT2: Lambda = {relax} is below 3 lambda / (2 mu') = {}",
                    1.5 * lambda / mu_prime
                ));
            } else if mu_prime <= 0.0 && *lambda > 0.0 {
                out.push("MT2: mu' = 0, so Lambda >= 3 lambda / (2 mu') cannot hold".into());
            }
        }
        Family::Mx2 { lambda } => {
            if mu_prime > lambda / 2.0 {
                out.push(format!("MX2: mu' = {mu_prime} exceeds lambda / 2 = {}", lambda / 2.0));
            }
        }
        Family::Apfl2 { relax, alphas } => {
            let need = alphas
                .iter()
                .map(|a| 3.0 * a * a + (1.0 - a) * (1.0 - a) / 2.0)
                .fold(0.0, f64::max);
            if *relax < need {
                out.push(format!("APFL2: Lambda = {relax} is below max(3 a^2 + (1 - a)^2 / 2) = {need}"));
            }
        }
        _ => {}
    }
    out
}

/// Family constants from the base-loss constants `mu'`, `L'`, `LL'`.
///
/// Values are those of the family lemmas for the rescaled objectives. When
/// `spec` is not reparameterized the `w`-smoothness constants are multiplied
/// by `M` (undoing the `M^{-1/2}` change of variables); `mu` is unchanged
/// because that change of variables can only increase curvature.
pub fn smoothness_profile(
    spec: &ObjectiveSpec,
    mu_prime: f64,
    l_prime: f64,
    ll_prime: f64,
) -> Result<SmoothnessProfile> {
    for (name, v) in [("mu_prime", mu_prime), ("l_prime", l_prime), ("ll_prime", ll_prime)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(PflError::InvalidParameter {
                name,
                reason: format!("must be finite and >= 0, got {v}"),
            });
        }
    }
    for w in regime_warnings(spec, mu_prime) {
        log::warn!("{w}");
    }
    let m = spec.num_clients() as f64;
    let mut p = match spec.family() {
        Family::Trad => SmoothnessProfile {
            mu: mu_prime,
            l_w: l_prime,
            l_beta: 0.0,
            ll_w: ll_prime,
            ll_beta: 0.0,
        },
        Family::Full => SmoothnessProfile {
            mu: mu_prime / m,
            l_w: 0.0,
            l_beta: l_prime / m,
            ll_w: 0.0,
            ll_beta: ll_prime / m,
        },
        Family::Mt2 { lambda, relax } => SmoothnessProfile {
            mu: lambda / (2.0 * m),
            l_w: (relax * l_prime + lambda) / m,
            l_beta: (l_prime + lambda) / m,
            ll_w: (relax * ll_prime + lambda) / m,
            ll_beta: (ll_prime + lambda) / m,
        },
        Family::Mx2 { lambda } => SmoothnessProfile {
            mu: mu_prime / (3.0 * m),
            l_w: lambda / m,
            l_beta: (l_prime + lambda) / m,
            ll_w: lambda / m,
            ll_beta: (ll_prime + lambda) / m,
        },
        Family::Apfl2 { relax, alphas } => {
            let a_max = alphas.iter().copied().fold(0.0, f64::max);
            let a_min = alphas.iter().copied().fold(1.0, f64::min);
            SmoothnessProfile {
                mu: mu_prime * (1.0 - a_max).powi(2) / m,
                l_w: (relax + a_max * a_max) * l_prime / m,
                l_beta: (1.0 - a_min).powi(2) * l_prime / m,
                ll_w: (relax + a_max * a_max) * ll_prime / m,
                ll_beta: (1.0 - a_min).powi(2) * ll_prime / m,
            }
        }
        Family::Ws2 { d_w } => {
            let d_beta = spec.base().dim() - d_w;
            SmoothnessProfile {
                // Each block of F carries the 1/M averaging, so mu'/M is the
                // joint strong convexity of the rescaled objective.
                mu: mu_prime / m,
                l_w: if *d_w > 0 { l_prime / m } else { 0.0 },
                l_beta: if d_beta > 0 { l_prime / m } else { 0.0 },
                ll_w: if *d_w > 0 { ll_prime / m } else { 0.0 },
                ll_beta: if d_beta > 0 { ll_prime / m } else { 0.0 },
            }
        }
    };
    if !spec.reparameterized() && !matches!(spec.family(), Family::Trad | Family::Full) {
        p.l_w *= m;
        p.ll_w *= m;
    }
    Ok(p)
}

/// Parameter vector of client `m` inside `reference`, in base-loss
/// coordinates: `beta_m` when it already spans the base dimension, else
/// `[w, beta_m]` (weight-sharing layout).
fn client_parameter(reference: &PartitionedModel, m: usize, d: usize) -> Result<Vec<f64>> {
    let beta = reference.beta(m);
    if beta.len() == d {
        Ok(beta.to_vec())
    } else if reference.w().len() + beta.len() == d {
        let mut theta = reference.w().to_vec();
        theta.extend_from_slice(beta);
        Ok(theta)
    } else {
        Err(PflError::ShapeMismatch {
            block: format!("reference parameter for client {m}"),
            expected: d,
            found: beta.len(),
        })
    }
}

/// Smallest eigenvalue of `(1/(nM)) sum_{m,i} sigma'(theta_m^T x) x x^T` at
/// the reference parameters, by shifted inverse iteration.
pub fn estimate_mu_prime(base: &BaseLoss, reference: &PartitionedModel) -> Result<f64> {
    let BaseLoss::Logistic(lb) = base else {
        return Err(PflError::InvalidObjective(
            "mu' estimation applies to logistic bases only".into(),
        ));
    };
    let data = lb.data();
    if reference.num_clients() != data.num_clients() {
        return Err(PflError::ShapeMismatch {
            block: "reference clients".into(),
            expected: data.num_clients(),
            found: reference.num_clients(),
        });
    }
    let d = data.dim();
    let mut h = DMatrix::<f64>::zeros(d, d);
    for (m, shard) in data.clients().iter().enumerate() {
        let theta = client_parameter(reference, m, d)?;
        for x in shard.rows() {
            let s = sigmoid(dot(&theta, x));
            let weight = s * (1.0 - s);
            for r in 0..d {
                for c in 0..d {
                    h[(r, c)] += weight * x[r] * x[c];
                }
            }
        }
    }
    h /= (data.n() * data.num_clients()) as f64;
    smallest_eigenvalue(&h)
}

/// Inverse iteration on `H + delta I` with a tiny positive shift so the
/// factorization exists for singular `H`; the Rayleigh quotient is returned.
pub(crate) fn smallest_eigenvalue(h: &DMatrix<f64>) -> Result<f64> {
    const MAX_STEPS: usize = 10_000;
    let d = h.nrows();
    if d == 0 {
        return Ok(0.0);
    }
    if d == 1 {
        return Ok(h[(0, 0)].max(0.0));
    }
    let scale = h.trace().abs().max(f64::MIN_POSITIVE);
    let delta = 1e-9 * scale;
    let shifted = h + DMatrix::identity(d, d) * delta;
    let chol = shifted.cholesky().ok_or(PflError::NoConvergence {
        what: "inverse iteration factorization",
        iterations: 0,
        last: f64::NAN,
    })?;
    let mut v = DVector::from_fn(d, |i, _| 1.0 + 0.1 * i as f64);
    v.normalize_mut();
    let mut rq = (v.transpose() * h * &v)[(0, 0)];
    for step in 1..=MAX_STEPS {
        let mut next = chol.solve(&v);
        let norm = next.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(PflError::NoConvergence {
                what: "inverse iteration",
                iterations: step,
                last: rq,
            });
        }
        next /= norm;
        let next_rq = (next.transpose() * h * &next)[(0, 0)];
        let settled = (next_rq - rq).abs() <= 1e-15 * scale;
        v = next;
        rq = next_rq;
        if settled && step > 1 {
            return Ok(if rq <= 1e-14 * scale { 0.0 } else { rq });
        }
    }
    Err(PflError::NoConvergence {
        what: "inverse iteration",
        iterations: MAX_STEPS,
        last: rq,
    })
}

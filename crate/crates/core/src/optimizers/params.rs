//! Closed-form parameter rules.

use serde::{Deserialize, Serialize};

use crate::error::{PflError, Result};
use crate::objectives::SmoothnessProfile;

/// `min{1/(4 L^beta), 1/(8 sqrt(3e) (tau - 1) L^w)}`. A term whose
/// denominator vanishes (`L^beta = 0`, or `tau = 1`, or `L^w = 0`) is
/// dropped; `+inf` when both are.
pub fn lsgd_stepsize_bound(profile: &SmoothnessProfile, tau: usize) -> f64 {
    let first = if profile.l_beta > 0.0 {
        1.0 / (4.0 * profile.l_beta)
    } else {
        f64::INFINITY
    };
    let second = if tau > 1 && profile.l_w > 0.0 {
        1.0 / (8.0 * (3.0 * std::f64::consts::E).sqrt() * (tau - 1) as f64 * profile.l_w)
    } else {
        f64::INFINITY
    };
    first.min(second)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcdParams {
    pub p_w: f64,
    pub nu: f64,
    pub theta: f64,
    pub eta: f64,
    pub l_w: f64,
    pub l_beta: f64,
}

fn require_mu(profile: &SmoothnessProfile) -> Result<()> {
    if profile.mu > 0.0 && profile.mu.is_finite() {
        Ok(())
    } else {
        Err(PflError::ZeroStrongConvexity)
    }
}

/// With `S = sqrt(L^w) + sqrt(L^beta)`: `p_w = sqrt(L^w) / S`,
/// `nu = mu / S^2`, `theta = (sqrt(nu^2 + 4 nu) - nu) / 2`, `eta = 1/theta`.
pub fn acd_params(profile: &SmoothnessProfile) -> Result<AcdParams> {
    require_mu(profile)?;
    let (lw, lb) = (profile.l_w, profile.l_beta);
    if !(lw + lb > 0.0) {
        return Err(PflError::InvalidParameter {
            name: "profile",
            reason: "L^w + L^beta must be positive".into(),
        });
    }
    let s = lw.sqrt() + lb.sqrt();
    let nu = profile.mu / (s * s);
    let theta = ((nu * nu + 4.0 * nu).sqrt() - nu) / 2.0;
    Ok(AcdParams {
        p_w: lw.sqrt() / s,
        nu,
        theta,
        eta: 1.0 / theta,
        l_w: lw,
        l_beta: lb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsvrcdParams {
    pub p_w: f64,
    pub rho: f64,
    pub call: f64,
    pub eta: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub gamma: f64,
    pub nu: f64,
}

/// `LL^w / (LL^w + LL^beta)` clamped to `[1e-6, 1 - 1e-6]`.
pub fn theory_p_w(profile: &SmoothnessProfile) -> Result<f64> {
    let total = profile.ll_w + profile.ll_beta;
    if !(total > 0.0) {
        return Err(PflError::InvalidParameter {
            name: "profile",
            reason: "per-sample constants LL^w + LL^beta must be positive".into(),
        });
    }
    Ok((profile.ll_w / total).clamp(1e-6, 1.0 - 1e-6))
}

/// `2 max{LL^w / p_w, LL^beta / p_beta}`; a block with a zero constant
/// contributes 0 whatever its probability.
pub fn expected_smoothness(profile: &SmoothnessProfile, p_w: f64) -> Result<f64> {
    check_probability("p_w", p_w)?;
    let ratio = |l: f64, p: f64| -> Result<f64> {
        if l == 0.0 {
            Ok(0.0)
        } else if p > 0.0 {
            Ok(l / p)
        } else {
            Err(PflError::InvalidParameter {
                name: "p_w",
                reason: format!("a block with positive smoothness {l} is never sampled"),
            })
        }
    };
    let call = 2.0 * ratio(profile.ll_w, p_w)?.max(ratio(profile.ll_beta, 1.0 - p_w)?);
    if call > 0.0 {
        Ok(call)
    } else {
        Err(PflError::InvalidParameter {
            name: "profile",
            reason: "expected smoothness is zero".into(),
        })
    }
}

pub(crate) fn check_probability(name: &'static str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(PflError::InvalidParameter {
            name,
            reason: format!("must lie in [0, 1], got {p}"),
        })
    }
}

/// Parameters at the theory `p_w` for a given refresh probability.
pub fn asvrcd_params(profile: &SmoothnessProfile, rho: f64) -> Result<AsvrcdParams> {
    asvrcd_params_for(profile, None, Some(rho), 1)
}

/// `p_w` defaults to [`theory_p_w`] and `rho` to `p_w / n`. Then
/// `eta = 1/(4 LL)`, `theta2 = 1/2`,
/// `theta1 = min{1/2, sqrt(eta mu max{1/2, theta2/rho})}`,
/// `gamma = 1 / max{2 mu, 4 theta1 / eta}`, `nu = 1 - gamma mu`.
pub fn asvrcd_params_for(
    profile: &SmoothnessProfile,
    p_w: Option<f64>,
    rho: Option<f64>,
    n: usize,
) -> Result<AsvrcdParams> {
    require_mu(profile)?;
    let p_w = match p_w {
        Some(p) => p,
        None => theory_p_w(profile)?,
    };
    let rho = rho.unwrap_or(p_w / n.max(1) as f64);
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(PflError::InvalidParameter {
            name: "rho",
            reason: format!("must lie in (0, 1], got {rho}"),
        });
    }
    let call = expected_smoothness(profile, p_w)?;
    let mu = profile.mu;
    let eta = 1.0 / (4.0 * call);
    let theta2 = 0.5;
    let theta1 = 0.5f64.min((eta * mu * 0.5f64.max(theta2 / rho)).sqrt());
    let gamma = 1.0 / (2.0 * mu).max(4.0 * theta1 / eta);
    Ok(AsvrcdParams {
        p_w,
        rho,
        call,
        eta,
        theta1,
        theta2,
        gamma,
        nu: 1.0 - gamma * mu,
    })
}

//! Personalized FL objectives `F(w, beta) = (1/M) sum_m f_m(w, beta_m)`.
//!
//! Gradient convention: the `beta` part of every F-level gradient is
//! `grad_{beta_m} F = (1/M) grad_{beta_m} f_m`. Code that needs the client
//! gradient of `f_m` uses [`ObjectiveSpec::client_gradient`] instead.

mod base;
mod profile;

use serde::{Deserialize, Serialize};

pub use base::{
    logistic_dloss, logistic_loss, sigmoid, BaseConstants, BaseLoss, LogisticBase, QuadraticBase,
    QuadraticTerm, Samples,
};
pub use profile::{estimate_mu_prime, regime_warnings, smoothness_profile, SmoothnessProfile};

use crate::error::{PflError, Result};
use crate::model::{PartitionedModel, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FamilyKind {
    Trad,
    Full,
    Mt2,
    Mx2,
    Apfl2,
    Ws2,
}

impl FamilyKind {
    pub fn label(&self) -> &'static str {
        match self {
            FamilyKind::Trad => "trad",
            FamilyKind::Full => "full",
            FamilyKind::Mt2 => "mt2",
            FamilyKind::Mx2 => "mx2",
            FamilyKind::Apfl2 => "apfl2",
            FamilyKind::Ws2 => "ws2",
        }
    }
}

/// Objective family with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    /// `f_m(w) = f'_m(w)`; no local block.
    Trad,
    /// `f_m(beta_m) = f'_m(beta_m)`; no shared block.
    Full,
    /// `Lambda f'_m(s w) + f'_m(beta_m) + (lambda/2) |beta_m - s w|^2`.
    Mt2 { lambda: f64, relax: f64 },
    /// `f'_m(beta_m) + (lambda/2) |s w - beta_m|^2`.
    Mx2 { lambda: f64 },
    /// `Lambda f'_m(s w) + f'_m((1 - alpha_m) beta_m + alpha_m s w)`.
    Apfl2 { relax: f64, alphas: Vec<f64> },
    /// `f'_m([s w, beta_m])` with `w` holding the first `d_w` coordinates.
    Ws2 { d_w: usize },
}

impl Family {
    pub fn kind(&self) -> FamilyKind {
        match self {
            Family::Trad => FamilyKind::Trad,
            Family::Full => FamilyKind::Full,
            Family::Mt2 { .. } => FamilyKind::Mt2,
            Family::Mx2 { .. } => FamilyKind::Mx2,
            Family::Apfl2 { .. } => FamilyKind::Apfl2,
            Family::Ws2 { .. } => FamilyKind::Ws2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    W,
    Beta,
}

/// Which gradient blocks to compute; the others are left at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocks {
    pub w: bool,
    pub beta: bool,
}

impl Blocks {
    pub const BOTH: Blocks = Blocks { w: true, beta: true };
}

impl From<Block> for Blocks {
    fn from(b: Block) -> Self {
        match b {
            Block::W => Blocks { w: true, beta: false },
            Block::Beta => Blocks { w: false, beta: true },
        }
    }
}

/// A gradient restricted to one block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockGradient {
    W(Vec<f64>),
    Beta(Vec<Vec<f64>>),
}

impl BlockGradient {
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            BlockGradient::W(w) => w.clone(),
            BlockGradient::Beta(b) => b.concat(),
        }
    }
}

/// An objective family bound to a base loss (and through it, to data).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    family: Family,
    base: BaseLoss,
    reparameterized: bool,
}

impl ObjectiveSpec {
    pub fn new(family: Family, base: BaseLoss, reparameterized: bool) -> Result<Self> {
        let m = base.num_clients();
        let d = base.dim();
        let bad = |reason: String| Err(PflError::InvalidObjective(reason));
        match &family {
            Family::Trad | Family::Full => {}
            Family::Mt2 { lambda, relax } => {
                if !(*lambda >= 0.0 && lambda.is_finite()) || !(*relax >= 0.0 && relax.is_finite()) {
                    return bad(format!("MT2 needs finite lambda >= 0 and Lambda >= 0, got {lambda}, {relax}"));
                }
            }
            Family::Mx2 { lambda } => {
                if !(*lambda >= 0.0 && lambda.is_finite()) {
                    return bad(format!("MX2 needs finite lambda >= 0, got {lambda}"));
                }
            }
            Family::Apfl2 { relax, alphas } => {
                if !(*relax >= 0.0 && relax.is_finite()) {
                    return bad(format!("APFL2 needs finite Lambda >= 0, got {relax}"));
                }
                if alphas.len() != m {
                    return bad(format!("APFL2 needs {m} mixing weights, got {}", alphas.len()));
                }
                if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
                    return bad(format!("APFL2 mixing weights must lie in (0, 1), got {a}"));
                }
            }
            Family::Ws2 { d_w } => {
                if *d_w > d {
                    return bad(format!("WS2 shared dimension {d_w} exceeds base dimension {d}"));
                }
            }
        }
        let spec = ObjectiveSpec { family, base, reparameterized };
        spec.shape()?;
        Ok(spec)
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn base(&self) -> &BaseLoss {
        &self.base
    }

    pub fn reparameterized(&self) -> bool {
        self.reparameterized
    }

    pub fn num_clients(&self) -> usize {
        self.base.num_clients()
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    /// `M^{-1/2}` for the rescaled families when reparameterized, else 1.
    pub fn w_scale(&self) -> f64 {
        match self.family {
            Family::Trad | Family::Full => 1.0,
            _ if self.reparameterized => 1.0 / (self.num_clients() as f64).sqrt(),
            _ => 1.0,
        }
    }

    pub fn shape(&self) -> Result<Shape> {
        let d = self.base.dim();
        let m = self.num_clients();
        match self.family {
            Family::Trad => Shape::uniform(d, 0, m),
            Family::Full => Shape::uniform(0, d, m),
            Family::Mt2 { .. } | Family::Mx2 { .. } | Family::Apfl2 { .. } => Shape::uniform(d, d, m),
            Family::Ws2 { d_w } => Shape::uniform(d_w, d - d_w, m),
        }
    }

    fn check_model(&self, model: &PartitionedModel) -> Result<()> {
        model.check_same_shape(&PartitionedModel::zeros(&self.shape()?))
    }

    /// `f_m` averaged over the selected samples, at `(w, beta_m)`.
    pub fn client_value(&self, m: usize, w: &[f64], beta: &[f64], samples: Samples<'_>) -> f64 {
        let s = self.w_scale();
        let base = &self.base;
        match &self.family {
            Family::Trad => base.value(m, samples, w),
            Family::Full => base.value(m, samples, beta),
            Family::Mt2 { lambda, relax } => {
                let sw = scaled(s, w);
                relax * base.value(m, samples, &sw)
                    + base.value(m, samples, beta)
                    + 0.5 * lambda * dist_sq(beta, &sw)
            }
            Family::Mx2 { lambda } => {
                let sw = scaled(s, w);
                base.value(m, samples, beta) + 0.5 * lambda * dist_sq(&sw, beta)
            }
            Family::Apfl2 { relax, alphas } => {
                let a = alphas[m];
                let sw = scaled(s, w);
                let u: Vec<f64> = beta.iter().zip(&sw).map(|(b, x)| (1.0 - a) * b + a * x).collect();
                relax * base.value(m, samples, &sw) + base.value(m, samples, &u)
            }
            Family::Ws2 { .. } => {
                let mut theta = scaled(s, w);
                theta.extend_from_slice(beta);
                base.value(m, samples, &theta)
            }
        }
    }

    /// Gradient of `f_m` (not of `F`) w.r.t. `w` and `beta_m`. Blocks not
    /// requested are returned empty.
    pub fn client_gradient(
        &self,
        m: usize,
        w: &[f64],
        beta: &[f64],
        samples: Samples<'_>,
        blocks: Blocks,
    ) -> (Vec<f64>, Vec<f64>) {
        let s = self.w_scale();
        let base = &self.base;
        let d = base.dim();
        let mut gw = if blocks.w { vec![0.0; w.len()] } else { Vec::new() };
        let mut gb = if blocks.beta { vec![0.0; beta.len()] } else { Vec::new() };
        let mut tmp = vec![0.0; d];
        match &self.family {
            Family::Trad => {
                if blocks.w {
                    base.grad_into(m, samples, w, &mut gw);
                }
            }
            Family::Full => {
                if blocks.beta {
                    base.grad_into(m, samples, beta, &mut gb);
                }
            }
            Family::Mt2 { lambda, relax } => {
                let sw = scaled(s, w);
                if blocks.w {
                    if *relax != 0.0 {
                        base.grad_into(m, samples, &sw, &mut tmp);
                    }
                    for i in 0..d {
                        let pen = if *relax != 0.0 { relax * tmp[i] } else { 0.0 };
                        gw[i] = s * pen - lambda * s * (beta[i] - sw[i]);
                    }
                }
                if blocks.beta {
                    base.grad_into(m, samples, beta, &mut gb);
                    for i in 0..d {
                        gb[i] += lambda * (beta[i] - sw[i]);
                    }
                }
            }
            Family::Mx2 { lambda } => {
                let sw = scaled(s, w);
                if blocks.w {
                    for i in 0..d {
                        gw[i] = lambda * s * (sw[i] - beta[i]);
                    }
                }
                if blocks.beta {
                    base.grad_into(m, samples, beta, &mut gb);
                    for i in 0..d {
                        gb[i] += lambda * (beta[i] - sw[i]);
                    }
                }
            }
            Family::Apfl2 { relax, alphas } => {
                let a = alphas[m];
                let sw = scaled(s, w);
                let u: Vec<f64> = beta.iter().zip(&sw).map(|(b, x)| (1.0 - a) * b + a * x).collect();
                let mut gu = vec![0.0; d];
                base.grad_into(m, samples, &u, &mut gu);
                if blocks.w {
                    if *relax != 0.0 {
                        base.grad_into(m, samples, &sw, &mut tmp);
                    }
                    for i in 0..d {
                        let pen = if *relax != 0.0 { relax * tmp[i] } else { 0.0 };
                        gw[i] = s * (pen + a * gu[i]);
                    }
                }
                if blocks.beta {
                    for i in 0..d {
                        gb[i] = (1.0 - a) * gu[i];
                    }
                }
            }
            Family::Ws2 { d_w } => {
                let mut theta = scaled(s, w);
                theta.extend_from_slice(beta);
                base.grad_into(m, samples, &theta, &mut tmp);
                if blocks.w {
                    for i in 0..*d_w {
                        gw[i] = s * tmp[i];
                    }
                }
                if blocks.beta {
                    gb.copy_from_slice(&tmp[*d_w..]);
                }
            }
        }
        (gw, gb)
    }

    /// `F` (or `F_j` for a single sample) at `model`.
    pub fn loss(&self, model: &PartitionedModel, samples: Samples<'_>) -> Result<f64> {
        self.check_model(model)?;
        samples.check(self.n())?;
        let m_count = self.num_clients();
        let mut total = 0.0;
        for m in 0..m_count {
            total += self.client_value(m, model.w(), model.beta(m), samples);
        }
        let value = total / m_count as f64;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(PflError::Overflow("objective value".into()))
        }
    }

    /// F-level gradient with the requested blocks filled (others zero).
    /// Client terms are reduced in client order `0..M`.
    pub fn gradient(
        &self,
        model: &PartitionedModel,
        samples: Samples<'_>,
        blocks: Blocks,
    ) -> Result<PartitionedModel> {
        self.gradient_with(model, |_| samples, blocks)
    }

    /// As [`ObjectiveSpec::gradient`] with a per-client sample selection.
    pub fn gradient_with<'s>(
        &self,
        model: &PartitionedModel,
        samples: impl Fn(usize) -> Samples<'s>,
        blocks: Blocks,
    ) -> Result<PartitionedModel> {
        self.check_model(model)?;
        let m_count = self.num_clients();
        let inv_m = 1.0 / m_count as f64;
        let mut out = PartitionedModel::zeros(&model.shape());
        for m in 0..m_count {
            let sel = samples(m);
            sel.check(self.n())?;
            let (gw, gb) = self.client_gradient(m, model.w(), model.beta(m), sel, blocks);
            if blocks.w {
                for (o, g) in out.w_mut().iter_mut().zip(&gw) {
                    *o += g;
                }
            }
            if blocks.beta {
                for (o, g) in out.beta_mut(m).iter_mut().zip(&gb) {
                    *o = g * inv_m;
                }
            }
        }
        out.w_mut().iter_mut().for_each(|v| *v *= inv_m);
        out.check_finite("gradient")?;
        Ok(out)
    }
}

fn scaled(s: f64, w: &[f64]) -> Vec<f64> {
    w.iter().map(|v| s * v).collect()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn block_of(g: PartitionedModel, block: Block) -> BlockGradient {
    let (w, betas) = g.into_parts();
    match block {
        Block::W => BlockGradient::W(w),
        Block::Beta => BlockGradient::Beta(betas),
    }
}

/// `F(w, beta)`.
pub fn eval_loss(spec: &ObjectiveSpec, model: &PartitionedModel) -> Result<f64> {
    spec.loss(model, Samples::All)
}

/// `grad_w F` or the stacked `grad_{beta_m} F = (1/M) grad_{beta_m} f_m`.
pub fn grad_full(spec: &ObjectiveSpec, model: &PartitionedModel, block: Block) -> Result<BlockGradient> {
    spec.gradient(model, Samples::All, block.into()).map(|g| block_of(g, block))
}

/// Gradient of `F_j = (1/M) sum_m f_{m,j}` for the sample index `j` shared
/// by all clients.
pub fn grad_sample(
    spec: &ObjectiveSpec,
    model: &PartitionedModel,
    j: usize,
    block: Block,
) -> Result<BlockGradient> {
    spec.gradient(model, Samples::One(j), block.into()).map(|g| block_of(g, block))
}

#[cfg(test)]
mod tests;

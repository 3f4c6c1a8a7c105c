//! LSGD-PFL, ACD-PFL and the sampled coordinate methods (ASVRCD-PFL,
//! ASCD-PFL, SCD-PFL, SVRCD-PFL) as state machines over a
//! [`PartitionedModel`].
//!
//! Randomness: at iteration `k`, LSGD client `m` reads stream
//! `(seed, (run, m, k))`. The coordinate methods read the server stream
//! `(seed, (run, SERVER, k))` in the order: shared sample index `j` (unless
//! per-client indices are enabled, in which case client `m` draws `j_m`
//! from `(seed, (run, m, k))`), block coin, refresh coin.

mod acd;
mod lsgd;
mod params;
mod sampled;

use serde::{Deserialize, Serialize};

pub use acd::AcdState;
pub use lsgd::{average_replicas, LsgdState};
pub use params::{
    acd_params, asvrcd_params, asvrcd_params_for, expected_smoothness, lsgd_stepsize_bound, theory_p_w,
    AcdParams, AsvrcdParams,
};
pub use sampled::{sampled_gradient, scd_estimate, svrg_estimate, SampleDraw, SampledState};

use crate::error::{PflError, Result};
use crate::model::PartitionedModel;
use crate::objectives::{Block, ObjectiveSpec, SmoothnessProfile};
use crate::rng::{RngStream, StreamId, SERVER};
use crate::telemetry::Counters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Algorithm {
    Lsgd,
    Acd,
    Ascd,
    Scd,
    Svrcd,
    Asvrcd,
}

impl Algorithm {
    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::Lsgd => "lsgd",
            Algorithm::Acd => "acd",
            Algorithm::Ascd => "ascd",
            Algorithm::Scd => "scd",
            Algorithm::Svrcd => "svrcd",
            Algorithm::Asvrcd => "asvrcd",
        }
    }
}

/// `eta_k = eta` or `eta_k = 1 / (mu (k + beta_offset tau + 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { eta: f64 },
    PlDecay { mu: f64, beta_offset: f64, tau: usize },
}

impl StepSchedule {
    pub fn eta(&self, k: u64) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::PlDecay { mu, beta_offset, tau } => {
                1.0 / (mu * (k as f64 + beta_offset * tau as f64 + 1.0))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant { eta } => eta > 0.0 && eta.is_finite(),
            StepSchedule::PlDecay { mu, beta_offset, .. } => {
                mu > 0.0 && mu.is_finite() && beta_offset >= 0.0 && beta_offset.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(PflError::InvalidParameter {
                name: "schedule",
                reason: format!("{self:?} does not yield positive finite stepsizes"),
            })
        }
    }
}

/// User-facing optimizer settings. Unset tunables are derived from the
/// smoothness profile by [`OptimizerConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    /// Name used for output files; defaults to the algorithm label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<StepSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    /// Per-client sample indices instead of one index shared by all clients.
    #[serde(default)]
    pub per_client_indices: bool,
    /// LSGD: report the exponentially weighted average iterate.
    #[serde(default)]
    pub weighted_average: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<u64>,
}

impl OptimizerConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        OptimizerConfig {
            algorithm,
            label: None,
            eta: None,
            schedule: None,
            tau: None,
            batch: None,
            p_w: None,
            rho: None,
            theta: None,
            theta1: None,
            theta2: None,
            gamma: None,
            nu: None,
            per_client_indices: false,
            weighted_average: false,
            max_iters: None,
        }
    }

    pub fn name(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.algorithm.label().to_string())
    }

    /// Fills every unset tunable from the theory rules and validates ranges.
    pub fn resolve(&self, profile: &SmoothnessProfile, n: usize) -> Result<Params> {
        if let Some(p) = self.p_w {
            params::check_probability("p_w", p)?;
        }
        let params = match self.algorithm {
            Algorithm::Lsgd => {
                let tau = self.tau.unwrap_or(1);
                let batch = self.batch.unwrap_or(1);
                if tau == 0 {
                    return Err(invalid("tau", "must be >= 1".into()));
                }
                if batch == 0 || batch > n {
                    return Err(invalid("batch", format!("must lie in 1..={n}, got {batch}")));
                }
                let schedule = match (self.schedule, self.eta) {
                    (Some(s), _) => s,
                    (None, Some(eta)) => StepSchedule::Constant { eta },
                    (None, None) => {
                        let eta = lsgd_stepsize_bound(profile, tau);
                        if !eta.is_finite() {
                            return Err(invalid(
                                "eta",
                                "the stepsize bound is unbounded for this profile; set eta explicitly".into(),
                            ));
                        }
                        StepSchedule::Constant { eta }
                    }
                };
                schedule.validate()?;
                Params::Lsgd(LsgdParams {
                    schedule,
                    tau,
                    batch,
                    weighted_average: self.weighted_average,
                    mu: profile.mu,
                })
            }
            Algorithm::Acd => {
                let mut p = acd_params(profile)?;
                override_with(&mut p.p_w, self.p_w);
                override_with(&mut p.theta, self.theta);
                override_with(&mut p.eta, self.eta);
                override_with(&mut p.nu, self.nu);
                Params::Acd(p)
            }
            Algorithm::Asvrcd => {
                let mut p = asvrcd_params_for(profile, self.p_w, self.rho, n)?;
                override_with(&mut p.eta, self.eta);
                override_with(&mut p.theta1, self.theta1);
                override_with(&mut p.theta2, self.theta2);
                override_with(&mut p.gamma, self.gamma);
                override_with(&mut p.nu, self.nu);
                Params::Asvrcd(p)
            }
            Algorithm::Ascd => {
                let a = asvrcd_params_for(profile, self.p_w, self.rho, n)?;
                let eta = self.eta.unwrap_or(a.eta);
                Params::Ascd(AscdParams {
                    p_w: a.p_w,
                    eta,
                    theta: self.theta.unwrap_or(0.8f64.min(1.0 / eta)),
                    gamma: self.gamma.unwrap_or(a.gamma),
                    nu: self.nu.unwrap_or(a.nu),
                })
            }
            Algorithm::Scd => {
                let p_w = match self.p_w {
                    Some(p) => p,
                    None => theory_p_w(profile)?,
                };
                let eta = match self.eta {
                    Some(eta) => eta,
                    None => 0.25 / expected_smoothness(profile, p_w)?,
                };
                Params::Scd(ScdParams { p_w, eta })
            }
            Algorithm::Svrcd => {
                let p_w = match self.p_w {
                    Some(p) => p,
                    None => theory_p_w(profile)?,
                };
                let eta = match self.eta {
                    Some(eta) => eta,
                    None => 0.25 / expected_smoothness(profile, p_w)?,
                };
                Params::Svrcd(SvrcdParams {
                    p_w,
                    eta,
                    rho: self.rho.unwrap_or(p_w / n.max(1) as f64),
                })
            }
        };
        params.validate()?;
        Ok(params)
    }
}

fn override_with(slot: &mut f64, value: Option<f64>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn invalid(name: &'static str, reason: String) -> PflError {
    PflError::InvalidParameter { name, reason }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsgdParams {
    pub schedule: StepSchedule,
    pub tau: usize,
    pub batch: usize,
    pub weighted_average: bool,
    /// Strong convexity used by the averaging weights.
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscdParams {
    pub p_w: f64,
    pub eta: f64,
    pub theta: f64,
    pub gamma: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScdParams {
    pub p_w: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrcdParams {
    pub p_w: f64,
    pub eta: f64,
    pub rho: f64,
}

/// Fully concrete optimizer parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "UPPERCASE")]
pub enum Params {
    Lsgd(LsgdParams),
    Acd(AcdParams),
    Ascd(AscdParams),
    Scd(ScdParams),
    Svrcd(SvrcdParams),
    Asvrcd(AsvrcdParams),
}

impl Params {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            Params::Lsgd(_) => Algorithm::Lsgd,
            Params::Acd(_) => Algorithm::Acd,
            Params::Ascd(_) => Algorithm::Ascd,
            Params::Scd(_) => Algorithm::Scd,
            Params::Svrcd(_) => Algorithm::Svrcd,
            Params::Asvrcd(_) => Algorithm::Asvrcd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, format!("must be positive and finite, got {v}")))
            }
        };
        let unit = |name: &'static str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must lie in (0, 1], got {v}")))
            }
        };
        let nu_range = |v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid("nu", format!("must lie in [0, 1], got {v}")))
            }
        };
        match *self {
            Params::Lsgd(p) => p.schedule.validate(),
            Params::Acd(p) => {
                params::check_probability("p_w", p.p_w)?;
                unit("theta", p.theta)?;
                positive("eta", p.eta)?;
                if !(p.nu >= 0.0 && p.nu.is_finite()) {
                    return Err(invalid("nu", format!("must be >= 0, got {}", p.nu)));
                }
                if p.p_w > 0.0 {
                    positive("l_w", p.l_w)?;
                }
                if p.p_w < 1.0 {
                    positive("l_beta", p.l_beta)?;
                }
                Ok(())
            }
            Params::Ascd(p) => {
                params::check_probability("p_w", p.p_w)?;
                positive("eta", p.eta)?;
                unit("theta", p.theta)?;
                positive("gamma", p.gamma)?;
                nu_range(p.nu)
            }
            Params::Scd(p) => {
                params::check_probability("p_w", p.p_w)?;
                positive("eta", p.eta)
            }
            Params::Svrcd(p) => {
                params::check_probability("p_w", p.p_w)?;
                positive("eta", p.eta)?;
                unit("rho", p.rho)
            }
            Params::Asvrcd(p) => {
                params::check_probability("p_w", p.p_w)?;
                positive("eta", p.eta)?;
                unit("rho", p.rho)?;
                unit("theta1", p.theta1)?;
                unit("theta2", p.theta2)?;
                if p.theta1 + p.theta2 > 1.0 + 1e-15 {
                    return Err(invalid(
                        "theta1",
                        format!("theta1 + theta2 = {} exceeds 1", p.theta1 + p.theta2),
                    ));
                }
                positive("gamma", p.gamma)?;
                nu_range(p.nu)
            }
        }
    }
}

/// Event tallies from which the counters are derived.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Events {
    pub iterations: u64,
    pub syncs: u64,
    pub w_branch: u64,
    pub beta_branch: u64,
    pub refreshes: u64,
}

#[derive(Debug, Clone)]
enum State {
    Lsgd(LsgdState),
    Acd(AcdState),
    Sampled(SampledState),
}

/// One optimizer run over a borrowed objective.
#[derive(Debug, Clone)]
pub struct Optimizer<'a> {
    spec: &'a ObjectiveSpec,
    params: Params,
    ctx: StepContext,
    state: State,
    counters: Counters,
    events: Events,
    k: u64,
}

/// Everything a step needs besides its own state.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepContext {
    pub seed: u64,
    pub run: u64,
    pub per_client_indices: bool,
    pub clients: usize,
    pub n: usize,
    pub w_active: bool,
    pub beta_active: bool,
}

impl StepContext {
    pub fn server_stream(&self, k: u64) -> RngStream {
        RngStream::new(self.seed, StreamId::new(self.run, SERVER, k))
    }

    pub fn client_stream(&self, m: usize, k: u64) -> RngStream {
        RngStream::new(self.seed, StreamId::new(self.run, m as u64, k))
    }

    /// Sample-gradient cost of one pass over `per_client` samples on `block`.
    pub fn cost(&self, block: Block, per_client: u64) -> u64 {
        let active = match block {
            Block::W => self.w_active,
            Block::Beta => self.beta_active,
        };
        if active {
            self.clients as u64 * per_client
        } else {
            0
        }
    }

    pub fn charge(&self, counters: &mut Counters, block: Block, per_client: u64) {
        let c = self.cost(block, per_client);
        match block {
            Block::W => counters.grad_w += c,
            Block::Beta => counters.grad_beta += c,
        }
    }
}

impl<'a> Optimizer<'a> {
    /// Starts from `init` with all auxiliary sequences equal to it.
    pub fn new(
        spec: &'a ObjectiveSpec,
        params: Params,
        init: &PartitionedModel,
        seed: u64,
        run: u64,
        per_client_indices: bool,
    ) -> Result<Self> {
        params.validate()?;
        let shape = spec.shape()?;
        init.check_same_shape(&PartitionedModel::zeros(&shape))?;
        init.check_finite("initial point")?;
        let ctx = StepContext {
            seed,
            run,
            per_client_indices,
            clients: spec.num_clients(),
            n: spec.n(),
            w_active: shape.d0 > 0,
            beta_active: shape.dims.iter().any(|&d| d > 0),
        };
        let mut counters = Counters::default();
        let mut events = Events::default();
        let state = match params {
            Params::Lsgd(p) => {
                if p.batch > ctx.n {
                    return Err(invalid("batch", format!("batch {} exceeds n = {}", p.batch, ctx.n)));
                }
                State::Lsgd(LsgdState::new(init))
            }
            Params::Acd(_) => State::Acd(AcdState::new(init)),
            Params::Ascd(_) | Params::Scd(_) => State::Sampled(SampledState::new(init)),
            Params::Svrcd(_) | Params::Asvrcd(_) => {
                let s = SampledState::with_anchor(spec, init)?;
                sampled::charge_refresh(&ctx, &mut counters, &mut events);
                State::Sampled(s)
            }
        };
        Ok(Optimizer {
            spec,
            params,
            ctx,
            state,
            counters,
            events,
            k: 0,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn events(&self) -> Events {
        self.events
    }

    pub fn step(&mut self) -> Result<()> {
        let k = self.k;
        let (ctx, spec) = (&self.ctx, self.spec);
        let (counters, events) = (&mut self.counters, &mut self.events);
        match (&mut self.state, &self.params) {
            (State::Lsgd(s), Params::Lsgd(p)) => s.step(spec, p, ctx, k, counters, events)?,
            (State::Acd(s), Params::Acd(p)) => s.step(spec, p, ctx, k, counters, events)?,
            (State::Sampled(s), Params::Asvrcd(p)) => s.asvrcd_step(spec, p, ctx, k, counters, events)?,
            (State::Sampled(s), Params::Ascd(p)) => s.ascd_step(spec, p, ctx, k, counters, events)?,
            (State::Sampled(s), Params::Scd(p)) => s.scd_step(spec, p, ctx, k, counters, events)?,
            (State::Sampled(s), Params::Svrcd(p)) => s.svrcd_step(spec, p, ctx, k, counters, events)?,
            _ => unreachable!("state always matches the parameter variant"),
        }
        self.events.iterations += 1;
        self.k += 1;
        Ok(())
    }

    /// The point reported by the method: the averaged replica (or weighted
    /// average) for LSGD, the `y` sequence otherwise.
    pub fn output(&self) -> PartitionedModel {
        match &self.state {
            State::Lsgd(s) => s.output(),
            State::Acd(s) => s.y.clone(),
            State::Sampled(s) => s.y.clone(),
        }
    }

    pub fn lsgd_state(&self) -> Option<&LsgdState> {
        match &self.state {
            State::Lsgd(s) => Some(s),
            _ => None,
        }
    }
}

/// Applies `f(dst, [src_0, .., src_{K-1}])` entrywise on one block.
pub(crate) fn zip_block<const K: usize>(
    block: Block,
    dst: &mut PartitionedModel,
    srcs: [&PartitionedModel; K],
    f: impl Fn(f64, [f64; K]) -> f64,
) {
    let apply = |d: &mut [f64], s: [&[f64]; K]| {
        for (i, di) in d.iter_mut().enumerate() {
            *di = f(*di, std::array::from_fn(|k| s[k][i]));
        }
    };
    match block {
        Block::W => apply(dst.w_mut(), srcs.map(|s| s.w())),
        Block::Beta => {
            for m in 0..dst.num_clients() {
                apply(dst.beta_mut(m), srcs.map(|s| s.beta(m)));
            }
        }
    }
}

/// As [`zip_block`] on both blocks.
pub(crate) fn zip_all<const K: usize>(
    dst: &mut PartitionedModel,
    srcs: [&PartitionedModel; K],
    f: impl Fn(f64, [f64; K]) -> f64 + Copy,
) {
    zip_block(Block::W, dst, srcs, f);
    zip_block(Block::Beta, dst, srcs, f);
}

use super::{zip_all, zip_block, AscdParams, AsvrcdParams, Events, ScdParams, StepContext, SvrcdParams};
use crate::error::Result;
use crate::model::PartitionedModel;
use crate::objectives::{Block, Blocks, ObjectiveSpec, Samples};
use crate::rng::RngStream;
use crate::telemetry::Counters;

/// Sample indices for one stochastic gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleDraw {
    /// One index `j` used by every client.
    Shared(usize),
    /// Index `j_m` for client `m`.
    PerClient(Vec<usize>),
}

impl SampleDraw {
    fn samples(&self, m: usize) -> Samples<'_> {
        match self {
            SampleDraw::Shared(j) => Samples::One(*j),
            SampleDraw::PerClient(js) => Samples::One(js[m]),
        }
    }
}

/// Gradient of `F_j` on `block` (the other block is zero).
pub fn sampled_gradient(
    spec: &ObjectiveSpec,
    x: &PartitionedModel,
    draw: &SampleDraw,
    block: Block,
) -> Result<PartitionedModel> {
    spec.gradient_with(x, |m| draw.samples(m), Blocks::from(block))
}

fn live_probability(live: Block, p_w: f64) -> f64 {
    match live {
        Block::W => p_w,
        Block::Beta => 1.0 - p_w,
    }
}

/// `(1/p_live) grad_live F_j(x)`, zero on the other block.
pub fn scd_estimate(
    spec: &ObjectiveSpec,
    x: &PartitionedModel,
    draw: &SampleDraw,
    live: Block,
    p_w: f64,
) -> Result<PartitionedModel> {
    let mut g = sampled_gradient(spec, x, draw, live)?;
    g.scale(1.0 / live_probability(live, p_w));
    Ok(g)
}

/// `(1/p_live) (grad_live F_j(x) - grad_live F_j(v)) + grad F(v)` on the
/// live block and `grad F(v)` on the other; `anchor = grad F(v)`.
pub fn svrg_estimate(
    spec: &ObjectiveSpec,
    x: &PartitionedModel,
    v: &PartitionedModel,
    anchor: &PartitionedModel,
    draw: &SampleDraw,
    live: Block,
    p_w: f64,
) -> Result<PartitionedModel> {
    let gx = sampled_gradient(spec, x, draw, live)?;
    let gv = sampled_gradient(spec, v, draw, live)?;
    let inv_p = 1.0 / live_probability(live, p_w);
    let mut out = anchor.clone();
    zip_block(live, &mut out, [&gx, &gv], |a, [x, v]| a + inv_p * (x - v));
    Ok(out)
}

/// Iterate `y`, momentum sequence `z` and anchor `v` with its cached full
/// gradient. Methods without momentum or anchors leave those untouched.
#[derive(Debug, Clone)]
pub struct SampledState {
    pub y: PartitionedModel,
    pub z: PartitionedModel,
    pub v: PartitionedModel,
    pub anchor: Option<PartitionedModel>,
}

struct Draws {
    sample: SampleDraw,
    live: Block,
    refresh: bool,
}

fn draw(ctx: &StepContext, k: u64, p_w: f64, rho: Option<f64>) -> Draws {
    let mut rng: RngStream = ctx.server_stream(k);
    let sample = if ctx.per_client_indices {
        SampleDraw::PerClient((0..ctx.clients).map(|m| ctx.client_stream(m, k).index(ctx.n)).collect())
    } else {
        SampleDraw::Shared(rng.index(ctx.n))
    };
    let live = if rng.uniform() < p_w { Block::W } else { Block::Beta };
    let refresh = rho.is_some_and(|r| rng.uniform() < r);
    Draws { sample, live, refresh }
}

/// Full-gradient cost of an anchor (re)computation, plus its communication.
pub(crate) fn charge_refresh(ctx: &StepContext, counters: &mut Counters, events: &mut Events) {
    ctx.charge(counters, Block::W, ctx.n as u64);
    ctx.charge(counters, Block::Beta, ctx.n as u64);
    counters.comm += 1;
    events.refreshes += 1;
}

fn charge_sample(ctx: &StepContext, live: Block, evaluations: u64, counters: &mut Counters, events: &mut Events) {
    ctx.charge(counters, live, evaluations);
    match live {
        Block::W => {
            counters.comm += 1;
            events.w_branch += 1;
        }
        Block::Beta => events.beta_branch += 1,
    }
}

impl SampledState {
    pub fn new(init: &PartitionedModel) -> Self {
        SampledState {
            y: init.clone(),
            z: init.clone(),
            v: init.clone(),
            anchor: None,
        }
    }

    pub fn with_anchor(spec: &ObjectiveSpec, init: &PartitionedModel) -> Result<Self> {
        let mut s = Self::new(init);
        s.anchor = Some(spec.gradient(init, Samples::All, Blocks::BOTH)?);
        Ok(s)
    }

    fn refresh(
        &mut self,
        spec: &ObjectiveSpec,
        old_y: PartitionedModel,
        ctx: &StepContext,
        counters: &mut Counters,
        events: &mut Events,
    ) -> Result<()> {
        self.anchor = Some(spec.gradient(&old_y, Samples::All, Blocks::BOTH)?);
        self.v = old_y;
        charge_refresh(ctx, counters, events);
        Ok(())
    }

    fn anchor(&self) -> &PartitionedModel {
        self.anchor.as_ref().expect("variance-reduced state carries an anchor gradient")
    }

    pub(crate) fn asvrcd_step(
        &mut self,
        spec: &ObjectiveSpec,
        p: &AsvrcdParams,
        ctx: &StepContext,
        k: u64,
        counters: &mut Counters,
        events: &mut Events,
    ) -> Result<()> {
        let d = draw(ctx, k, p.p_w, Some(p.rho));
        let (t1, t2) = (p.theta1, p.theta2);
        let mut x = self.y.clone();
        zip_all(&mut x, [&self.z, &self.v], |y, [z, v]| t1 * z + t2 * v + (1.0 - t1 - t2) * y);
        let g = svrg_estimate(spec, &x, &self.v, self.anchor(), &d.sample, d.live, p.p_w)?;
        let eta = p.eta;
        let mut y_next = x.clone();
        zip_all(&mut y_next, [&g], |xv, [gv]| xv - eta * gv);
        let (nu, ratio) = (p.nu, p.gamma / p.eta);
        zip_all(&mut self.z, [&x, &y_next], |z, [xv, yv]| nu * z + (1.0 - nu) * xv + ratio * (yv - xv));
        y_next.check_finite("ASVRCD iterate")?;
        let old_y = std::mem::replace(&mut self.y, y_next);
        charge_sample(ctx, d.live, 2, counters, events);
        if d.refresh {
            self.refresh(spec, old_y, ctx, counters, events)?;
        }
        Ok(())
    }

    pub(crate) fn svrcd_step(
        &mut self,
        spec: &ObjectiveSpec,
        p: &SvrcdParams,
        ctx: &StepContext,
        k: u64,
        counters: &mut Counters,
        events: &mut Events,
    ) -> Result<()> {
        let d = draw(ctx, k, p.p_w, Some(p.rho));
        let g = svrg_estimate(spec, &self.y, &self.v, self.anchor(), &d.sample, d.live, p.p_w)?;
        let mut y_next = self.y.clone();
        let eta = p.eta;
        zip_all(&mut y_next, [&g], |y, [gv]| y - eta * gv);
        y_next.check_finite("SVRCD iterate")?;
        let old_y = std::mem::replace(&mut self.y, y_next);
        charge_sample(ctx, d.live, 2, counters, events);
        if d.refresh {
            self.refresh(spec, old_y, ctx, counters, events)?;
        }
        Ok(())
    }

    pub(crate) fn ascd_step(
        &mut self,
        spec: &ObjectiveSpec,
        p: &AscdParams,
        ctx: &StepContext,
        k: u64,
        counters: &mut Counters,
        events: &mut Events,
    ) -> Result<()> {
        let d = draw(ctx, k, p.p_w, None);
        let theta = p.theta;
        let mut x = self.y.clone();
        zip_all(&mut x, [&self.z], |y, [z]| theta * z + (1.0 - theta) * y);
        let g = scd_estimate(spec, &x, &d.sample, d.live, p.p_w)?;
        let (eta, nu, ratio) = (p.eta, p.nu, p.gamma / p.eta);
        let mut y_live = x.clone();
        zip_block(d.live, &mut y_live, [&g], |xv, [gv]| xv - eta * gv);
        zip_block(d.live, &mut self.z, [&x, &y_live], |z, [xv, yv]| {
            nu * z + (1.0 - nu) * xv + ratio * (yv - xv)
        });
        zip_block(d.live, &mut self.y, [&y_live], |_, [yv]| yv);
        self.y.check_finite("ASCD iterate")?;
        charge_sample(ctx, d.live, 1, counters, events);
        Ok(())
    }

    pub(crate) fn scd_step(
        &mut self,
        spec: &ObjectiveSpec,
        p: &ScdParams,
        ctx: &StepContext,
        k: u64,
        counters: &mut Counters,
        events: &mut Events,
    ) -> Result<()> {
        let d = draw(ctx, k, p.p_w, None);
        let g = scd_estimate(spec, &self.y, &d.sample, d.live, p.p_w)?;
        let eta = p.eta;
        zip_block(d.live, &mut self.y, [&g], |y, [gv]| y - eta * gv);
        self.y.check_finite("SCD iterate")?;
        charge_sample(ctx, d.live, 1, counters, events);
        Ok(())
    }
}

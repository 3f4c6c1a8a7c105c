use super::{zip_all, zip_block, AcdParams, Events, StepContext};
use crate::error::Result;
use crate::model::PartitionedModel;
use crate::objectives::{Block, ObjectiveSpec, Samples};
use crate::telemetry::Counters;

/// `(y, z)` sequences; `x` is formed afresh each step.
#[derive(Debug, Clone)]
pub struct AcdState {
    pub y: PartitionedModel,
    pub z: PartitionedModel,
}

impl AcdState {
    pub fn new(init: &PartitionedModel) -> Self {
        AcdState {
            y: init.clone(),
            z: init.clone(),
        }
    }

    /// The w-block is chosen with probability `p_w`. The chosen block takes
    /// a gradient step from `x` into `y` and a decayed gradient step into
    /// `z`; the other block sets `y = x` and only decays `z` toward `x`.
    /// Both blocks use the gradient of `F`.
    pub(crate) fn step(
        &mut self,
        spec: &ObjectiveSpec,
        p: &AcdParams,
        ctx: &StepContext,
        k: u64,
        counters: &mut Counters,
        events: &mut Events,
    ) -> Result<()> {
        let theta = p.theta;
        let mut x = self.y.clone();
        zip_all(&mut x, [&self.z], |y, [z]| (1.0 - theta) * y + theta * z);

        let mut rng = ctx.server_stream(k);
        let live = if rng.uniform() < p.p_w { Block::W } else { Block::Beta };
        let (l_live, cost_block) = match live {
            Block::W => (p.l_w, Block::W),
            Block::Beta => (p.l_beta, Block::Beta),
        };
        let dead = match live {
            Block::W => Block::Beta,
            Block::Beta => Block::W,
        };
        let g = spec.gradient(&x, Samples::All, live.into())?;
        let s = p.l_w.sqrt() + p.l_beta.sqrt();
        let en = p.eta * p.nu;
        let c = p.eta / (l_live.sqrt() * s);

        let mut y = x.clone();
        zip_block(live, &mut y, [&g], |xv, [gv]| xv - gv / l_live);
        zip_block(live, &mut self.z, [&x, &g], |zv, [xv, gv]| (zv + en * xv - c * gv) / (1.0 + en));
        zip_block(dead, &mut self.z, [&x], |zv, [xv]| (zv + en * xv) / (1.0 + en));
        y.check_finite("ACD iterate")?;
        self.y = y;

        ctx.charge(counters, cost_block, ctx.n as u64);
        match live {
            Block::W => {
                counters.comm += 1;
                events.w_branch += 1;
            }
            Block::Beta => events.beta_branch += 1,
        }
        Ok(())
    }
}

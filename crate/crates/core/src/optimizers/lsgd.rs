use super::{Events, LsgdParams, StepContext};
use crate::error::Result;
use crate::model::{axpy_slice, PartitionedModel};
use crate::objectives::{Block, Blocks, ObjectiveSpec, Samples};
use crate::telemetry::Counters;

/// Per-client replicas `(w_m, beta_m)` plus the optional running weighted
/// average of the output point.
#[derive(Debug, Clone)]
pub struct LsgdState {
    replicas: Vec<Vec<f64>>,
    betas: Vec<Vec<f64>>,
    average: Option<PartitionedModel>,
}

/// Replaces every replica by their mean (summed in client order).
pub fn average_replicas(replicas: &mut [Vec<f64>]) {
    let Some(first) = replicas.first() else { return };
    let mut mean = vec![0.0; first.len()];
    for r in replicas.iter() {
        for (a, v) in mean.iter_mut().zip(r) {
            *a += v;
        }
    }
    let inv = 1.0 / replicas.len() as f64;
    mean.iter_mut().for_each(|a| *a *= inv);
    for r in replicas.iter_mut() {
        r.copy_from_slice(&mean);
    }
}

impl LsgdState {
    pub fn new(init: &PartitionedModel) -> Self {
        LsgdState {
            replicas: vec![init.w().to_vec(); init.num_clients()],
            betas: init.betas().to_vec(),
            average: None,
        }
    }

    pub fn replicas(&self) -> &[Vec<f64>] {
        &self.replicas
    }

    /// Server average of the replicas with the local blocks.
    pub fn current(&self) -> PartitionedModel {
        let mut r = self.replicas.clone();
        average_replicas(&mut r);
        let w = r.into_iter().next().unwrap_or_default();
        PartitionedModel::new(w, self.betas.clone()).expect("replica shapes are preserved")
    }

    pub fn output(&self) -> PartitionedModel {
        self.average.clone().unwrap_or_else(|| self.current())
    }

    pub(crate) fn step(
        &mut self,
        spec: &ObjectiveSpec,
        p: &LsgdParams,
        ctx: &StepContext,
        k: u64,
        counters: &mut Counters,
        events: &mut Events,
    ) -> Result<()> {
        if k % p.tau as u64 == 0 {
            average_replicas(&mut self.replicas);
            counters.comm += 1;
            events.syncs += 1;
        }
        let eta = p.schedule.eta(k);
        let mut idx = vec![0usize; p.batch];
        for m in 0..ctx.clients {
            let mut rng = ctx.client_stream(m, k);
            idx.iter_mut().for_each(|i| *i = rng.index(ctx.n));
            let (gw, gb) = spec.client_gradient(m, &self.replicas[m], &self.betas[m], Samples::Batch(&idx), Blocks::BOTH);
            axpy_slice(-eta, &gw, &mut self.replicas[m]);
            axpy_slice(-eta, &gb, &mut self.betas[m]);
        }
        ctx.charge(counters, Block::W, p.batch as u64);
        ctx.charge(counters, Block::Beta, p.batch as u64);
        let current = self.current();
        current.check_finite("LSGD iterate")?;
        if p.weighted_average {
            // Weights proportional to (1 - eta mu)^{-(k+1)}, accumulated as a
            // running mean with fraction (1 - q) / (1 - q^{k+1}).
            let q = 1.0 - eta * p.mu;
            let frac = if p.mu <= 0.0 {
                1.0 / (k as f64 + 1.0)
            } else if q <= 0.0 {
                1.0
            } else {
                (1.0 - q) / (1.0 - q.powi((k + 1).min(i32::MAX as u64) as i32))
            };
            match &mut self.average {
                None => self.average = Some(current),
                Some(avg) => {
                    let mut next = PartitionedModel::lincomb(1.0 - frac, avg, frac, &current);
                    std::mem::swap(avg, &mut next);
                }
            }
        }
        Ok(())
    }
}

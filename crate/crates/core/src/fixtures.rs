//! Random problem instances for tests, benchmarks and the oracle suite.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::data::{ClientShard, FederatedDataset};
use crate::model::{PartitionedModel, Shape};
use crate::objectives::{BaseLoss, Family, FamilyKind, LogisticBase, ObjectiveSpec, QuadraticBase, QuadraticTerm};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseKind {
    Quadratic,
    Logistic,
}

pub const ALL_FAMILIES: [FamilyKind; 6] = [
    FamilyKind::Trad,
    FamilyKind::Full,
    FamilyKind::Mt2,
    FamilyKind::Mx2,
    FamilyKind::Apfl2,
    FamilyKind::Ws2,
];

/// Logistic data with features in `[-1, 1]` and fair-coin labels.
pub fn random_logistic_data(rng: &mut RngStream, clients: usize, n: usize, d: usize) -> FederatedDataset {
    let shards = (0..clients)
        .map(|_| {
            let features = (0..n * d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let labels = (0..n).map(|_| f64::from(u8::from(rng.bernoulli(0.5)))).collect();
            ClientShard::new(d, features, labels).expect("consistent shard")
        })
        .collect();
    FederatedDataset::new(shards, None).expect("consistent dataset")
}

/// Random PSD matrix `G^T G / d + floor I`.
pub fn random_psd(rng: &mut RngStream, d: usize, floor: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.uniform_range(-1.0, 1.0));
    let mut a = g.transpose() * g / d.max(1) as f64;
    for i in 0..d {
        a[(i, i)] += floor;
    }
    (&a + a.transpose()) * 0.5
}

pub fn random_quadratic_base(rng: &mut RngStream, clients: usize, n: usize, d: usize, floor: f64) -> QuadraticBase {
    let terms = (0..clients)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let a = random_psd(rng, d, floor);
                    let b = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
                    QuadraticTerm::new(a, b).expect("psd term")
                })
                .collect()
        })
        .collect();
    QuadraticBase::new(terms).expect("consistent quadratic base")
}

pub fn random_base(rng: &mut RngStream, kind: BaseKind, clients: usize, n: usize, d: usize) -> BaseLoss {
    match kind {
        BaseKind::Quadratic => BaseLoss::Quadratic(random_quadratic_base(rng, clients, n, d, 0.1)),
        BaseKind::Logistic => BaseLoss::Logistic(
            LogisticBase::new(Arc::new(random_logistic_data(rng, clients, n, d))).expect("binary labels"),
        ),
    }
}

/// Family with random hyperparameters; WS2 splits `d` roughly in half.
pub fn random_family(rng: &mut RngStream, kind: FamilyKind, clients: usize, d: usize) -> Family {
    match kind {
        FamilyKind::Trad => Family::Trad,
        FamilyKind::Full => Family::Full,
        FamilyKind::Mt2 => Family::Mt2 {
            lambda: rng.uniform_range(0.1, 2.0),
            relax: rng.uniform_range(0.5, 3.0),
        },
        FamilyKind::Mx2 => Family::Mx2 {
            lambda: rng.uniform_range(0.1, 2.0),
        },
        FamilyKind::Apfl2 => Family::Apfl2 {
            relax: rng.uniform_range(0.5, 3.0),
            alphas: (0..clients).map(|_| rng.uniform_range(0.1, 0.9)).collect(),
        },
        FamilyKind::Ws2 => Family::Ws2 { d_w: d.div_ceil(2) },
    }
}

pub fn random_spec(
    rng: &mut RngStream,
    kind: FamilyKind,
    base: BaseKind,
    clients: usize,
    n: usize,
    d: usize,
    reparameterized: bool,
) -> ObjectiveSpec {
    let base = random_base(rng, base, clients, n, d);
    let family = random_family(rng, kind, clients, d);
    ObjectiveSpec::new(family, base, reparameterized).expect("valid random spec")
}

pub fn random_model(rng: &mut RngStream, shape: &Shape, scale: f64) -> PartitionedModel {
    let flat: Vec<f64> = (0..shape.total()).map(|_| rng.uniform_range(-scale, scale)).collect();
    PartitionedModel::unflatten(shape, &flat).expect("matching shape")
}

//! Optimization workbench for personalized federated learning.
//!
//! The unified objective is `F(w, beta) = (1/M) sum_m f_m(w, beta_m)` with a
//! shared block `w` and one local block `beta_m` per client. This crate
//! provides:
//!
//! - [`model`]: the partitioned iterate and its block arithmetic;
//! - [`objectives`]: six objective families over quadratic or logistic base
//!   losses, with analytic gradients and smoothness constants;
//! - [`datagen`]: synthetic generators and CSV ingestion;
//! - [`optimizers`]: LSGD-PFL, ACD-PFL, ASVRCD-PFL, ASCD-PFL, SCD-PFL and
//!   SVRCD-PFL plus their closed-form parameter rules;
//! - [`telemetry`]: run records, estimation error, heterogeneity and
//!   seed aggregation;
//! - [`verify`]: finite-difference, spectral and reference-solve oracles.

pub mod data;
pub mod datagen;
pub mod error;
pub mod fixtures;
pub mod model;
pub mod objectives;
pub mod optimizers;
pub mod rng;
pub mod telemetry;
pub mod verify;

pub use data::{ClientShard, FederatedDataset};
pub use error::{PflError, Result};
pub use model::{PartitionedModel, Shape};
pub use objectives::{
    eval_loss, grad_full, grad_sample, smoothness_profile, BaseLoss, Block, Family, FamilyKind, ObjectiveSpec,
    SmoothnessProfile,
};
pub use rng::{RngStream, StreamId};
pub use telemetry::RunRecord;

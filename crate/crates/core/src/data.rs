//! Per-client sample shards.

use serde::{Deserialize, Serialize};

use crate::error::{PflError, Result};
use crate::model::PartitionedModel;

/// One client's samples: an `n x d` row-major feature matrix and `n` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    d: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl ClientShard {
    pub fn new(d: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if features.len() != d * labels.len() {
            return Err(PflError::InvalidDataset(format!(
                "feature buffer has {} entries, expected {} x {}",
                features.len(),
                labels.len(),
                d
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(PflError::InvalidDataset("non-finite feature value".into()));
        }
        Ok(ClientShard { d, features, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(PflError::InvalidDataset("ragged feature rows".into()));
        }
        Self::new(d, rows.concat(), labels)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.d.max(1)).take(self.n())
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }
}

/// `M` equally sized client shards, optionally with the generator's ground
/// truth stored in raw (unscaled) parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    clients: Vec<ClientShard>,
    truth: Option<PartitionedModel>,
}

impl FederatedDataset {
    pub fn new(clients: Vec<ClientShard>, truth: Option<PartitionedModel>) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| PflError::InvalidDataset("no clients".into()))?;
        let (n, d) = (first.n(), first.dim());
        if n == 0 {
            return Err(PflError::InvalidDataset("shards must hold at least one sample".into()));
        }
        for (m, c) in clients.iter().enumerate() {
            if c.n() != n {
                return Err(PflError::InvalidDataset(format!(
                    "client {m} has {} samples, expected {n}",
                    c.n()
                )));
            }
            if c.dim() != d {
                return Err(PflError::InvalidDataset(format!(
                    "client {m} has dimension {}, expected {d}",
                    c.dim()
                )));
            }
        }
        if let Some(t) = &truth {
            if t.num_clients() != clients.len() {
                return Err(PflError::InvalidDataset(
                    "ground truth client count differs from shard count".into(),
                ));
            }
        }
        Ok(FederatedDataset { clients, truth })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn n(&self) -> usize {
        self.clients[0].n()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].dim()
    }

    pub fn client(&self, m: usize) -> &ClientShard {
        &self.clients[m]
    }

    pub fn clients(&self) -> &[ClientShard] {
        &self.clients
    }

    pub fn truth(&self) -> Option<&PartitionedModel> {
        self.truth.as_ref()
    }

    /// Fails unless every label is exactly 0 or 1.
    pub fn require_binary_labels(&self) -> Result<()> {
        for (m, c) in self.clients.iter().enumerate() {
            if let Some(i) = c.labels().iter().position(|&y| y != 0.0 && y != 1.0) {
                return Err(PflError::InvalidDataset(format!(
                    "client {m} sample {i} has non-binary label {}",
                    c.label(i)
                )));
            }
        }
        Ok(())
    }

    /// Largest squared row norm over all clients and samples.
    pub fn max_row_norm_sq(&self) -> f64 {
        self.clients
            .iter()
            .flat_map(|c| c.rows())
            .map(|r| r.iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

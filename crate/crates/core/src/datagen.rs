//! Synthetic federated datasets with ground truth, and CSV ingestion.
//!
//! Draw order (one stream keyed by the seed and [`DATAGEN_RUN`]): shared
//! truth `w*`, the client offsets `mu_1..mu_M`, each client's local truth,
//! then all features client by client, then all labels client by client.
//! Labels are Bernoulli with `p = 1 / (1 + exp(theta*^T x))`.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, FederatedDataset};
use crate::error::{PflError, Result};
use crate::model::{dot, PartitionedModel};
use crate::objectives::sigmoid;
use crate::rng::{RngStream, StreamId, DATAGEN_RUN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthKind {
    /// Shared and local truths both in `R^d`; features `U[0.2, 0.5]`.
    Mixture { d: usize },
    /// Shared truth in `R^{d_g}`, local truths in `R^{d_l}`; features
    /// `U[0, 0.1]` over the concatenation.
    Weightshare { d_g: usize, d_l: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(flatten)]
    pub kind: SynthKind,
    pub n: usize,
    pub clients: usize,
    pub sigma_h: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(PflError::InvalidDataset(reason));
        if self.n == 0 || self.clients == 0 {
            return bad(format!("n = {} and clients = {} must both be >= 1", self.n, self.clients));
        }
        match self.kind {
            SynthKind::Mixture { d } if d == 0 => return bad("d must be >= 1".into()),
            SynthKind::Weightshare { d_g, d_l } if d_g + d_l == 0 => {
                return bad("d_g + d_l must be >= 1".into())
            }
            _ => {}
        }
        if !(self.sigma_h.is_finite() && self.sigma_h >= 0.0) {
            return bad(format!("sigma_h must be finite and >= 0, got {}", self.sigma_h));
        }
        Ok(())
    }

    fn feature_range(&self) -> (f64, f64) {
        match self.kind {
            SynthKind::Mixture { .. } => (0.2, 0.5),
            SynthKind::Weightshare { .. } => (0.0, 0.1),
        }
    }
}

fn stream(seed: u64) -> RngStream {
    RngStream::new(seed, StreamId::new(DATAGEN_RUN, 0, 0))
}

/// Client parameter in feature coordinates.
fn client_theta(truth: &PartitionedModel, m: usize, mixture: bool) -> Vec<f64> {
    if mixture {
        truth.beta(m).to_vec()
    } else {
        let mut t = truth.w().to_vec();
        t.extend_from_slice(truth.beta(m));
        t
    }
}

fn draw_truth(config: &SynthConfig, rng: &mut RngStream) -> Result<PartitionedModel> {
    let m_count = config.clients;
    let (w_star, local_dim): (Vec<f64>, usize) = match config.kind {
        SynthKind::Mixture { d } => ((0..d).map(|_| rng.uniform_range(0.49, 0.51)).collect(), d),
        SynthKind::Weightshare { d_g, d_l } => ((0..d_g).map(|_| rng.normal()).collect(), d_l),
    };
    let mus: Vec<f64> = (0..m_count).map(|_| config.sigma_h * rng.normal()).collect();
    let betas = mus
        .iter()
        .map(|&mu| {
            let offsets = (0..local_dim).map(|_| rng.uniform_range(mu - 0.01, mu + 0.01));
            match config.kind {
                SynthKind::Mixture { .. } => offsets.zip(&w_star).map(|(o, w)| w + o).collect(),
                SynthKind::Weightshare { .. } => offsets.collect(),
            }
        })
        .collect();
    PartitionedModel::new(w_star, betas)
}

fn draw_samples(config: &SynthConfig, truth: &PartitionedModel, rng: &mut RngStream) -> Result<Vec<ClientShard>> {
    let mixture = matches!(config.kind, SynthKind::Mixture { .. });
    let d = match config.kind {
        SynthKind::Mixture { d } => d,
        SynthKind::Weightshare { d_g, d_l } => d_g + d_l,
    };
    let (lo, hi) = config.feature_range();
    let features: Vec<Vec<f64>> = (0..config.clients)
        .map(|_| (0..config.n * d).map(|_| rng.uniform_range(lo, hi)).collect())
        .collect();
    let mut shards = Vec::with_capacity(config.clients);
    for (m, feats) in features.into_iter().enumerate() {
        let theta = client_theta(truth, m, mixture);
        let labels = feats
            .chunks_exact(d)
            .map(|x| f64::from(u8::from(rng.bernoulli(label_probability(&theta, x)))))
            .collect();
        shards.push(ClientShard::new(d, feats, labels)?);
    }
    Ok(shards)
}

/// `P(y = 1 | x) = 1 / (1 + exp(theta^T x))`.
pub fn label_probability(theta: &[f64], x: &[f64]) -> f64 {
    sigmoid(-dot(theta, x))
}

fn generate(config: &SynthConfig) -> Result<FederatedDataset> {
    config.validate()?;
    let mut rng = stream(config.seed);
    let truth = draw_truth(config, &mut rng)?;
    let shards = draw_samples(config, &truth, &mut rng)?;
    FederatedDataset::new(shards, Some(truth))
}

pub fn gen_mixture(config: &SynthConfig) -> Result<FederatedDataset> {
    if !matches!(config.kind, SynthKind::Mixture { .. }) {
        return Err(PflError::InvalidDataset("gen_mixture needs kind = mixture".into()));
    }
    generate(config)
}

pub fn gen_weightshare(config: &SynthConfig) -> Result<FederatedDataset> {
    if !matches!(config.kind, SynthKind::Weightshare { .. }) {
        return Err(PflError::InvalidDataset("gen_weightshare needs kind = weightshare".into()));
    }
    generate(config)
}

pub fn gen_synthetic(config: &SynthConfig) -> Result<FederatedDataset> {
    generate(config)
}

/// Fresh features and labels for an existing truth, drawn from the stream
/// keyed by `seed` (features first, then labels).
pub fn resample(config: &SynthConfig, truth: &PartitionedModel, seed: u64) -> Result<FederatedDataset> {
    config.validate()?;
    let mut rng = stream(seed);
    let shards = draw_samples(config, truth, &mut rng)?;
    FederatedDataset::new(shards, Some(truth.clone()))
}

/// CSV layout: which column holds labels and how rows map to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label: String,
    /// Integer client ids in `0..clients`; round-robin by row when absent.
    #[serde(default)]
    pub partition: Option<String>,
    pub clients: usize,
}

fn csv_error(row: usize, column: &str, reason: impl Into<String>) -> PflError {
    PflError::Csv {
        row,
        column: column.to_string(),
        reason: reason.into(),
    }
}

/// Columns to zero mean and unit (population) variance; constant columns
/// are only centered.
pub fn standardize_columns(rows: &mut [Vec<f64>]) {
    let Some(first) = rows.first() else { return };
    let d = first.len();
    let r = rows.len() as f64;
    for c in 0..d {
        let mean = rows.iter().map(|x| x[c]).sum::<f64>() / r;
        let var = rows.iter().map(|x| (x[c] - mean).powi(2)).sum::<f64>() / r;
        let sd = var.sqrt();
        for x in rows.iter_mut() {
            x[c] -= mean;
            if sd > 0.0 {
                x[c] /= sd;
            }
        }
    }
}

/// Rows to unit l2 norm; all-zero rows are left unchanged.
pub fn normalize_rows(rows: &mut [Vec<f64>]) {
    for x in rows.iter_mut() {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            x.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<FederatedDataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| PflError::Io(format!("{}: {e}", path.as_ref().display())))?;
    load_csv_from_reader(file, schema)
}

/// Rows are numbered from 1 for the first data row (the header is row 0).
pub fn load_csv_from_reader(input: impl Read, schema: &CsvSchema) -> Result<FederatedDataset> {
    if schema.clients == 0 {
        return Err(PflError::InvalidDataset("clients must be >= 1".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(0, "", e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_error(0, name, "column not found in header"))
    };
    let label_col = find(&schema.label)?;
    let part_col = schema.partition.as_deref().map(find).transpose()?;
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_col && Some(c) != part_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(csv_error(0, "", "no feature columns"));
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut owners = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_error(row, "", e.to_string()))?;
        let field = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("").trim();
            let v: f64 = raw
                .parse()
                .map_err(|_| csv_error(row, &headers[c], format!("cannot parse {raw:?} as a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(csv_error(row, &headers[c], "value is not finite"))
            }
        };
        let y = field(label_col)?;
        if y != 0.0 && y != 1.0 {
            return Err(csv_error(row, &headers[label_col], format!("label {y} is not 0 or 1")));
        }
        let owner = match part_col {
            Some(c) => {
                let v = field(c)?;
                if v.fract() != 0.0 || v < 0.0 || v >= schema.clients as f64 {
                    return Err(csv_error(
                        row,
                        &headers[c],
                        format!("client id {v} outside 0..{}", schema.clients),
                    ));
                }
                v as usize
            }
            None => i % schema.clients,
        };
        rows.push(feature_cols.iter().map(|&c| field(c)).collect::<Result<Vec<f64>>>()?);
        labels.push(y);
        owners.push(owner);
    }

    standardize_columns(&mut rows);
    normalize_rows(&mut rows);

    let mut per_client: Vec<(Vec<Vec<f64>>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); schema.clients];
    for ((x, y), m) in rows.into_iter().zip(labels).zip(owners) {
        per_client[m].0.push(x);
        per_client[m].1.push(y);
    }
    let n = per_client.iter().map(|(x, _)| x.len()).min().unwrap_or(0);
    if n == 0 {
        return Err(PflError::InvalidDataset(format!(
            "some of the {} clients received no rows",
            schema.clients
        )));
    }
    let dropped: usize = per_client.iter().map(|(x, _)| x.len() - n).sum();
    if dropped > 0 {
        log::warn!("dropped {dropped} trailing rows so every client holds {n} samples");
    }
    let shards = per_client
        .into_iter()
        .map(|(mut x, mut y)| {
            x.truncate(n);
            y.truncate(n);
            ClientShard::from_rows(&x, y)
        })
        .collect::<Result<Vec<_>>>()?;
    FederatedDataset::new(shards, None)
}

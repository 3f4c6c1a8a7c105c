//! Base losses `f'_m = (1/n) sum_i f'_{m,i}` shared by every objective family.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::FederatedDataset;
use crate::error::{PflError, Result};
use crate::model::dot;

/// Which per-client samples a value or gradient averages over.
#[derive(Debug, Clone, Copy)]
pub enum Samples<'a> {
    All,
    One(usize),
    /// Indices may repeat (sampling with replacement).
    Batch(&'a [usize]),
}

impl Samples<'_> {
    fn for_each(&self, n: usize, mut f: impl FnMut(usize)) -> usize {
        match *self {
            Samples::All => {
                (0..n).for_each(&mut f);
                n
            }
            Samples::One(i) => {
                f(i);
                1
            }
            Samples::Batch(idx) => {
                idx.iter().copied().for_each(f);
                idx.len()
            }
        }
    }

    pub(crate) fn check(&self, n: usize) -> Result<()> {
        let bad = match *self {
            Samples::All => None,
            Samples::One(i) => (i >= n).then_some(i),
            Samples::Batch(idx) => idx.iter().copied().find(|&i| i >= n),
        };
        match bad {
            Some(index) => Err(PflError::IndexOutOfRange { index, n }),
            None => {
                if matches!(self, Samples::Batch(b) if b.is_empty()) {
                    return Err(PflError::InvalidParameter {
                        name: "batch",
                        reason: "empty minibatch".into(),
                    });
                }
                Ok(())
            }
        }
    }
}

/// `f'(theta) = 1/2 theta^T A theta - b^T theta` for one component.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTerm {
    d: usize,
    /// Row-major, symmetric.
    a: Vec<f64>,
    b: Vec<f64>,
}

impl QuadraticTerm {
    pub fn new(a: DMatrix<f64>, b: Vec<f64>) -> Result<Self> {
        let d = b.len();
        if a.nrows() != d || a.ncols() != d {
            return Err(PflError::InvalidObjective(format!(
                "quadratic matrix is {}x{}, vector has length {d}",
                a.nrows(),
                a.ncols()
            )));
        }
        let asym = (&a - a.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + a.abs().max()) {
            return Err(PflError::InvalidObjective("quadratic matrix is not symmetric".into()));
        }
        if d > 0 {
            let min_eig = SymmetricEigen::new(a.clone()).eigenvalues.min();
            if min_eig < -1e-10 {
                return Err(PflError::InvalidObjective(format!(
                    "quadratic matrix is not positive semidefinite (min eigenvalue {min_eig:e})"
                )));
            }
        }
        let a = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect();
        Ok(QuadraticTerm { d, a, b })
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.a)
    }

    pub fn vector(&self) -> &[f64] {
        &self.b
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let mut quad = 0.0;
        for (i, row) in self.a.chunks_exact(self.d).enumerate() {
            quad += theta[i] * dot(row, theta);
        }
        0.5 * quad - dot(&self.b, theta)
    }

    fn add_grad(&self, theta: &[f64], out: &mut [f64]) {
        for (i, row) in self.a.chunks_exact(self.d).enumerate() {
            out[i] += dot(row, theta) - self.b[i];
        }
    }
}

/// Per-client finite sums of quadratic components.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBase {
    d: usize,
    clients: Vec<Vec<QuadraticTerm>>,
}

impl QuadraticBase {
    pub fn new(clients: Vec<Vec<QuadraticTerm>>) -> Result<Self> {
        let first = clients
            .first()
            .and_then(|c| c.first())
            .ok_or_else(|| PflError::InvalidObjective("quadratic base needs terms".into()))?;
        let d = first.d;
        let n = clients[0].len();
        for (m, terms) in clients.iter().enumerate() {
            if terms.len() != n {
                return Err(PflError::InvalidObjective(format!(
                    "client {m} has {} quadratic terms, expected {n}",
                    terms.len()
                )));
            }
            if terms.iter().any(|t| t.d != d) {
                return Err(PflError::InvalidObjective(format!(
                    "client {m} has a quadratic term of the wrong dimension"
                )));
            }
        }
        Ok(QuadraticBase { d, clients })
    }

    /// One term per client: `f'_m(theta) = 1/2 theta^T A_m theta - b_m^T theta`.
    pub fn from_matrices(a: Vec<DMatrix<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(PflError::InvalidObjective("matrix and vector counts differ".into()));
        }
        let clients = a
            .into_iter()
            .zip(b)
            .map(|(a, b)| QuadraticTerm::new(a, b).map(|t| vec![t]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clients)
    }

    /// Least squares `1/2 (x^T theta - y)^2` per sample, without the
    /// constant `y^2 / 2`.
    pub fn least_squares(data: &FederatedDataset) -> Result<Self> {
        let d = data.dim();
        let clients = data
            .clients()
            .iter()
            .map(|c| {
                (0..c.n())
                    .map(|i| {
                        let x = c.row(i);
                        let a = DMatrix::from_fn(d, d, |r, s| x[r] * x[s]);
                        let b = x.iter().map(|v| v * c.label(i)).collect();
                        QuadraticTerm::new(a, b)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(clients)
    }

    pub fn term(&self, m: usize, i: usize) -> &QuadraticTerm {
        &self.clients[m][i]
    }

    /// `(1/n) sum_i A_{m,i}`.
    pub fn mean_matrix(&self, m: usize) -> DMatrix<f64> {
        let terms = &self.clients[m];
        let mut acc = DMatrix::zeros(self.d, self.d);
        for t in terms {
            acc += t.matrix();
        }
        acc / terms.len() as f64
    }

    pub fn mean_vector(&self, m: usize) -> Vec<f64> {
        let terms = &self.clients[m];
        let mut acc = vec![0.0; self.d];
        for t in terms {
            for (a, b) in acc.iter_mut().zip(&t.b) {
                *a += b;
            }
        }
        acc.iter().map(|v| v / terms.len() as f64).collect()
    }
}

/// Logistic negative log-likelihood with `p_hat = 1 / (1 + exp(theta^T x))`,
/// the same orientation the synthetic generators use for `P(y = 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticBase {
    data: Arc<FederatedDataset>,
}

impl LogisticBase {
    pub fn new(data: Arc<FederatedDataset>) -> Result<Self> {
        data.require_binary_labels()?;
        Ok(LogisticBase { data })
    }

    pub fn data(&self) -> &FederatedDataset {
        &self.data
    }

    pub fn shared_data(&self) -> Arc<FederatedDataset> {
        Arc::clone(&self.data)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Per-sample logistic loss as a function of the margin `z = theta^T x`.
///
/// `-y ln p_hat - (1 - y) ln(1 - p_hat)` with `p_hat = sigmoid(-z)` equals
/// `softplus(z) - (1 - y) z`.
pub fn logistic_loss(z: f64, y: f64) -> f64 {
    softplus(z) - (1.0 - y) * z
}

/// Derivative of [`logistic_loss`] with respect to the margin.
pub fn logistic_dloss(z: f64, y: f64) -> f64 {
    sigmoid(z) - (1.0 - y)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseLoss {
    Quadratic(QuadraticBase),
    Logistic(LogisticBase),
}

/// Base-loss constants: strong convexity `mu'` (a lower bound, possibly 0),
/// client smoothness `L'` and per-sample smoothness `LL'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseConstants {
    pub mu_prime: f64,
    pub l_prime: f64,
    pub ll_prime: f64,
}

impl BaseLoss {
    pub fn dim(&self) -> usize {
        match self {
            BaseLoss::Quadratic(q) => q.d,
            BaseLoss::Logistic(l) => l.data.dim(),
        }
    }

    pub fn num_clients(&self) -> usize {
        match self {
            BaseLoss::Quadratic(q) => q.clients.len(),
            BaseLoss::Logistic(l) => l.data.num_clients(),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            BaseLoss::Quadratic(q) => q.clients[0].len(),
            BaseLoss::Logistic(l) => l.data.n(),
        }
    }

    pub fn is_logistic(&self) -> bool {
        matches!(self, BaseLoss::Logistic(_))
    }

    /// Average of `f'_{m,i}(theta)` over the selected samples.
    pub fn value(&self, m: usize, samples: Samples<'_>, theta: &[f64]) -> f64 {
        let n = self.n();
        let mut acc = 0.0;
        let count = match self {
            BaseLoss::Quadratic(q) => {
                let terms = &q.clients[m];
                samples.for_each(n, |i| acc += terms[i].value(theta))
            }
            BaseLoss::Logistic(l) => {
                let shard = l.data.client(m);
                samples.for_each(n, |i| acc += logistic_loss(dot(shard.row(i), theta), shard.label(i)))
            }
        };
        acc / count as f64
    }

    /// Writes the averaged gradient of `f'_{m,i}` at `theta` into `out`.
    pub fn grad_into(&self, m: usize, samples: Samples<'_>, theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let n = self.n();
        let count = match self {
            BaseLoss::Quadratic(q) => {
                let terms = &q.clients[m];
                samples.for_each(n, |i| terms[i].add_grad(theta, out))
            }
            BaseLoss::Logistic(l) => {
                let shard = l.data.client(m);
                samples.for_each(n, |i| {
                    let x = shard.row(i);
                    let g = logistic_dloss(dot(x, theta), shard.label(i));
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o += g * xi;
                    }
                })
            }
        };
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
    }

    /// Exact spectral constants for quadratic bases; for logistic bases
    /// `L'` and `LL'` come from the `1/4` curvature bound and `mu'` is left
    /// at 0 (use [`crate::objectives::estimate_mu_prime`]).
    pub fn constants(&self) -> BaseConstants {
        let m_count = self.num_clients();
        match self {
            BaseLoss::Quadratic(q) => {
                let mut mu = f64::INFINITY;
                let mut l = 0.0f64;
                let mut ll = 0.0f64;
                for m in 0..m_count {
                    let eig = SymmetricEigen::new(q.mean_matrix(m)).eigenvalues;
                    mu = mu.min(eig.min());
                    l = l.max(eig.max());
                    for t in &q.clients[m] {
                        ll = ll.max(SymmetricEigen::new(t.matrix()).eigenvalues.max());
                    }
                }
                BaseConstants {
                    mu_prime: mu.max(0.0),
                    l_prime: l.max(0.0),
                    ll_prime: ll.max(0.0),
                }
            }
            BaseLoss::Logistic(lb) => {
                let d = lb.data.dim();
                let mut l = 0.0f64;
                for c in lb.data.clients() {
                    let mut cov = DMatrix::<f64>::zeros(d, d);
                    for x in c.rows() {
                        for r in 0..d {
                            for s in 0..d {
                                cov[(r, s)] += x[r] * x[s];
                            }
                        }
                    }
                    cov /= c.n() as f64;
                    l = l.max(SymmetricEigen::new(cov).eigenvalues.max() / 4.0);
                }
                BaseConstants {
                    mu_prime: 0.0,
                    l_prime: l,
                    ll_prime: lb.data.max_row_norm_sq() / 4.0,
                }
            }
        }
    }
}

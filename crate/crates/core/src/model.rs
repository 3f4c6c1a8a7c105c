//! The partitioned iterate `(w, beta_1, ..., beta_M)`.
//!
//! Every optimizer update reduces to block-wise linear combinations of
//! models with identical [`Shape`], so the arithmetic lives here.

use serde::{Deserialize, Serialize};

use crate::error::{PflError, Result};

/// Block dimensions of a partitioned model: `d0` shared coordinates and one
/// local block per client.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub d0: usize,
    pub dims: Vec<usize>,
}

impl Shape {
    pub fn new(d0: usize, dims: Vec<usize>) -> Result<Self> {
        let shape = Shape { d0, dims };
        shape.validate()?;
        Ok(shape)
    }

    /// `M` clients that all carry a local block of size `d`.
    pub fn uniform(d0: usize, d: usize, clients: usize) -> Result<Self> {
        Self::new(d0, vec![d; clients])
    }

    fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(PflError::InvalidModel("at least one client block is required".into()));
        }
        if self.total() == 0 {
            return Err(PflError::InvalidModel(
                "shared and local blocks are all empty".into(),
            ));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.dims.len()
    }

    pub fn total(&self) -> usize {
        self.d0 + self.dims.iter().sum::<usize>()
    }
}

/// Shared parameters `w` plus client-local parameters `beta_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedModel {
    w: Vec<f64>,
    betas: Vec<Vec<f64>>,
}

impl PartitionedModel {
    pub fn new(w: Vec<f64>, betas: Vec<Vec<f64>>) -> Result<Self> {
        let model = PartitionedModel { w, betas };
        model.shape().validate()?;
        model.check_finite("model")?;
        Ok(model)
    }

    pub fn zeros(shape: &Shape) -> Self {
        PartitionedModel {
            w: vec![0.0; shape.d0],
            betas: shape.dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        Shape {
            d0: self.w.len(),
            dims: self.betas.iter().map(Vec::len).collect(),
        }
    }

    pub fn num_clients(&self) -> usize {
        self.betas.len()
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn w_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn betas(&self) -> &[Vec<f64>] {
        &self.betas
    }

    pub fn beta(&self, m: usize) -> &[f64] {
        &self.betas[m]
    }

    pub fn beta_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.betas[m]
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<Vec<f64>>) {
        (self.w, self.betas)
    }

    /// Concatenation `w, beta_1, ..., beta_M`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shape().total());
        out.extend_from_slice(&self.w);
        for b in &self.betas {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn unflatten(shape: &Shape, flat: &[f64]) -> Result<Self> {
        shape.validate()?;
        if flat.len() != shape.total() {
            return Err(PflError::ShapeMismatch {
                block: "flattened model".into(),
                expected: shape.total(),
                found: flat.len(),
            });
        }
        let (w, mut rest) = flat.split_at(shape.d0);
        let mut betas = Vec::with_capacity(shape.dims.len());
        for &d in &shape.dims {
            let (b, tail) = rest.split_at(d);
            betas.push(b.to_vec());
            rest = tail;
        }
        Ok(PartitionedModel { w: w.to_vec(), betas })
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.w.len() != other.w.len() {
            return Err(PflError::ShapeMismatch {
                block: "w".into(),
                expected: self.w.len(),
                found: other.w.len(),
            });
        }
        if self.betas.len() != other.betas.len() {
            return Err(PflError::ShapeMismatch {
                block: "number of clients".into(),
                expected: self.betas.len(),
                found: other.betas.len(),
            });
        }
        for (m, (a, b)) in self.betas.iter().zip(&other.betas).enumerate() {
            if a.len() != b.len() {
                return Err(PflError::ShapeMismatch {
                    block: format!("beta[{m}]"),
                    expected: a.len(),
                    found: b.len(),
                });
            }
        }
        Ok(())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        let finite = self.w.iter().chain(self.betas.iter().flatten()).all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(PflError::Overflow(context.to_string()))
        }
    }

    /// `a * x + y`, block by block.
    pub fn axpy(a: f64, x: &Self, y: &Self) -> Result<Self> {
        x.check_same_shape(y)?;
        let mut out = y.clone();
        out.add_scaled(a, x);
        out.check_finite("axpy")?;
        Ok(out)
    }

    /// `self += a * x`. Shapes must already agree.
    pub fn add_scaled(&mut self, a: f64, x: &Self) {
        debug_assert_eq!(self.shape(), x.shape());
        axpy_slice(a, &x.w, &mut self.w);
        for (dst, src) in self.betas.iter_mut().zip(&x.betas) {
            axpy_slice(a, src, dst);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for v in self.w.iter_mut().chain(self.betas.iter_mut().flatten()) {
            *v *= a;
        }
    }

    /// `a * x + b * y`.
    pub fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        debug_assert_eq!(x.shape(), y.shape());
        let mut out = y.clone();
        out.scale(b);
        out.add_scaled(a, x);
        out
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.w, &other.w)
            + self
                .betas
                .iter()
                .zip(&other.betas)
                .map(|(a, b)| dot(a, b))
                .sum::<f64>()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        let mut d = self.clone();
        d.add_scaled(-1.0, other);
        d.norm()
    }
}

pub(crate) fn axpy_slice(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

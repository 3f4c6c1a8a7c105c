//! Run records, oracle-call accounting, error metrics and seed aggregation.
//!
//! Counting units: one gradient of one client's `f_{m,i}` with respect to
//! one block counts 1; a full client gradient counts `n`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{PflError, Result};
use crate::model::PartitionedModel;
use crate::objectives::{Blocks, ObjectiveSpec, Samples};

/// Cumulative communication rounds and per-block sample-gradient counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub comm: u64,
    pub grad_w: u64,
    pub grad_beta: u64,
}

/// One logged row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: u64,
    /// Communication-round index of the row (the logging grid).
    pub round: u64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub est_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub comm: u64,
    pub grad_w: u64,
    pub grad_beta: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// Checks that cumulative fields never decrease and every loss is finite.
pub fn check_log(records: &[RunRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if !r.loss.is_finite() {
            return Err(PflError::Overflow(format!("loss at row {i}")));
        }
        if i > 0 {
            let p = &records[i - 1];
            if r.iteration < p.iteration || r.comm < p.comm || r.grad_w < p.grad_w || r.grad_beta < p.grad_beta {
                return Err(PflError::InvalidParameter {
                    name: "records",
                    reason: format!("cumulative field decreased at row {i}"),
                });
            }
        }
    }
    Ok(())
}

/// `|w_hat - w*|^2 + sum_m |beta_hat_m - beta*_m|^2`. With
/// `reparameterized`, `w_hat` is first mapped to raw space by `M^{-1/2}`.
pub fn estimation_error(model: &PartitionedModel, truth: Option<&PartitionedModel>, reparameterized: bool) -> Result<f64> {
    let truth = truth.ok_or(PflError::MissingTruth)?;
    model.check_same_shape(truth)?;
    let s = if reparameterized {
        1.0 / (model.num_clients() as f64).sqrt()
    } else {
        1.0
    };
    let mut err: f64 = model.w().iter().zip(truth.w()).map(|(a, b)| (s * a - b).powi(2)).sum();
    for (bh, bt) in model.betas().iter().zip(truth.betas()) {
        err += bh.iter().zip(bt).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(err)
}

/// `(1/M) sum_m |grad f_m(w*, beta*_m)|^2` over both blocks.
pub fn zeta_star_sq(spec: &ObjectiveSpec, optimum: &PartitionedModel) -> Result<f64> {
    optimum.check_same_shape(&PartitionedModel::zeros(&spec.shape()?))?;
    let m_count = spec.num_clients();
    let mut total = 0.0;
    for m in 0..m_count {
        let (gw, gb) = spec.client_gradient(m, optimum.w(), optimum.beta(m), Samples::All, Blocks::BOTH);
        total += gw.iter().chain(&gb).map(|g| g * g).sum::<f64>();
    }
    Ok(total / m_count as f64)
}

/// Per-round summary across seeds. Counter columns are seed means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: u64,
    pub loss_mean: f64,
    pub loss_se: f64,
    pub esterr_mean: Option<f64>,
    pub esterr_se: Option<f64>,
    pub comm: f64,
    pub gw: f64,
    pub gb: f64,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

/// Mean and standard error (`sd / sqrt(R)`, `sd` with `R - 1` denominator;
/// 0 for `R = 1`) per row across `R` seed logs sharing one round grid.
pub fn aggregate(logs: &[Vec<RunRecord>]) -> Result<Vec<SummaryRow>> {
    let first = logs
        .first()
        .ok_or_else(|| PflError::GridMismatch("no logs to aggregate".into()))?;
    for (s, log) in logs.iter().enumerate() {
        if log.len() != first.len() {
            return Err(PflError::GridMismatch(format!(
                "log {s} has {} rows, log 0 has {}",
                log.len(),
                first.len()
            )));
        }
        if let Some(i) = log.iter().zip(first).position(|(a, b)| a.round != b.round) {
            return Err(PflError::GridMismatch(format!(
                "log {s} row {i} is round {}, log 0 has round {}",
                log[i].round, first[i].round
            )));
        }
    }
    let mut out = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        let col = |f: &dyn Fn(&RunRecord) -> f64| -> Vec<f64> { logs.iter().map(|l| f(&l[i])).collect() };
        let (loss_mean, loss_se) = mean_se(&col(&|r| r.loss));
        let est: Option<Vec<f64>> = logs.iter().map(|l| l[i].est_error).collect();
        let (esterr_mean, esterr_se) = match est {
            Some(v) => {
                let (m, s) = mean_se(&v);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        out.push(SummaryRow {
            round: first[i].round,
            loss_mean,
            loss_se,
            esterr_mean,
            esterr_se,
            comm: mean_se(&col(&|r| r.comm as f64)).0,
            gw: mean_se(&col(&|r| r.grad_w as f64)).0,
            gb: mean_se(&col(&|r| r.grad_beta as f64)).0,
        });
    }
    Ok(out)
}

pub fn write_jsonl(mut out: impl Write, records: &[RunRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| PflError::Io(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PflError::Io(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Header: `round,loss_mean,loss_se,esterr_mean,esterr_se,comm,gw,gb`;
/// missing estimation errors are written as empty fields.
pub fn write_summary_csv(out: impl Write, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| PflError::Io(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(["round", "loss_mean", "loss_se", "esterr_mean", "esterr_se", "comm", "gw", "gb"])
            .map_err(|e| PflError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(input: impl std::io::Read) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(|e| PflError::Io(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{BaseLoss, Family, QuadraticBase};
    use nalgebra::DMatrix;

    fn record(round: u64, loss: f64, est: Option<f64>) -> RunRecord {
        RunRecord {
            iteration: round,
            round,
            loss,
            est_error: est,
            val_loss: None,
            comm: round,
            grad_w: 2 * round,
            grad_beta: 3 * round,
            wall_ms: None,
        }
    }

    #[test]
    fn estimation_error_examples() {
        let truth = PartitionedModel::new(vec![1.0, 2.0], vec![vec![0.5], vec![-1.0]]).unwrap();
        assert_eq!(estimation_error(&truth, Some(&truth), false).unwrap(), 0.0);
        let mut off = truth.clone();
        off.w_mut()[0] += 1.0;
        assert_eq!(estimation_error(&off, Some(&truth), false).unwrap(), 1.0);
        assert_eq!(estimation_error(&truth, None, false), Err(PflError::MissingTruth));
    }

    #[test]
    fn estimation_error_unscales_reparameterized_w() {
        let truth = PartitionedModel::new(vec![1.0], vec![vec![0.0]; 4]).unwrap();
        let scaled = PartitionedModel::new(vec![2.0], vec![vec![0.0]; 4]).unwrap();
        assert_eq!(estimation_error(&scaled, Some(&truth), true).unwrap(), 0.0);
    }

    #[test]
    fn estimation_error_matches_scalar_loop() {
        let mut rng = crate::rng::RngStream::new(5, crate::rng::StreamId::new(0, 0, 0));
        let shape = crate::model::Shape::uniform(3, 2, 4).unwrap();
        let a = crate::fixtures::random_model(&mut rng, &shape, 1.0);
        let b = crate::fixtures::random_model(&mut rng, &shape, 1.0);
        let fa = a.flatten();
        let fb = b.flatten();
        let mut expect = 0.0;
        for i in 0..fa.len() {
            expect += (fa[i] - fb[i]) * (fa[i] - fb[i]);
        }
        assert!((estimation_error(&a, Some(&b), false).unwrap() - expect).abs() <= 1e-12);
    }

    fn two_client_trad() -> ObjectiveSpec {
        let base = QuadraticBase::from_matrices(
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 2.0],
            vec![vec![1.0, 0.0], vec![0.0, 2.0]],
        )
        .unwrap();
        ObjectiveSpec::new(Family::Trad, BaseLoss::Quadratic(base), true).unwrap()
    }

    #[test]
    fn zeta_star_two_client_quadratic() {
        // F minimizer solves (I + 2I) w = [1, 2], so w* = [1/3, 2/3].
        let spec = two_client_trad();
        let opt = PartitionedModel::new(vec![1.0 / 3.0, 2.0 / 3.0], vec![vec![], vec![]]).unwrap();
        let g1 = [1.0 / 3.0 - 1.0, 2.0 / 3.0];
        let g2 = [2.0 / 3.0, 4.0 / 3.0 - 2.0];
        let expect = (g1[0] * g1[0] + g1[1] * g1[1] + g2[0] * g2[0] + g2[1] * g2[1]) / 2.0;
        assert!((zeta_star_sq(&spec, &opt).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn zeta_star_zero_for_identical_clients() {
        let base = QuadraticBase::from_matrices(
            vec![DMatrix::identity(2, 2); 3],
            vec![vec![1.0, -1.0]; 3],
        )
        .unwrap();
        let spec = ObjectiveSpec::new(Family::Trad, BaseLoss::Quadratic(base), true).unwrap();
        let opt = PartitionedModel::new(vec![1.0, -1.0], vec![vec![]; 3]).unwrap();
        assert_eq!(zeta_star_sq(&spec, &opt).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_single_seed_has_zero_se() {
        let log: Vec<_> = (1..=4).map(|r| record(r, r as f64, Some(0.5))).collect();
        let rows = aggregate(std::slice::from_ref(&log)).unwrap();
        assert_eq!(rows.len(), 4);
        for (row, rec) in rows.iter().zip(&log) {
            assert_eq!(row.loss_mean, rec.loss);
            assert_eq!(row.loss_se, 0.0);
            assert_eq!(row.esterr_se, Some(0.0));
            assert_eq!(row.comm, rec.comm as f64);
        }
    }

    #[test]
    fn aggregate_constant_logs() {
        let log: Vec<_> = (1..=3).map(|r| record(r, 2.5, None)).collect();
        let rows = aggregate(&vec![log; 5]).unwrap();
        assert!(rows.iter().all(|r| r.loss_mean == 2.5 && r.loss_se == 0.0 && r.esterr_mean.is_none()));
    }

    #[test]
    fn aggregate_matches_spreadsheet_recomputation() {
        let mut rng = crate::rng::RngStream::new(9, crate::rng::StreamId::new(0, 0, 0));
        let logs: Vec<Vec<RunRecord>> = (0..30)
            .map(|_| (1..=5).map(|r| record(r, rng.normal(), Some(rng.uniform()))).collect())
            .collect();
        let rows = aggregate(&logs).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let mut sum = 0.0;
            for l in &logs {
                sum += l[i].loss;
            }
            let mean = sum / 30.0;
            let mut ss = 0.0;
            for l in &logs {
                ss += (l[i].loss - mean) * (l[i].loss - mean);
            }
            let se = (ss / 29.0).sqrt() / 30f64.sqrt();
            assert!((row.loss_mean - mean).abs() <= 1e-12);
            assert!((row.loss_se - se).abs() <= 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_mismatched_grids() {
        let a: Vec<_> = (1..=3).map(|r| record(r, 1.0, None)).collect();
        let b: Vec<_> = (1..=2).map(|r| record(r, 1.0, None)).collect();
        assert!(matches!(aggregate(&[a.clone(), b]), Err(PflError::GridMismatch(_))));
        let mut c = a.clone();
        c[1].round = 7;
        assert!(matches!(aggregate(&[a, c]), Err(PflError::GridMismatch(_))));
    }

    #[test]
    fn jsonl_and_csv_round_trip() {
        let log: Vec<_> = (1..=3).map(|r| record(r, 0.1 * r as f64, Some(0.3))).collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &log).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), log);
        let rows = aggregate(&[log.clone(), log]).unwrap();
        let mut csv = Vec::new();
        write_summary_csv(&mut csv, &rows).unwrap();
        let text = String::from_utf8(csv.clone()).unwrap();
        assert!(text.starts_with("round,loss_mean,loss_se,esterr_mean,esterr_se,comm,gw,gb\n"));
        assert_eq!(read_summary_csv(csv.as_slice()).unwrap(), rows);
    }

    #[test]
    fn check_log_flags_decreasing_counters() {
        let mut log: Vec<_> = (1..=3).map(|r| record(r, 1.0, None)).collect();
        check_log(&log).unwrap();
        log[2].comm = 0;
        assert!(check_log(&log).is_err());
    }
}

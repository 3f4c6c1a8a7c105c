use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use super::*;
use crate::data::{ClientShard, FederatedDataset};
use crate::fixtures::{random_model, random_psd, random_spec, BaseKind, ALL_FAMILIES};
use crate::rng::{RngStream, StreamId};
use crate::verify::{fd_gradient, fd_gradient_sample, hessian_block_norm, hessian_block_norm_samples, reference_solve, relative_error, HessianBlock};

fn rng(seed: u64) -> RngStream {
    RngStream::new(seed, StreamId::new(0, 0, 0))
}

fn quadratic(a: Vec<DMatrix<f64>>, b: Vec<Vec<f64>>) -> BaseLoss {
    BaseLoss::Quadratic(QuadraticBase::from_matrices(a, b).unwrap())
}

fn logistic(rows: Vec<Vec<Vec<f64>>>, labels: Vec<Vec<f64>>) -> BaseLoss {
    let shards = rows
        .iter()
        .zip(labels)
        .map(|(r, y)| ClientShard::from_rows(r, y).unwrap())
        .collect();
    let data = FederatedDataset::new(shards, None).unwrap();
    BaseLoss::Logistic(LogisticBase::new(Arc::new(data)).unwrap())
}

#[test]
fn trad_identity_quadratic_at_origin() {
    let spec = ObjectiveSpec::new(Family::Trad, quadratic(vec![DMatrix::identity(3, 3)], vec![vec![0.0; 3]]), true).unwrap();
    let x = PartitionedModel::zeros(&spec.shape().unwrap());
    assert_eq!(eval_loss(&spec, &x).unwrap(), 0.0);
    assert_eq!(grad_full(&spec, &x, Block::W).unwrap(), BlockGradient::W(vec![0.0; 3]));
}

fn mx2_pair(lambda: f64, m: usize, d: usize, seed: u64) -> (ObjectiveSpec, ObjectiveSpec) {
    let mut r = rng(seed);
    let base = crate::fixtures::random_base(&mut r, BaseKind::Logistic, m, 3, d);
    (
        ObjectiveSpec::new(Family::Mx2 { lambda }, base.clone(), true).unwrap(),
        ObjectiveSpec::new(Family::Mx2 { lambda: 0.0 }, base, true).unwrap(),
    )
}

#[test]
fn mx2_penalty_vanishes_on_the_consensus_set() {
    let (with, without) = mx2_pair(0.7, 4, 3, 1);
    let w = vec![0.4, -1.2, 2.0];
    let betas = vec![w.iter().map(|v| v / 2.0).collect::<Vec<_>>(); 4];
    let x = PartitionedModel::new(w, betas).unwrap();
    assert_eq!(eval_loss(&with, &x).unwrap(), eval_loss(&without, &x).unwrap());
}

#[test]
fn mx2_penalty_gradient_vanishes_at_origin() {
    let (with, without) = mx2_pair(0.7, 3, 2, 2);
    let x = PartitionedModel::zeros(&with.shape().unwrap());
    for block in [Block::W, Block::Beta] {
        assert_eq!(grad_full(&with, &x, block).unwrap(), grad_full(&without, &x, block).unwrap());
    }
}

/// Scalar re-implementation of the MX2 logistic objective.
fn mx2_logistic_scalar(rows: &[Vec<Vec<f64>>], labels: &[Vec<f64>], lambda: f64, w: &[f64], betas: &[Vec<f64>]) -> f64 {
    let m_count = rows.len();
    let s = 1.0 / (m_count as f64).sqrt();
    let mut total = 0.0;
    for m in 0..m_count {
        let n = rows[m].len();
        let mut f = 0.0;
        for i in 0..n {
            let mut z = 0.0;
            for k in 0..w.len() {
                z += betas[m][k] * rows[m][i][k];
            }
            let p_hat = 1.0 / (1.0 + z.exp());
            let y = labels[m][i];
            f += -y * p_hat.ln() - (1.0 - y) * (1.0 - p_hat).ln();
        }
        f /= n as f64;
        let mut pen = 0.0;
        for k in 0..w.len() {
            pen += (s * w[k] - betas[m][k]).powi(2);
        }
        total += f + 0.5 * lambda * pen;
    }
    total / m_count as f64
}

#[test]
fn mx2_logistic_matches_scalar_oracle() {
    let rows = vec![
        vec![vec![0.3, -0.2], vec![1.0, 0.5]],
        vec![vec![-0.7, 0.1], vec![0.2, 0.9]],
    ];
    let labels = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let spec = ObjectiveSpec::new(Family::Mx2 { lambda: 0.3 }, logistic(rows.clone(), labels.clone()), true).unwrap();
    let x = PartitionedModel::new(vec![0.5, -1.0], vec![vec![0.2, 0.4], vec![-0.6, 1.1]]).unwrap();
    let expect = mx2_logistic_scalar(&rows, &labels, 0.3, x.w(), x.betas());
    assert!((eval_loss(&spec, &x).unwrap() - expect).abs() < 1e-14);
}

#[test]
fn shape_mismatch_is_reported() {
    let spec = ObjectiveSpec::new(Family::Trad, quadratic(vec![DMatrix::identity(2, 2)], vec![vec![0.0; 2]]), true).unwrap();
    let bad = PartitionedModel::new(vec![0.0; 3], vec![vec![]]).unwrap();
    assert!(matches!(eval_loss(&spec, &bad), Err(PflError::ShapeMismatch { .. })));
}

#[test]
fn sample_index_out_of_range() {
    let mut r = rng(3);
    let spec = random_spec(&mut r, FamilyKind::Mx2, BaseKind::Quadratic, 2, 3, 2, true);
    let x = PartitionedModel::zeros(&spec.shape().unwrap());
    assert_eq!(grad_sample(&spec, &x, 3, Block::W), Err(PflError::IndexOutOfRange { index: 3, n: 3 }));
}

#[test]
fn construction_rejects_bad_hyperparameters() {
    let base = quadratic(vec![DMatrix::identity(2, 2); 2], vec![vec![0.0; 2]; 2]);
    let cases = [
        Family::Mx2 { lambda: -1.0 },
        Family::Mt2 { lambda: 1.0, relax: f64::NAN },
        Family::Apfl2 { relax: 1.0, alphas: vec![0.5] },
        Family::Apfl2 { relax: 1.0, alphas: vec![0.5, 1.0] },
        Family::Ws2 { d_w: 3 },
    ];
    for family in cases {
        assert!(matches!(
            ObjectiveSpec::new(family.clone(), base.clone(), true),
            Err(PflError::InvalidObjective(_))
        ), "{family:?}");
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut r = rng(4);
    for base in [BaseKind::Quadratic, BaseKind::Logistic] {
        for kind in ALL_FAMILIES {
            for reparam in [true, false] {
                for _ in 0..3 {
                    let spec = random_spec(&mut r, kind, base, 3, 4, 4, reparam);
                    let x = random_model(&mut r, &spec.shape().unwrap(), 1.0);
                    let analytic = spec.gradient(&x, Samples::All, Blocks::BOTH).unwrap().flatten();
                    let fd = fd_gradient(&spec, &x, 1e-5).unwrap();
                    let err = relative_error(&analytic, &fd);
                    assert!(err <= 1e-6, "{kind:?} {base:?} reparam={reparam}: {err}");
                    let j = r.index(4);
                    let analytic = spec.gradient(&x, Samples::One(j), Blocks::BOTH).unwrap().flatten();
                    let fd = fd_gradient_sample(&spec, &x, j, 1e-5).unwrap();
                    assert!(relative_error(&analytic, &fd) <= 1e-6, "{kind:?} {base:?} sample {j}");
                }
            }
        }
    }
}

#[test]
fn single_sample_gradient_equals_full() {
    let mut r = rng(5);
    for kind in ALL_FAMILIES {
        let spec = random_spec(&mut r, kind, BaseKind::Logistic, 3, 1, 3, true);
        let x = random_model(&mut r, &spec.shape().unwrap(), 1.0);
        for block in [Block::W, Block::Beta] {
            assert_eq!(grad_sample(&spec, &x, 0, block).unwrap(), grad_full(&spec, &x, block).unwrap());
        }
    }
}

#[test]
fn mean_of_sample_gradients_is_full_gradient() {
    let mut r = rng(6);
    for base in [BaseKind::Quadratic, BaseKind::Logistic] {
        for kind in ALL_FAMILIES {
            let n = 5;
            let spec = random_spec(&mut r, kind, base, 3, n, 3, true);
            let x = random_model(&mut r, &spec.shape().unwrap(), 1.0);
            for block in [Block::W, Block::Beta] {
                let full = grad_full(&spec, &x, block).unwrap().flatten();
                let mut mean = vec![0.0; full.len()];
                for j in 0..n {
                    for (a, g) in mean.iter_mut().zip(grad_sample(&spec, &x, j, block).unwrap().flatten()) {
                        *a += g / n as f64;
                    }
                }
                let err: f64 = mean.iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(err <= 1e-12, "{kind:?} {base:?} {block:?}: {err}");
            }
        }
    }
}

#[test]
fn mx2_partial_minimizer_in_w_is_scaled_mean_of_locals() {
    let mut r = rng(7);
    for _ in 0..5 {
        let m = 4;
        let spec = random_spec(&mut r, FamilyKind::Mx2, BaseKind::Logistic, m, 3, 3, true);
        let mut x = random_model(&mut r, &spec.shape().unwrap(), 2.0);
        // The w-gradient is affine in w: recover the Hessian by differences
        // and solve the stationarity system numerically.
        let d = 3;
        x.w_mut().iter_mut().for_each(|v| *v = 0.0);
        let g0 = grad_full(&spec, &x, Block::W).unwrap().flatten();
        let mut h = DMatrix::zeros(d, d);
        for i in 0..d {
            let mut e = x.clone();
            e.w_mut()[i] = 1.0;
            let gi = grad_full(&spec, &e, Block::W).unwrap().flatten();
            for k in 0..d {
                h[(k, i)] = gi[k] - g0[k];
            }
        }
        let rhs = -nalgebra::DVector::from_vec(g0);
        let numeric = h.lu().solve(&rhs).unwrap();
        let scale = (m as f64).sqrt();
        for k in 0..d {
            let mean: f64 = (0..m).map(|c| x.beta(c)[k]).sum::<f64>() / m as f64;
            assert!((numeric[k] - scale * mean).abs() <= 1e-10);
        }
    }
}

#[test]
fn ws2_reparameterization_maps_minimizers() {
    let mut r = rng(8);
    for _ in 0..3 {
        let m = 3;
        let base = crate::fixtures::random_base(&mut r, BaseKind::Quadratic, m, 2, 4);
        let raw = ObjectiveSpec::new(Family::Ws2 { d_w: 2 }, base.clone(), false).unwrap();
        let rep = ObjectiveSpec::new(Family::Ws2 { d_w: 2 }, base, true).unwrap();
        let a = reference_solve(&raw, 1e-12).unwrap();
        let b = reference_solve(&rep, 1e-12).unwrap();
        let mut mapped = a.clone();
        mapped.w_mut().iter_mut().for_each(|v| *v *= (m as f64).sqrt());
        assert!(mapped.distance(&b) <= 1e-8, "{}", mapped.distance(&b));
    }
}

#[test]
fn degenerate_families_reduce() {
    let mut r = rng(9);
    for base_kind in [BaseKind::Quadratic, BaseKind::Logistic] {
        let base = crate::fixtures::random_base(&mut r, base_kind, 3, 4, 3);
        let mt2 = ObjectiveSpec::new(Family::Mt2 { lambda: 0.0, relax: 0.0 }, base.clone(), true).unwrap();
        let full = ObjectiveSpec::new(Family::Full, base.clone(), true).unwrap();
        let ws2 = ObjectiveSpec::new(Family::Ws2 { d_w: 3 }, base.clone(), true).unwrap();
        let trad = ObjectiveSpec::new(Family::Trad, base, true).unwrap();
        for _ in 0..5 {
            let x = random_model(&mut r, &mt2.shape().unwrap(), 1.5);
            let y = PartitionedModel::new(vec![], x.betas().to_vec()).unwrap();
            assert!((eval_loss(&mt2, &x).unwrap() - eval_loss(&full, &y).unwrap()).abs() <= 1e-12);

            let w = random_model(&mut r, &ws2.shape().unwrap(), 1.5);
            let s = ws2.w_scale();
            let t = PartitionedModel::new(w.w().iter().map(|v| s * v).collect(), vec![vec![]; 3]).unwrap();
            assert!((eval_loss(&ws2, &w).unwrap() - eval_loss(&trad, &t).unwrap()).abs() <= 1e-12);
        }
    }
}

#[test]
fn profile_examples() {
    let base = quadratic(vec![DMatrix::identity(2, 2); 20], vec![vec![0.0; 2]; 20]);
    let trad = ObjectiveSpec::new(Family::Trad, base.clone(), true).unwrap();
    let p = smoothness_profile(&trad, 0.5, 1.0, 2.0).unwrap();
    assert_eq!((p.l_beta, p.ll_beta), (0.0, 0.0));
    let mx2 = ObjectiveSpec::new(Family::Mx2 { lambda: 0.001 }, base, true).unwrap();
    let p = smoothness_profile(&mx2, 0.0, 1.0, 1.0).unwrap();
    assert!((p.l_w - 5e-5).abs() < 1e-18);
    assert!(smoothness_profile(&mx2, -1.0, 1.0, 1.0).is_err());
}

#[test]
fn profiles_satisfy_ordering() {
    let mut r = rng(10);
    for base in [BaseKind::Quadratic, BaseKind::Logistic] {
        for kind in ALL_FAMILIES {
            for reparam in [true, false] {
                let spec = random_spec(&mut r, kind, base, 3, 5, 4, reparam);
                let c = spec.base().constants();
                let p = smoothness_profile(&spec, c.mu_prime, c.l_prime, c.ll_prime).unwrap();
                p.check_ordering(spec.n()).unwrap_or_else(|e| panic!("{kind:?} {base:?}: {e}"));
            }
        }
    }
}

#[test]
fn hessian_blocks_respect_profile_constants() {
    let mut r = rng(11);
    for base in [BaseKind::Quadratic, BaseKind::Logistic] {
        for kind in ALL_FAMILIES {
            for reparam in [true, false] {
                let spec = random_spec(&mut r, kind, base, 3, 3, 3, reparam);
                let c = spec.base().constants();
                let p = smoothness_profile(&spec, c.mu_prime, c.l_prime, c.ll_prime).unwrap();
                let x = random_model(&mut r, &spec.shape().unwrap(), 1.0);
                let tol = 1.0 + 1e-3;
                let hw = hessian_block_norm(&spec, &x, HessianBlock::W).unwrap();
                let hb = hessian_block_norm(&spec, &x, HessianBlock::Beta).unwrap();
                assert!(hw <= p.l_w * tol + 1e-12, "{kind:?} {base:?} w: {hw} > {}", p.l_w);
                assert!(hb <= p.l_beta * tol + 1e-12, "{kind:?} {base:?} beta: {hb} > {}", p.l_beta);
                let j = r.index(3);
                let sw = hessian_block_norm_samples(&spec, &x, HessianBlock::W, Samples::One(j)).unwrap();
                let sb = hessian_block_norm_samples(&spec, &x, HessianBlock::Beta, Samples::One(j)).unwrap();
                assert!(sw <= p.ll_w * tol + 1e-12, "{kind:?} {base:?} sample w: {sw} > {}", p.ll_w);
                assert!(sb <= p.ll_beta * tol + 1e-12, "{kind:?} {base:?} sample beta: {sb} > {}", p.ll_beta);
            }
        }
    }
}

#[test]
fn mx2_w_block_norm_is_lambda_over_m() {
    let mut r = rng(12);
    let spec = random_spec(&mut r, FamilyKind::Mx2, BaseKind::Quadratic, 4, 2, 3, true);
    let Family::Mx2 { lambda } = *spec.family() else { unreachable!() };
    let x = random_model(&mut r, &spec.shape().unwrap(), 1.0);
    let h = hessian_block_norm(&spec, &x, HessianBlock::W).unwrap();
    assert!((h - lambda / 4.0).abs() <= 1e-6 * lambda);
}

#[test]
fn logistic_single_sample_curvature_at_origin() {
    let x_row = vec![0.6, -1.2, 0.3];
    let spec = ObjectiveSpec::new(Family::Trad, logistic(vec![vec![x_row.clone()]], vec![vec![1.0]]), true).unwrap();
    let h = hessian_block_norm(&spec, &PartitionedModel::zeros(&spec.shape().unwrap()), HessianBlock::W).unwrap();
    let expect = x_row.iter().map(|v| v * v).sum::<f64>() / 4.0;
    assert!((h - expect).abs() <= 1e-4);
}

#[test]
fn mu_prime_rank_one_is_zero() {
    let base = logistic(vec![vec![vec![1.0, 0.0, 0.0]]], vec![vec![1.0]]);
    let reference = PartitionedModel::new(vec![], vec![vec![0.0; 3]]).unwrap();
    assert_eq!(estimate_mu_prime(&base, &reference).unwrap(), 0.0);
}

#[test]
fn mu_prime_scalar() {
    let base = logistic(vec![vec![vec![2.0]]], vec![vec![0.0]]);
    let reference = PartitionedModel::new(vec![], vec![vec![0.0]]).unwrap();
    assert!((estimate_mu_prime(&base, &reference).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn mu_prime_matches_dense_eigensolver() {
    let mut r = rng(13);
    for _ in 0..5 {
        let data = crate::fixtures::random_logistic_data(&mut r, 2, 6, 3);
        let reference = PartitionedModel::new(vec![], (0..2).map(|_| (0..3).map(|_| r.normal()).collect()).collect()).unwrap();
        let mut h = DMatrix::<f64>::zeros(3, 3);
        for (m, shard) in data.clients().iter().enumerate() {
            for x in shard.rows() {
                let z: f64 = x.iter().zip(reference.beta(m)).map(|(a, b)| a * b).sum();
                let s = sigmoid(z);
                for a in 0..3 {
                    for b in 0..3 {
                        h[(a, b)] += s * (1.0 - s) * x[a] * x[b] / 12.0;
                    }
                }
            }
        }
        let expect = SymmetricEigen::new(h).eigenvalues.min();
        let base = BaseLoss::Logistic(LogisticBase::new(Arc::new(data)).unwrap());
        let got = estimate_mu_prime(&base, &reference).unwrap();
        assert!((got - expect).abs() <= 1e-8, "{got} vs {expect}");
    }
}

#[test]
fn quadratic_constants_are_exact_eigenvalues() {
    let mut r = rng(14);
    let a = random_psd(&mut r, 3, 0.2);
    let eig = SymmetricEigen::new(a.clone()).eigenvalues;
    let c = quadratic(vec![a], vec![vec![0.0; 3]]).constants();
    assert!((c.mu_prime - eig.min()).abs() < 1e-12);
    assert!((c.l_prime - eig.max()).abs() < 1e-12);
    assert_eq!(c.l_prime, c.ll_prime);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_consistency_holds_for_random_instances(seed in any::<u64>(), family in 0usize..6, logistic in any::<bool>()) {
        let mut r = rng(seed);
        let base = if logistic { BaseKind::Logistic } else { BaseKind::Quadratic };
        let spec = random_spec(&mut r, ALL_FAMILIES[family], base, 2, 3, 3, true);
        let x = random_model(&mut r, &spec.shape().unwrap(), 1.0);
        let analytic = spec.gradient(&x, Samples::All, Blocks::BOTH).unwrap().flatten();
        let fd = fd_gradient(&spec, &x, 1e-5).unwrap();
        prop_assert!(relative_error(&analytic, &fd) <= 1e-6);
    }
}

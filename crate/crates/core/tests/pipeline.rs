use std::io::Cursor;
use std::sync::Arc;

use pfl_core::datagen::{gen_synthetic, load_csv_from_reader, CsvSchema, SynthConfig, SynthKind};
use pfl_core::objectives::{estimate_mu_prime, LogisticBase};
use pfl_core::optimizers::{Algorithm, Optimizer, OptimizerConfig};
use pfl_core::telemetry::{aggregate, check_log, read_jsonl, read_summary_csv, write_jsonl, write_summary_csv};
use pfl_core::verify::reference_solve;
use pfl_core::{eval_loss, smoothness_profile, BaseLoss, Family, ObjectiveSpec, PartitionedModel, RunRecord};

fn mx2_instance(seed: u64) -> ObjectiveSpec {
    let config = SynthConfig {
        kind: SynthKind::Mixture { d: 4 },
        n: 30,
        clients: 3,
        sigma_h: 0.3,
        seed,
    };
    let data = gen_synthetic(&config).unwrap();
    let base = BaseLoss::Logistic(LogisticBase::new(Arc::new(data)).unwrap());
    ObjectiveSpec::new(Family::Mx2 { lambda: 0.1 }, base, true).unwrap()
}

fn run(spec: &ObjectiveSpec, alg: Algorithm, seed: u64, iters: u64) -> Vec<RunRecord> {
    let c = spec.base().constants();
    let mu = match spec.base() {
        BaseLoss::Logistic(l) => estimate_mu_prime(spec.base(), l.data().truth().unwrap()).unwrap(),
        BaseLoss::Quadratic(_) => c.mu_prime,
    };
    let profile = smoothness_profile(spec, mu, c.l_prime, c.ll_prime).unwrap();
    let mut config = OptimizerConfig::new(alg);
    if alg == Algorithm::Lsgd {
        config.eta = Some(0.01);
        config.tau = Some(5);
    }
    let params = config.resolve(&profile, spec.n()).unwrap();
    let init = PartitionedModel::zeros(&spec.shape().unwrap());
    let mut opt = Optimizer::new(spec, params, &init, seed, 0, false).unwrap();
    let mut out = Vec::new();
    for _ in 0..iters {
        opt.step().unwrap();
        if opt.iteration() % 50 == 0 {
            let cn = opt.counters();
            out.push(RunRecord {
                iteration: opt.iteration(),
                round: out.len() as u64 + 1,
                loss: eval_loss(spec, &opt.output()).unwrap(),
                est_error: None,
                val_loss: None,
                comm: cn.comm,
                grad_w: cn.grad_w,
                grad_beta: cn.grad_beta,
                wall_ms: None,
            });
        }
    }
    out
}

#[test]
fn variance_reduced_and_exact_methods_reach_the_optimum() {
    let spec = mx2_instance(5);
    let f0 = eval_loss(&spec, &PartitionedModel::zeros(&spec.shape().unwrap())).unwrap();
    let f_star = eval_loss(&spec, &reference_solve(&spec, 1e-10).unwrap()).unwrap();
    for alg in [Algorithm::Acd, Algorithm::Svrcd, Algorithm::Asvrcd] {
        let log = run(&spec, alg, 1, 20_000);
        check_log(&log).unwrap();
        let gap = log.last().unwrap().loss - f_star;
        assert!(gap.abs() <= 1e-4 * (f0 - f_star), "{alg:?}: gap {gap:e}");
    }
}

#[test]
fn stochastic_methods_settle_below_the_initial_loss() {
    let spec = mx2_instance(5);
    let f0 = eval_loss(&spec, &PartitionedModel::zeros(&spec.shape().unwrap())).unwrap();
    for alg in [Algorithm::Lsgd, Algorithm::Scd] {
        let log = run(&spec, alg, 1, 20_000);
        check_log(&log).unwrap();
        let tail = &log[log.len() / 2..];
        let mean = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
        assert!(mean < f0, "{alg:?}: tail mean {mean} vs f0 {f0}");
    }
}

#[test]
fn logs_round_trip_and_aggregate_over_seeds() {
    let spec = mx2_instance(6);
    let logs: Vec<Vec<RunRecord>> = (0..3).map(|s| run(&spec, Algorithm::Ascd, s, 500)).collect();

    let mut buf = Vec::new();
    write_jsonl(&mut buf, &logs[0]).unwrap();
    assert_eq!(read_jsonl(Cursor::new(&buf)).unwrap(), logs[0]);

    let rows = aggregate(&logs).unwrap();
    assert_eq!(rows.len(), logs[0].len());
    let mean0 = logs.iter().map(|l| l[0].loss).sum::<f64>() / 3.0;
    assert!((rows[0].loss_mean - mean0).abs() <= 1e-12);

    let mut csv = Vec::new();
    write_summary_csv(&mut csv, &rows).unwrap();
    assert_eq!(read_summary_csv(Cursor::new(&csv)).unwrap().len(), rows.len());
}

#[test]
fn csv_ingestion_feeds_an_objective() {
    let text = "a,b,y,client\n0.1,0.2,1,0\n0.3,-0.1,0,1\n-0.2,0.4,1,0\n0.5,0.0,0,1\n";
    let schema = CsvSchema {
        label: "y".into(),
        partition: Some("client".into()),
        clients: 2,
    };
    let data = load_csv_from_reader(Cursor::new(text), &schema).unwrap();
    assert_eq!((data.num_clients(), data.dim()), (2, 2));
    let base = BaseLoss::Logistic(LogisticBase::new(Arc::new(data)).unwrap());
    let spec = ObjectiveSpec::new(Family::Full, base, true).unwrap();
    let f0 = eval_loss(&spec, &PartitionedModel::zeros(&spec.shape().unwrap())).unwrap();
    assert!((f0 - std::f64::consts::LN_2).abs() <= 1e-12);
}


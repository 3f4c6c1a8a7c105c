//! Named experiment configurations.

use pfl_core::datagen::SynthKind;
use pfl_core::optimizers::{Algorithm, OptimizerConfig};
use pfl_core::FamilyKind;

use crate::config::{
    AlphaSpec, BaseKindConfig, DatasetConfig, ExperimentConfig, LambdaSpec, ObjectiveConfig, RunConfig,
    SyntheticDataset, LAMBDA_RULE,
};

pub const PRESETS: [&str; 4] = ["mx2-synth", "ws2-synth", "pw-sweep", "reparam-ablation"];

/// `p_w` values compared against the theory choice.
pub const PW_SWEEP: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, thiserror::Error)]
#[error("unknown preset `{0}`; expected one of: mx2-synth, ws2-synth, pw-sweep, reparam-ablation")]
pub struct UnknownPreset(pub String);

/// Local SGD as in the synthetic experiments: `tau = 5`, `B = 1`,
/// `eta = 0.01`.
pub fn lsgd_default() -> OptimizerConfig {
    let mut c = OptimizerConfig::new(Algorithm::Lsgd);
    c.eta = Some(0.01);
    c.tau = Some(5);
    c.batch = Some(1);
    c
}

fn mixture(d: usize, n: usize, clients: usize, sigma_h: Vec<f64>) -> DatasetConfig {
    DatasetConfig::Synthetic(SyntheticDataset {
        kind: SynthKind::Mixture { d },
        n,
        clients,
        sigma_h,
        base: BaseKindConfig::Logistic,
        validation: true,
    })
}

fn mx2() -> ObjectiveConfig {
    let mut o = ObjectiveConfig::new(FamilyKind::Mx2);
    o.lambda = Some(LambdaSpec::Rule(LAMBDA_RULE.into()));
    o
}

fn run(seeds: u64, max_rounds: u64) -> RunConfig {
    RunConfig {
        seeds: (0..seeds).collect(),
        max_rounds,
        log_every: 1,
        output_dir: None,
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig, UnknownPreset> {
    let config = match name {
        "mx2-synth" => ExperimentConfig {
            name: name.into(),
            dataset: mixture(15, 1000, 20, vec![0.1, 0.3, 1.0]),
            objectives: vec![mx2()],
            optimizers: vec![
                lsgd_default(),
                OptimizerConfig::new(Algorithm::Ascd),
                OptimizerConfig::new(Algorithm::Asvrcd),
            ],
            run: run(30, 1000),
        },
        "ws2-synth" => {
            let mut ws2 = ObjectiveConfig::new(FamilyKind::Ws2);
            ws2.d_w = Some(10);
            ExperimentConfig {
                name: name.into(),
                dataset: DatasetConfig::Synthetic(SyntheticDataset {
                    kind: SynthKind::Weightshare { d_g: 10, d_l: 5 },
                    n: 1000,
                    clients: 20,
                    sigma_h: vec![5.0, 10.0, 15.0],
                    base: BaseKindConfig::Logistic,
                    validation: true,
                }),
                objectives: vec![ws2],
                optimizers: vec![
                    lsgd_default(),
                    OptimizerConfig::new(Algorithm::Ascd),
                    OptimizerConfig::new(Algorithm::Asvrcd),
                ],
                run: run(30, 1000),
            }
        }
        "pw-sweep" => {
            let mut optimizers = vec![labelled(OptimizerConfig::new(Algorithm::Ascd), "ascd-theory")];
            for p in PW_SWEEP {
                let mut c = OptimizerConfig::new(Algorithm::Ascd);
                c.p_w = Some(p);
                optimizers.push(labelled(c, &format!("ascd-pw{p}")));
            }
            ExperimentConfig {
                name: name.into(),
                dataset: mixture(15, 1000, 20, vec![0.3]),
                objectives: vec![mx2()],
                optimizers,
                run: run(30, 1000),
            }
        }
        "reparam-ablation" => {
            let mut objectives = Vec::new();
            for reparameterized in [true, false] {
                let mut m = mx2();
                m.reparameterized = reparameterized;
                let mut t = ObjectiveConfig::new(FamilyKind::Mt2);
                t.lambda = Some(LambdaSpec::Rule(LAMBDA_RULE.into()));
                t.relax = Some(1.0);
                t.reparameterized = reparameterized;
                let mut a = ObjectiveConfig::new(FamilyKind::Apfl2);
                a.relax = Some(1.0);
                a.alpha = Some(AlphaSpec::Shared(0.5));
                a.reparameterized = reparameterized;
                objectives.extend([m, t, a]);
            }
            ExperimentConfig {
                name: name.into(),
                dataset: mixture(15, 1000, 20, vec![0.3]),
                objectives,
                optimizers: vec![OptimizerConfig::new(Algorithm::Ascd)],
                run: run(30, 1000),
            }
        }
        other => return Err(UnknownPreset(other.into())),
    };
    Ok(config)
}

fn labelled(mut c: OptimizerConfig, label: &str) -> OptimizerConfig {
    c.label = Some(label.into());
    c
}

/// Shrinks a synthetic preset to `n` samples, `clients` clients and
/// `seeds` seeds; other settings are kept.
pub fn desk_scale(mut config: ExperimentConfig, n: usize, clients: usize, seeds: u64) -> ExperimentConfig {
    if let DatasetConfig::Synthetic(s) = &mut config.dataset {
        s.n = n;
        s.clients = clients;
    }
    config.run.seeds = (0..seeds).collect();
    config
}

//! Seed x optimizer runs, JSONL logs, aggregate CSVs and the manifest.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;

use pfl_core::datagen::{self, SynthConfig};
use pfl_core::objectives::{estimate_mu_prime, regime_warnings, LogisticBase, QuadraticBase};
use pfl_core::optimizers::{Optimizer, OptimizerConfig, Params};
use pfl_core::telemetry::{self, RunRecord};
use pfl_core::{eval_loss, BaseLoss, FamilyKind, FederatedDataset, ObjectiveSpec, PartitionedModel, SmoothnessProfile};

use crate::config::{
    BaseKindConfig, DatasetConfig, ExperimentConfig, ObjectiveConfig, DEFAULT_MAX_ITERS, VALIDATION_SEED_OFFSET,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "PFL_OUT_DIR";

/// `mu'` estimates at or below this multiple of `L'` count as zero.
const MU_ZERO_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    pub out_dir: PathBuf,
}

/// Output directory precedence: explicit flag, then the config, then
/// [`OUT_DIR_ENV`], then `./runs`.
pub fn resolve_out_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| config.run.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// One objective built for one condition and seed.
#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: ObjectiveSpec,
    /// Same objective on held-out shards.
    pub validation: Option<ObjectiveSpec>,
    /// Ground truth in the objective's block layout (raw space).
    pub truth: Option<PartitionedModel>,
    pub mu_prime: f64,
    pub mu_floored: bool,
    pub profile: SmoothnessProfile,
    pub warnings: Vec<String>,
}

fn make_base(kind: BaseKindConfig, data: FederatedDataset) -> pfl_core::Result<BaseLoss> {
    Ok(match kind {
        BaseKindConfig::Logistic => BaseLoss::Logistic(LogisticBase::new(Arc::new(data))?),
        BaseKindConfig::LeastSquares => BaseLoss::Quadratic(QuadraticBase::least_squares(&data)?),
    })
}

fn truth_in_layout(kind: FamilyKind, truth: &PartitionedModel, spec: &ObjectiveSpec) -> Option<PartitionedModel> {
    let m = truth.num_clients();
    let candidate = match kind {
        FamilyKind::Trad => PartitionedModel::new(truth.w().to_vec(), vec![vec![]; m]).ok()?,
        FamilyKind::Full => PartitionedModel::new(vec![], truth.betas().to_vec()).ok()?,
        _ => truth.clone(),
    };
    (candidate.shape() == spec.shape().ok()?).then_some(candidate)
}

/// Generates or loads the data for `seed` and builds the objective with its
/// smoothness profile.
pub fn build_instance(
    config: &ExperimentConfig,
    sigma_h: Option<f64>,
    objective: &ObjectiveConfig,
    seed: u64,
) -> anyhow::Result<Instance> {
    let (train, held_out, base_kind, ws_d_g) = match &config.dataset {
        DatasetConfig::Synthetic(s) => {
            let synth = SynthConfig {
                kind: s.kind.clone(),
                n: s.n,
                clients: s.clients,
                sigma_h: sigma_h.expect("synthetic conditions carry sigma_h"),
                seed,
            };
            let train = datagen::gen_synthetic(&synth)?;
            let held_out = if s.validation {
                let truth = train.truth().expect("generated data carries its truth");
                Some(datagen::resample(&synth, truth, seed.wrapping_add(VALIDATION_SEED_OFFSET))?)
            } else {
                None
            };
            let d_g = match s.kind {
                datagen::SynthKind::Weightshare { d_g, .. } => Some(d_g),
                datagen::SynthKind::Mixture { .. } => None,
            };
            (train, held_out, s.base, d_g)
        }
        DatasetConfig::Csv(c) => {
            let data = datagen::load_csv(&c.path, &c.schema)
                .with_context(|| format!("loading {}", c.path.display()))?;
            (data, None, c.base, None)
        }
    };
    let family = objective
        .family(sigma_h, train.num_clients(), ws_d_g)
        .map_err(anyhow::Error::msg)?;
    let raw_truth = train.truth().cloned();
    let (m_count, d) = (train.num_clients(), train.dim());
    let base = make_base(base_kind, train)?;
    let spec = ObjectiveSpec::new(family.clone(), base, objective.reparameterized)?;
    let validation = held_out
        .map(|data| -> anyhow::Result<ObjectiveSpec> {
            Ok(ObjectiveSpec::new(family.clone(), make_base(base_kind, data)?, objective.reparameterized)?)
        })
        .transpose()?;

    let constants = spec.base().constants();
    let mut mu_prime = match spec.base() {
        BaseLoss::Logistic(_) => {
            let reference = raw_truth
                .clone()
                .unwrap_or_else(|| PartitionedModel::new(vec![], vec![vec![0.0; d]; m_count]).expect("zero reference"));
            estimate_mu_prime(spec.base(), &reference)?
        }
        BaseLoss::Quadratic(_) => constants.mu_prime,
    };
    let mu_floored = mu_prime <= MU_ZERO_TOL * constants.l_prime;
    if mu_floored {
        mu_prime = objective.mu_floor;
    }
    let profile = pfl_core::smoothness_profile(&spec, mu_prime, constants.l_prime, constants.ll_prime)?;
    let mut warnings = regime_warnings(&spec, mu_prime);
    if mu_floored {
        warnings.push(format!("mu' estimate is zero; using the floor {}", objective.mu_floor));
    }
    let truth = raw_truth.as_ref().and_then(|t| truth_in_layout(family.kind(), t, &spec));
    Ok(Instance {
        spec,
        validation,
        truth,
        mu_prime,
        mu_floored,
        profile,
        warnings,
    })
}

fn record(instance: &Instance, opt: &Optimizer<'_>, round: u64) -> anyhow::Result<RunRecord> {
    let model = opt.output();
    let loss = eval_loss(&instance.spec, &model)?;
    let rescaled = instance.spec.w_scale() != 1.0;
    let est_error = instance
        .truth
        .as_ref()
        .map(|t| telemetry::estimation_error(&model, Some(t), rescaled))
        .transpose()?;
    let val_loss = instance.validation.as_ref().map(|v| eval_loss(v, &model)).transpose()?;
    let c = opt.counters();
    Ok(RunRecord {
        iteration: opt.iteration(),
        round,
        loss,
        est_error,
        val_loss,
        comm: c.comm,
        grad_w: c.grad_w,
        grad_beta: c.grad_beta,
        wall_ms: None,
    })
}

/// Runs from zero until `max_rounds` communication rounds have happened,
/// logging the state after the iteration that completes every
/// `log_every`-th round.
pub fn run_rounds(
    instance: &Instance,
    params: Params,
    optimizer: &OptimizerConfig,
    seed: u64,
    max_rounds: u64,
    log_every: u64,
) -> anyhow::Result<Vec<RunRecord>> {
    let init = PartitionedModel::zeros(&instance.spec.shape()?);
    let mut opt = Optimizer::new(&instance.spec, params, &init, seed, 0, optimizer.per_client_indices)?;
    let max_iters = optimizer.max_iters.unwrap_or(DEFAULT_MAX_ITERS);
    let mut records = Vec::with_capacity((max_rounds / log_every) as usize);
    let mut next = log_every;
    loop {
        while next <= max_rounds && opt.counters().comm >= next {
            records.push(record(instance, &opt, next)?);
            next += log_every;
        }
        if next > max_rounds {
            return Ok(records);
        }
        if opt.iteration() >= max_iters {
            bail!(
                "iteration cap {max_iters} reached after {} of {max_rounds} communication rounds",
                opt.counters().comm
            );
        }
        opt.step()?;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunEntry {
    pub condition: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_h: Option<f64>,
    pub objective: String,
    pub optimizer: String,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<Params>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<SmoothnessProfile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_prime: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_record: Option<RunRecord>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateEntry {
    pub condition: String,
    pub objective: String,
    pub optimizer: String,
    pub path: PathBuf,
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub experiment: String,
    pub runs: Vec<RunEntry>,
    pub aggregates: Vec<AggregateEntry>,
}

impl Manifest {
    pub fn failures(&self) -> impl Iterator<Item = &RunEntry> {
        self.runs.iter().filter(|r| r.status == RunStatus::Failed)
    }
}

/// Directory name of a sweep condition.
pub fn condition_name(sigma_h: Option<f64>) -> String {
    match sigma_h {
        Some(s) => format!("sigma_h_{s}"),
        None => "data".into(),
    }
}

/// Relative path of one seed's log.
pub fn log_path(condition: &str, objective: &str, optimizer: &str, seed: u64) -> PathBuf {
    Path::new(condition).join(objective).join(optimizer).join(format!("seed_{seed}.jsonl"))
}

/// Relative path of an aggregate CSV.
pub fn aggregate_path(condition: &str, objective: &str, optimizer: &str) -> PathBuf {
    Path::new(condition).join(objective).join(format!("{optimizer}.csv"))
}

struct Job {
    sigma_h: Option<f64>,
    objective: usize,
    optimizer: usize,
    seed: u64,
}

struct JobResult {
    entry: RunEntry,
    records: Option<Vec<RunRecord>>,
}

fn run_job(config: &ExperimentConfig, root: &Path, job: &Job) -> JobResult {
    let start = Instant::now();
    let objective = &config.objectives[job.objective];
    let optimizer = &config.optimizers[job.optimizer];
    let condition = condition_name(job.sigma_h);
    let mut entry = RunEntry {
        condition: condition.clone(),
        sigma_h: job.sigma_h,
        objective: objective.name(),
        optimizer: optimizer.name(),
        seed: job.seed,
        status: RunStatus::Failed,
        error: None,
        log: None,
        params: None,
        profile: None,
        mu_prime: None,
        warnings: Vec::new(),
        final_record: None,
        wall_ms: 0.0,
    };
    let outcome = (|| -> anyhow::Result<Vec<RunRecord>> {
        let instance = build_instance(config, job.sigma_h, objective, job.seed)?;
        entry.profile = Some(instance.profile);
        entry.mu_prime = Some(instance.mu_prime);
        entry.warnings = instance.warnings.clone();
        let params = optimizer.resolve(&instance.profile, instance.spec.n())?;
        entry.params = Some(params);
        log::info!(
            "{condition}/{}/{} seed {}: resolved {params:?}",
            entry.objective,
            entry.optimizer,
            job.seed
        );
        for w in &instance.warnings {
            log::warn!("{condition}/{}: {w}", entry.objective);
        }
        let records = run_rounds(&instance, params, optimizer, job.seed, config.run.max_rounds, config.run.log_every)?;
        let rel = log_path(&condition, &entry.objective, &entry.optimizer, job.seed);
        let path = root.join(&rel);
        fs::create_dir_all(path.parent().expect("log paths have a parent"))?;
        let mut out = BufWriter::new(File::create(&path)?);
        telemetry::write_jsonl(&mut out, &records)?;
        std::io::Write::flush(&mut out)?;
        entry.log = Some(rel);
        Ok(records)
    })();
    entry.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok(records) => {
            entry.status = RunStatus::Ok;
            entry.final_record = records.last().cloned();
            JobResult {
                entry,
                records: Some(records),
            }
        }
        Err(e) => {
            log::error!(
                "{}/{}/{} seed {} failed: {e:#}",
                entry.condition,
                entry.objective,
                entry.optimizer,
                entry.seed
            );
            entry.error = Some(format!("{e:#}"));
            JobResult { entry, records: None }
        }
    }
}

/// Runs every (condition, objective, optimizer, seed) combination on up to
/// `workers` threads, then writes one aggregate CSV per (condition,
/// objective, optimizer) over the successful seeds and `manifest.json`.
/// Failed runs are recorded in the manifest and leave no log behind.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> anyhow::Result<Manifest> {
    config.validate()?;
    let root = options.out_dir.join(&config.name);
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;

    let mut jobs = Vec::new();
    for sigma_h in config.conditions() {
        for objective in 0..config.objectives.len() {
            for optimizer in 0..config.optimizers.len() {
                for &seed in &config.run.seeds {
                    jobs.push(Job {
                        sigma_h,
                        objective,
                        optimizer,
                        seed,
                    });
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()?;
    let results: Vec<JobResult> = pool.install(|| jobs.par_iter().map(|j| run_job(config, &root, j)).collect());

    let mut aggregates = Vec::new();
    for group in results.chunks(config.run.seeds.len()) {
        let logs: Vec<Vec<RunRecord>> = group.iter().filter_map(|r| r.records.clone()).collect();
        if logs.is_empty() {
            continue;
        }
        let first = &group[0].entry;
        let rows = telemetry::aggregate(&logs)?;
        let rel = aggregate_path(&first.condition, &first.objective, &first.optimizer);
        let path = root.join(&rel);
        fs::create_dir_all(path.parent().expect("aggregate paths have a parent"))?;
        telemetry::write_summary_csv(BufWriter::new(File::create(&path)?), &rows)?;
        aggregates.push(AggregateEntry {
            condition: first.condition.clone(),
            objective: first.objective.clone(),
            optimizer: first.optimizer.clone(),
            path: rel,
            seeds: logs.len(),
        });
    }

    let manifest = Manifest {
        experiment: config.name.clone(),
        runs: results.into_iter().map(|r| r.entry).collect(),
        aggregates,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(root.join("config.json"), config.to_json())?;
    Ok(manifest)
}

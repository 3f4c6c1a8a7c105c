//! Experiment configuration (JSON).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use pfl_core::datagen::{CsvSchema, SynthKind};
use pfl_core::optimizers::OptimizerConfig;
use pfl_core::{Family, FamilyKind};

/// Offset added to the training seed for held-out synthetic shards.
pub const VALIDATION_SEED_OFFSET: u64 = 1_000_000;

/// Iteration cap per run unless an optimizer entry sets its own.
pub const DEFAULT_MAX_ITERS: u64 = 20_000_000;

pub const LAMBDA_RULE: &str = "sigma_h*1e-2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub objectives: Vec<ObjectiveConfig>,
    pub optimizers: Vec<OptimizerConfig>,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticDataset),
    Csv(CsvDataset),
}

/// Synthetic data regenerated for every seed; one condition per `sigma_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    #[serde(flatten)]
    pub kind: SynthKind,
    pub n: usize,
    pub clients: usize,
    pub sigma_h: Vec<f64>,
    #[serde(default)]
    pub base: BaseKindConfig,
    /// Evaluate the loss on a second sample drawn from the same truth.
    #[serde(default = "yes")]
    pub validation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvDataset {
    pub path: PathBuf,
    #[serde(flatten)]
    pub schema: CsvSchema,
    #[serde(default)]
    pub base: BaseKindConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKindConfig {
    #[default]
    Logistic,
    LeastSquares,
}

/// Penalty weight: a number or the rule `"sigma_h*1e-2"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Value(f64),
    Rule(String),
}

impl LambdaSpec {
    pub fn resolve(&self, sigma_h: Option<f64>) -> Result<f64, String> {
        match self {
            LambdaSpec::Value(v) => Ok(*v),
            LambdaSpec::Rule(r) if r == LAMBDA_RULE => {
                sigma_h.map(|s| s * 1e-2).ok_or_else(|| format!("`{LAMBDA_RULE}` needs a synthetic dataset"))
            }
            LambdaSpec::Rule(r) => Err(format!("unknown lambda rule `{r}`; expected a number or `{LAMBDA_RULE}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Shared(f64),
    PerClient(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub family: FamilyKind,
    /// Output name; defaults to the family label, suffixed `-raw` when not
    /// reparameterized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaSpec>,
    /// `Lambda` of MT2 and APFL2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relax: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaSpec>,
    /// WS2 shared width; defaults to `d_g` of weight-sharing data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_w: Option<usize>,
    #[serde(default = "yes")]
    pub reparameterized: bool,
    /// Replaces `mu'` when the estimate is numerically zero.
    #[serde(default = "default_mu_floor")]
    pub mu_floor: f64,
}

impl ObjectiveConfig {
    pub fn new(family: FamilyKind) -> Self {
        ObjectiveConfig {
            family,
            label: None,
            lambda: None,
            relax: None,
            alpha: None,
            d_w: None,
            reparameterized: true,
            mu_floor: default_mu_floor(),
        }
    }

    pub fn name(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            let base = self.family.label().to_string();
            if self.reparameterized {
                base
            } else {
                format!("{base}-raw")
            }
        })
    }

    /// Concrete family for `clients` clients; `ws_d_g` is the shared width
    /// of weight-sharing data when known.
    pub fn family(&self, sigma_h: Option<f64>, clients: usize, ws_d_g: Option<usize>) -> Result<Family, String> {
        let need = |v: Option<f64>, what: &str| v.ok_or_else(|| format!("{} needs `{what}`", self.family.label()));
        let lambda = || -> Result<f64, String> {
            self.lambda
                .as_ref()
                .ok_or_else(|| format!("{} needs `lambda`", self.family.label()))?
                .resolve(sigma_h)
        };
        Ok(match self.family {
            FamilyKind::Trad => Family::Trad,
            FamilyKind::Full => Family::Full,
            FamilyKind::Mt2 => Family::Mt2 {
                lambda: lambda()?,
                relax: need(self.relax, "relax")?,
            },
            FamilyKind::Mx2 => Family::Mx2 { lambda: lambda()? },
            FamilyKind::Apfl2 => Family::Apfl2 {
                relax: need(self.relax, "relax")?,
                alphas: match &self.alpha {
                    Some(AlphaSpec::Shared(a)) => vec![*a; clients],
                    Some(AlphaSpec::PerClient(a)) => a.clone(),
                    None => return Err("APFL2 needs `alpha`".into()),
                },
            },
            FamilyKind::Ws2 => Family::Ws2 {
                d_w: self.d_w.or(ws_d_g).ok_or("WS2 needs `d_w` unless the data is weight-sharing")?,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Communication-round budget per run.
    pub max_rounds: u64,
    /// Log every this many rounds.
    #[serde(default = "one")]
    pub log_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

fn one() -> u64 {
    1
}

fn default_mu_floor() -> f64 {
    1e-2
}

/// A config error located at a JSON path.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path.is_empty() { ".".into() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// `sigma_h` values of the sweep, or `[None]` for CSV data.
    pub fn conditions(&self) -> Vec<Option<f64>> {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => s.sigma_h.iter().map(|&v| Some(v)).collect(),
            DatasetConfig::Csv(_) => vec![None],
        }
    }

    pub fn clients(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => s.clients,
            DatasetConfig::Csv(c) => c.schema.clients,
        }
    }

    fn ws_d_g(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Synthetic(SyntheticDataset {
                kind: SynthKind::Weightshare { d_g, .. },
                ..
            }) => Some(*d_g),
            _ => None,
        }
    }

    /// Structural checks that need no data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() || !is_path_safe(&self.name) {
            return Err(invalid("name", "must be a non-empty file-name-safe string"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                if s.sigma_h.is_empty() {
                    return Err(invalid("dataset.sigma_h", "needs at least one value"));
                }
                for (i, &sigma_h) in s.sigma_h.iter().enumerate() {
                    let probe = pfl_core::datagen::SynthConfig {
                        kind: s.kind.clone(),
                        n: s.n,
                        clients: s.clients,
                        sigma_h,
                        seed: 0,
                    };
                    probe.validate().map_err(|e| invalid(format!("dataset.sigma_h[{i}]"), e.to_string()))?;
                }
            }
            DatasetConfig::Csv(c) => {
                if c.schema.clients == 0 {
                    return Err(invalid("dataset.clients", "must be >= 1"));
                }
            }
        }
        if self.objectives.is_empty() {
            return Err(invalid("objectives", "needs at least one entry"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, o) in self.objectives.iter().enumerate() {
            let at = |field: &str| format!("objectives[{i}].{field}");
            for sigma_h in self.conditions() {
                o.family(sigma_h, self.clients(), self.ws_d_g()).map_err(|e| invalid(at("family"), e))?;
            }
            if !(o.mu_floor > 0.0 && o.mu_floor.is_finite()) {
                return Err(invalid(at("mu_floor"), "must be positive and finite"));
            }
            if !is_path_safe(&o.name()) || !names.insert(o.name()) {
                return Err(invalid(at("label"), format!("`{}` is not a unique file-name-safe name", o.name())));
            }
        }
        if self.optimizers.is_empty() {
            return Err(invalid("optimizers", "needs at least one entry"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, o) in self.optimizers.iter().enumerate() {
            if !is_path_safe(&o.name()) || !names.insert(o.name()) {
                return Err(invalid(
                    format!("optimizers[{i}].label"),
                    format!("`{}` is not a unique file-name-safe name", o.name()),
                ));
            }
            if let Some(p) = o.p_w {
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(format!("optimizers[{i}].p_w"), format!("must lie in [0, 1], got {p}")));
                }
            }
            if o.max_iters == Some(0) {
                return Err(invalid(format!("optimizers[{i}].max_iters"), "must be >= 1"));
            }
        }
        if self.run.seeds.is_empty() {
            return Err(invalid("run.seeds", "needs at least one seed"));
        }
        if self.run.max_rounds == 0 {
            return Err(invalid("run.max_rounds", "must be >= 1"));
        }
        if self.run.log_every == 0 || self.run.max_rounds % self.run.log_every != 0 {
            return Err(invalid("run.log_every", "must be >= 1 and divide max_rounds"));
        }
        Ok(())
    }
}

fn is_path_safe(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && s != "." && s != ".."
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "minimal",
        "dataset": {"source": "synthetic", "kind": "mixture", "d": 3, "n": 5, "clients": 2,
                    "sigma_h": [0.5], "base": "least_squares"},
        "objectives": [{"family": "TRAD"}],
        "optimizers": [{"algorithm": "SCD"}],
        "run": {"seeds": [1], "max_rounds": 10}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.run.log_every, 1);
        assert_eq!(c.objectives[0].mu_floor, 1e-2);
        assert!(c.objectives[0].reparameterized);
        assert_eq!(c.conditions(), vec![Some(0.5)]);
        let DatasetConfig::Synthetic(s) = &c.dataset else { panic!() };
        assert!(s.validation);
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn errors_carry_the_json_path() {
        let bad = MINIMAL.replace(r#""algorithm": "SCD""#, r#""algorithm": "SCD", "etta": 1"#);
        let err = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.starts_with("optimizers[0]"), "{err}");

        let bad = MINIMAL.replace(r#""max_rounds": 10"#, r#""max_rounds": -1"#);
        let err = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.starts_with("run.max_rounds"), "{err}");

        let bad = MINIMAL.replace(r#"{"family": "TRAD"}"#, r#"{"family": "MX2"}"#);
        let err = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.starts_with("objectives[0].family") && err.contains("lambda"), "{err}");

        let bad = MINIMAL.replace(r#""sigma_h": [0.5]"#, r#""sigma_h": []"#);
        assert!(ExperimentConfig::from_json(&bad).unwrap_err().to_string().starts_with("dataset.sigma_h"));
    }

    #[test]
    fn lambda_rule() {
        assert_eq!(LambdaSpec::Rule(LAMBDA_RULE.into()).resolve(Some(0.3)).unwrap(), 0.3 * 1e-2);
        assert_eq!(LambdaSpec::Value(2.0).resolve(None).unwrap(), 2.0);
        assert!(LambdaSpec::Rule("sigma_h".into()).resolve(Some(1.0)).is_err());
        assert!(LambdaSpec::Rule(LAMBDA_RULE.into()).resolve(None).is_err());
    }

    #[test]
    fn duplicate_optimizer_names_are_rejected() {
        let bad = MINIMAL.replace(r#"[{"algorithm": "SCD"}]"#, r#"[{"algorithm": "SCD"}, {"algorithm": "SCD"}]"#);
        assert!(ExperimentConfig::from_json(&bad).unwrap_err().to_string().starts_with("optimizers[1]"));
    }

    #[test]
    fn objective_names() {
        let mut o = ObjectiveConfig::new(FamilyKind::Mx2);
        assert_eq!(o.name(), "mx2");
        o.reparameterized = false;
        assert_eq!(o.name(), "mx2-raw");
    }

    #[test]
    fn apfl_alpha_broadcasts() {
        let mut o = ObjectiveConfig::new(FamilyKind::Apfl2);
        o.relax = Some(2.0);
        o.alpha = Some(AlphaSpec::Shared(0.25));
        assert_eq!(o.family(None, 3, None).unwrap(), Family::Apfl2 { relax: 2.0, alphas: vec![0.25; 3] });
    }
}

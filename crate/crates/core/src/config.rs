//! Run configuration: a sectioned TOML file plus dotted-key overrides.
//!
//! ```toml
//! seed = 1
//! replicates = 3
//!
//! [dataset]
//! generator = "gaussian_mixture"
//! classes = 10
//! dim = 20
//! n_train = 5000
//!
//! [federation]
//! clients = 50
//! rounds = 200
//!
//! [server]
//! algorithm = "fedecho"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::algorithms::{AlgoConfig, LocalWork, ServerRule};
use crate::data::{DatasetKind, DatasetSpec, PoolMode};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::simulator::{DelayPreset, DelayProfile, RuntimeMode};

/// Override key that sets `alpha_min = alpha_max`, or restores the entropy
/// schedule when given `"dynamic"`.
pub const ALPHA_KEY: &str = "distill.alpha";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Independent repetitions with seeds `seed, seed + 1, ...`.
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub delay: DelaySection,
    #[serde(default)]
    pub local: LocalSection,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub distill: DistillConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianMixture,
    TwoSpirals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub generator: Generator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_n_unlabeled")]
    pub n_unlabeled: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub pool: PoolMode,
}

fn default_spread() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.1
}

fn default_n_test() -> usize {
    2000
}

fn default_n_unlabeled() -> usize {
    2000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Hidden width, used by `mlp` only.
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Linear, hidden: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    pub concurrency: usize,
    pub buffer: usize,
    pub rounds: u64,
    pub alpha_dir: f64,
    /// Evaluate every this many rounds; the last round is always evaluated.
    pub eval_every: u64,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self { clients: 50, concurrency: 25, buffer: 5, rounds: 200, alpha_dir: 0.1, eval_every: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelaySection {
    pub profile: DelayPreset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub short: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub medium: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub long: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_long_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub medium_fraction: Option<f64>,
    pub runtime_mode: RuntimeMode,
}

impl Default for DelaySection {
    fn default() -> Self {
        Self {
            profile: DelayPreset::Large,
            short: None,
            medium: None,
            long: None,
            gamma: None,
            max_long_fraction: None,
            medium_fraction: None,
            runtime_mode: RuntimeMode::Resample,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSection {
    pub eta_l: f64,
    /// Epochs per dispatch. Ignored when `steps` is set.
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for LocalSection {
    fn default() -> Self {
        Self { eta_l: 0.05, epochs: 2, steps: None, batch_size: 50, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    Fedecho,
    Fedbuff,
    AdaptiveServer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub algorithm: AlgorithmName,
    pub eta: f64,
    /// Adaptive-server moments; unused by the other algorithms.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self { algorithm: AlgorithmName::Fedecho, eta: 1.0, beta1: 0.9, beta2: 0.99, eps: 1e-3 }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(load_table(path)?)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        if f.clients == 0 {
            return Err(Error::config("federation.clients must be >= 1"));
        }
        if !(1 <= f.buffer && f.buffer <= f.concurrency && f.concurrency <= f.clients) {
            return Err(Error::config(format!(
                "federation: need 1 <= buffer ({}) <= concurrency ({}) <= clients ({})",
                f.buffer, f.concurrency, f.clients
            )));
        }
        if f.rounds == 0 {
            return Err(Error::config("federation.rounds must be >= 1"));
        }
        if f.eval_every == 0 {
            return Err(Error::config("federation.eval_every must be >= 1"));
        }
        if !(f.alpha_dir > 0.0 && f.alpha_dir.is_finite()) {
            return Err(Error::config(format!("federation.alpha_dir must be finite and > 0, got {}", f.alpha_dir)));
        }
        if self.replicates == 0 {
            return Err(Error::config("replicates must be >= 1"));
        }
        if self.model.kind == ModelKind::Mlp && self.model.hidden == 0 {
            return Err(Error::config("model.hidden must be >= 1"));
        }
        if self.local.steps.is_none() && self.local.epochs == 0 {
            return Err(Error::config("local.epochs must be >= 1"));
        }
        let spec = self.dataset_spec()?;
        spec.validate()?;
        if spec.n_train < f.clients {
            return Err(Error::config(format!(
                "dataset.n_train ({}) must be at least federation.clients ({})",
                spec.n_train, f.clients
            )));
        }
        self.architecture()?.validate()?;
        self.delay_profile().validate()?;
        self.algo_config().validate()
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let d = &self.dataset;
        let kind = match d.generator {
            Generator::GaussianMixture => DatasetKind::GaussianMixture {
                classes: d.classes.ok_or_else(|| Error::config("dataset.classes is required for gaussian_mixture"))?,
                dim: d.dim.ok_or_else(|| Error::config("dataset.dim is required for gaussian_mixture"))?,
                spread: d.spread,
            },
            Generator::TwoSpirals => {
                if d.classes.is_some_and(|c| c != 2) || d.dim.is_some_and(|v| v != 2) {
                    return Err(Error::config("two_spirals is fixed at 2 classes in 2 dimensions"));
                }
                DatasetKind::TwoSpirals { noise: d.noise }
            }
        };
        Ok(DatasetSpec {
            kind,
            n_train: d.n_train,
            n_test: d.n_test,
            n_unlabeled: d.n_unlabeled,
            seed: d.seed,
            pool: d.pool,
        })
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let spec = self.dataset_spec()?;
        let (inputs, classes) = (spec.kind.dim(), spec.kind.classes());
        Ok(match self.model.kind {
            ModelKind::Linear => Architecture::LinearSoftmax { inputs, classes },
            ModelKind::Mlp => Architecture::Mlp { inputs, hidden: self.model.hidden, classes },
        })
    }

    pub fn delay_profile(&self) -> DelayProfile {
        let d = &self.delay;
        let base = DelayProfile::preset(d.profile);
        DelayProfile {
            short: d.short.unwrap_or(base.short),
            medium: d.medium.unwrap_or(base.medium),
            long: d.long.unwrap_or(base.long),
            gamma: d.gamma.unwrap_or(base.gamma),
            max_long_fraction: d.max_long_fraction.unwrap_or(base.max_long_fraction),
            medium_fraction: d.medium_fraction.unwrap_or(base.medium_fraction),
        }
    }

    pub fn algo_config(&self) -> AlgoConfig {
        let s = &self.server;
        let algorithm = match s.algorithm {
            AlgorithmName::Fedecho => ServerRule::FedEcho(self.distill),
            AlgorithmName::Fedbuff => ServerRule::FedBuff,
            AlgorithmName::AdaptiveServer => ServerRule::AdaptiveServer { beta1: s.beta1, beta2: s.beta2, eps: s.eps },
        };
        AlgoConfig {
            eta_l: self.local.eta_l,
            eta: s.eta,
            local_work: match self.local.steps {
                Some(k) => LocalWork::Steps(k),
                None => LocalWork::Epochs(self.local.epochs),
            },
            local_batch: self.local.batch_size,
            weight_decay: self.local.weight_decay,
            algorithm,
        }
    }

    /// Seeds of every replicate, in order.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}

pub fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| Error::config(e.message().to_string()))
}

pub fn load_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Parses a grid value as a TOML scalar (`0.5`, `inf`, `true`, `"x"`),
/// falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `section.key` (or a top-level `key`) in a raw config table.
/// Whether the key exists is checked when the table is deserialized.
pub fn apply_override(table: &mut Table, key: &str, value: Value) -> Result<()> {
    if key == ALPHA_KEY {
        return apply_alpha(table, value);
    }
    let mut parts = key.split('.').collect::<Vec<_>>();
    let leaf = parts.pop().filter(|p| !p.is_empty()).ok_or_else(|| Error::config(format!("empty key '{key}'")))?;
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("'{part}' in '{key}' is not a section")))?;
    }
    cur.insert(leaf.to_string(), value);
    Ok(())
}

fn apply_alpha(table: &mut Table, value: Value) -> Result<()> {
    let fixed = match &value {
        Value::String(s) if s == "dynamic" => None,
        Value::Float(v) => Some(*v),
        Value::Integer(v) => Some(*v as f64),
        other => {
            return Err(Error::config(format!("{ALPHA_KEY} takes a number or \"dynamic\", got {other}")));
        }
    };
    if let Some(a) = fixed {
        apply_override(table, "distill.alpha_min", Value::Float(a))?;
        apply_override(table, "distill.alpha_max", Value::Float(a))?;
    }
    Ok(())
}

/// Validates an override key against the config schema without a file.
pub fn check_key(base: &Table, key: &str, value: &Value) -> Result<()> {
    let mut probe = base.clone();
    apply_override(&mut probe, key, value.clone())?;
    RunConfig::from_table(probe).map(|_| ())
}

//! Experiment configuration: a TOML document with typed keys, defaults for
//! every field, dot-path overrides and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationRule, BaseRule};
use crate::attacks::{default_omega_grid, AttackKind, AttackSpec};
use crate::data::{
    partition, scale_features, synthetic_classification, FeatureScaling, MnistFiles, PartitionKind, PartitionSpec,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::fedsim::{ProtocolStrategy, SimConfig};
use crate::model::{Dataset, LossSpec};
use crate::rng::{DirectionKind, Seed64};

/// Environment variable naming the MNIST directory when the config does not.
pub const DATA_DIR_ENV: &str = "CYBER0_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

const MNIST_FEATURES: usize = 784;
const MNIST_CLASSES: usize = 10;

const DOMAIN_RUN: u64 = 0x7275_6e;

fn config_error(key: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        /// Directory with the four IDX files. Falls back to `$CYBER0_DATA_DIR`,
        /// then `data/mnist`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        #[serde(default)]
        scaling: FeatureScaling,
    },
    Synthetic {
        #[serde(default = "defaults::synthetic_samples")]
        samples: usize,
        #[serde(default = "defaults::synthetic_test_samples")]
        test_samples: usize,
        #[serde(default = "defaults::synthetic_dim")]
        dim: usize,
        #[serde(default = "defaults::synthetic_classes")]
        classes: usize,
        #[serde(default = "defaults::synthetic_separation")]
        separation: f64,
        #[serde(default = "defaults::synthetic_noise")]
        noise: f64,
        #[serde(default = "defaults::synthetic_seed")]
        seed: u64,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Mnist {
            dir: None,
            scaling: FeatureScaling::None,
        }
    }
}

impl DatasetConfig {
    pub fn feature_dim(&self) -> usize {
        match self {
            DatasetConfig::Mnist { .. } => MNIST_FEATURES,
            DatasetConfig::Synthetic { dim, .. } => *dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Mnist { .. } => MNIST_CLASSES,
            DatasetConfig::Synthetic { classes, .. } => *classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    Iid,
    Dirichlet { alpha: f64 },
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig::Iid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseRuleName {
    Mean,
    Cwtm,
    Krum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub base: BaseRuleName,
    /// Trim fraction of the trimmed mean.
    pub beta: f64,
    /// Precede the base rule with nearest-neighbor mixing.
    pub nnm: bool,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            base: BaseRuleName::Mean,
            beta: 0.25,
            nnm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub omega_grid: Vec<f64>,
    pub target_nnm: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            omega_grid: default_omega_grid(),
            target_nnm: false,
        }
    }
}

/// A full experiment: one simulated run per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub n: usize,
    pub f: usize,
    pub strategy: ProtocolStrategy,
    pub k: usize,
    pub local_epochs: usize,
    pub epochs: u64,
    pub mu: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub direction: DirectionKind,
    /// Give every class a bias term.
    pub bias: bool,
    /// Run clients on the rayon pool. Results do not depend on it.
    pub parallel: bool,
    /// Put elapsed milliseconds into the metrics; off by default so reruns
    /// produce identical files.
    pub record_wall_clock: bool,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub rule: RuleConfig,
    pub attack: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            n: 40,
            f: 0,
            strategy: ProtocolStrategy::Unbiased,
            k: 64,
            local_epochs: 1,
            epochs: 400,
            mu: 0.001,
            eta: 0.01,
            batch_size: 64,
            eval_every: 10,
            direction: DirectionKind::SphereUniform,
            bias: false,
            parallel: true,
            record_wall_clock: false,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            rule: RuleConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

mod defaults {
    use crate::data::SyntheticSpec;

    pub fn synthetic_samples() -> usize {
        SyntheticSpec::default().samples
    }
    pub fn synthetic_test_samples() -> usize {
        500
    }
    pub fn synthetic_dim() -> usize {
        SyntheticSpec::default().dim
    }
    pub fn synthetic_classes() -> usize {
        SyntheticSpec::default().classes
    }
    pub fn synthetic_separation() -> f64 {
        SyntheticSpec::default().separation
    }
    pub fn synthetic_noise() -> f64 {
        SyntheticSpec::default().noise
    }
    pub fn synthetic_seed() -> u64 {
        SyntheticSpec::default().seed.0
    }
}

/// Sets `path` (dot separated) in `table` to `raw`, read as a TOML value or,
/// failing that, as a bare string.
pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut keys = path.split('.').peekable();
    let mut cursor = table;
    while let Some(key) = keys.next() {
        if key.is_empty() {
            return Err(config_error(path, "empty key segment"));
        }
        if keys.peek().is_none() {
            cursor.insert(key.to_string(), value);
            return Ok(());
        }
        let entry = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| config_error(path, format!("`{key}` is not a table")))?;
    }
    Err(config_error(path, "empty key"))
}

/// Splits `key.path=value`.
pub fn parse_assignment(s: &str) -> Result<(&str, &str)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_error(s, "expected key.path=value"))?;
    Ok((k.trim(), v.trim()))
}

fn toml_error(e: toml::de::Error) -> Error {
    let reason = e.message().to_string();
    let key = e
        .span()
        .map(|s| format!("at bytes {}..{}", s.start, s.end))
        .unwrap_or_else(|| "config".to_string());
    config_error(key, reason)
}

impl ExperimentConfig {
    /// Parses a TOML document, applies `key=value` overrides and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(&str, &str)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(toml_error)?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        // Sections given without a `kind` mean the default kind.
        for (section, kind) in [("dataset", "mnist"), ("partition", "iid")] {
            if let Some(toml::Value::Table(t)) = table.get_mut(section) {
                t.entry("kind").or_insert_with(|| toml::Value::String(kind.to_string()));
            }
        }
        let cfg: ExperimentConfig = table.try_into().map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn from_path(path: &Path, overrides: &[(&str, &str)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        if self.epochs == 0 {
            return Err(config_error("epochs", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(config_error("eval_every", "must be positive"));
        }
        if let PartitionConfig::Dirichlet { alpha } = self.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(config_error("partition.alpha", "must be positive"));
            }
        }
        if let DatasetConfig::Synthetic { samples, test_samples, .. } = self.dataset {
            if samples < self.n {
                return Err(config_error("dataset.samples", "need at least one sample per client"));
            }
            if test_samples == 0 {
                return Err(config_error("dataset.test_samples", "must be positive"));
            }
        }
        self.sim_config(self.seeds[0]).validate().map_err(|e| match e {
            Error::InvalidParameter { name, reason } => config_error(name, reason),
            Error::AggregationPrecondition(reason) => config_error("rule", reason),
            other => other,
        })
    }

    pub fn aggregation_rule(&self) -> AggregationRule {
        let base = match self.rule.base {
            BaseRuleName::Mean => BaseRule::Mean,
            BaseRuleName::Cwtm => BaseRule::Cwtm { beta: self.rule.beta },
            BaseRuleName::Krum => BaseRule::Krum { f: self.f },
        };
        let rule = AggregationRule::new(base);
        if self.rule.nnm {
            rule.with_nnm(self.f)
        } else {
            rule
        }
    }

    pub fn attack_spec(&self) -> AttackSpec {
        AttackSpec {
            kind: self.attack.kind,
            omega_grid: self.attack.omega_grid.clone(),
            target_nnm: self.attack.target_nnm,
        }
    }

    pub fn loss(&self) -> LossSpec {
        LossSpec::MulticlassLogistic { bias: self.bias }
    }

    pub fn model_dim(&self) -> usize {
        self.dataset.num_classes() * (self.dataset.feature_dim() + usize::from(self.bias))
    }

    fn run_seed(seed: u64, part: u64) -> Seed64 {
        Seed64(seed).derive(DOMAIN_RUN, &[part])
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        let kind = match self.partition {
            PartitionConfig::Iid => PartitionKind::Iid,
            PartitionConfig::Dirichlet { alpha } => PartitionKind::Dirichlet { alpha },
        };
        PartitionSpec {
            kind,
            seed: Self::run_seed(seed, 0),
        }
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            n: self.n,
            f: self.f,
            strategy: self.strategy,
            rule: self.aggregation_rule(),
            attack: self.attack_spec(),
            k: self.k,
            local_epochs: self.local_epochs,
            mu: self.mu,
            eta: self.eta,
            batch_size: self.batch_size,
            kind: self.direction,
            loss: self.loss(),
            direction_seed: Self::run_seed(seed, 1),
            batch_seed: Self::run_seed(seed, 2),
            parallel: self.parallel,
        }
    }

    /// Scalars per client per global epoch, and over the whole run.
    pub fn comm_forecast(&self) -> CommForecast {
        let per_epoch = self
            .strategy
            .scalars_per_epoch(self.k, self.local_epochs, self.model_dim());
        CommForecast {
            model_dim: self.model_dim(),
            per_client_per_epoch: per_epoch,
            per_client_total: per_epoch * self.epochs,
            all_clients_total: per_epoch * self.epochs * self.n as u64,
        }
    }

    /// Where the MNIST files are looked up.
    pub fn data_dir(&self) -> PathBuf {
        match &self.dataset {
            DatasetConfig::Mnist { dir: Some(d), .. } => d.clone(),
            _ => std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR)),
        }
    }

    /// Loads (or generates) the training and test sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Mnist { scaling, .. } => {
                let files = MnistFiles::in_dir(&self.data_dir());
                if !files.exist() {
                    return Err(config_error(
                        "dataset.dir",
                        format!(
                            "MNIST IDX files not found in {} (set dataset.dir or {DATA_DIR_ENV})",
                            self.data_dir().display()
                        ),
                    ));
                }
                let (train, test) = files.load()?;
                scale_features(*scaling, train, test)
            }
            DatasetConfig::Synthetic {
                samples,
                test_samples,
                dim,
                classes,
                separation,
                noise,
                seed,
            } => {
                let spec = SyntheticSpec {
                    samples: samples + test_samples,
                    dim: *dim,
                    classes: *classes,
                    separation: *separation,
                    noise: *noise,
                    seed: Seed64(*seed),
                };
                let all = synthetic_classification(&spec)?;
                let train: Vec<usize> = (0..*samples).collect();
                let test: Vec<usize> = (*samples..samples + test_samples).collect();
                Ok((all.subset(&train)?, all.subset(&test)?))
            }
        }
    }

    /// Client partition of `train` for one seed.
    pub fn partition_clients(&self, train: &Dataset, seed: u64) -> Result<Vec<Vec<usize>>> {
        partition(train.labels(), self.n, &self.partition_spec(seed))
    }
}

/// Communication cost of a configuration, in scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CommForecast {
    pub model_dim: usize,
    pub per_client_per_epoch: u64,
    pub per_client_total: u64,
    pub all_clients_total: u64,
}

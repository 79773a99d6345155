//! Experiment configuration files.
//!
//! A config is a TOML document with the sections `dataset`, `partition`,
//! `ram`, `model`, `train`, `risk` and the optional `seeds`, `eval` and
//! `sweep`. Unknown keys are rejected. After loading, every default and every
//! derived seed is written back into the struct, so serializing a loaded
//! config yields a complete, self-contained echo that loads to the same run.

use std::path::{Path, PathBuf};

use fedcvar_core::data::{BlobLayout, PartitionSpec};
use fedcvar_core::fed::{Execution, Seeds, TrainConfig};
use fedcvar_core::numerics::ModelArch;
use fedcvar_core::ram::{skewed_weights, SkewKind};
use fedcvar_core::risk::RiskConfig;
use fedcvar_core::seeding::derive_named;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the root directory of the IDX datasets.
pub const DATA_DIR_ENV: &str = "FEDCVAR_DATA_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Defaults to the config file stem.
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub ram: RamConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub risk: RiskSection,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic2d {
        num_classes: usize,
        per_class: usize,
        spread: f64,
        #[serde(default)]
        layout: Layout,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
    Mnist(IdxSource),
    FashionMnist(IdxSource),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Ring,
    RingWithCenter,
}

impl From<Layout> for BlobLayout {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Ring => BlobLayout::Ring,
            Layout::RingWithCenter => BlobLayout::RingWithCenter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    /// Directory with the four standard IDX files. Resolved at load time
    /// from `$FEDCVAR_DATA_DIR/<dataset>` or `data/<dataset>` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Keep only the first `train_limit` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_users: usize,
    /// `M`: percentage of users that are frequent.
    pub frequent_users_pct: f64,
    /// `r`: percentage of classes held by the frequent users.
    pub frequent_classes_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RamConfig {
    Explicit { weights: Vec<f64> },
    Geometric { ratio: f64 },
    TailThree {
        #[serde(default = "default_head_ratio")]
        head_ratio: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKindConfig {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKindConfig,
    #[serde(default)]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionConfig {
    #[default]
    Eager,
    OnDemand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub global_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_t: f64,
    #[serde(default)]
    pub t_init: f64,
    #[serde(default)]
    pub execution: ExecutionConfig,
    #[serde(default = "one")]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSection {
    pub alpha: f64,
    pub gamma: f64,
}

/// `base` plus optional per-stream overrides. Missing streams are derived
/// from `base` by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    #[serde(default)]
    pub base: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ram: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedSeeds {
    pub data: u64,
    pub test: u64,
    pub partition: u64,
    pub init: u64,
    pub ram: u64,
    pub shuffle: u64,
}

impl SeedConfig {
    pub fn with_base(base: u64) -> Self {
        Self { base, ..Self::default() }
    }

    pub fn resolve(&self) -> ResolvedSeeds {
        let pick = |v: Option<u64>, name: &str| v.unwrap_or_else(|| derive_named(self.base, name));
        ResolvedSeeds {
            data: pick(self.data, "data"),
            test: pick(self.test, "test"),
            partition: pick(self.partition, "partition"),
            init: pick(self.init, "init"),
            ram: pick(self.ram, "ram"),
            shuffle: pick(self.shuffle, "shuffle"),
        }
    }

    fn fill(&mut self) {
        let r = self.resolve();
        *self = Self {
            base: self.base,
            data: Some(r.data),
            test: Some(r.test),
            partition: Some(r.partition),
            init: Some(r.init),
            ram: Some(r.ram),
            shuffle: Some(r.shuffle),
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many rounds (and always after the last one).
    #[serde(default = "default_eval_every")]
    pub every: usize,
    /// Defaults to `runs/<name>`.
    #[serde(default)]
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub charts: bool,
    /// Trailing moving-average window for chart overlays.
    #[serde(default = "default_window")]
    pub smoothing_window: usize,
    /// Cells per side of the decision-region raster (2-D datasets only).
    #[serde(default = "default_grid")]
    pub decision_grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: default_eval_every(),
            output_dir: PathBuf::new(),
            charts: true,
            smoothing_window: default_window(),
            decision_grid: default_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default = "one")]
    pub repeats: usize,
    /// Cells run concurrently.
    #[serde(default = "one")]
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { alpha: Vec::new(), gamma: Vec::new(), repeats: 1, jobs: 1 }
    }
}

fn default_test_per_class() -> usize {
    500
}
fn default_head_ratio() -> f64 {
    1.0
}
fn default_eval_every() -> usize {
    25
}
fn default_window() -> usize {
    10
}
fn default_grid() -> usize {
    120
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic2d { num_classes, .. } => *num_classes,
            DatasetConfig::Mnist(_) | DatasetConfig::FashionMnist(_) => 10,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            DatasetConfig::Synthetic2d { .. } => 2,
            DatasetConfig::Mnist(_) | DatasetConfig::FashionMnist(_) => 784,
        }
    }

    /// Directory name under the data root.
    pub fn dir_name(&self) -> Option<&'static str> {
        match self {
            DatasetConfig::Synthetic2d { .. } => None,
            DatasetConfig::Mnist(_) => Some("mnist"),
            DatasetConfig::FashionMnist(_) => Some("fashion-mnist"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.into(), message: e.to_string() })
    }

    /// Fills every default (name, output directory, data directory, derived
    /// seeds) and validates the result.
    pub fn resolve(mut self, stem: &str) -> Result<Self, ConfigError> {
        if self.name.is_empty() {
            self.name = stem.to_string();
        }
        if self.eval.output_dir.as_os_str().is_empty() {
            self.eval.output_dir = Path::new("runs").join(&self.name);
        }
        let dir_name = self.dataset.dir_name();
        if let (DatasetConfig::Mnist(src) | DatasetConfig::FashionMnist(src), Some(dir_name)) =
            (&mut self.dataset, dir_name)
        {
            if src.data_dir.is_none() {
                let root = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
                src.data_dir = Some(root.join(dir_name));
            }
        }
        self.seeds.fill();
        self.validate()?;
        Ok(self)
    }

    /// Replaces the seed section with a bare base seed; all streams are then
    /// re-derived from it.
    pub fn override_seed(&mut self, base: u64) {
        self.seeds = SeedConfig::with_base(base);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = self.dataset.num_classes();
        match &self.dataset {
            DatasetConfig::Synthetic2d { num_classes, per_class, spread, test_per_class, .. } => {
                if *num_classes < 2 {
                    return Err(invalid("dataset.num_classes", "must be at least 2"));
                }
                if *per_class == 0 {
                    return Err(invalid("dataset.per_class", "must be positive"));
                }
                if *test_per_class == 0 {
                    return Err(invalid("dataset.test_per_class", "must be positive"));
                }
                if !(spread.is_finite() && *spread > 0.0) {
                    return Err(invalid("dataset.spread", format!("must be positive and finite, got {spread}")));
                }
            }
            DatasetConfig::Mnist(src) | DatasetConfig::FashionMnist(src) => {
                if src.train_limit == Some(0) {
                    return Err(invalid("dataset.train_limit", "must be positive"));
                }
                if src.test_limit == Some(0) {
                    return Err(invalid("dataset.test_limit", "must be positive"));
                }
            }
        }

        let k = self.partition.num_users;
        if k < 2 {
            return Err(invalid("partition.num_users", "must be at least 2"));
        }
        for (key, v) in [
            ("partition.frequent_users_pct", self.partition.frequent_users_pct),
            ("partition.frequent_classes_pct", self.partition.frequent_classes_pct),
        ] {
            if !(v > 0.0 && v < 100.0) {
                return Err(invalid(key, format!("must lie strictly between 0 and 100, got {v}")));
            }
        }
        let spec = self.partition_spec();
        let fu = spec.frequent_users();
        if fu == 0 || fu >= k {
            return Err(invalid(
                "partition.frequent_users_pct",
                format!("gives {fu} frequent users out of {k}; both groups must be non-empty"),
            ));
        }
        let fc = spec.frequent_classes(c);
        if fc == 0 || fc >= c {
            return Err(invalid(
                "partition.frequent_classes_pct",
                format!("gives {fc} frequent classes out of {c}; both groups must be non-empty"),
            ));
        }

        let weights = self.ram_weights()?;
        if weights.len() != k {
            return Err(invalid("ram.weights", format!("has {} entries for {k} users", weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(invalid("ram.weights", "must be finite, non-negative and not all zero"));
        }

        match self.model.kind {
            ModelKindConfig::Logreg if !self.model.hidden.is_empty() => {
                return Err(invalid("model.hidden", "must be empty for logistic regression"));
            }
            ModelKindConfig::Mlp if self.model.hidden.is_empty() || self.model.hidden.contains(&0) => {
                return Err(invalid("model.hidden", "needs at least one positive layer width"));
            }
            _ => {}
        }

        let t = &self.train;
        if t.local_epochs == 0 {
            return Err(invalid("train.local_epochs", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if !(t.lr_theta.is_finite() && t.lr_theta > 0.0) {
            return Err(invalid("train.lr_theta", "must be positive and finite"));
        }
        if !(t.lr_t.is_finite() && t.lr_t >= 0.0) {
            return Err(invalid("train.lr_t", "must be non-negative and finite"));
        }
        if !t.t_init.is_finite() {
            return Err(invalid("train.t_init", "must be finite"));
        }
        if t.workers == 0 {
            return Err(invalid("train.workers", "must be at least 1"));
        }

        check_alpha("risk.alpha", self.risk.alpha)?;
        check_gamma("risk.gamma", self.risk.gamma)?;

        if self.eval.every == 0 {
            return Err(invalid("eval.every", "must be at least 1"));
        }
        if self.eval.smoothing_window == 0 {
            return Err(invalid("eval.smoothing_window", "must be at least 1"));
        }
        if self.eval.decision_grid < 2 {
            return Err(invalid("eval.decision_grid", "must be at least 2"));
        }
        for &a in &self.sweep.alpha {
            check_alpha("sweep.alpha", a)?;
        }
        for &g in &self.sweep.gamma {
            check_gamma("sweep.gamma", g)?;
        }
        if self.sweep.repeats == 0 {
            return Err(invalid("sweep.repeats", "must be at least 1"));
        }
        if self.sweep.jobs == 0 {
            return Err(invalid("sweep.jobs", "must be at least 1"));
        }
        Ok(())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            num_users: self.partition.num_users,
            frequent_fraction: self.partition.frequent_users_pct,
            frequent_pattern_fraction: self.partition.frequent_classes_pct,
            seed: self.seeds.resolve().partition,
        }
    }

    /// Unnormalized channel weights, one per user.
    pub fn ram_weights(&self) -> Result<Vec<f64>, ConfigError> {
        let k = self.partition.num_users;
        match &self.ram {
            RamConfig::Explicit { weights } => Ok(weights.clone()),
            RamConfig::Geometric { ratio } => {
                skewed_weights(k, SkewKind::Geometric, *ratio).map_err(|e| invalid("ram.ratio", e.to_string()))
            }
            RamConfig::TailThree { head_ratio } => skewed_weights(k, SkewKind::TailThree, *head_ratio)
                .map_err(|e| invalid("ram.head_ratio", e.to_string())),
        }
    }

    pub fn arch(&self) -> ModelArch {
        let (d, c) = (self.dataset.input_dim(), self.dataset.num_classes());
        match self.model.kind {
            ModelKindConfig::Logreg => ModelArch::logreg(d, c),
            ModelKindConfig::Mlp => ModelArch::mlp(d, self.model.hidden.clone(), c),
        }
        .expect("validated model section")
    }

    pub fn train_config(&self) -> TrainConfig {
        let s = self.seeds.resolve();
        TrainConfig {
            num_users: self.partition.num_users,
            global_rounds: self.train.global_rounds,
            local_epochs: self.train.local_epochs,
            batch_size: self.train.batch_size,
            lr_theta: self.train.lr_theta,
            lr_t: self.train.lr_t,
            risk: RiskConfig::new(self.risk.alpha, self.risk.gamma).expect("validated risk section"),
            t_init: self.train.t_init,
            seeds: Seeds { init: s.init, ram: s.ram, shuffle: s.shuffle },
            execution: match self.train.execution {
                ExecutionConfig::Eager => Execution::Eager,
                ExecutionConfig::OnDemand => Execution::OnDemand,
            },
            workers: self.train.workers,
        }
    }
}

fn check_alpha(key: &'static str, a: f64) -> Result<(), ConfigError> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("alpha must lie in (0, 1], got {a}")))
    }
}

fn check_gamma(key: &'static str, g: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&g) {
        Ok(())
    } else {
        Err(invalid(key, format!("gamma must lie in [0, 1], got {g}")))
    }
}

/// Reads, resolves and validates a config file. `seed` replaces the file's
/// seed section when given.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    let mut cfg = ExperimentConfig::from_toml_str(&text, &path.display().to_string())?;
    if let Some(base) = seed {
        cfg.override_seed(base);
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    cfg.resolve(stem)
}

//! Single experiment runs: data loading, training on the evaluation
//! cadence, and artifact output.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use fedcvar_core::data::{self, partition_heterogeneous, DataError, Dataset};
use fedcvar_core::fed::{evaluate, FedError, Federation, Metrics, RunHistory};
use fedcvar_core::numerics::{ModelParams, NumericsError};
use thiserror::Error;

use crate::charts::{self, Series};
use crate::config::{ConfigError, DatasetConfig, ExperimentConfig};
use crate::metrics::{self, MetricsError, MetricsRow};
use crate::output::write_atomic;
use crate::snapshot;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("training: {0}")]
    Fed(#[from] FedError),
    #[error("evaluation: {0}")]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run diverged ({error}); artifacts up to round {last_round} kept in {}", dir.display())]
    Diverged { error: FedError, last_round: usize, dir: PathBuf },
}

/// Train and test sets, shared between runs that use the same source.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

/// Whether every run of a sweep can reuse one `LoadedData`. Synthetic data
/// depends on the run seeds, IDX data does not.
pub fn data_is_seed_independent(cfg: &ExperimentConfig) -> bool {
    !matches!(cfg.dataset, DatasetConfig::Synthetic2d { .. })
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData, RunError> {
    let seeds = cfg.seeds.resolve();
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Synthetic2d { num_classes, per_class, spread, layout, test_per_class } => (
            data::gen_synthetic_2d_with((*layout).into(), *num_classes, *per_class, *spread, seeds.data)?,
            data::gen_synthetic_2d_with((*layout).into(), *num_classes, *test_per_class, *spread, seeds.test)?,
        ),
        DatasetConfig::Mnist(src) | DatasetConfig::FashionMnist(src) => {
            let dir = src.data_dir.clone().unwrap_or_default();
            let load = |prefix: &str, limit| {
                data::load_idx_dataset(
                    &dir.join(format!("{prefix}-images-idx3-ubyte")),
                    &dir.join(format!("{prefix}-labels-idx1-ubyte")),
                    10,
                    limit,
                )
            };
            (load("train", src.train_limit)?, load("t10k", src.test_limit)?)
        }
    };
    Ok(LoadedData { train: Arc::new(train), test: Arc::new(test) })
}

/// Everything a run produced, in memory.
#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<MetricsRow>,
    pub history: RunHistory,
    pub params: ModelParams,
    pub rare_classes: Vec<usize>,
    /// Normalized channel weights.
    pub ram_probs: Vec<f64>,
    /// Set when training stopped early; `rows` and `params` then describe
    /// the last completed round.
    pub failure: Option<FedError>,
}

impl RunOutcome {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// Accuracy on rare class `k` at the last evaluation point.
    pub fn final_class_acc(&self, k: usize) -> Option<f64> {
        self.last().and_then(|r| r.per_class_acc.get(k).copied().flatten())
    }

    /// Accuracy on rare class `k` averaged over the evaluation points in the
    /// second half of training (rounds at or after `T / 2`).
    pub fn late_class_acc(&self, k: usize) -> Option<f64> {
        let last = self.last()?.round;
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| 2 * r.round >= last)
            .filter_map(|r| r.per_class_acc.get(k).copied().flatten())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean of `late_class_acc` over the rare classes.
    pub fn late_rare_acc(&self) -> Option<f64> {
        mean_defined(self.rare_classes.iter().map(|&k| self.late_class_acc(k)))
    }

    pub fn final_rare_acc(&self) -> Option<f64> {
        mean_defined(self.rare_classes.iter().map(|&k| self.final_class_acc(k)))
    }
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn is_eval_round(round: usize, every: usize, total: usize) -> bool {
    round == total || round.is_multiple_of(every)
}

fn row(round: usize, m: &Metrics, t: f64, counts: &[usize]) -> MetricsRow {
    let n = counts.iter().sum::<usize>();
    MetricsRow {
        round,
        overall_acc: m.overall_acc,
        per_class_acc: m.per_class_acc.clone(),
        global_t: t,
        selection_freq: counts.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect(),
    }
}

/// Partitions `data`, trains for the configured number of rounds and
/// evaluates on the cadence. Divergence is reported through
/// `RunOutcome::failure`; setup errors are returned directly.
pub fn execute(cfg: &ExperimentConfig, data: &LoadedData) -> Result<RunOutcome, RunError> {
    let partition = partition_heterogeneous(&data.train, &cfg.partition_spec())?;
    let rare_classes = partition.rare_classes.clone();
    let weights = cfg.ram_weights()?;
    let total: f64 = weights.iter().sum();
    let ram_probs = weights.iter().map(|w| w / total).collect();
    let mut fed = Federation::new(partition.shards, &weights, cfg.arch(), cfg.train_config())?;

    let rounds = cfg.train.global_rounds;
    let mut counts = vec![0usize; cfg.partition.num_users];
    let mut rows = Vec::new();
    let mut failure = None;
    if rounds == 0 {
        let m = evaluate(fed.theta_global(), &data.test)?;
        rows.push(row(0, &m, fed.t_global(), &counts));
    }
    for r in 1..=rounds {
        match fed.run_round() {
            Ok(rec) => counts[rec.selected_user] += 1,
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
        if is_eval_round(r, cfg.eval.every, rounds) {
            let m = evaluate(fed.theta_global(), &data.test)?;
            rows.push(row(r, &m, fed.t_global(), &counts));
            fed.record_eval(m);
        }
    }
    let params = fed.theta_global().clone();
    Ok(RunOutcome { rows, history: fed.into_history(), params, rare_classes, ram_probs, failure })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

fn put(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), RunError> {
    let path = dir.join(name);
    write_atomic(&path, bytes).map_err(io_err(&path))
}

/// Writes metrics.csv, history.csv, config.toml, params.bin and, when
/// enabled, the SVG charts into `dir`.
pub fn write_artifacts(
    cfg: &ExperimentConfig,
    outcome: &RunOutcome,
    data: &LoadedData,
    dir: &Path,
) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let c = cfg.dataset.num_classes();
    put(dir, "metrics.csv", &metrics::write_metrics(&outcome.rows, c)?)?;
    put(dir, "history.csv", &metrics::write_history(&outcome.history)?)?;
    put(dir, "config.toml", cfg.to_toml().as_bytes())?;
    let params = dir.join("params.bin");
    snapshot::write_snapshot(&params, &outcome.params).map_err(io_err(&params))?;
    if cfg.eval.charts {
        write_charts(cfg, outcome, data, dir)?;
    }
    Ok(())
}

fn write_charts(cfg: &ExperimentConfig, outcome: &RunOutcome, data: &LoadedData, dir: &Path) -> Result<(), RunError> {
    let w = cfg.eval.smoothing_window;
    let rounds: Vec<f64> = outcome.rows.iter().map(|r| r.round as f64).collect();
    let series = |name: String, ys: Vec<Option<f64>>| Series {
        name,
        points: rounds.iter().zip(ys).filter_map(|(&x, y)| y.map(|y| (x, y))).collect(),
    };
    if !outcome.rows.is_empty() {
        let overall = series("overall".into(), outcome.rows.iter().map(|r| Some(r.overall_acc)).collect());
        put(dir, "overall_accuracy.svg", charts::line_chart("Overall test accuracy", "round", "accuracy", &[overall], w).as_bytes())?;
        let rare: Vec<Series> = outcome
            .rare_classes
            .iter()
            .map(|&k| series(format!("class {k}"), outcome.rows.iter().map(|r| r.per_class_acc[k]).collect()))
            .collect();
        if !rare.is_empty() {
            let svg = charts::line_chart("Test accuracy on rare classes", "round", "accuracy", &rare, w);
            put(dir, "rare_accuracy.svg", svg.as_bytes())?;
        }
        let t = series("t".into(), outcome.rows.iter().map(|r| Some(r.global_t)).collect());
        put(dir, "global_t.svg", charts::line_chart("Global CVaR threshold", "round", "t", &[t], w).as_bytes())?;
    }
    put(dir, "ram.svg", charts::bar_chart("Channel selection probabilities", "user", "probability", &outcome.ram_probs).as_bytes())?;
    if data.train.dim() == 2 {
        let svg = charts::decision_regions("Decision regions", &outcome.params, &data.train, cfg.eval.decision_grid)?;
        put(dir, "decision.svg", svg.as_bytes())?;
    }
    Ok(())
}

/// Loads data, trains, and writes all artifacts to the configured output
/// directory. A diverged run still writes what it has, then fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let data = load_data(cfg)?;
    let mut outcome = execute(cfg, &data)?;
    let dir = cfg.eval.output_dir.clone();
    write_artifacts(cfg, &outcome, &data, &dir)?;
    match outcome.failure.take() {
        None => Ok(outcome),
        Some(error) => Err(RunError::Diverged { error, last_round: outcome.history.len(), dir }),
    }
}

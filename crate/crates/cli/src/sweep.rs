//! Grid sweeps over (alpha, gamma) with repeated seeds and a summary table.

use std::path::{Path, PathBuf};

use fedcvar_core::seeding::derive;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::output::write_atomic;
use crate::runner::{self, LoadedData, RunError, RunOutcome};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub alpha: f64,
    pub gamma: f64,
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Stat { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: Cell,
    pub runs: usize,
    pub failures: usize,
    pub overall: Option<Stat>,
    /// One entry per rare class, final-round accuracy.
    pub rare: Vec<(usize, Option<Stat>)>,
    /// Rare-class accuracy averaged over the second half of training.
    pub rare_late: Option<Stat>,
}

#[derive(Debug)]
pub struct SweepReport {
    pub cells: Vec<CellSummary>,
    /// Per-run errors, labelled with the cell and repeat.
    pub errors: Vec<String>,
    pub summary_path: PathBuf,
}

/// Seed of one run: a hash of the base seed, the cell and the repeat.
pub fn run_seed(base: u64, cell: Cell, repeat: usize) -> u64 {
    derive(base, &[cell.alpha.to_bits(), cell.gamma.to_bits(), repeat as u64])
}

pub fn run_dir(root: &Path, cell: Cell, repeat: usize) -> PathBuf {
    root.join(format!("alpha{}_gamma{}", cell.alpha, cell.gamma)).join(format!("repeat{repeat}"))
}

/// The config of one run: the base config with the cell's risk parameters,
/// a derived seed and its own output directory.
pub fn cell_config(base: &ExperimentConfig, cell: Cell, repeat: usize) -> Result<ExperimentConfig, RunError> {
    let mut cfg = base.clone();
    cfg.risk.alpha = cell.alpha;
    cfg.risk.gamma = cell.gamma;
    cfg.override_seed(run_seed(base.seeds.base, cell, repeat));
    cfg.eval.output_dir = run_dir(&base.eval.output_dir, cell, repeat);
    let name = cfg.name.clone();
    Ok(cfg.resolve(&name)?)
}

fn one_run(cfg: &ExperimentConfig, shared: Option<&LoadedData>) -> Result<RunOutcome, RunError> {
    let owned;
    let data = match shared {
        Some(d) => d,
        None => {
            owned = runner::load_data(cfg)?;
            &owned
        }
    };
    let mut outcome = runner::execute(cfg, data)?;
    runner::write_artifacts(cfg, &outcome, data, &cfg.eval.output_dir)?;
    match outcome.failure.take() {
        None => Ok(outcome),
        Some(error) => Err(RunError::Diverged {
            error,
            last_round: outcome.history.len(),
            dir: cfg.eval.output_dir.clone(),
        }),
    }
}

fn summarize(cell: Cell, results: &[Result<RunOutcome, RunError>]) -> CellSummary {
    let ok: Vec<&RunOutcome> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let overall: Vec<f64> = ok.iter().filter_map(|o| o.last().map(|r| r.overall_acc)).collect();
    let rare_classes = ok.first().map(|o| o.rare_classes.clone()).unwrap_or_default();
    let rare = rare_classes
        .iter()
        .map(|&k| (k, Stat::of(&ok.iter().filter_map(|o| o.final_class_acc(k)).collect::<Vec<_>>())))
        .collect();
    let late: Vec<f64> = ok.iter().filter_map(|o| o.late_rare_acc()).collect();
    CellSummary {
        cell,
        runs: results.len(),
        failures: results.len() - ok.len(),
        overall: Stat::of(&overall),
        rare,
        rare_late: Stat::of(&late),
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(crate::metrics::num).unwrap_or_default()
}

/// Summary CSV: one row per cell, rare classes as column pairs.
pub fn summary_csv(cells: &[CellSummary]) -> Result<Vec<u8>, csv::Error> {
    let rare: Vec<usize> = cells.iter().find(|c| !c.rare.is_empty()).map(|c| c.rare.iter().map(|r| r.0).collect()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["alpha", "gamma", "runs", "failures", "overall_mean", "overall_std"].map(String::from).to_vec();
    for k in &rare {
        header.push(format!("class_{k}_mean"));
        header.push(format!("class_{k}_std"));
    }
    header.extend(["rare_late_mean".to_string(), "rare_late_std".to_string()]);
    w.write_record(&header)?;
    for c in cells {
        let mut rec = vec![c.cell.alpha.to_string(), c.cell.gamma.to_string(), c.runs.to_string(), c.failures.to_string()];
        rec.push(fmt(c.overall.map(|s| s.mean)));
        rec.push(fmt(c.overall.map(|s| s.std)));
        for k in &rare {
            let s = c.rare.iter().find(|r| r.0 == *k).and_then(|r| r.1);
            rec.push(fmt(s.map(|s| s.mean)));
            rec.push(fmt(s.map(|s| s.std)));
        }
        rec.push(fmt(c.rare_late.map(|s| s.mean)));
        rec.push(fmt(c.rare_late.map(|s| s.std)));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// Runs every (alpha, gamma, repeat) combination on up to `jobs` threads,
/// writes each run's artifacts under the base output directory and a
/// `summary.csv` next to them. Failing runs are counted, not fatal.
pub fn run_sweep(
    base: &ExperimentConfig,
    alphas: &[f64],
    gammas: &[f64],
    repeats: usize,
    jobs: usize,
) -> Result<SweepReport, RunError> {
    let cells: Vec<Cell> = alphas.iter().flat_map(|&alpha| gammas.iter().map(move |&gamma| Cell { alpha, gamma })).collect();
    let mut configs = Vec::with_capacity(cells.len() * repeats);
    for &cell in &cells {
        for r in 0..repeats {
            configs.push((cell, r, cell_config(base, cell, r)?));
        }
    }
    let shared = if runner::data_is_seed_independent(base) { Some(runner::load_data(base)?) } else { None };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().expect("thread pool");
    let results: Vec<Result<RunOutcome, RunError>> =
        pool.install(|| configs.par_iter().map(|(_, _, cfg)| one_run(cfg, shared.as_ref())).collect());

    let mut errors = Vec::new();
    for ((cell, r, _), res) in configs.iter().zip(&results) {
        if let Err(e) = res {
            errors.push(format!("alpha={} gamma={} repeat={r}: {e}", cell.alpha, cell.gamma));
        }
    }
    let summaries: Vec<CellSummary> =
        cells.iter().enumerate().map(|(i, &cell)| summarize(cell, &results[i * repeats..(i + 1) * repeats])).collect();
    let root = &base.eval.output_dir;
    std::fs::create_dir_all(root).map_err(|source| RunError::Io { path: root.display().to_string(), source })?;
    let summary_path = root.join("summary.csv");
    let bytes = summary_csv(&summaries).map_err(|e| RunError::Metrics(e.into()))?;
    write_atomic(&summary_path, &bytes).map_err(|source| RunError::Io { path: summary_path.display().to_string(), source })?;
    Ok(SweepReport { cells: summaries, errors, summary_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_and_single_run() {
        assert_eq!(Stat::of(&[0.7]), Some(Stat { mean: 0.7, std: 0.0 }));
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        // Sum of squared deviations 5, over n - 1 = 3.
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[]), None);
    }

    #[test]
    fn seeds_differ_across_cells_and_repeats() {
        let a = Cell { alpha: 0.3, gamma: 0.3 };
        let b = Cell { alpha: 0.3, gamma: 0.2 };
        let seeds = [run_seed(0, a, 0), run_seed(0, a, 1), run_seed(0, b, 0), run_seed(1, a, 0)];
        for i in 0..seeds.len() {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(run_seed(5, a, 2), run_seed(5, a, 2));
    }
}

//! `fedcvar` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedcvar_cli::config::{load_config, DatasetConfig};
use fedcvar_cli::runner::{self, RunError};
use fedcvar_cli::{checks, snapshot, sweep};
use fedcvar_core::data;
use fedcvar_core::fed::evaluate;

#[derive(Parser)]
#[command(name = "fedcvar", version, about = "Federated learning under a random access channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Train {
        config: PathBuf,
        /// Replace the config's seeds with streams derived from this base.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `eval.output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a parameter snapshot on the config's test set.
    Eval {
        config: PathBuf,
        params: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid over alpha and gamma with repeated seeds.
    Sweep {
        config: PathBuf,
        /// Comma-separated alphas (default: the config's `sweep.alpha`).
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        /// Comma-separated gammas (default: the config's `sweep.gamma`).
        #[arg(long, value_delimiter = ',')]
        gamma: Vec<f64>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Runs executed in parallel.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Write the synthetic train (or test) set of a config as CSV.
    GenData {
        config: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        test: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare composite-objective gradients with finite differences.
    CheckGrad {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare exact CVaR with the grid-search oracle.
    CheckCvar {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |a| format!("{a:.4}"))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, output_dir } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(dir) = output_dir {
                cfg.eval.output_dir = dir;
            }
            let dir = cfg.eval.output_dir.clone();
            match runner::run_experiment(&cfg) {
                Ok(out) => {
                    if let Some(last) = out.last() {
                        println!("round {}: overall accuracy {:.4}, global t {:.6}", last.round, last.overall_acc, last.global_t);
                        for &k in &out.rare_classes {
                            println!("  rare class {k}: final {}, late mean {}", fmt_acc(out.final_class_acc(k)), fmt_acc(out.late_class_acc(k)));
                        }
                    }
                    println!("artifacts in {}", dir.display());
                    Ok(true)
                }
                Err(e @ RunError::Diverged { .. }) => {
                    eprintln!("error: {e}");
                    Ok(false)
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Eval { config, params, seed } => {
            let cfg = load_config(&config, seed)?;
            let theta = snapshot::read_snapshot(&params)?;
            if theta.arch() != &cfg.arch() {
                bail!("snapshot architecture {:?} does not match the config's {:?}", theta.arch(), cfg.arch());
            }
            let data = runner::load_data(&cfg)?;
            let m = evaluate(&theta, &data.test)?;
            println!("overall accuracy {:.4}", m.overall_acc);
            for (k, a) in m.per_class_acc.iter().enumerate() {
                println!("  class {k}: {}", fmt_acc(*a));
            }
            Ok(true)
        }
        Command::Sweep { config, alpha, gamma, repeats, jobs, seed, output_dir } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(dir) = output_dir {
                cfg.eval.output_dir = dir;
            }
            let alphas = if alpha.is_empty() { cfg.sweep.alpha.clone() } else { alpha };
            let gammas = if gamma.is_empty() { cfg.sweep.gamma.clone() } else { gamma };
            if alphas.is_empty() || gammas.is_empty() {
                bail!("the sweep grid is empty; pass --alpha and --gamma or set sweep.alpha and sweep.gamma");
            }
            let repeats = repeats.unwrap_or(cfg.sweep.repeats);
            if repeats == 0 {
                bail!("--repeats must be at least 1");
            }
            let jobs = jobs.unwrap_or(cfg.sweep.jobs);
            let report = sweep::run_sweep(&cfg, &alphas, &gammas, repeats, jobs)?;
            for c in &report.cells {
                let overall = c.overall.map_or("n/a".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
                println!("alpha {} gamma {}: overall {overall} ({} runs, {} failed)", c.cell.alpha, c.cell.gamma, c.runs, c.failures);
            }
            for e in &report.errors {
                eprintln!("error: {e}");
            }
            println!("summary in {}", report.summary_path.display());
            Ok(report.errors.is_empty())
        }
        Command::GenData { config, out, test, seed } => {
            let cfg = load_config(&config, seed)?;
            if !matches!(cfg.dataset, DatasetConfig::Synthetic2d { .. }) {
                bail!("gen-data needs a synthetic2d dataset");
            }
            let loaded = runner::load_data(&cfg)?;
            let set = if test { &loaded.test } else { &loaded.train };
            match out {
                Some(path) => {
                    let mut bytes = Vec::new();
                    data::write_csv(set, &mut bytes)?;
                    fedcvar_cli::output::write_atomic(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
                }
                None => data::write_csv(set, std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Command::CheckGrad { trials, seed } => {
            let r = checks::check_grad(trials, seed);
            println!(
                "{} trials, max relative error {:.3e} (tolerance {:.0e}), {} failures",
                r.trials, r.max_rel_err, checks::GRAD_TOL, r.failures
            );
            Ok(r.passed())
        }
        Command::CheckCvar { trials, seed } => {
            let r = checks::check_cvar(trials, seed);
            println!(
                "{} trials, max |exact - grid| {:.3e} (tolerance {:.0e}), {} failures",
                r.trials, r.max_abs_err, checks::CVAR_TOL, r.failures
            );
            println!(
                "boundary cases: max error {:.3e} (tolerance {:.0e}), {} failures",
                r.boundary_max_err, checks::BOUNDARY_TOL, r.boundary_failures
            );
            Ok(r.passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

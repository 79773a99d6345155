//! Self-checks behind `check-grad` and `check-cvar`.

use fedcvar_core::numerics::{self, Batch, ModelArch, ModelParams};
use fedcvar_core::risk::{self, RiskConfig, RiskState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step used by `check_grad`.
pub const GRAD_EPS: f64 = 1e-6;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
/// Instances whose loss lies this close to `t` are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

pub const CVAR_GRID_STEP: f64 = 1e-6;
pub const CVAR_TOL: f64 = 1e-5;
pub const BOUNDARY_TOL: f64 = 1e-12;
/// Random instances draw `alpha` from `[CVAR_MIN_ALPHA, 1]`. Below this the
/// grid spacing alone can exceed the tolerance, since the profile's slope
/// grows like `1 / alpha`.
pub const CVAR_MIN_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub trials: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn composite(params: &ModelParams, t: f64, batch: &Batch, risk: &RiskConfig) -> f64 {
    let f = numerics::loss(params, batch).expect("finite loss");
    risk::composite_loss(f, RiskState { t }, risk)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (ModelParams, Batch) {
    let d = rng.random_range(2..=6);
    let c = rng.random_range(2..=5);
    let arch = if rng.random_bool(0.5) {
        ModelArch::logreg(d, c)
    } else {
        let hidden = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect();
        ModelArch::mlp(d, hidden, c)
    }
    .expect("valid architecture");
    let mut params = numerics::init_params(&arch, rng.random());
    for v in params.values_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    let n = rng.random_range(1..=8);
    let features = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    (params, Batch::new(features, labels, d).expect("valid batch"))
}

/// Compares the analytic gradient of the composite objective in `(θ, t)`
/// with central differences on random models, batches and risk settings.
pub fn check_grad(trials: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..trials {
        let (params, batch) = random_instance(&mut rng);
        let alpha = rng.random_range(0.05..=1.0);
        let gamma = rng.random_range(0.0..=1.0);
        let risk = RiskConfig::new(alpha, gamma).expect("valid risk");
        let (f, grad_f) = numerics::loss_and_grad(&params, &batch).expect("finite gradient");
        let t = loop {
            let t = f + rng.random_range(-1.0..1.0);
            if (f - t).abs() > KINK_MARGIN {
                break t;
            }
        };
        let (g_theta, g_t) = risk::composite_grads(f, &grad_f, RiskState { t }, &risk);

        let mut analytic = g_theta;
        analytic.push(g_t);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = params.clone();
        for j in 0..params.values().len() {
            let original = probe.values()[j];
            probe.values_mut()[j] = original + GRAD_EPS;
            let up = composite(&probe, t, &batch, &risk);
            probe.values_mut()[j] = original - GRAD_EPS;
            let down = composite(&probe, t, &batch, &risk);
            probe.values_mut()[j] = original;
            numeric.push((up - down) / (2.0 * GRAD_EPS));
        }
        let up = composite(&params, t + GRAD_EPS, &batch, &risk);
        let down = composite(&params, t - GRAD_EPS, &batch, &risk);
        numeric.push((up - down) / (2.0 * GRAD_EPS));

        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8);
        max_rel_err = max_rel_err.max(rel);
        if rel.is_nan() || rel > GRAD_TOL {
            failures += 1;
        }
    }
    GradReport { trials, max_rel_err, failures }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvarReport {
    pub trials: usize,
    pub max_abs_err: f64,
    pub failures: usize,
    /// Worst deviation over the `alpha = 1` (mean) and `alpha <= min p`
    /// (max) boundary cases.
    pub boundary_max_err: f64,
    pub boundary_failures: usize,
}

impl CvarReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.boundary_failures == 0
    }
}

fn random_distribution(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(1..=10);
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..=10.0)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    (values, raw.iter().map(|w| w / total).collect())
}

/// Exact discrete CVaR against the grid minimization of the threshold
/// objective, plus the mean and max boundary cases.
pub fn check_cvar(trials: usize, seed: u64) -> CvarReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_err: f64 = 0.0;
    let mut failures = 0;
    let mut boundary_max_err: f64 = 0.0;
    let mut boundary_failures = 0;
    let mut boundary = |err: f64| {
        boundary_max_err = boundary_max_err.max(err);
        if err.is_nan() || err > BOUNDARY_TOL {
            boundary_failures += 1;
        }
    };
    for _ in 0..trials {
        let (values, probs) = random_distribution(&mut rng);
        let alpha = rng.random_range(CVAR_MIN_ALPHA..=1.0);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exact = risk::cvar_discrete(&values, &probs, alpha).expect("valid instance");
        let grid = risk::cvar_grid_oracle(&values, &probs, alpha, lo, hi, CVAR_GRID_STEP);
        let err = (exact - grid).abs();
        max_abs_err = max_abs_err.max(err);
        if err.is_nan() || err > CVAR_TOL {
            failures += 1;
        }

        let mean: f64 = values.iter().zip(&probs).map(|(v, p)| v * p).sum();
        boundary((risk::cvar_discrete(&values, &probs, 1.0).expect("valid") - mean).abs());
        let min_p = probs.iter().cloned().fold(f64::INFINITY, f64::min);
        let small = min_p * rng.random_range(0.1..=1.0);
        boundary((risk::cvar_discrete(&values, &probs, small).expect("valid") - hi).abs());
    }
    CvarReport { trials, max_abs_err, failures, boundary_max_err, boundary_failures }
}

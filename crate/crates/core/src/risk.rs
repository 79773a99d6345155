//! CVaR over a finite distribution and the per-user composite objective.
//!
//! With `f` a user's loss, `t` the shared threshold, confidence level
//! `alpha` and trade-off `gamma`, every user minimizes
//!
//! ```text
//! G(θ, t) = (1 - γ) [t + (f(θ) - t)_+ / α] + γ f(θ)
//! ```
//!
//! whose RAM-weighted sum, minimized over `t`, is
//! `(1 - γ) CVaR_α[f_I] + γ E[f_I]`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error("gamma must lie in [0, 1], got {0}")]
    Gamma(f64),
    #[error("{values} values but {probs} probabilities")]
    LengthMismatch { values: usize, probs: usize },
    #[error("invalid probability vector: {0}")]
    InvalidProbs(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, RiskError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskConfig {
    alpha: f64,
    gamma: f64,
}

impl RiskConfig {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(0.0..=1.0).contains(&gamma) {
            return Err(RiskError::Gamma(gamma));
        }
        Ok(Self { alpha, gamma })
    }

    /// `alpha = 1, gamma = 1`: plain expected loss.
    pub fn risk_neutral() -> Self {
        Self { alpha: 1.0, gamma: 1.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// The CVaR threshold variable `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskState {
    pub t: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(RiskError::Alpha(alpha))
    }
}

fn check_distribution(values: &[f64], probs: &[f64]) -> Result<()> {
    if values.len() != probs.len() {
        return Err(RiskError::LengthMismatch { values: values.len(), probs: probs.len() });
    }
    if values.is_empty() {
        return Err(RiskError::InvalidProbs("empty distribution".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(RiskError::InvalidProbs("entries must be finite and non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(RiskError::InvalidProbs(format!("entries sum to {total}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RiskError::InvalidProbs("values must be finite".into()));
    }
    Ok(())
}

/// `t + (1/α) Σ p_i (v_i - t)_+`
pub fn ru_objective(values: &[f64], probs: &[f64], alpha: f64, t: f64) -> f64 {
    let excess: f64 = values.iter().zip(probs).map(|(v, p)| p * (v - t).max(0.0)).sum();
    t + excess / alpha
}

/// Exact CVaR: average of the upper `alpha` tail, with the atom on the
/// tail boundary counted fractionally.
pub fn cvar_discrete(values: &[f64], probs: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_distribution(values, probs)?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut remaining = alpha;
    let mut acc = 0.0;
    for i in order {
        if remaining <= 0.0 {
            break;
        }
        let take = probs[i].min(remaining);
        // Weight relative to alpha, so an atom covering the whole tail
        // contributes exactly its value.
        acc += (take / alpha) * values[i];
        remaining -= take;
    }
    Ok(acc)
}

/// Smallest minimizer over the support of the threshold objective: the
/// lowest atom `v` with positive mass and `P(Z > v) <= alpha`.
pub fn cvar_threshold(values: &[f64], probs: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_distribution(values, probs)?;
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let tol = 1e-12;
    let mut k = 0;
    while k < order.len() {
        let v = values[order[k]];
        let mut j = k;
        while j < order.len() && values[order[j]] == v {
            j += 1;
        }
        let above: f64 = order[j..].iter().map(|&i| probs[i]).sum();
        if above <= alpha + tol {
            return Ok(v);
        }
        k = j;
    }
    // Unreachable for a valid distribution: nothing lies above the top atom.
    Ok(values[*order.last().expect("positive mass exists")])
}

/// Samples `t ↦ t + (1/α) E[(Z - t)_+]` on `t_lo, t_lo + step, ..., <= t_hi`.
pub fn grid_profile(values: &[f64], probs: &[f64], alpha: f64, t_lo: f64, t_hi: f64, step: f64) -> Vec<f64> {
    let n = grid_points(t_lo, t_hi, step);
    (0..n).map(|k| ru_objective(values, probs, alpha, t_lo + k as f64 * step)).collect()
}

fn grid_points(t_lo: f64, t_hi: f64, step: f64) -> usize {
    assert!(step > 0.0 && t_hi >= t_lo, "grid needs step > 0 and t_hi >= t_lo");
    ((t_hi - t_lo) / step + 1e-9).floor() as usize + 1
}

/// Minimum of the threshold objective over a uniform `t` grid.
///
/// The profile is convex in `t`, so its grid minimum is found by bisecting
/// on the sign of consecutive differences instead of scanning every point.
pub fn cvar_grid_oracle(values: &[f64], probs: &[f64], alpha: f64, t_lo: f64, t_hi: f64, step: f64) -> f64 {
    let n = grid_points(t_lo, t_hi, step);
    let at = |k: usize| ru_objective(values, probs, alpha, t_lo + k as f64 * step);
    let (mut lo, mut hi) = (0, n - 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if at(mid + 1) >= at(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    at(lo)
}

pub fn composite_loss(f: f64, state: RiskState, cfg: &RiskConfig) -> f64 {
    let (alpha, gamma) = (cfg.alpha, cfg.gamma);
    (1.0 - gamma) * (state.t + (f - state.t).max(0.0) / alpha) + gamma * f
}

/// Multipliers turning `∇f` into `∇_θ G` and the value of `∂G/∂t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeScales {
    pub theta: f64,
    pub t: f64,
}

/// The hinge counts as active only when `f > t`; at `f == t` the inactive
/// branch is used.
pub fn composite_scales(f: f64, state: RiskState, cfg: &RiskConfig) -> CompositeScales {
    let active = if f > state.t { 1.0 } else { 0.0 };
    let (alpha, gamma) = (cfg.alpha, cfg.gamma);
    CompositeScales {
        theta: (1.0 - gamma) * active / alpha + gamma,
        t: (1.0 - gamma) * (1.0 - active / alpha),
    }
}

pub fn composite_grads(f: f64, grad_f: &[f64], state: RiskState, cfg: &RiskConfig) -> (Vec<f64>, f64) {
    let s = composite_scales(f, state, cfg);
    (grad_f.iter().map(|g| s.theta * g).collect(), s.t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskObjective {
    pub value: f64,
    pub t_star: f64,
}

/// `(1 - γ) CVaR_α[f_I] + γ Σ ρ_i f_i` together with the attaining threshold.
pub fn global_risk_objective(losses: &[f64], probs: &[f64], cfg: &RiskConfig) -> Result<RiskObjective> {
    let cvar = cvar_discrete(losses, probs, cfg.alpha)?;
    let t_star = cvar_threshold(losses, probs, cfg.alpha)?;
    let mean: f64 = losses.iter().zip(probs).map(|(f, p)| f * p).sum();
    Ok(RiskObjective { value: (1.0 - cfg.gamma) * cvar + cfg.gamma * mean, t_star })
}

/// `(1 - γ) max_i f_i + γ Σ ρ_i f_i`, valid once `alpha` is no larger than
/// the smallest positive probability.
pub fn max_loss_limit_check(losses: &[f64], probs: &[f64], cfg: &RiskConfig) -> Result<f64> {
    check_distribution(losses, probs)?;
    let min_positive = probs.iter().copied().filter(|&p| p > 0.0).fold(f64::INFINITY, f64::min);
    if cfg.alpha > min_positive {
        return Err(RiskError::Precondition(format!(
            "alpha {} exceeds the smallest positive probability {min_positive}",
            cfg.alpha
        )));
    }
    let worst = losses
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&f, _)| f)
        .fold(f64::NEG_INFINITY, f64::max);
    let mean: f64 = losses.iter().zip(probs).map(|(f, p)| f * p).sum();
    Ok((1.0 - cfg.gamma) * worst + cfg.gamma * mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const THIRDS: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

    #[test]
    fn cvar_reference_points() {
        let v = [1.0, 2.0, 3.0];
        assert!((cvar_discrete(&v, &THIRDS, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!((cvar_discrete(&v, &THIRDS, 1.0 / 3.0).unwrap() - 3.0).abs() < 1e-12);
        assert!((cvar_discrete(&v, &THIRDS, 0.1).unwrap() - 3.0).abs() < 1e-12);
        assert!((cvar_discrete(&v, &THIRDS, 0.5).unwrap() - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_grid_agrees_at_half() {
        // Brute force over [0, 4] in steps of 1e-6.
        let v = [1.0, 2.0, 3.0];
        let best = grid_profile(&v, &THIRDS, 0.5, 0.0, 4.0, 1e-6)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!((best - 8.0 / 3.0).abs() < 1e-5, "{best}");
        let bisected = cvar_grid_oracle(&v, &THIRDS, 0.5, 0.0, 4.0, 1e-6);
        assert!((bisected - best).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(cvar_discrete(&[1.0], &[1.0], 0.0), Err(RiskError::Alpha(_))));
        assert!(matches!(cvar_discrete(&[1.0], &[1.0], 1.5), Err(RiskError::Alpha(_))));
        assert!(matches!(cvar_discrete(&[1.0, 2.0], &[0.6, 0.6], 0.5), Err(RiskError::InvalidProbs(_))));
        assert!(matches!(cvar_discrete(&[1.0, 2.0], &[1.2, -0.2], 0.5), Err(RiskError::InvalidProbs(_))));
        assert!(matches!(cvar_discrete(&[1.0], &[0.5, 0.5], 0.5), Err(RiskError::LengthMismatch { .. })));
        assert!(RiskConfig::new(0.0, 0.5).is_err());
        assert!(RiskConfig::new(0.5, 1.1).is_err());
        assert!(RiskConfig::new(1.0, 0.0).is_ok());
    }

    #[test]
    fn grid_oracle_on_constants_and_alpha_one() {
        for alpha in [0.05, 0.3, 1.0] {
            let c = cvar_grid_oracle(&[2.5, 2.5], &[0.3, 0.7], alpha, 0.0, 5.0, 1e-3);
            assert!((c - 2.5).abs() < 1e-9);
        }
        let mean = cvar_grid_oracle(&[1.0, 2.0, 3.0], &THIRDS, 1.0, 0.0, 4.0, 1e-4);
        assert!((mean - 2.0).abs() < 1e-9);
    }

    #[test]
    fn threshold_is_smallest_minimizer() {
        let v = [1.0, 2.0, 3.0];
        // alpha = 1/3: every t in [2, 3] minimizes.
        assert_eq!(cvar_threshold(&v, &THIRDS, 1.0 / 3.0).unwrap(), 2.0);
        assert_eq!(cvar_threshold(&v, &THIRDS, 0.5).unwrap(), 2.0);
        assert_eq!(cvar_threshold(&v, &THIRDS, 0.2).unwrap(), 3.0);
        assert_eq!(cvar_threshold(&v, &THIRDS, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn composite_loss_values() {
        let neutral = RiskConfig::new(0.3, 1.0).unwrap();
        assert_eq!(composite_loss(1.7, RiskState { t: -4.0 }, &neutral), 1.7);
        let cfg = RiskConfig::new(0.5, 0.0).unwrap();
        assert_eq!(composite_loss(1.0, RiskState { t: 2.0 }, &cfg), 2.0);
        let cfg = RiskConfig::new(0.5, 0.5).unwrap();
        assert!((composite_loss(3.0, RiskState { t: 1.0 }, &cfg) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn composite_gradient_values() {
        let g = [1.0, -2.0, 0.5];
        let (gt, gtt) = composite_grads(0.3, &g, RiskState { t: 0.1 }, &RiskConfig::new(0.2, 1.0).unwrap());
        assert_eq!(gt, g.to_vec());
        assert_eq!(gtt, 0.0);
        let (gt, gtt) = composite_grads(0.3, &g, RiskState { t: 0.9 }, &RiskConfig::new(0.2, 0.0).unwrap());
        assert_eq!(gt, vec![0.0; 3]);
        assert_eq!(gtt, 1.0);
        let (gt, gtt) = composite_grads(0.9, &g, RiskState { t: 0.3 }, &RiskConfig::new(0.2, 0.1).unwrap());
        for (a, b) in gt.iter().zip(g) {
            assert!((a - 4.6 * b).abs() < 1e-12);
        }
        assert!((gtt + 3.6).abs() < 1e-12);
        // On the kink the inactive branch is used.
        let s = composite_scales(0.5, RiskState { t: 0.5 }, &RiskConfig::new(0.2, 0.1).unwrap());
        assert!((s.theta - 0.1).abs() < 1e-15 && (s.t - 0.9).abs() < 1e-15);
    }

    #[test]
    fn global_objective_and_max_loss_limit() {
        let f = [1.0, 2.0, 5.0];
        let rho = [0.5, 0.4, 0.1];
        let cfg = RiskConfig::new(0.1, 0.1).unwrap();
        let obj = global_risk_objective(&f, &rho, &cfg).unwrap();
        assert!((obj.value - 4.68).abs() < 1e-12);
        let oracle = 0.9 * cvar_grid_oracle(&f, &rho, 0.1, 0.0, 6.0, 1e-6) + 0.1 * 1.8;
        assert!((obj.value - oracle).abs() < 1e-5);
        let limit = max_loss_limit_check(&f, &rho, &cfg).unwrap();
        assert!((limit - obj.value).abs() < 1e-12);

        let neutral = RiskConfig::new(0.7, 1.0).unwrap();
        assert!((global_risk_objective(&f, &rho, &neutral).unwrap().value - 1.8).abs() < 1e-12);
        for gamma in [0.0, 0.4, 1.0] {
            let cfg = RiskConfig::new(1.0, gamma).unwrap();
            assert!((global_risk_objective(&f, &rho, &cfg).unwrap().value - 1.8).abs() < 1e-12);
        }

        let worst_only = RiskConfig::new(0.1, 0.0).unwrap();
        assert_eq!(max_loss_limit_check(&f, &rho, &worst_only).unwrap(), 5.0);
        let flat = max_loss_limit_check(&[2.0; 3], &rho, &cfg).unwrap();
        assert!((flat - 2.0).abs() < 1e-12);
        assert!(matches!(
            max_loss_limit_check(&f, &rho, &RiskConfig::new(0.2, 0.1).unwrap()),
            Err(RiskError::Precondition(_))
        ));
    }

    fn distribution() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..=10).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(0.01f64..1.0, n),
            )
                .prop_map(|(v, w)| {
                    let total: f64 = w.iter().sum();
                    (v, w.into_iter().map(|x| x / total).collect())
                })
        })
    }

    proptest! {
        #[test]
        fn cvar_monotone_and_bounded((v, p) in distribution(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c_lo = cvar_discrete(&v, &p, lo).unwrap();
            let c_hi = cvar_discrete(&v, &p, hi).unwrap();
            prop_assert!(c_lo >= c_hi - 1e-12);
            let mean: f64 = v.iter().zip(&p).map(|(x, q)| x * q).sum();
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(c_hi >= mean - 1e-12 && c_lo <= max + 1e-12);
        }

        #[test]
        fn cvar_translation_and_scaling((v, p) in distribution(), a in 0.01f64..=1.0, c in -5.0f64..5.0, lambda in 0.1f64..10.0) {
            let base = cvar_discrete(&v, &p, a).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let scaled: Vec<f64> = v.iter().map(|x| x * lambda).collect();
            prop_assert!((cvar_discrete(&shifted, &p, a).unwrap() - (base + c)).abs() < 1e-9);
            prop_assert!((cvar_discrete(&scaled, &p, a).unwrap() - lambda * base).abs() < 1e-9);
        }

        #[test]
        fn threshold_attains_closed_form((v, p) in distribution(), a in 0.01f64..=1.0) {
            let t = cvar_threshold(&v, &p, a).unwrap();
            let value = cvar_discrete(&v, &p, a).unwrap();
            prop_assert!((ru_objective(&v, &p, a, t) - value).abs() < 1e-9);
            // No smaller t does as well.
            prop_assert!(ru_objective(&v, &p, a, t - 1e-3) > value - 1e-12);
        }

        #[test]
        fn profile_is_convex((v, p) in distribution(), a in 0.01f64..=1.0) {
            let prof = grid_profile(&v, &p, a, -11.0, 11.0, 0.01);
            for w in prof.windows(3) {
                prop_assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-9);
            }
        }

        #[test]
        fn bisection_matches_exhaustive_scan((v, p) in distribution(), a in 0.01f64..=1.0) {
            let scan = grid_profile(&v, &p, a, -10.0, 10.0, 1e-3).into_iter().fold(f64::INFINITY, f64::min);
            let bisect = cvar_grid_oracle(&v, &p, a, -10.0, 10.0, 1e-3);
            prop_assert!((scan - bisect).abs() < 1e-9);
        }
    }
}

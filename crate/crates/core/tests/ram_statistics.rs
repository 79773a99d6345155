//! Selection frequencies and serial independence of the channel.

use fedcvar_core::ram::{skewed_weights, RamDistribution, RamRng, SkewKind};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DRAWS: usize = 100_000;

fn draws(weights: &[f64], seed: u64) -> Vec<usize> {
    let ram = RamDistribution::new(weights).unwrap();
    let mut rng = RamRng::from_seed(seed);
    (0..DRAWS).map(|_| ram.sample(&mut rng)).collect()
}

#[test]
fn tail_frequencies_within_three_sigma() {
    let weights = skewed_weights(10, SkewKind::TailThree, 1.0).unwrap();
    assert_eq!(&weights[7..], &[0.0107, 0.0078, 0.0053]);
    let picks = draws(&weights, 42);
    let total: f64 = weights.iter().sum();
    for (i, w) in weights.iter().enumerate() {
        let p = w / total;
        let count = picks.iter().filter(|&&u| u == i).count() as f64;
        let sigma = (DRAWS as f64 * p * (1.0 - p)).sqrt();
        assert!((count - DRAWS as f64 * p).abs() <= 3.0 * sigma, "user {i}: {count} draws for p = {p}");
    }
}

/// Pearson test of independence between consecutive draws. The three tail
/// users are pooled into one category so every expected cell count is
/// comfortably above five.
#[test]
fn consecutive_draws_are_independent() {
    let weights = skewed_weights(10, SkewKind::TailThree, 1.0).unwrap();
    let picks = draws(&weights, 7);
    let cat = |u: usize| u.min(7);
    let k = 8;
    let mut table = vec![vec![0.0f64; k]; k];
    for w in picks.windows(2) {
        table[cat(w[0])][cat(w[1])] += 1.0;
    }
    let n: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for i in 0..k {
        for j in 0..k {
            let e = rows[i] * cols[j] / n;
            assert!(e > 5.0);
            stat += (table[i][j] - e).powi(2) / e;
        }
    }
    let dof = ((k - 1) * (k - 1)) as f64;
    let p_value = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    assert!(p_value > 1e-3, "chi-square {stat} on {dof} dof, p = {p_value}");
}

#[test]
fn point_mass_always_selects_its_user() {
    let picks = draws(&[0.0, 0.0, 1.0, 0.0], 3);
    assert!(picks.iter().all(|&u| u == 2));
}

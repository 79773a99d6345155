//! The random access model: a stationary, memoryless erasure channel that
//! lets exactly one user's update through per round.
//!
//! Selection weights are held privately by [`RamDistribution`]. The round
//! engine only ever calls [`RamDistribution::relay`], which hands back the
//! surviving candidate and drops the rest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Probabilities of the last three users in the FashionMNIST experiment.
pub const TAIL_THREE: [f64; 3] = [0.0107, 0.0078, 0.0053];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RamError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid skew recipe: {0}")]
    InvalidRecipe(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RamDistribution {
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

/// Random stream reserved for user selection.
#[derive(Debug, Clone)]
pub struct RamRng(ChaCha8Rng);

impl RamRng {
    pub fn from_seed(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Something the channel can pick one survivor from.
pub trait CandidatePool {
    type Candidate;
    type Error;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Consumes the pool, yielding candidate `index`.
    fn take(self, index: usize) -> Result<Self::Candidate, Self::Error>;
}

impl<T> CandidatePool for Vec<T> {
    type Candidate = T;
    type Error = std::convert::Infallible;

    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn take(mut self, index: usize) -> Result<T, Self::Error> {
        Ok(self.swap_remove(index))
    }
}

impl RamDistribution {
    /// Normalizes `raw` into a probability vector.
    pub fn new(raw: &[f64]) -> Result<Self, RamError> {
        if raw.is_empty() {
            return Err(RamError::InvalidDistribution("no users".into()));
        }
        if let Some(bad) = raw.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(RamError::InvalidDistribution(format!(
                "weight {bad} is {} (must be finite and non-negative)",
                raw[bad]
            )));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(RamError::InvalidDistribution("all weights are zero".into()));
        }
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self { weights, cumulative })
    }

    pub fn num_users(&self) -> usize {
        self.weights.len()
    }

    /// The normalized weights, for run metadata. The training path never
    /// calls this.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Inverse-CDF draw over the cumulative weights in index order.
    pub fn sample(&self, rng: &mut RamRng) -> usize {
        let u: f64 = rng.0.random();
        let total = *self.cumulative.last().expect("non-empty");
        let u = u * total;
        match self.cumulative.iter().position(|&c| u < c) {
            Some(i) => i,
            // Rounding left u at or above the last cumulative value; fall
            // back to the last user with positive weight.
            None => self.weights.iter().rposition(|&w| w > 0.0).expect("some positive weight"),
        }
    }

    /// Draws the surviving user and returns its candidate untouched.
    ///
    /// Panics if the pool does not hold exactly one candidate per user.
    pub fn relay<P: CandidatePool>(
        &self,
        rng: &mut RamRng,
        pool: P,
    ) -> Result<(usize, P::Candidate), P::Error> {
        assert_eq!(pool.len(), self.weights.len(), "relay needs one candidate per user");
        let selected = self.sample(rng);
        pool.take(selected).map(|c| (selected, c))
    }
}

/// Selected user per round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SelectionLog {
    pub rounds: Vec<usize>,
}

impl SelectionLog {
    pub fn push(&mut self, user: usize) {
        self.rounds.push(user);
    }

    pub fn counts(&self, num_users: usize) -> Vec<usize> {
        let mut counts = vec![0; num_users];
        for &u in &self.rounds {
            counts[u] += 1;
        }
        counts
    }

    pub fn frequencies(&self, num_users: usize) -> Vec<f64> {
        let n = self.rounds.len().max(1) as f64;
        self.counts(num_users).into_iter().map(|c| c as f64 / n).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkewKind {
    /// Weight of user `i` proportional to `param^i`, `param` in (0, 1).
    Geometric,
    /// The last three users get [`TAIL_THREE`]; the others split the rest
    /// along a geometric profile with ratio `param` in (0, 1].
    TailThree,
}

pub fn skewed_weights(num_users: usize, kind: SkewKind, param: f64) -> Result<Vec<f64>, RamError> {
    if num_users < 2 {
        return Err(RamError::InvalidRecipe("need at least two users".into()));
    }
    let geometric = |n: usize, ratio: f64, mass: f64| {
        let raw: Vec<f64> = (0..n).map(|i| ratio.powi(i as i32)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| mass * w / total).collect::<Vec<f64>>()
    };
    match kind {
        SkewKind::Geometric => {
            if !(param > 0.0 && param < 1.0) {
                return Err(RamError::InvalidRecipe(format!("geometric ratio {param} not in (0, 1)")));
            }
            Ok(geometric(num_users, param, 1.0))
        }
        SkewKind::TailThree => {
            if num_users < 4 {
                return Err(RamError::InvalidRecipe("tail-three needs at least four users".into()));
            }
            if !(param > 0.0 && param <= 1.0) {
                return Err(RamError::InvalidRecipe(format!("head ratio {param} not in (0, 1]")));
            }
            let tail: f64 = TAIL_THREE.iter().sum();
            let mut weights = geometric(num_users - 3, param, 1.0 - tail);
            weights.extend_from_slice(&TAIL_THREE);
            Ok(weights)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(RamDistribution::new(&[0.5, 0.4, 0.1]).unwrap().weights(), &[0.5, 0.4, 0.1]);
        assert_eq!(RamDistribution::new(&[2.0, 2.0]).unwrap().weights(), &[0.5, 0.5]);
        assert_eq!(RamDistribution::new(&[1.0, 0.0, 0.0]).unwrap().weights(), &[1.0, 0.0, 0.0]);
        assert!(RamDistribution::new(&[0.0, 0.0]).is_err());
        assert!(RamDistribution::new(&[1.0, -0.1]).is_err());
        assert!(RamDistribution::new(&[f64::NAN, 1.0]).is_err());
        assert!(RamDistribution::new(&[]).is_err());
    }

    #[test]
    fn point_masses_always_win() {
        let mut rng = RamRng::from_seed(3);
        let ram = RamDistribution::new(&[1.0, 0.0, 0.0]).unwrap();
        assert!((0..1000).all(|_| ram.sample(&mut rng) == 0));
        let single = RamDistribution::new(&[4.0]).unwrap();
        assert!((0..100).all(|_| single.sample(&mut rng) == 0));
        let last = RamDistribution::new(&[0.0, 0.0, 1.0]).unwrap();
        for _ in 0..100 {
            let (i, c) = last.relay(&mut rng, vec!["a", "b", "c"]).unwrap();
            assert_eq!((i, c), (2, "c"));
        }
    }

    #[test]
    fn relay_returns_candidate_unchanged_and_reproducibly() {
        let ram = RamDistribution::new(&[0.3, 0.3, 0.4]).unwrap();
        let pairs: Vec<(Vec<f64>, f64)> = vec![(vec![1.0, -0.0], 0.25), (vec![f64::MIN_POSITIVE, 2.0], -1.0), (vec![3.5, 1e300], 7.0)];
        let run = |seed| {
            let mut rng = RamRng::from_seed(seed);
            (0..50)
                .map(|_| ram.relay(&mut rng, pairs.clone()).unwrap())
                .collect::<Vec<_>>()
        };
        let first = run(11);
        assert_eq!(first, run(11));
        for (i, pair) in &first {
            assert_eq!(pair.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                pairs[*i].0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(pair.1.to_bits(), pairs[*i].1.to_bits());
        }
    }

    #[test]
    fn geometric_weights() {
        let w = skewed_weights(2, SkewKind::Geometric, 0.5).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(skewed_weights(2, SkewKind::Geometric, 1.0).is_err());
        assert!(skewed_weights(2, SkewKind::Geometric, 0.0).is_err());
        let w = skewed_weights(3, SkewKind::Geometric, 0.8).unwrap();
        assert!((w[1] / w[0] - 0.8).abs() < 1e-12 && (w[2] / w[0] - 0.64).abs() < 1e-12);
    }

    #[test]
    fn tail_three_weights() {
        let w = skewed_weights(30, SkewKind::TailThree, 0.9).unwrap();
        assert_eq!(&w[27..], &TAIL_THREE);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[..27].windows(2).all(|p| p[0] > p[1]));
        assert!(skewed_weights(3, SkewKind::TailThree, 0.9).is_err());
        assert!(skewed_weights(30, SkewKind::TailThree, 1.5).is_err());
    }

    #[test]
    fn selection_log_frequencies() {
        let log = SelectionLog { rounds: vec![0, 2, 2, 1] };
        assert_eq!(log.counts(3), vec![1, 1, 2]);
        assert_eq!(log.frequencies(3), vec![0.25, 0.25, 0.5]);
    }
}

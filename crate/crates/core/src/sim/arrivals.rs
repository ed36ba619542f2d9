//! Arrival processes: a piecewise-constant rate, realized either as a
//! deterministic fluid or as seeded Poisson counts per quantum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// From `at_us` on (until the next step) rows arrive at `rows_per_sec`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateStep {
    pub at_us: u64,
    pub rows_per_sec: u64,
}

pub(crate) struct Arrivals {
    steps: Vec<RateStep>,
    rng: Option<ChaCha8Rng>,
}

impl Arrivals {
    pub(crate) fn new(steps: &[RateStep], poisson: bool, seed: u64) -> Self {
        Self {
            steps: steps.to_vec(),
            rng: poisson.then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Integral of the rate over `[0, t)` in row-microseconds.
    fn cumulative(&self, t: u64) -> u128 {
        let mut total = 0u128;
        for (i, s) in self.steps.iter().enumerate() {
            if s.at_us >= t {
                break;
            }
            let end = self.steps.get(i + 1).map_or(t, |n| n.at_us.min(t));
            total += s.rows_per_sec as u128 * (end - s.at_us) as u128;
        }
        total
    }

    /// Rows arriving in `(from, to]`, stamped at `to`.
    pub(crate) fn rows_between(&mut self, from: u64, to: u64) -> u64 {
        match &mut self.rng {
            None => {
                let whole = |t: u64| (self.cumulative(t) / 1_000_000) as u64;
                whole(to) - whole(from)
            }
            Some(_) => {
                let mean = (self.cumulative(to) - self.cumulative(from)) as f64 / 1e6;
                if mean <= 0.0 {
                    return 0;
                }
                let rng = self.rng.as_mut().expect("poisson mode");
                Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steps() -> Vec<RateStep> {
        vec![
            RateStep { at_us: 0, rows_per_sec: 1000 },
            RateStep { at_us: 1_000_000, rows_per_sec: 0 },
            RateStep { at_us: 2_000_000, rows_per_sec: 500 },
        ]
    }

    #[test]
    fn fluid_counts_are_exact() {
        let mut a = Arrivals::new(&steps(), false, 0);
        let mut total = 0;
        let mut t = 0;
        while t < 3_000_000 {
            total += a.rows_between(t, t + 1000);
            t += 1000;
        }
        assert_eq!(total, 1500);
        assert_eq!(a.rows_between(0, 1000), 1);
        assert_eq!(a.rows_between(1_000_000, 2_000_000), 0);
    }

    #[test]
    fn poisson_is_seeded_and_near_the_mean() {
        let run = |seed| {
            let mut a = Arrivals::new(&steps(), true, seed);
            (0..3000).map(|k| a.rows_between(k * 1000, (k + 1) * 1000)).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        let total: u64 = run(7).iter().sum();
        assert!((1300..1700).contains(&total), "{total}");
    }
}

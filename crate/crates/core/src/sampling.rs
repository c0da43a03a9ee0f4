//! Batch selection from the unlabeled pool.
//!
//! Random sampling is reproducible per iteration. The generator for
//! iteration `i` is ChaCha8 seeded with
//! `seed ^ i.wrapping_mul(ITERATION_STREAM_CONSTANT)`, so inserting or
//! skipping an iteration never shifts the samples drawn in the others. Pool
//! ids are sorted before drawing and the draw itself uses only raw 64-bit
//! outputs of the generator, which keeps samples stable across platforms
//! and dependency upgrades.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Odd 64-bit constant (the golden-ratio increment) used to derive
/// per-iteration random streams.
pub const ITERATION_STREAM_CONSTANT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MinCertainty,
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::MinCertainty => "min_certainty",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min_certainty" => Ok(Strategy::MinCertainty),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected min_certainty or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 100,
            strategy: Strategy::MinCertainty,
            seed: 0,
        }
    }
}

fn check_batch(batch: usize, pool: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    if batch > pool {
        return Err(Error::contract(format!(
            "batch size {batch} exceeds pool size {pool}"
        )));
    }
    Ok(())
}

/// First `batch` ids of an ascending `(image_id, c_min)` ranking.
pub fn sample_min_certainty<S: AsRef<str>>(ranking: &[(S, f64)], batch: usize) -> Result<Vec<String>> {
    check_batch(batch, ranking.len())?;
    Ok(ranking[..batch]
        .iter()
        .map(|(id, _)| id.as_ref().to_string())
        .collect())
}

/// Seed of the random stream used at `iteration`.
pub fn iteration_seed(seed: u64, iteration: u64) -> u64 {
    seed ^ iteration.wrapping_mul(ITERATION_STREAM_CONSTANT)
}

/// Uniform sample of `batch` distinct ids, returned sorted.
pub fn sample_random<S: AsRef<str>>(
    pool: &[S],
    batch: usize,
    seed: u64,
    iteration: u64,
) -> Result<Vec<String>> {
    check_batch(batch, pool.len())?;
    let mut ids: Vec<&str> = pool.iter().map(AsRef::as_ref).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("pool contains duplicate ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(seed, iteration));
    // partial Fisher-Yates
    for i in 0..batch {
        let j = i + uniform_below(&mut rng, (ids.len() - i) as u64) as usize;
        ids.swap(i, j);
    }
    let mut out: Vec<String> = ids[..batch].iter().map(|s| s.to_string()).collect();
    out.sort_unstable();
    Ok(out)
}

/// Unbiased integer in `[0, bound)` by rejection on the top of the range.
fn uniform_below(rng: &mut impl RngCore, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % bound;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img_{i:03}")).collect()
    }

    #[test]
    fn min_certainty_takes_the_head() {
        let ranking: Vec<(String, f64)> = [0.1, 0.2, 0.3, 0.4, 0.5]
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("i{i}"), *c))
            .collect();
        assert_eq!(sample_min_certainty(&ranking, 2).unwrap(), vec!["i0", "i1"]);
        assert_eq!(sample_min_certainty(&ranking, 5).unwrap().len(), 5);
        assert!(sample_min_certainty(&ranking, 6).is_err());
        assert!(sample_min_certainty(&ranking, 0).is_err());
    }

    #[test]
    fn random_is_deterministic() {
        let pool = ids(40);
        let a = sample_random(&pool, 7, 42, 3).unwrap();
        assert_eq!(a, sample_random(&pool, 7, 42, 3).unwrap());
        assert_ne!(a, sample_random(&pool, 7, 42, 4).unwrap());
        let mut shuffled = pool.clone();
        shuffled.reverse();
        assert_eq!(a, sample_random(&shuffled, 7, 42, 3).unwrap());
    }

    #[test]
    fn random_full_pool_and_oversize() {
        let pool = ids(5);
        assert_eq!(sample_random(&pool, 5, 1, 0).unwrap(), pool);
        assert!(sample_random(&pool, 6, 1, 0).is_err());
    }

    #[test]
    fn iteration_streams_are_independent_of_each_other() {
        assert_eq!(iteration_seed(7, 0), 7);
        assert_ne!(iteration_seed(7, 1), iteration_seed(7, 2));
    }

    #[test]
    fn single_draws_are_uniform() {
        let pool = ids(10);
        let draws = 10_000u64;
        let mut counts = vec![0u64; 10];
        for it in 0..draws {
            let s = sample_random(&pool, 1, 2024, it).unwrap();
            counts[pool.iter().position(|p| *p == s[0]).unwrap()] += 1;
        }
        let expected = draws as f64 / 10.0;
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() < 5.0 * sigma, "count {c}");
        }
    }

    proptest! {
        #[test]
        fn random_sample_is_distinct_subset(n in 1usize..60, frac in 0.0..1.0f64, seed: u64, it in 0u64..100) {
            let pool = ids(n);
            let batch = ((n as f64 * frac) as usize).max(1);
            let out = sample_random(&pool, batch, seed, it).unwrap();
            prop_assert_eq!(out.len(), batch);
            let set: HashSet<_> = out.iter().collect();
            prop_assert_eq!(set.len(), batch);
            prop_assert!(out.iter().all(|o| pool.contains(o)));
            prop_assert!(out.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn min_certainty_dominates_remainder(
            mut c in proptest::collection::vec(0.0..1.0f64, 1..40),
            frac in 0.0..1.0f64,
        ) {
            c.sort_by(f64::total_cmp);
            let ranking: Vec<(String, f64)> =
                c.iter().enumerate().map(|(i, v)| (format!("{i:03}"), *v)).collect();
            let batch = ((c.len() as f64 * frac) as usize).max(1);
            let out = sample_min_certainty(&ranking, batch).unwrap();
            let worst_taken = out.iter().map(|id| ranking.iter().find(|r| &r.0 == id).unwrap().1).fold(0.0, f64::max);
            let best_left = ranking[batch..].iter().map(|r| r.1).fold(1.0, f64::min);
            prop_assert!(worst_taken <= best_left);
        }
    }
}

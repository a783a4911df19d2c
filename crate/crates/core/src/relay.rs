//! The relay function and the distribution of Byzantine relay prefixes.
//!
//! `Relay(r, k)` is the `k`-th element of a pseudorandom partial
//! Fisher-Yates shuffle of all processes. The shuffle for round `r` is drawn
//! from a ChaCha12 stream keyed by the shared seed with stream id `r`, so
//! rounds are independent draws and any process can recompute any round.

use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::types::{ProcessId, ProtocolConfig, Round};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayError {
    #[error("relay index {k} outside [1, {max}]")]
    OutOfRange { k: u32, max: u32 },
    #[error("invalid parameters: need 0 <= 3f < n, got n={n}, f={f}")]
    InvalidParams { n: u32, f: u32 },
    #[error("corruption set must name exactly f={f} distinct processes below n")]
    BadCorruption { f: u32 },
    #[error("at least one sample is required")]
    NoSamples,
}

/// Deterministic relay assignment derived from `(seed, n, f)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelaySchedule {
    seed: u64,
    n: u32,
    f: u32,
}

impl RelaySchedule {
    pub fn new(seed: u64, n: u32, f: u32) -> Self {
        assert!(f < n, "need at least f+1 processes to draw f+1 relays");
        RelaySchedule { seed, n, f }
    }

    pub fn for_config(cfg: &ProtocolConfig) -> Self {
        Self::new(cfg.seed, cfg.n, cfg.f)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `Relay(r, 1..=f+1)` in order.
    pub fn relays(&self, round: Round) -> Vec<ProcessId> {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(round.0);
        let mut pool: Vec<u32> = (0..self.n).collect();
        let take = (self.f + 1) as usize;
        for i in 0..take {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(take);
        pool.into_iter().map(ProcessId).collect()
    }

    pub fn relay(&self, round: Round, k: u32) -> Result<ProcessId, RelayError> {
        if k == 0 || k > self.f + 1 {
            return Err(RelayError::OutOfRange { k, max: self.f + 1 });
        }
        Ok(self.relays(round)[(k - 1) as usize])
    }

    /// The round leader, `Relay(r, 1)`.
    pub fn leader(&self, round: Round) -> ProcessId {
        self.relays(round)[0]
    }

    /// Number of relays from `k = 1` up to and including the first one
    /// outside `corruption`.
    pub fn byzantine_prefix(&self, round: Round, corruption: &BTreeSet<ProcessId>) -> u32 {
        let relays = self.relays(round);
        relays
            .iter()
            .position(|p| !corruption.contains(p))
            .map_or(relays.len() as u32, |i| i as u32 + 1)
    }
}

fn check_params(n: u32, f: u32) -> Result<(), RelayError> {
    if 3 * u64::from(f) >= u64::from(n) {
        return Err(RelayError::InvalidParams { n, f });
    }
    Ok(())
}

/// `E[X] = (n+1)/(n-f+1)`, where `X` is the 1-based position of the first
/// correct relay of a round.
pub fn expected_byzantine_prefix(n: u32, f: u32) -> Result<BigRational, RelayError> {
    check_params(n, f)?;
    Ok(BigRational::new(
        BigInt::from(n) + 1,
        BigInt::from(n) - BigInt::from(f) + 1,
    ))
}

/// Exact distribution of the first-correct-relay position `X` over `1..=f+1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixDistribution {
    pub n: u32,
    pub f: u32,
    /// `pmf[x - 1] = Pr[X = x]`.
    pub pmf: Vec<BigRational>,
}

impl PrefixDistribution {
    pub fn probability(&self, x: u32) -> BigRational {
        if x == 0 || x as usize > self.pmf.len() {
            return BigRational::zero();
        }
        self.pmf[(x - 1) as usize].clone()
    }

    pub fn total(&self) -> BigRational {
        self.pmf.iter().fold(BigRational::zero(), |acc, p| acc + p)
    }

    pub fn expectation(&self) -> BigRational {
        self.pmf
            .iter()
            .enumerate()
            .fold(BigRational::zero(), |acc, (i, p)| {
                acc + p * BigRational::from_integer(BigInt::from(i + 1))
            })
    }
}

fn factorial(m: u32) -> BigInt {
    (2..=m).fold(BigInt::one(), |acc, i| acc * i)
}

/// `Pr[X = x] = f!(n-x+1)! / (n!(f-x+1)!) * (n-f)/(n-x+1)` in exact arithmetic.
pub fn prefix_pmf(n: u32, f: u32) -> Result<PrefixDistribution, RelayError> {
    check_params(n, f)?;
    let pmf = (1..=f + 1)
        .map(|x| {
            let num = factorial(f) * factorial(n + 1 - x) * (n - f);
            let den = factorial(n) * factorial(f + 1 - x) * (n + 1 - x);
            BigRational::new(num, den)
        })
        .collect();
    Ok(PrefixDistribution { n, f, pmf })
}

/// Monte-Carlo mean of `X` over rounds `0..samples` of the schedule seeded
/// with `seed`.
pub fn empirical_prefix_mean(
    seed: u64,
    n: u32,
    f: u32,
    corruption: &BTreeSet<ProcessId>,
    samples: u64,
) -> Result<f64, RelayError> {
    check_params(n, f)?;
    if corruption.len() != f as usize || corruption.iter().any(|p| p.0 >= n) {
        return Err(RelayError::BadCorruption { f });
    }
    if samples == 0 {
        return Err(RelayError::NoSamples);
    }
    let sched = RelaySchedule::new(seed, n, f);
    let total: u64 = (0..samples)
        .map(|r| u64::from(sched.byzantine_prefix(Round(r), corruption)))
        .sum();
    Ok(total as f64 / samples as f64)
}

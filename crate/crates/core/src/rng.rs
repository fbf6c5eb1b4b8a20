//! Per-trial random streams and exact Bernoulli thresholds.
//!
//! Every Monte Carlo trial owns an independent ChaCha8 stream selected by
//! `(seed, trial_index)`: the master seed picks the key, the trial index picks
//! the stream. Streams never overlap, trials can run in any order on any
//! number of threads, and a given trial always consumes draws in the same
//! documented order (per level: site 0 left bond, site 0 right bond, site 1
//! left bond, …, then one boundary-fringe draw).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Random stream dedicated to a single `(seed, trial_index)` pair.
pub struct TrialRng {
    inner: ChaCha8Rng,
}

impl TrialRng {
    pub fn new(seed: u64, trial_index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(trial_index);
        TrialRng { inner }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// A success probability encoded as an exact `u64` threshold.
///
/// A uniform draw `u` counts as a success when `u < threshold`, except that
/// `p = 1` is saturated and always succeeds. `p = 0` yields threshold 0 and
/// never succeeds, so both endpoints are exact rather than off by one part in
/// 2^64.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BondProbability {
    threshold: u64,
    saturated: bool,
}

impl BondProbability {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!(
                "probability must lie in [0, 1], got {p}"
            )));
        }
        if p >= 1.0 {
            return Ok(BondProbability { threshold: u64::MAX, saturated: true });
        }
        // Rounds to the nearest representable threshold; the f64 -> u64 cast
        // saturates, which is exactly what we want for p just below 1.
        let threshold = (p * 18_446_744_073_709_551_616.0) as u64;
        Ok(BondProbability { threshold, saturated: false })
    }

    #[inline]
    pub fn open(&self, u: u64) -> bool {
        self.saturated || u < self.threshold
    }

    /// Threshold comparison is monotone in `p`, which is what makes coupled
    /// multi-probability steps exact: if `p <= q` then every draw open at `p`
    /// is open at `q`.
    pub fn threshold(&self) -> u64 {
        self.threshold
    }
}

/// The pair of thresholds a bond layer needs: one per regular bond and one for
/// the left-boundary fringe (an off-window parent reaches the tracked edge
/// through either of two bonds, hence `1 - (1-p)^2`).
#[derive(Clone, Copy, Debug)]
pub struct LayerProbabilities {
    pub bond: BondProbability,
    pub fringe: BondProbability,
}

impl LayerProbabilities {
    pub fn new(p: f64) -> Result<Self> {
        // Written exactly as the two-bond union so the threshold matches the
        // documented formula bit for bit (p * (2 - p) rounds differently).
        Ok(LayerProbabilities {
            bond: BondProbability::new(p)?,
            fringe: BondProbability::new(1.0 - (1.0 - p) * (1.0 - p))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut r = TrialRng::new(7, 3);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = TrialRng::new(7, 3);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<u64> = {
            let mut r = TrialRng::new(7, 4);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_ne!(a, c);
        let d: Vec<u64> = {
            let mut r = TrialRng::new(8, 3);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_ne!(a, d);
    }

    #[test]
    fn endpoint_probabilities_are_exact() {
        let zero = BondProbability::new(0.0).unwrap();
        let one = BondProbability::new(1.0).unwrap();
        for u in [0, 1, u64::MAX / 2, u64::MAX - 1, u64::MAX] {
            assert!(!zero.open(u));
            assert!(one.open(u));
        }
    }

    #[test]
    fn half_threshold_is_midpoint() {
        let half = BondProbability::new(0.5).unwrap();
        assert_eq!(half.threshold(), 1u64 << 63);
        assert!(half.open((1u64 << 63) - 1));
        assert!(!half.open(1u64 << 63));
    }

    #[test]
    fn thresholds_are_monotone_in_p() {
        let mut last = 0u64;
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            let b = BondProbability::new(p).unwrap();
            assert!(b.threshold() >= last, "threshold not monotone at p={p}");
            last = b.threshold();
        }
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(BondProbability::new(-0.1).is_err());
        assert!(BondProbability::new(1.1).is_err());
        assert!(BondProbability::new(f64::NAN).is_err());
    }

    #[test]
    fn fringe_matches_two_bond_formula() {
        let lp = LayerProbabilities::new(0.4).unwrap();
        let expect = BondProbability::new(1.0 - 0.6 * 0.6).unwrap();
        assert_eq!(lp.fringe.threshold(), expect.threshold());
    }
}

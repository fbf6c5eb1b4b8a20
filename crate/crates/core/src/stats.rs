//! Counting, empirical distributions, confidence intervals and decay fits.
//!
//! Everything an experiment aggregates across trials is integer-valued and
//! mergeable, so parallel reductions commute exactly; floating-point work
//! happens only once, on the final aggregate.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Declares which supports are comparable. Two distributions may be compared
/// only when their keys use the same encoding (for cylinder patterns, the
/// same depth).
pub trait SupportKey {
    fn encoding(&self) -> u64 {
        0
    }
}

impl SupportKey for Vec<i64> {}
impl SupportKey for u32 {}
impl SupportKey for usize {}

/// Mergeable multiset of observations.
#[derive(Clone, Debug)]
pub struct Counter<K: Ord> {
    counts: BTreeMap<K, u64>,
    total: u64,
}

impl<K: Ord> Default for Counter<K> {
    fn default() -> Self {
        Counter::new()
    }
}

impl<K: Ord> Counter<K> {
    pub fn new() -> Self {
        Counter { counts: BTreeMap::new(), total: 0 }
    }

    pub fn add(&mut self, key: K) {
        self.add_n(key, 1);
    }

    pub fn add_n(&mut self, key: K, n: u64) {
        if n > 0 {
            *self.counts.entry(key).or_insert(0) += n;
            self.total += n;
        }
    }

    /// Order-insensitive merge: `a.merge(b)` equals `b.merge(a)` key for key.
    pub fn merge(&mut self, other: Counter<K>) {
        for (k, n) in other.counts {
            *self.counts.entry(k).or_insert(0) += n;
        }
        self.total += other.total;
    }

    pub fn get(&self, key: &K) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, u64)> {
        self.counts.iter().map(|(k, &n)| (k, n))
    }
}

/// Normalised probability table over an ordered support.
#[derive(Clone, Debug)]
pub struct DistributionTable<K: Ord + SupportKey> {
    entries: BTreeMap<K, f64>,
    encoding: u64,
}

const MASS_TOLERANCE: f64 = 1e-12;

impl<K: Ord + SupportKey> DistributionTable<K> {
    /// Builds a table, checking non-negativity, key uniqueness, a consistent
    /// support encoding and unit total mass (to 1e-12).
    pub fn from_probs(entries: impl IntoIterator<Item = (K, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut encoding = None;
        for (k, p) in entries {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::Guard(format!("probability {p} out of range")));
            }
            let e = k.encoding();
            if *encoding.get_or_insert(e) != e {
                return Err(Error::SupportMismatch { left: encoding.unwrap(), right: e });
            }
            if map.insert(k, p).is_some() {
                return Err(Error::Guard("duplicate key in distribution".into()));
            }
        }
        let total = kahan_sum(map.values().copied());
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Guard(format!(
                "distribution mass {total} deviates from 1 by more than {MASS_TOLERANCE}"
            )));
        }
        if map.is_empty() {
            return Err(Error::NoData("empty distribution".into()));
        }
        let encoding = encoding.unwrap();
        Ok(DistributionTable { entries: map, encoding })
    }

    pub fn prob(&self, key: &K) -> f64 {
        self.entries.get(key).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, f64)> {
        self.entries.iter().map(|(k, &p)| (k, p))
    }

    pub fn encoding(&self) -> u64 {
        self.encoding
    }
}

/// Empirical distribution of a counter.
pub fn to_distribution<K: Ord + SupportKey + Clone>(
    counter: &Counter<K>,
) -> Result<DistributionTable<K>> {
    if counter.is_empty() {
        return Err(Error::NoData("cannot normalise an empty counter".into()));
    }
    let total = counter.total() as f64;
    DistributionTable::from_probs(counter.iter().map(|(k, n)| (k.clone(), n as f64 / total)))
}

/// Total variation distance `sup_A |P(A) - Q(A)| = 1/2 sum |p - q|` over the
/// union of supports.
pub fn tv_distance<K: Ord + SupportKey + Clone>(
    a: &DistributionTable<K>,
    b: &DistributionTable<K>,
) -> Result<f64> {
    if a.encoding() != b.encoding() {
        return Err(Error::SupportMismatch { left: a.encoding(), right: b.encoding() });
    }
    let mut diffs = Vec::with_capacity(a.len() + b.len());
    for (k, p) in a.iter() {
        diffs.push((p - b.prob(k)).abs());
    }
    for (k, q) in b.iter() {
        if !a.entries.contains_key(k) {
            diffs.push(q);
        }
    }
    Ok(0.5 * kahan_sum(diffs.into_iter()))
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: u64, trials: u64, z: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::NoData("Wilson interval needs at least one trial".into()));
    }
    if successes > trials {
        return Err(Error::InvalidConfig(format!(
            "successes {successes} exceed trials {trials}"
        )));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // At the extremes the exact Wilson bound is the endpoint itself; computing
    // it through `centre ± half` loses the last ulp.
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (centre + half).min(1.0) };
    Ok((lo, hi))
}

/// One abscissa of a decay fit: an empirical probability and the raw count
/// behind it.
#[derive(Clone, Copy, Debug)]
pub struct FitPoint {
    pub x: f64,
    pub p_hat: f64,
    pub count: u64,
}

/// Least-squares line through `(x, ln p_hat)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_se: f64,
    pub points_used: usize,
    pub x_lo: f64,
    pub x_hi: f64,
}

/// Default eligibility threshold: points backed by fewer observations are
/// excluded from decay fits.
pub const DEFAULT_MIN_COUNT: u64 = 30;

/// Fits `ln p_hat ~ intercept + slope * x` over the points with
/// `count >= min_count` and `p_hat > 0`. At least three eligible points are
/// required so the residual degrees of freedom stay positive.
pub fn fit_log_linear(points: &[FitPoint], min_count: u64) -> Result<DecayFit> {
    let eligible: Vec<(f64, f64)> = points
        .iter()
        .filter(|pt| pt.count >= min_count && pt.p_hat > 0.0 && pt.p_hat.is_finite())
        .map(|pt| (pt.x, pt.p_hat.ln()))
        .collect();
    let n = eligible.len();
    if n < 3 {
        return Err(Error::TooFewPoints(n));
    }
    let nf = n as f64;
    let mean_x = eligible.iter().map(|&(x, _)| x).sum::<f64>() / nf;
    let mean_y = eligible.iter().map(|&(_, y)| y).sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut sst = 0.0;
    for &(x, y) in &eligible {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        sst += (y - mean_y) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::Guard("decay fit needs at least two distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let sse: f64 = eligible
        .iter()
        .map(|&(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    // A constant response is fit perfectly by the zero-slope line.
    let r_squared = if sst == 0.0 { 1.0 } else { 1.0 - sse / sst };
    let slope_se = (sse.max(0.0) / (nf - 2.0) / sxx).sqrt();
    let (x_lo, x_hi) = eligible
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    Ok(DecayFit { slope, intercept, r_squared, slope_se, points_used: n, x_lo, x_hi })
}

fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counter_counts_and_merges() {
        let mut a: Counter<u32> = Counter::new();
        a.add(1);
        a.add(1);
        a.add(2);
        let mut b: Counter<u32> = Counter::new();
        b.add(2);
        b.add_n(3, 5);
        a.merge(b);
        assert_eq!(a.get(&1), 2);
        assert_eq!(a.get(&2), 2);
        assert_eq!(a.get(&3), 5);
        assert_eq!(a.get(&4), 0);
        assert_eq!(a.total(), 9);
    }

    #[test]
    fn distribution_from_counter() {
        let mut c: Counter<u32> = Counter::new();
        c.add_n(0, 3);
        c.add_n(1, 1);
        let d = to_distribution(&c).unwrap();
        assert_eq!(d.prob(&0), 0.75);
        assert_eq!(d.prob(&1), 0.25);
        assert_eq!(d.prob(&9), 0.0);
        let empty: Counter<u32> = Counter::new();
        assert!(matches!(to_distribution(&empty), Err(Error::NoData(_))));
    }

    #[test]
    fn distribution_mass_guard() {
        let bad = DistributionTable::from_probs([(0u32, 0.5), (1, 0.5 + 1e-9)]);
        assert!(matches!(bad, Err(Error::Guard(_))));
        let neg = DistributionTable::from_probs([(0u32, 1.5), (1, -0.5)]);
        assert!(neg.is_err());
    }

    #[test]
    fn tv_distance_oracles() {
        let a = DistributionTable::from_probs([(0u32, 0.5), (1, 0.5)]).unwrap();
        let b = DistributionTable::from_probs([(0u32, 0.25), (2, 0.75)]).unwrap();
        // |0.5-0.25| + |0.5-0| + |0-0.75| = 1.5, halved.
        assert!((tv_distance(&a, &b).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        let disjoint = DistributionTable::from_probs([(7u32, 1.0)]).unwrap();
        assert!((tv_distance(&a, &disjoint).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tv_rejects_mismatched_encodings() {
        use crate::anchored::CylinderPattern;
        let p2 = DistributionTable::from_probs([(CylinderPattern::new(2, 0).unwrap(), 1.0)])
            .unwrap();
        let p3 = DistributionTable::from_probs([(CylinderPattern::new(3, 0).unwrap(), 1.0)])
            .unwrap();
        assert!(matches!(
            tv_distance(&p2, &p3),
            Err(Error::SupportMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn wilson_interval_oracles() {
        let (lo, hi) = wilson_ci(50, 100, 1.96).unwrap();
        assert!((lo - 0.40383).abs() < 1e-4, "lo = {lo}");
        assert!((hi - 0.59617).abs() < 1e-4, "hi = {hi}");
        let (lo, hi) = wilson_ci(0, 100, 1.96).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 0.03700).abs() < 1e-4, "hi = {hi}");
        let (lo, hi) = wilson_ci(100, 100, 1.96).unwrap();
        assert!((lo - 0.96300).abs() < 1e-4, "lo = {lo}");
        assert_eq!(hi, 1.0);
        assert!(wilson_ci(1, 0, 1.96).is_err());
        assert!(wilson_ci(5, 4, 1.96).is_err());
    }

    #[test]
    fn exact_exponential_fits_perfectly() {
        let points: Vec<FitPoint> = (1..=10)
            .map(|x| FitPoint { x: x as f64, p_hat: (-0.5 * x as f64).exp(), count: 1000 })
            .collect();
        let fit = fit_log_linear(&points, 30).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(fit.slope_se < 1e-9);
        assert_eq!(fit.points_used, 10);
        assert_eq!((fit.x_lo, fit.x_hi), (1.0, 10.0));
    }

    #[test]
    fn constant_response_has_zero_slope() {
        let points: Vec<FitPoint> =
            (1..=5).map(|x| FitPoint { x: x as f64, p_hat: 0.25, count: 100 }).collect();
        let fit = fit_log_linear(&points, 30).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn fit_eligibility_rules() {
        let mut points: Vec<FitPoint> = (1..=4)
            .map(|x| FitPoint { x: x as f64, p_hat: 0.5f64.powi(x), count: 10 })
            .collect();
        assert!(matches!(fit_log_linear(&points, 30), Err(Error::TooFewPoints(0))));
        points[0].count = 50;
        points[1].count = 50;
        assert!(matches!(fit_log_linear(&points, 30), Err(Error::TooFewPoints(2))));
        points[2].count = 50;
        let fit = fit_log_linear(&points, 30).unwrap();
        assert_eq!(fit.points_used, 3);
        // Zero-probability points are never eligible regardless of count.
        points.push(FitPoint { x: 9.0, p_hat: 0.0, count: 10_000 });
        let fit = fit_log_linear(&points, 30).unwrap();
        assert_eq!(fit.points_used, 3);
    }

    proptest! {
        /// Wilson intervals bracket the point estimate and stay in [0, 1].
        #[test]
        fn wilson_brackets_p_hat(s in 0u64..=500, extra in 0u64..500) {
            let n = s + extra + 1;
            let (lo, hi) = wilson_ci(s, n, 1.96).unwrap();
            let p = s as f64 / n as f64;
            prop_assert!((0.0..=1.0).contains(&lo));
            prop_assert!((0.0..=1.0).contains(&hi));
            prop_assert!(lo <= p && p <= hi);
        }

        /// Counter merging is commutative.
        #[test]
        fn merge_commutes(xs in proptest::collection::vec(0u32..8, 0..40),
                          ys in proptest::collection::vec(0u32..8, 0..40)) {
            let mut a: Counter<u32> = Counter::new();
            for &x in &xs { a.add(x); }
            let mut b: Counter<u32> = Counter::new();
            for &y in &ys { b.add(y); }
            let mut ab = a.clone();
            ab.merge(b.clone());
            let mut ba = b;
            ba.merge(a);
            prop_assert_eq!(ab.total(), ba.total());
            for k in 0u32..8 {
                prop_assert_eq!(ab.get(&k), ba.get(&k));
            }
        }

        /// TV is a metric-like quantity: symmetric, in [0, 1], zero on equals.
        #[test]
        fn tv_basic_properties(
            ws in proptest::collection::vec(1u32..100, 2..6),
            vs in proptest::collection::vec(1u32..100, 2..6),
        ) {
            let mut a: Counter<u32> = Counter::new();
            for (i, &w) in ws.iter().enumerate() { a.add_n(i as u32, w as u64); }
            let mut b: Counter<u32> = Counter::new();
            for (i, &v) in vs.iter().enumerate() { b.add_n(i as u32 + 2, v as u64); }
            let da = to_distribution(&a).unwrap();
            let db = to_distribution(&b).unwrap();
            let d_ab = tv_distance(&da, &db).unwrap();
            let d_ba = tv_distance(&db, &da).unwrap();
            prop_assert!((d_ab - d_ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&d_ab));
            prop_assert!(tv_distance(&da, &da).unwrap() == 0.0);
        }
    }
}

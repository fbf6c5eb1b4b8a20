//! Quasi-stationary analysis of the anchored chain.
//!
//! Anchored configurations with all offsets within `w - 1` sites of the
//! anchor form a finite state space (the anchor contributes offset 0; each of
//! the `w - 1` slots below it is free or occupied). On that space the chain's
//! substochastic transfer kernel can be built exactly by enumerating all
//! `4^k` bond outcomes of a `k`-site configuration. Configurations stepping
//! deeper than the truncation are either *projected* (deep offsets dropped)
//! or *killed* (sent to the absorbing state); the two truncations bracket the
//! untruncated behaviour and should agree increasingly as `w` grows.
//!
//! The minimal quasi-stationary law and its survival eigenvalue come out of
//! power iteration on the kernel; the same law is measured independently by
//! conditioned Monte Carlo for cross-validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchored::{project, CylinderPattern, InitialCondition, ZetaChain};
use crate::error::{Error, Result};
use crate::exec::{run_trials, Accumulator};
use crate::lattice::SimParams;
use crate::stats::{tv_distance, Counter, DistributionTable};

/// How configurations deeper than the truncated space are handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationMode {
    /// Drop offsets below the truncation depth, keep the rest of the mass.
    Project,
    /// Treat stepping below the truncation depth as absorption.
    Kill,
}

impl fmt::Display for TruncationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TruncationMode::Project => write!(f, "project"),
            TruncationMode::Kill => write!(f, "kill"),
        }
    }
}

impl FromStr for TruncationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "project" => Ok(TruncationMode::Project),
            "kill" => Ok(TruncationMode::Kill),
            _ => Err(Error::InvalidConfig(format!(
                "unknown truncation mode '{s}' (expected project or kill)"
            ))),
        }
    }
}

/// Exact kernel construction scales as `4 * 5^(w-1)` bond outcomes, so the
/// depth is capped where that stays tractable.
pub const MAX_TRUNCATION_DEPTH: usize = 12;

/// Anchored configurations of depth at most `w` sites (anchor included).
///
/// State index `m` encodes the configuration `{0} ∪ {-2(i+1) : bit i of m}`,
/// so index 0 is the singleton `{0}` and indices run over `0..2^(w-1)`.
#[derive(Clone, Copy, Debug)]
pub struct TruncatedStateSpace {
    w: usize,
}

impl TruncatedStateSpace {
    pub fn new(w: usize) -> Result<Self> {
        if w == 0 || w > MAX_TRUNCATION_DEPTH {
            return Err(Error::Guard(format!(
                "truncation depth must lie in 1..={MAX_TRUNCATION_DEPTH}, got {w}"
            )));
        }
        Ok(TruncatedStateSpace { w })
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn num_states(&self) -> usize {
        1 << (self.w - 1)
    }

    pub fn offsets_of(&self, state: usize) -> Vec<i64> {
        let mut offsets = vec![0i64];
        for i in 0..self.w - 1 {
            if state >> i & 1 == 1 {
                offsets.push(-2 * (i as i64 + 1));
            }
        }
        offsets
    }

    pub fn index_of(&self, offsets: &[i64]) -> Result<usize> {
        let mut state = 0usize;
        for &o in offsets {
            if o == 0 {
                continue;
            }
            if o > 0 || o % 2 != 0 || o < -2 * (self.w as i64 - 1) {
                return Err(Error::InvalidConfig(format!(
                    "offset {o} does not belong to the depth-{} state space",
                    self.w
                )));
            }
            state |= 1 << ((-o / 2) - 1);
        }
        if !offsets.contains(&0) {
            return Err(Error::InvalidConfig("anchored states must contain offset 0".into()));
        }
        Ok(state)
    }
}

/// Dense substochastic transfer kernel over a truncated state space.
#[derive(Clone, Debug)]
pub struct Kernel {
    w: usize,
    p: f64,
    mode: TruncationMode,
    rows: Vec<Vec<f64>>,
    absorb: Vec<f64>,
}

/// Enumerates every bond outcome of every state exactly once.
///
/// Per-destination accumulation is compensated (Kahan) so that row masses are
/// exact to well below the 1e-12 audit tolerance even at the largest depths.
pub fn build_kernel(p: f64, space: &TruncatedStateSpace, mode: TruncationMode) -> Result<Kernel> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "bond probability must lie in [0, 1], got {p}"
        )));
    }
    let w = space.w();
    let n_states = space.num_states();
    let q = 1.0 - p;
    // pw[i] = p^i, qw[i] = q^i for up to 2w bonds.
    let mut pw = vec![1.0; 2 * w + 1];
    let mut qw = vec![1.0; 2 * w + 1];
    for i in 1..=2 * w {
        pw[i] = pw[i - 1] * p;
        qw[i] = qw[i - 1] * q;
    }
    let keep_mask: u64 = (1u64 << (w - 1)) - 1;
    let mut rows = Vec::with_capacity(n_states);
    let mut absorb = Vec::with_capacity(n_states);
    for state in 0..n_states {
        // Parent slots: slot 0 is the anchor, slot j >= 1 sits at offset -2j.
        let mut slots = vec![0usize];
        for i in 0..w - 1 {
            if state >> i & 1 == 1 {
                slots.push(i + 1);
            }
        }
        let k = slots.len();
        let mut row = KahanRow::new(n_states);
        let mut dead = KahanRow::new(1);
        // Outcome bits 2t / 2t+1: left / right bond of the t-th slot.
        for outcome in 0u32..1 << (2 * k) {
            let mut child: u64 = 0;
            for (t, &j) in slots.iter().enumerate() {
                if outcome >> (2 * t) & 1 == 1 {
                    child |= 1 << (j + 1); // left child: one site deeper
                }
                if outcome >> (2 * t + 1) & 1 == 1 {
                    child |= 1 << j; // right child: same depth as the parent
                }
            }
            let open = outcome.count_ones() as usize;
            let prob = pw[open] * qw[2 * k - open];
            if child == 0 {
                dead.add(0, prob);
                continue;
            }
            let shift = child.trailing_zeros();
            // Re-anchor at the new rightmost site, then drop its own bit.
            let anchored = (child >> shift) >> 1;
            if anchored & !keep_mask == 0 {
                row.add(anchored as usize, prob);
            } else {
                match mode {
                    TruncationMode::Project => row.add((anchored & keep_mask) as usize, prob),
                    TruncationMode::Kill => dead.add(0, prob),
                }
            }
        }
        rows.push(row.into_values());
        absorb.push(dead.into_values()[0]);
    }
    let kernel = Kernel { w, p, mode, rows, absorb };
    for state in 0..n_states {
        let defect = kernel.row_mass_defect(state);
        if defect > 1e-12 {
            return Err(Error::Guard(format!(
                "kernel row {state} mass deviates from 1 by {defect:.3e}"
            )));
        }
    }
    Ok(kernel)
}

struct KahanRow {
    sums: Vec<f64>,
    comps: Vec<f64>,
}

impl KahanRow {
    fn new(n: usize) -> Self {
        KahanRow { sums: vec![0.0; n], comps: vec![0.0; n] }
    }

    #[inline]
    fn add(&mut self, i: usize, v: f64) {
        let y = v - self.comps[i];
        let t = self.sums[i] + y;
        self.comps[i] = (t - self.sums[i]) - y;
        self.sums[i] = t;
    }

    fn into_values(self) -> Vec<f64> {
        self.sums
    }
}

impl Kernel {
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn mode(&self) -> TruncationMode {
        self.mode
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.rows[state]
    }

    pub fn absorb(&self, state: usize) -> f64 {
        self.absorb[state]
    }

    pub fn space(&self) -> TruncatedStateSpace {
        TruncatedStateSpace { w: self.w }
    }

    /// `|1 - (row sum + absorption)|`, summed carefully.
    pub fn row_mass_defect(&self, state: usize) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &v in self.rows[state].iter().chain(std::iter::once(&self.absorb[state])) {
            let y = v - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        (sum - 1.0).abs()
    }
}

/// A probability distribution over the states of a truncated space.
#[derive(Clone, Debug)]
pub struct StateDist {
    w: usize,
    probs: Vec<f64>,
}

impl StateDist {
    /// Point mass at the singleton `{0}`.
    pub fn delta_origin(space: &TruncatedStateSpace) -> StateDist {
        let mut probs = vec![0.0; space.num_states()];
        probs[0] = 1.0;
        StateDist { w: space.w(), probs }
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// One conditioned step: push through the kernel, renormalise by the
    /// surviving mass, and report that mass (the per-step survival rate).
    pub fn step(&self, kernel: &Kernel) -> Result<(StateDist, f64)> {
        if kernel.w() != self.w {
            return Err(Error::SupportMismatch {
                left: self.w as u64,
                right: kernel.w() as u64,
            });
        }
        let n = self.probs.len();
        let mut next = vec![0.0f64; n];
        for (s, &mass) in self.probs.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (t, &k) in kernel.row(s).iter().enumerate() {
                next[t] += mass * k;
            }
        }
        let total: f64 = next.iter().sum();
        if total <= 0.0 {
            return Err(Error::NoData(
                "all mass is absorbed in one step; no conditioned law exists".into(),
            ));
        }
        for v in &mut next {
            *v /= total;
        }
        Ok((StateDist { w: self.w, probs: next }, total))
    }

    /// Total variation distance between two state distributions.
    pub fn tv(&self, other: &StateDist) -> Result<f64> {
        if self.w != other.w {
            return Err(Error::SupportMismatch { left: self.w as u64, right: other.w as u64 });
        }
        let mut sum = 0.0;
        for (a, b) in self.probs.iter().zip(other.probs.iter()) {
            sum += (a - b).abs();
        }
        Ok(0.5 * sum)
    }

    /// The distribution keyed by explicit offset sets, for cross-depth
    /// comparisons.
    pub fn to_offset_table(&self) -> Result<DistributionTable<Vec<i64>>> {
        let space = TruncatedStateSpace { w: self.w };
        DistributionTable::from_probs(
            self.probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(s, &p)| {
                (space.offsets_of(s), p)
            }),
        )
    }

    /// Marginal law of the depth-`r` cylinder pattern. State bit `k-1` is
    /// exactly "offset -2k occupied", so the pattern is the state's low bits.
    pub fn project(&self, r: usize) -> Result<DistributionTable<CylinderPattern>> {
        if r >= self.w {
            return Err(Error::ProjectionDepth { r, depth: self.w - 1 });
        }
        let mut acc = vec![0.0f64; 1 << r];
        for (s, &p) in self.probs.iter().enumerate() {
            acc[s & ((1 << r) - 1)] += p;
        }
        DistributionTable::from_probs(
            acc.into_iter()
                .enumerate()
                .map(|(bits, p)| (CylinderPattern::new(r, bits as u32).unwrap(), p)),
        )
    }
}

/// Result of the power iteration: the fixed point, its eigenvalue and how the
/// iteration behaved.
#[derive(Clone, Debug)]
pub struct YaglomResult {
    pub dist: StateDist,
    pub lambda: f64,
    pub iterations: u32,
    pub final_step_tv: f64,
}

/// Power iteration for the minimal quasi-stationary law, started from the
/// point mass at `{0}` and run until successive conditioned laws differ by
/// less than `tol` in total variation.
pub fn yaglom(kernel: &Kernel, tol: f64, max_iterations: u32) -> Result<YaglomResult> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidConfig("power iteration tolerance must be positive".into()));
    }
    let space = kernel.space();
    let mut current = StateDist::delta_origin(&space);
    for iteration in 1..=max_iterations {
        let (next, lambda) = current.step(kernel)?;
        let step_tv = next.tv(&current)?;
        current = next;
        if step_tv < tol {
            return Ok(YaglomResult {
                dist: current,
                lambda,
                iterations: iteration,
                final_step_tv: step_tv,
            });
        }
    }
    Err(Error::Guard(format!(
        "power iteration did not reach tolerance {tol:e} within {max_iterations} iterations"
    )))
}

/// Conditioned laws `nu_0, nu_1, …, nu_n` of the chain started at `{0}`,
/// computed exactly on the truncated space.
pub fn power_iterates(kernel: &Kernel, n: u32) -> Result<Vec<StateDist>> {
    let space = kernel.space();
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(StateDist::delta_origin(&space));
    for _ in 0..n {
        let (next, _) = out.last().unwrap().step(kernel)?;
        out.push(next);
    }
    Ok(out)
}

/// Monte Carlo estimate of the conditioned cylinder law at a single level.
#[derive(Clone, Debug)]
pub struct McConditionalLaw {
    pub table: DistributionTable<CylinderPattern>,
    pub counter: Counter<CylinderPattern>,
    pub survivors: u64,
    pub trials: u64,
}

#[derive(Default)]
struct PatternTally {
    counter: Counter<CylinderPattern>,
}

impl Accumulator for PatternTally {
    type Item = Option<CylinderPattern>;

    fn absorb(&mut self, item: Self::Item) {
        if let Some(pattern) = item {
            self.counter.add(pattern);
        }
    }

    fn merge(&mut self, other: Self) {
        self.counter.merge(other.counter);
    }
}

/// Samples `law(zeta_n^{0} | T > n)` projected to depth `r` by rejection:
/// run chains from `{0}`, keep the survivors.
///
/// Deep-subcritical conditioning is refused beyond level 40 because the
/// surviving fraction decays exponentially and rejection sampling would
/// silently return nothing useful.
pub fn conditional_law_mc(
    params: &SimParams,
    n: u32,
    r: usize,
    trials: u64,
    threads: usize,
) -> Result<McConditionalLaw> {
    if n == 0 || n > params.n_max {
        return Err(Error::InvalidConfig(format!(
            "conditioning level {n} must lie in 1..={}",
            params.n_max
        )));
    }
    if params.p <= 0.45 && n > 40 {
        return Err(Error::Guard(format!(
            "conditioning on survival to level {n} at p = {} keeps roughly (2p)^n of the mass; \
             levels beyond 40 are refused in this regime",
            params.p
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("at least one trial is required".into()));
    }
    let tally: PatternTally = run_trials(trials, threads, |trial| {
        let mut chain = ZetaChain::new(params, trial, &InitialCondition::Origin)?;
        if chain.advance_to(n)? {
            Ok(Some(project(&chain.anchored()?, r)?))
        } else {
            Ok(None)
        }
    })?;
    let survivors = tally.counter.total();
    if survivors == 0 {
        return Err(Error::NoData(format!(
            "no trial survived to level {n}; {trials} trials all died earlier"
        )));
    }
    let total = survivors as f64;
    let table = DistributionTable::from_probs(
        tally.counter.iter().map(|(k, c)| (*k, c as f64 / total)),
    )?;
    Ok(McConditionalLaw { table, counter: tally.counter, survivors, trials })
}

/// One checkpoint of a convergence experiment.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub n: u32,
    pub tv: f64,
    /// Half-width of a 95% interval for the TV estimate (delta method with
    /// the sign pattern of the differences held fixed).
    pub ci_half_width: f64,
    /// Surviving sample count behind the estimate (equals `trials` for
    /// non-absorbing initial conditions).
    pub samples: u64,
    pub trials: u64,
}

/// Empirical distance of `law(zeta_n^A)` from a reference cylinder law at a
/// ladder of levels.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub tv_monotone_decreasing: bool,
}

#[derive(Default)]
struct CheckpointTally {
    counters: Vec<Counter<CylinderPattern>>,
}

impl Accumulator for CheckpointTally {
    type Item = Vec<Option<CylinderPattern>>;

    fn absorb(&mut self, item: Self::Item) {
        if self.counters.len() < item.len() {
            self.counters.resize_with(item.len(), Counter::new);
        }
        for (c, obs) in self.counters.iter_mut().zip(item) {
            if let Some(pattern) = obs {
                c.add(pattern);
            }
        }
    }

    fn merge(&mut self, other: Self) {
        if self.counters.len() < other.counters.len() {
            self.counters.resize_with(other.counters.len(), Counter::new);
        }
        for (c, o) in self.counters.iter_mut().zip(other.counters) {
            c.merge(o);
        }
    }
}

/// Measures `TV(law(zeta_n^A) projected to depth r, reference)` at each level
/// in `n_list`.
///
/// For finite initial conditions the law is conditioned on survival and the
/// same rarity guard as [`conditional_law_mc`] applies; the `samples` column
/// reports the surviving trials behind each estimate. The `Full` initial
/// condition runs in a sliding frame that keeps the rightmost site tracked at
/// every level, so every trial contributes to every checkpoint (`samples`
/// equals `trials`) as long as `r` fits inside the frame; a trial whose view
/// cannot be projected (frame narrower than `r`) is dropped rather than padded
/// with guessed far-left structure.
pub fn convergence_experiment(
    params: &SimParams,
    initial: &InitialCondition,
    n_list: &[u32],
    r: usize,
    reference: &DistributionTable<CylinderPattern>,
    trials: u64,
    threads: usize,
) -> Result<ConvergenceReport> {
    if n_list.is_empty() {
        return Err(Error::InvalidConfig("at least one checkpoint level is required".into()));
    }
    let mut levels: Vec<u32> = n_list.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let &max_level = levels.last().unwrap();
    if max_level > params.n_max {
        return Err(Error::InvalidConfig(format!(
            "checkpoint level {max_level} exceeds n_max = {}",
            params.n_max
        )));
    }
    if reference.encoding() != r as u64 {
        return Err(Error::SupportMismatch {
            left: r as u64,
            right: reference.encoding(),
        });
    }
    if !matches!(initial, InitialCondition::Full) && params.p <= 0.45 && max_level > 40 {
        return Err(Error::Guard(format!(
            "conditioned convergence beyond level 40 at p = {} is refused; \
             use the full initial condition for deep levels",
            params.p
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("at least one trial is required".into()));
    }
    let tally: CheckpointTally = run_trials(trials, threads, |trial| {
        let mut chain = ZetaChain::new(params, trial, initial)?;
        let mut row = Vec::with_capacity(levels.len());
        for &n in &levels {
            if !chain.advance_to(n)? {
                row.push(None);
                continue;
            }
            let observation = match chain.anchored() {
                // Anchor currently in the untracked left tail (FullLeft only).
                Err(Error::Guard(_)) => None,
                Err(e) => return Err(e),
                Ok(view) => match project(&view, r) {
                    Ok(pattern) => Some(pattern),
                    // Too few reliable offsets below the anchor at this level.
                    Err(Error::ProjectionDepth { .. }) => None,
                    Err(e) => return Err(e),
                },
            };
            row.push(observation);
        }
        Ok(row)
    })?;
    let mut rows = Vec::with_capacity(levels.len());
    for (i, &n) in levels.iter().enumerate() {
        let counter = &tally.counters[i];
        let samples = counter.total();
        if samples == 0 {
            return Err(Error::NoData(format!(
                "no surviving sample at level {n}; cannot estimate the conditioned law"
            )));
        }
        let total = samples as f64;
        let empirical = DistributionTable::from_probs(
            counter.iter().map(|(k, c)| (*k, c as f64 / total)),
        )?;
        let tv = tv_distance(&empirical, reference)?;
        // Delta method: TV = sum_k s_k (p_k - q_k) / 2 with s_k the sign of
        // the difference; holding s fixed, Var = (1 - d^2) / (4 samples)
        // where d = sum_k s_k p_hat_k.
        let mut d = 0.0;
        for (k, p_hat) in empirical.iter() {
            let s = if p_hat >= reference.prob(k) { 1.0 } else { -1.0 };
            d += s * p_hat;
        }
        let var = ((1.0 - d * d) / (4.0 * total)).max(0.0);
        let ci_half_width = 1.96 * var.sqrt();
        rows.push(ConvergenceRow { n, tv, ci_half_width, samples, trials });
    }
    let tv_monotone_decreasing = rows.windows(2).all(|w| w[1].tv <= w[0].tv);
    Ok(ConvergenceReport { rows, tv_monotone_decreasing })
}

//! Renewal decomposition of a trial conditioned on reaching a far level.
//!
//! Fix an environment, an initial configuration `A` at level 0 and a target
//! level `n`. Among the occupied sites of level 0 that still have an open
//! path to level `n`, let `X_0` be the rightmost one and set `Y_0 = 0`. The
//! construction then climbs: given `(X_i, Y_i)`, look at the occupied sites
//! of level `Y_i` strictly to the right of `X_i` — these are alive now but
//! doomed to die before level `n` — and follow their descendants upward. Let
//! `Y_{i+1}` be the highest level at which any of those descendants re-enters
//! the backward cone with apex `(X_i, Y_i)` (or `Y_i` if none does), and let
//! `X_{i+1}` be the rightmost occupied site of level `Y_{i+1}` with an open
//! path to level `n`. The pair sequence stabilises at a finite index
//! `I = inf { i : Y_i = Y_{i+1} }`, and the recorded trace keeps the repeated
//! stabilised pair so `I` can be read off as `pairs.len() - 2`.
//!
//! The point of the construction is quantitative: both `I` and the terminal
//! height `Y_I` have exponentially small tails, with `P(Y_I >= m^2)`
//! controlled by `P(I >= m) + (m + 1) e^{-beta m}` for the cone-entry decay
//! rate `beta`. [`tail_statistics`] measures the tails and [`estimate_beta`]
//! fits the two decay rates that calibrate the envelope.

use serde::Serialize;

use crate::anchored::{InitialCondition, ZetaChain};
use crate::bits;
use crate::error::{Error, Result};
use crate::exec::{run_trials, Accumulator};
use crate::lattice::{
    backward_reach, forward_reach, sample_environment, step_forward, BondLayer, BoundaryMode,
    Environment, LevelConfig, SimParams, Window,
};
use crate::rng::{LayerProbabilities, TrialRng};
use crate::stats::{fit_log_linear, Counter, DecayFit, FitPoint};

/// Backward light cone `{ (v, k) : k >= apex_level, |v - apex_x| <= k - apex_level }`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cone {
    pub apex_x: i64,
    pub apex_level: u32,
}

impl Cone {
    pub fn contains(&self, x: i64, level: u32) -> bool {
        level >= self.apex_level
            && (x - self.apex_x).unsigned_abs() <= u64::from(level - self.apex_level)
    }
}

/// The `(X_i, Y_i)` sequence of one reaching trial, including the repeated
/// stabilised pair, so a trace always holds `index() + 2` entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RenewalTrace {
    pairs: Vec<(i64, u32)>,
}

impl RenewalTrace {
    fn new(pairs: Vec<(i64, u32)>) -> RenewalTrace {
        let trace = RenewalTrace { pairs };
        debug_assert!(trace.check_invariants().is_ok());
        trace
    }

    /// The `(X_i, Y_i)` pairs for `i = 0 ..= index() + 1`.
    pub fn pairs(&self) -> &[(i64, u32)] {
        &self.pairs
    }

    /// The stabilisation index `I`.
    pub fn index(&self) -> u32 {
        self.pairs.len() as u32 - 2
    }

    /// The stabilised height `Y_I`.
    pub fn y_terminal(&self) -> u32 {
        self.pairs.last().expect("traces hold at least two pairs").1
    }

    /// Structural checks: the sequence starts at level 0, climbs, ends with
    /// the repeated stabilised pair, and each pair lies in the backward cone
    /// of its predecessor.
    pub fn check_invariants(&self) -> Result<()> {
        if self.pairs.len() < 2 {
            return Err(Error::Guard("a renewal trace holds at least two pairs".into()));
        }
        if self.pairs[0].1 != 0 {
            return Err(Error::Guard(format!(
                "renewal traces start at level 0, found {}",
                self.pairs[0].1
            )));
        }
        let (last, prev) = (self.pairs[self.pairs.len() - 1], self.pairs[self.pairs.len() - 2]);
        if last != prev {
            return Err(Error::Guard("a renewal trace ends with its stabilised pair repeated".into()));
        }
        for win in self.pairs.windows(2) {
            let ((x0, y0), (x1, y1)) = (win[0], win[1]);
            if y1 < y0 {
                return Err(Error::Guard(format!("renewal heights decreased: {y0} -> {y1}")));
            }
            let cone = Cone { apex_x: x0, apex_level: y0 };
            if !cone.contains(x1, y1) {
                return Err(Error::Guard(format!(
                    "pair ({x1}, {y1}) escapes the cone with apex ({x0}, {y0})"
                )));
            }
        }
        Ok(())
    }
}

/// Whether a trial admits the construction at all: trials whose initial
/// configuration has no open path to level `n` carry no trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum TraceOutcome {
    Reaching(RenewalTrace),
    NotReaching,
}

/// Runs the renewal construction on one materialised environment.
///
/// Descendants of the right-of-`X_i` sites are followed through realised
/// bonds only (`Free` boundary), because the construction attributes cone
/// entries to those specific sites; boundary re-seeding is not a descendant
/// of anything.
pub fn compute_trace(
    env: &Environment,
    initial: &InitialCondition,
    n: u32,
) -> Result<TraceOutcome> {
    if n < 1 || n > env.params().n_max {
        return Err(Error::LevelOutOfRange { level: n, max: env.params().n_max });
    }
    let window = env.window();
    let width = window.width;
    let xi = forward_reach(env, &initial.to_level_config(window)?, 0, n)?;
    let back = backward_reach(env, n)?;

    let meet = bits::and(xi[0].words(), back[0].words());
    let Some(idx) = bits::highest_set(&meet) else {
        return Ok(TraceOutcome::NotReaching);
    };
    let mut x = window.origin_at(0) + 2 * idx as i64;
    let mut y: u32 = 0;
    let mut pairs = vec![(x, y)];

    loop {
        // Sites of level y strictly right of x. They are occupied but cannot
        // reach level n (x was the rightmost site that could), so their
        // descendant clusters are finite.
        let x_idx = window
            .index_of(x, y)
            .ok_or_else(|| Error::Guard(format!("renewal anchor {x} left the window at level {y}")))?;
        let mut u_words = xi[y as usize].words().to_vec();
        let mut below = vec![0u64; u_words.len()];
        bits::set_range(&mut below, 0, x_idx, width);
        for (w, b) in u_words.iter_mut().zip(below.iter()) {
            *w &= !b;
        }

        let mut new_y = y;
        if !bits::is_zero(&u_words) {
            let mut cur = LevelConfig::from_words(
                y,
                window.origin_at(y),
                width,
                u_words,
                BoundaryMode::Free,
            );
            for k in y + 1..=n {
                cur = step_forward(&cur, env.layer(k - 1)?)?;
                if cur.is_empty() {
                    break;
                }
                // Slice of the cone with apex (x, y) at level k. Site parity
                // matches the slice bounds automatically, so the index range
                // below is exact.
                let d = i64::from(k - y);
                let origin_k = window.origin_at(k);
                let v_max = x + d;
                if v_max < origin_k {
                    continue;
                }
                let v_min = x - d;
                let lo_idx =
                    if v_min <= origin_k { 0 } else { ((v_min - origin_k) / 2) as usize };
                let hi_idx = (((v_max - origin_k) / 2) as usize).min(width - 1);
                if bits::any_in_range(cur.words(), lo_idx, hi_idx) {
                    new_y = k;
                }
            }
        }

        if new_y == y {
            // Stabilised: record the repeat so I = pairs.len() - 2.
            pairs.push((x, y));
            break;
        }
        let meet = bits::and(xi[new_y as usize].words(), back[new_y as usize].words());
        let idx = bits::highest_set(&meet).ok_or_else(|| {
            // The open path that certified x -> L_n passes through level
            // new_y at a tracked site, so this cannot fire.
            Error::Guard(format!(
                "renewal invariant violated: no site of level {new_y} both occupied and reaching"
            ))
        })?;
        x = window.origin_at(new_y) + 2 * idx as i64;
        y = new_y;
        pairs.push((x, y));
        debug_assert!(pairs.len() <= n as usize + 2);
    }
    Ok(TraceOutcome::Reaching(RenewalTrace::new(pairs)))
}

#[derive(Default)]
struct TraceTally {
    reaching: u64,
    not_reaching: u64,
    i_hist: Counter<u32>,
    y_hist: Counter<u32>,
}

impl Accumulator for TraceTally {
    type Item = Option<(u32, u32)>;

    fn absorb(&mut self, item: Self::Item) {
        match item {
            Some((i, y)) => {
                self.reaching += 1;
                self.i_hist.add(i);
                self.y_hist.add(y);
            }
            None => self.not_reaching += 1,
        }
    }

    fn merge(&mut self, other: Self) {
        self.reaching += other.reaching;
        self.not_reaching += other.not_reaching;
        self.i_hist.merge(other.i_hist);
        self.y_hist.merge(other.y_hist);
    }
}

/// One row of the paired tail table: `P(I >= m)` and `P(Y_I >= m^2)`, both
/// conditional on the trial reaching level `n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailRow {
    pub m: u32,
    pub count_i_ge_m: u64,
    pub p_i_ge_m: f64,
    pub count_yi_ge_m2: u64,
    pub p_yi_ge_m2: f64,
}

/// Tail table of the stabilisation index and terminal height over many
/// trials, with the reaching/not-reaching split made explicit.
#[derive(Clone, Debug, Serialize)]
pub struct TailReport {
    pub n: u32,
    pub trials: u64,
    pub reaching: u64,
    pub not_reaching: u64,
    pub rows: Vec<TailRow>,
}

impl TailReport {
    pub fn not_reaching_rate(&self) -> f64 {
        self.not_reaching as f64 / self.trials as f64
    }
}

/// Monte Carlo tails of `I` and `Y_I` conditional on reaching level `n`.
///
/// The `m` grid runs from 0 to one past the largest observed statistic, so
/// the final rows always exhibit the decay to zero. Errors with `NoData`
/// when no trial reaches level `n` — the conditional law is empty and no
/// amount of post-processing can hide that.
pub fn tail_statistics(
    params: &SimParams,
    initial: &InitialCondition,
    n: u32,
    trials: u64,
    threads: usize,
) -> Result<TailReport> {
    if n < 1 || n > params.n_max {
        return Err(Error::LevelOutOfRange { level: n, max: params.n_max });
    }
    let tally: TraceTally = run_trials(trials, threads, |t| {
        let env = sample_environment(params, t);
        Ok(match compute_trace(&env, initial, n)? {
            TraceOutcome::Reaching(trace) => Some((trace.index(), trace.y_terminal())),
            TraceOutcome::NotReaching => None,
        })
    })?;
    if tally.reaching == 0 {
        return Err(Error::NoData(format!(
            "none of {trials} trials reached level {n}; the conditional renewal law is empty \
             (the reaching probability itself decays exponentially in n)"
        )));
    }

    let max_i = tally.i_hist.iter().map(|(k, _)| *k).max().unwrap_or(0);
    let max_y = tally.y_hist.iter().map(|(k, _)| *k).max().unwrap_or(0);
    let m_stop = (max_i + 1).max(max_y.isqrt() + 1);
    let reaching_f = tally.reaching as f64;
    let rows = (0..=m_stop)
        .map(|m| {
            let count_i: u64 =
                tally.i_hist.iter().filter(|(k, _)| **k >= m).map(|(_, c)| c).sum();
            let thr = u64::from(m) * u64::from(m);
            let count_y: u64 =
                tally.y_hist.iter().filter(|(k, _)| u64::from(**k) >= thr).map(|(_, c)| c).sum();
            TailRow {
                m,
                count_i_ge_m: count_i,
                p_i_ge_m: count_i as f64 / reaching_f,
                count_yi_ge_m2: count_y,
                p_yi_ge_m2: count_y as f64 / reaching_f,
            }
        })
        .collect();
    Ok(TailReport {
        n,
        trials,
        reaching: tally.reaching,
        not_reaching: tally.not_reaching,
        rows,
    })
}

#[derive(Default)]
struct DeathTally {
    deaths: Counter<u32>,
}

impl Accumulator for DeathTally {
    type Item = Option<u32>;

    fn absorb(&mut self, item: Self::Item) {
        if let Some(t) = item {
            self.deaths.add(t);
        }
    }

    fn merge(&mut self, other: Self) {
        self.deaths.merge(other.deaths);
    }
}

/// Empirical survival function of the death time: `survivors[k]` counts the
/// trials still alive strictly after level `k + 1`.
#[derive(Clone, Debug, Serialize)]
pub struct SurvivalCurve {
    pub n_max: u32,
    pub trials: u64,
    pub survivors: Vec<u64>,
}

impl SurvivalCurve {
    /// Number of trials with death time greater than `n`.
    pub fn survivors_past(&self, n: u32) -> u64 {
        if n == 0 {
            self.trials
        } else {
            self.survivors[n as usize - 1]
        }
    }

    /// Points `(n, P_hat(T > n))` for the decay fit; the eligibility count is
    /// the number of surviving trials behind each estimate.
    pub fn fit_points(&self) -> Vec<FitPoint> {
        (1..=self.n_max)
            .map(|n| {
                let s = self.survivors_past(n);
                FitPoint { x: f64::from(n), p_hat: s as f64 / self.trials as f64, count: s }
            })
            .collect()
    }
}

/// Monte Carlo survival curve `P_hat(T > n)` for `n = 1 ..= n_max`.
///
/// Only absorbing initial conditions make sense here: with the boundary-driven
/// `full` start the left fringe re-seeds the window and the chain never dies.
pub fn survival_curve(
    params: &SimParams,
    initial: &InitialCondition,
    trials: u64,
    threads: usize,
) -> Result<SurvivalCurve> {
    if matches!(initial, InitialCondition::Full) {
        return Err(Error::InvalidConfig(
            "survival is degenerate from the full initial condition: the boundary re-seeds the \
             window and the chain never dies; use origin or a finite set"
                .into(),
        ));
    }
    let tally: DeathTally = run_trials(trials, threads, |t| {
        let mut chain = ZetaChain::new(params, t, initial)?;
        while !chain.is_dead() && chain.level() < params.n_max {
            chain.step()?;
        }
        Ok(if chain.is_dead() { Some(chain.level()) } else { None })
    })?;
    let mut survivors = Vec::with_capacity(params.n_max as usize);
    let mut dead = 0u64;
    for n in 1..=params.n_max {
        dead += tally.deaths.get(&n);
        survivors.push(trials - dead);
    }
    Ok(SurvivalCurve { n_max: params.n_max, trials, survivors })
}

#[derive(Default)]
struct EntryTally {
    hist: Counter<u32>,
}

impl Accumulator for EntryTally {
    type Item = Option<u32>;

    fn absorb(&mut self, item: Self::Item) {
        if let Some(m) = item {
            self.hist.add(m);
        }
    }

    fn merge(&mut self, other: Self) {
        self.hist.merge(other.hist);
    }
}

/// Empirical tail of the deepest cone entry: `counts[m - 1]` counts the
/// trials in which sites strictly right of the origin sent a descendant into
/// the cone with apex `(0, 0)` at some level `>= m`.
#[derive(Clone, Debug, Serialize)]
pub struct ConeCurve {
    pub m_max: u32,
    pub trials: u64,
    pub counts: Vec<u64>,
}

impl ConeCurve {
    /// Points `(m, P_hat(deepest entry >= m))` for the decay fit.
    pub fn fit_points(&self) -> Vec<FitPoint> {
        (1..=self.m_max)
            .map(|m| {
                let c = self.counts[m as usize - 1];
                FitPoint { x: f64::from(m), p_hat: c as f64 / self.trials as f64, count: c }
            })
            .collect()
    }
}

/// Measures the cone-entry tail exactly: starts every site `2, 4, ..., 2*m_max`
/// at level 0 and records the deepest level `m <= m_max` at which their joint
/// descendant set meets the cone with apex `(0, 0)`.
///
/// The geometry makes this a faithful simulation of the unbounded system, not
/// a windowed approximation: sites right of `2*m_max` cannot touch the cone
/// within `m_max` levels, descendants never fall below coordinate `2 - m_max`
/// (the window extends past `-(m_max + 2)`), and the right edge sits beyond
/// `3*m_max + 3`, out of reach of every descendant.
pub fn cone_entry_curve(
    p: f64,
    seed: u64,
    trials: u64,
    m_max: u32,
    threads: usize,
) -> Result<ConeCurve> {
    if m_max < 3 {
        return Err(Error::InvalidConfig(format!(
            "cone-entry depth must be at least 3 so the decay fit has enough points, got {m_max}"
        )));
    }
    let probs = LayerProbabilities::new(p)?;
    let window = Window { lo: -2 * ((i64::from(m_max) + 3) / 2), width: 2 * m_max as usize + 4 };
    let sites: Vec<i64> = (1..=i64::from(m_max)).map(|j| 2 * j).collect();
    let tally: EntryTally = run_trials(trials, threads, |t| {
        let mut rng = TrialRng::new(seed, t);
        let mut cur = LevelConfig::from_sites(&window, 0, &sites, BoundaryMode::Free)?;
        let mut deepest: Option<u32> = None;
        for k in 1..=m_max {
            let layer = BondLayer::sample(&window, k - 1, &mut rng, &probs);
            cur = step_forward(&cur, &layer)?;
            if cur.is_empty() {
                break;
            }
            let d = i64::from(k);
            let origin_k = window.origin_at(k);
            let lo_idx = if -d <= origin_k { 0 } else { ((-d - origin_k) / 2) as usize };
            let hi_idx = (((d - origin_k) / 2) as usize).min(window.width - 1);
            if bits::any_in_range(cur.words(), lo_idx, hi_idx) {
                deepest = Some(k);
            }
        }
        Ok(deepest)
    })?;
    let counts = (1..=m_max)
        .map(|m| tally.hist.iter().filter(|(k, _)| **k >= m).map(|(_, c)| c).sum())
        .collect();
    Ok(ConeCurve { m_max, trials, counts })
}

/// The two fitted exponential decay rates, with `beta_* = -slope`.
#[derive(Clone, Debug, Serialize)]
pub struct BetaEstimate {
    pub beta_survival: f64,
    pub beta_cone: f64,
    pub survival: DecayFit,
    pub cone: DecayFit,
}

/// Fits `P(T > n) ~ e^{-beta_survival * n}` (origin start, levels
/// `1 ..= n_max`) and the cone-entry tail `P(entry >= m) ~ e^{-beta_cone * m}`
/// (depths `1 ..= m_max`), each over the points backed by at least
/// `min_count` observations.
pub fn estimate_beta(
    params: &SimParams,
    trials: u64,
    m_max: u32,
    min_count: u64,
    threads: usize,
) -> Result<BetaEstimate> {
    if m_max < 3 {
        return Err(Error::InvalidConfig(format!(
            "cone-entry depth must be at least 3 so the decay fit has enough points, got {m_max}"
        )));
    }
    let curve = survival_curve(params, &InitialCondition::Origin, trials, threads)?;
    let survival = fit_log_linear(&curve.fit_points(), min_count).map_err(|e| {
        Error::Guard(format!("survival-decay fit over levels 1..={}: {e}", params.n_max))
    })?;
    let entries = cone_entry_curve(params.p, params.seed, trials, m_max, threads)?;
    let cone = fit_log_linear(&entries.fit_points(), min_count)
        .map_err(|e| Error::Guard(format!("cone-entry decay fit over depths 1..={m_max}: {e}")))?;
    Ok(BetaEstimate { beta_survival: -survival.slope, beta_cone: -cone.slope, survival, cone })
}

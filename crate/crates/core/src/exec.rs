//! Sequential and parallel driving of independent Monte Carlo trials.
//!
//! Each trial is a pure function of its index (randomness comes from the
//! trial's own stream), and every aggregate is built from commutative,
//! associative integer merges. Results are therefore identical — bit for bit
//! — whether trials run on one thread or many, in any order.
//!
//! With the `parallel` feature disabled the same API runs everything
//! sequentially; `threads` is then ignored.

use crate::error::{Error, Result};

/// An aggregate that can absorb per-trial items and merge with peers.
///
/// Correctness contract: `absorb` and `merge` must commute (integer counters
/// do; floating-point accumulation does not, so keep floats out of
/// accumulators and derive them from final counts instead).
pub trait Accumulator: Default + Send {
    type Item: Send;

    fn absorb(&mut self, item: Self::Item);
    fn merge(&mut self, other: Self);
}

/// Runs `trials` independent trials and folds their items into an
/// accumulator. `threads == 1` forces the sequential path; `threads == 0`
/// lets the runtime pick a parallelism level.
///
/// If any trial fails, the error from the lowest-indexed failing trial is
/// returned, so failures too are independent of scheduling.
pub fn run_trials<A, F>(trials: u64, threads: usize, trial_fn: F) -> Result<A>
where
    A: Accumulator,
    F: Fn(u64) -> Result<A::Item> + Sync,
{
    if trials == 0 {
        return Ok(A::default());
    }
    #[cfg(feature = "parallel")]
    {
        if threads == 1 {
            run_sequential(trials, trial_fn)
        } else {
            run_parallel(trials, threads, trial_fn)
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        run_sequential(trials, trial_fn)
    }
}

fn run_sequential<A, F>(trials: u64, trial_fn: F) -> Result<A>
where
    A: Accumulator,
    F: Fn(u64) -> Result<A::Item>,
{
    let mut acc = A::default();
    for t in 0..trials {
        acc.absorb(trial_fn(t)?);
    }
    Ok(acc)
}

#[cfg(feature = "parallel")]
fn run_parallel<A, F>(trials: u64, threads: usize, trial_fn: F) -> Result<A>
where
    A: Accumulator,
    F: Fn(u64) -> Result<A::Item> + Sync,
{
    use rayon::prelude::*;

    struct Partial<A> {
        acc: A,
        // Lowest failing trial index and its error, if any.
        err: Option<(u64, Error)>,
    }

    impl<A: Accumulator> Default for Partial<A> {
        fn default() -> Self {
            Partial { acc: A::default(), err: None }
        }
    }

    fn keep_earlier(cur: &mut Option<(u64, Error)>, new: Option<(u64, Error)>) {
        if let Some((t, e)) = new {
            match cur {
                Some((t0, _)) if *t0 <= t => {}
                _ => *cur = Some((t, e)),
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))?;

    // usize indexing keeps the range an indexed parallel iterator, which
    // `with_min_len` needs to batch tiny trials into sane work units.
    let trials = usize::try_from(trials)
        .map_err(|_| Error::InvalidConfig(format!("{trials} trials exceed this platform")))?;

    let partial: Partial<A> = pool.install(|| {
        (0..trials)
            .into_par_iter()
            .with_min_len(64)
            .fold(Partial::default, |mut part: Partial<A>, t| {
                let t = t as u64;
                if part.err.as_ref().is_none_or(|&(t0, _)| t < t0) {
                    match trial_fn(t) {
                        Ok(item) => part.acc.absorb(item),
                        Err(e) => keep_earlier(&mut part.err, Some((t, e))),
                    }
                }
                part
            })
            .reduce(Partial::default, |mut a, b| {
                a.acc.merge(b.acc);
                keep_earlier(&mut a.err, b.err);
                a
            })
    });

    match partial.err {
        Some((_, e)) => Err(e),
        None => Ok(partial.acc),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Counter;

    #[derive(Debug, Default)]
    struct Tally {
        counter: Counter<u64>,
        sum: u64,
    }

    impl Accumulator for Tally {
        type Item = u64;

        fn absorb(&mut self, item: u64) {
            self.counter.add(item % 7);
            self.sum += item;
        }

        fn merge(&mut self, other: Self) {
            self.counter.merge(other.counter);
            self.sum += other.sum;
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let f = |t: u64| Ok(t.wrapping_mul(2_654_435_761) % 1000);
        let seq: Tally = run_trials(10_000, 1, f).unwrap();
        for threads in [0, 2, 4, 8] {
            let par: Tally = run_trials(10_000, threads, f).unwrap();
            assert_eq!(par.sum, seq.sum, "threads = {threads}");
            for k in 0..7 {
                assert_eq!(par.counter.get(&k), seq.counter.get(&k));
            }
        }
    }

    #[test]
    fn zero_trials_yields_default() {
        let acc: Tally = run_trials(0, 4, Ok).unwrap();
        assert_eq!(acc.sum, 0);
        assert!(acc.counter.is_empty());
    }

    #[test]
    fn earliest_error_wins_regardless_of_threads() {
        let f = |t: u64| {
            if t >= 137 {
                Err(Error::Guard(format!("trial {t}")))
            } else {
                Ok(t)
            }
        };
        for threads in [1, 2, 8] {
            let res: Result<Tally> = run_trials(10_000, threads, f);
            match res {
                Err(Error::Guard(msg)) => assert_eq!(msg, "trial 137", "threads = {threads}"),
                other => panic!("expected guard error, got {other:?}"),
            }
        }
    }
}

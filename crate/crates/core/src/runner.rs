//! Job execution for independent (seed, variant) runs.
//!
//! Each run owns its model state and is fully deterministic, so results
//! depend only on the job description, never on scheduling. Both runners
//! return results in input order, which keeps reports byte-identical
//! whether or not the `parallel` feature is active.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps jobs sequentially on the calling thread.
pub fn map_jobs_sequential<I, O, F>(jobs: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    jobs.iter().map(f).collect()
}

/// Maps jobs across the rayon pool; output order matches input order.
#[cfg(feature = "parallel")]
pub fn map_jobs_parallel<I, O, F>(jobs: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    jobs.par_iter().map(f).collect()
}

/// Dispatches to the parallel runner when the feature is enabled, the
/// sequential fallback otherwise.
#[cfg(feature = "parallel")]
pub fn map_jobs<I, O, F>(jobs: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    map_jobs_parallel(jobs, f)
}

/// Sequential fallback used when the `parallel` feature is disabled.
#[cfg(not(feature = "parallel"))]
pub fn map_jobs<I, O, F>(jobs: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    map_jobs_sequential(jobs, f)
}

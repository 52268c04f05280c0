//! Deterministic parallel execution.
//!
//! Jobs run on a fixed-size work-stealing pool, each with its own random
//! stream derived from the master seed and the job index, and results come
//! back in job order. The worker count therefore never changes results.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::meta::job_rng;

pub struct Runner {
    workers: usize,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Runner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runner").field("workers", &self.workers).finish()
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

impl Runner {
    /// `workers == 1` runs inline on the calling thread.
    pub fn new(workers: usize) -> Result<Self, String> {
        if workers == 0 {
            return Err("workers must be at least 1".into());
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| e.to_string())?,
            )
        } else {
            None
        };
        Ok(Self { workers, pool })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Runs `f(0..n)`; a panicking job yields `Err` with its message.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<Result<T, String>>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        let run = |i: usize| catch_unwind(AssertUnwindSafe(|| f(i))).map_err(panic_message);
        match &self.pool {
            None => (0..n).map(run).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(run).collect()),
        }
    }
}

/// Runs `n_jobs` jobs, job `i` receiving the stream keyed by
/// `(master_seed, i)`.
pub fn run_parallel<T, F>(n_jobs: usize, workers: usize, master_seed: u64, f: F) -> Result<Vec<Result<T, String>>, String>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync,
{
    let runner = Runner::new(workers)?;
    Ok(runner.map(n_jobs, |i| {
        let mut rng = job_rng(master_seed, &[i as u64]);
        f(i, &mut rng)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn worker_count_does_not_change_results() {
        let job = |i: usize, rng: &mut ChaCha8Rng| (i, rng.gen::<u64>());
        let a = run_parallel(50, 1, 9, job).unwrap();
        let b = run_parallel(50, 4, 9, job).unwrap();
        assert_eq!(a, b);
        let c = run_parallel(50, 1, 10, job).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_and_failing_jobs() {
        let none: Vec<Result<u8, String>> = run_parallel(0, 2, 0, |_, _| 1u8).unwrap();
        assert!(none.is_empty());
        let out = run_parallel(3, 2, 0, |i, _| {
            if i == 1 {
                panic!("job one failed");
            }
            i
        })
        .unwrap();
        assert_eq!(out[0], Ok(0));
        assert_eq!(out[1], Err("job one failed".to_string()));
        assert_eq!(out[2], Ok(2));
        assert!(Runner::new(0).is_err());
    }
}

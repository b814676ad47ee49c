//! Scoped-thread executor for independent jobs.

use tokenmixer_core::parallel::{DeviceExecutor, Sequential};
use tokenmixer_core::Result;

/// Runs job `i` on worker `i % threads`; results come back in job order and
/// the lowest-index error wins, so output does not depend on scheduling.
#[derive(Clone, Copy, Debug)]
pub struct Threaded {
    pub threads: usize,
}

impl DeviceExecutor for Threaded {
    fn run<T, F>(&self, jobs: usize, step: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        let threads = self.threads.clamp(1, jobs.max(1));
        if threads == 1 {
            return Sequential.run(jobs, step);
        }
        let step = &step;
        let parts: Vec<Vec<(usize, Result<T>)>> = std::thread::scope(|s| {
            let workers: Vec<_> = (0..threads)
                .map(|t| s.spawn(move || (t..jobs).step_by(threads).map(|i| (i, step(i))).collect::<Vec<_>>()))
                .collect();
            workers
                .into_iter()
                .map(|w| w.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect()
        });
        let mut slots: Vec<Option<Result<T>>> = (0..jobs).map(|_| None).collect();
        for (i, r) in parts.into_iter().flatten() {
            slots[i] = Some(r);
        }
        slots.into_iter().map(|r| r.expect("every job index is assigned to one worker")).collect()
    }
}

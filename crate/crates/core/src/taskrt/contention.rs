//! Oversubscription model used in virtual time.
//!
//! Runnable OS threads share the cores as a fluid. While there are no
//! more runnable threads than cores each one progresses at full speed.
//! Beyond that every excess thread costs `switch_penalty` of core time per
//! `quantum`, and the remaining capacity is split evenly.

use crate::time::VTime;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentionModel {
    pub cores: usize,
    pub quantum: VTime,
    pub switch_penalty: VTime,
    /// Floor on useful capacity as a fraction of `cores`.
    pub min_efficiency: f64,
}

impl ContentionModel {
    pub fn new(cores: usize) -> Self {
        ContentionModel {
            cores,
            quantum: VTime::units(1),
            switch_penalty: VTime::from_units(0.2),
            min_efficiency: 0.1,
        }
    }

    /// Useful core capacity with `runnable` threads competing.
    pub fn capacity(&self, runnable: usize) -> f64 {
        let cores = self.cores as f64;
        if runnable <= self.cores {
            return runnable as f64;
        }
        let excess = (runnable - self.cores) as f64;
        let lost = excess * self.switch_penalty.0 as f64 / self.quantum.0 as f64;
        (cores - lost).max(self.min_efficiency * cores)
    }

    /// Progress rate of each runnable thread (work units per time unit).
    pub fn rate(&self, runnable: usize) -> f64 {
        if runnable <= self.cores {
            1.0
        } else {
            self.capacity(runnable) / runnable as f64
        }
    }

    /// Makespan of `pools` pools of `threads` threads each, every thread
    /// running `rounds` items of length `cost` back to back, with the
    /// substrate idle. All threads stay runnable for the whole run.
    pub fn uniform_pools_makespan(&self, pools: usize, threads: usize, rounds: u64, cost: VTime) -> f64 {
        let runnable = pools * threads;
        (rounds as f64) * cost.0 as f64 / self.rate(runnable) / crate::time::TICKS_PER_UNIT as f64
    }
}

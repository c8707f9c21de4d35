//! Power-of-two staircase schedule for regularisation steps.
//!
//! Training is split into equal stages, one per power of two between the initial and
//! final period. Stage `s` regularises every `initial / 2^s` iterations.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurriculumSchedule {
    initial_period: usize,
    final_period: usize,
    total_iterations: usize,
}

/// One row of a schedule preview.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageInfo {
    pub stage: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub period: usize,
    pub regularized_steps: usize,
    pub cumulative_steps: usize,
}

impl CurriculumSchedule {
    pub fn new(initial_period: usize, final_period: usize, total_iterations: usize) -> Result<Self> {
        if !initial_period.is_power_of_two() || !final_period.is_power_of_two() {
            return Err(Error::Config(format!(
                "schedule periods must be powers of two, got {initial_period} -> {final_period}"
            )));
        }
        if final_period > initial_period {
            return Err(Error::Config(format!(
                "final period {final_period} exceeds initial period {initial_period}"
            )));
        }
        if total_iterations == 0 {
            return Err(Error::Config("total_iterations must be positive".into()));
        }
        Ok(Self {
            initial_period,
            final_period,
            total_iterations,
        })
    }

    /// Single-stage schedule at a fixed period.
    pub fn constant(period: usize, total_iterations: usize) -> Result<Self> {
        Self::new(period, period, total_iterations)
    }

    pub fn initial_period(&self) -> usize {
        self.initial_period
    }

    pub fn final_period(&self) -> usize {
        self.final_period
    }

    pub fn total_iterations(&self) -> usize {
        self.total_iterations
    }

    pub fn n_stages(&self) -> usize {
        (self.initial_period / self.final_period).trailing_zeros() as usize + 1
    }

    /// Stage `s` covers `[ceil(s T / S), ceil((s + 1) T / S))`.
    pub fn stage_bounds(&self, stage: usize) -> (usize, usize) {
        let (s, t) = (self.n_stages(), self.total_iterations);
        let start = (stage * t).div_ceil(s);
        let end = ((stage + 1) * t).div_ceil(s);
        (start, end)
    }

    pub fn stage_of(&self, iteration: usize) -> usize {
        (iteration * self.n_stages() / self.total_iterations).min(self.n_stages() - 1)
    }

    pub fn period_at(&self, iteration: usize) -> usize {
        self.initial_period >> self.stage_of(iteration)
    }

    pub fn is_reg_step(&self, iteration: usize) -> bool {
        iteration % self.period_at(iteration) == 0
    }

    /// Per-stage counts from the stage bounds; no enumeration.
    pub fn stages(&self) -> Vec<StageInfo> {
        let mut cumulative = 0;
        (0..self.n_stages())
            .map(|stage| {
                let (start, end) = self.stage_bounds(stage);
                let period = self.initial_period >> stage;
                let count = end.div_ceil(period) - start.div_ceil(period);
                cumulative += count;
                StageInfo {
                    stage,
                    start,
                    end,
                    period,
                    regularized_steps: count,
                    cumulative_steps: cumulative,
                }
            })
            .collect()
    }

    pub fn regularized_step_count(&self) -> usize {
        self.stages().last().map_or(0, |s| s.cumulative_steps)
    }

    /// Extra work relative to an unregularised run when a regularised step costs
    /// `extra_cost` additional plain steps.
    pub fn overhead_fraction(&self, extra_cost: f64) -> f64 {
        self.regularized_step_count() as f64 * extra_cost / self.total_iterations as f64
    }
}

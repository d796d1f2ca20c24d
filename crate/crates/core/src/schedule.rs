//! The time-varying component budget: warm-up plateau, cubic decrement,
//! final plateau.
//!
//! Budgets are real-valued averages of components per adapted site;
//! discretization to a global cap happens only in [`BudgetSchedule::allowed_total`].
//!
//! Two middle-branch variants are provided. `Canonical` (the default) is
//! the standard cubic decay
//! `b(t) = bT + (b0 - bT) * (1 - (t - t_i) / (T - t_f - t_i))^3`,
//! which is continuous at `t_i` and reaches `bT` exactly at `T - t_f`.
//! `Literal` keeps an alternative form,
//! `b(t) = b0 - (b0 - bT)/b0 * ((t - t_i) / (t_f - t_i))^3`,
//! whose decrement is scaled by `1/b0` and normalized by `t_f - t_i`; it
//! does not meet the final plateau continuously and is retained only for
//! comparison.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleMode {
    Canonical,
    Literal,
}

impl ScheduleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleMode::Canonical => "canonical",
            ScheduleMode::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(ScheduleMode::Canonical),
            "literal" => Ok(ScheduleMode::Literal),
            other => Err(Error::Config(format!(
                "schedule_mode must be `canonical` or `literal`, got `{other}`"
            ))),
        }
    }
}

/// The pruning timetable: (b0, bT, t_i, t_f, T, mode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSchedule {
    /// Initial budget (components per site).
    pub b0: f64,
    /// Final budget.
    pub b_final: f64,
    /// Warm-up length: no pruning for t < t_i.
    pub t_i: usize,
    /// Final-phase length: distribution fixed for t > T - t_f.
    pub t_f: usize,
    /// Total steps.
    pub total_steps: usize,
    pub mode: ScheduleMode,
}

impl BudgetSchedule {
    pub fn new(
        b0: f64,
        b_final: f64,
        t_i: usize,
        t_f: usize,
        total_steps: usize,
        mode: ScheduleMode,
    ) -> Result<Self> {
        if !(b0.is_finite() && b_final.is_finite()) || b_final < 0.0 || b0 < b_final {
            return Err(Error::Config(format!(
                "budgets must satisfy b0 >= b_final >= 0, got b0 = {b0}, b_final = {b_final}"
            )));
        }
        if t_f > total_steps {
            return Err(Error::Config(format!(
                "t_f ({t_f}) exceeds total steps ({total_steps})"
            )));
        }
        if t_i > total_steps - t_f {
            return Err(Error::Config(format!(
                "t_i ({t_i}) exceeds total_steps - t_f ({})",
                total_steps - t_f
            )));
        }
        Ok(BudgetSchedule {
            b0,
            b_final,
            t_i,
            t_f,
            total_steps,
            mode,
        })
    }

    /// Budget at step t; errors outside [0, T].
    pub fn budget_at(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::Contract(format!(
                "budget_at({t}) outside [0, {}]",
                self.total_steps
            )));
        }
        if t < self.t_i {
            return Ok(self.b0);
        }
        let plateau_start = self.total_steps - self.t_f;
        if t > plateau_start {
            return Ok(self.b_final);
        }
        match self.mode {
            ScheduleMode::Canonical => {
                let span = plateau_start - self.t_i;
                if span == 0 {
                    return Ok(self.b_final);
                }
                let progress = (t - self.t_i) as f64 / span as f64;
                let remaining = (1.0 - progress).powi(3);
                Ok(self.b_final + (self.b0 - self.b_final) * remaining)
            }
            ScheduleMode::Literal => {
                let span = self.t_f.saturating_sub(self.t_i);
                if span == 0 {
                    return Ok(self.b_final);
                }
                let ratio = (t - self.t_i) as f64 / span as f64;
                Ok(self.b0 - (self.b0 - self.b_final) / self.b0 * ratio.powi(3))
            }
        }
    }

    /// Global cap on active components: floor(budget * site count).
    pub fn allowed_total(&self, t: usize, num_sites: usize) -> Result<usize> {
        debug_assert!(num_sites >= 1);
        Ok((self.budget_at(t)? * num_sites as f64).floor() as usize)
    }

    /// First step of the fixed-distribution plateau.
    pub fn freeze_step(&self) -> usize {
        self.total_steps - self.t_f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(mode: ScheduleMode) -> BudgetSchedule {
        BudgetSchedule::new(6.0, 4.0, 10, 50, 100, mode).unwrap()
    }

    #[test]
    fn plateaus_are_exact() {
        for mode in [ScheduleMode::Canonical, ScheduleMode::Literal] {
            let s = sched(mode);
            assert_eq!(s.budget_at(0).unwrap(), 6.0);
            assert_eq!(s.budget_at(9).unwrap(), 6.0);
            assert_eq!(s.budget_at(51).unwrap(), 4.0);
            assert_eq!(s.budget_at(100).unwrap(), 4.0);
        }
    }

    #[test]
    fn canonical_midpoint_hand_value() {
        // b(30) = 4 + 2 * (1 - 20/40)^3 = 4.25
        let s = sched(ScheduleMode::Canonical);
        assert!((s.budget_at(30).unwrap() - 4.25).abs() < 1e-12);
    }

    #[test]
    fn canonical_is_continuous_at_warmup_end_and_reaches_final() {
        let s = sched(ScheduleMode::Canonical);
        assert_eq!(s.budget_at(s.t_i).unwrap(), 6.0);
        assert_eq!(s.budget_at(s.freeze_step()).unwrap(), 4.0);
    }

    #[test]
    fn literal_middle_branch_as_printed() {
        let s = sched(ScheduleMode::Literal);
        // b(30) = 6 - (2/6) * ((30-10)/(50-10))^3 = 6 - (1/3) * 0.125
        let expected = 6.0 - (2.0 / 6.0) * (20.0f64 / 40.0).powi(3);
        assert!((s.budget_at(30).unwrap() - expected).abs() < 1e-12);
        // The literal branch does not reach the final plateau value.
        assert!(s.budget_at(s.freeze_step()).unwrap() > s.b_final);
    }

    #[test]
    fn monotone_non_increasing_over_full_grid_both_modes() {
        for mode in [ScheduleMode::Canonical, ScheduleMode::Literal] {
            let s = sched(mode);
            let mut prev = f64::INFINITY;
            for t in 0..=s.total_steps {
                let b = s.budget_at(t).unwrap();
                assert!(b <= prev + 1e-15, "mode {mode:?} rises at t = {t}");
                prev = b;
            }
        }
    }

    #[test]
    fn allowed_total_floors_the_product() {
        let s = sched(ScheduleMode::Canonical);
        assert_eq!(s.allowed_total(30, 6).unwrap(), 25); // floor(4.25 * 6)
        assert_eq!(s.allowed_total(0, 6).unwrap(), 36);
        assert_eq!(s.allowed_total(100, 6).unwrap(), 24);
    }

    #[test]
    fn out_of_range_step_is_a_contract_error() {
        let s = sched(ScheduleMode::Canonical);
        assert!(matches!(s.budget_at(101), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_shapes_are_config_errors() {
        assert!(BudgetSchedule::new(2.0, 4.0, 0, 0, 10, ScheduleMode::Canonical).is_err());
        assert!(BudgetSchedule::new(4.0, 2.0, 8, 5, 10, ScheduleMode::Canonical).is_err());
        assert!(BudgetSchedule::new(4.0, 2.0, 0, 11, 10, ScheduleMode::Canonical).is_err());
        assert!(BudgetSchedule::new(4.0, -1.0, 0, 0, 10, ScheduleMode::Canonical).is_err());
    }

    #[test]
    fn degenerate_middle_phase_returns_final_budget() {
        let s = BudgetSchedule::new(6.0, 4.0, 50, 50, 100, ScheduleMode::Canonical).unwrap();
        assert_eq!(s.budget_at(50).unwrap(), 4.0);
    }
}

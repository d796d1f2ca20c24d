//! Paired-configuration experiment suites, each run over several seeds.
//!
//! Suites: `dem` (variance penalty on vs off), `initial-budget` (same
//! final budget, varying starting budget), `uniform-vs-adaptive` (gated
//! components with pruning vs a fixed-rank control of equal final size).
//! Within one seed every arm shares the dataset and the frozen base, so
//! arms differ only in the ablated knob.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tasks::{build_task, evaluate, TaskKind};
use crate::train::{fit, AdapterKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Dem,
    InitialBudget,
    UniformVsAdaptive,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Dem => "dem",
            Suite::InitialBudget => "initial-budget",
            Suite::UniformVsAdaptive => "uniform-vs-adaptive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dem" => Ok(Suite::Dem),
            "initial-budget" => Ok(Suite::InitialBudget),
            "uniform-vs-adaptive" => Ok(Suite::UniformVsAdaptive),
            other => Err(Error::Config(format!(
                "unknown suite `{other}`; expected dem, initial-budget, or uniform-vs-adaptive"
            ))),
        }
    }
}

/// One (arm, seed) outcome as metric/value pairs.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct SuiteSummary {
    pub suite: Suite,
    pub runs: Vec<ArmRun>,
    pub arms: Vec<String>,
}

impl SuiteSummary {
    pub fn arm_values(&self, arm: &str, metric: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.arm == arm)
            .filter_map(|r| {
                r.metrics
                    .iter()
                    .find(|(name, _)| name == metric)
                    .map(|(_, v)| *v)
            })
            .collect()
    }

    pub fn arm_mean(&self, arm: &str, metric: &str) -> Option<f64> {
        let values = self.arm_values(arm, metric);
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    /// Long-form CSV: per-seed rows first, then per-arm mean rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,metric,value\n");
        for run in &self.runs {
            for (metric, value) in &run.metrics {
                out.push_str(&format!("{},{},{},{}\n", run.arm, run.seed, metric, value));
            }
        }
        let metrics: Vec<String> = self
            .runs
            .first()
            .map(|r| r.metrics.iter().map(|(m, _)| m.clone()).collect())
            .unwrap_or_default();
        for arm in &self.arms {
            for metric in &metrics {
                if let Some(mean) = self.arm_mean(arm, metric) {
                    out.push_str(&format!("{arm},mean,{metric},{mean}\n"));
                }
            }
        }
        out
    }
}

/// The configurations a suite compares, before seeding.
pub fn arm_configs(suite: Suite, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match suite {
        Suite::Dem => {
            let eta_on = if base.eta > 0.0 { base.eta } else { 0.3 };
            let mut with_dem = base.clone();
            with_dem.eta = eta_on;
            let mut without = base.clone();
            without.eta = 0.0;
            vec![
                (format!("dem_eta={eta_on}"), with_dem),
                ("no_dem_eta=0".to_string(), without),
            ]
        }
        Suite::InitialBudget => {
            // Starting budgets at 1x, 1.5x, 2x, 3x, 4x the final budget;
            // with b_final = 2 that is 2, 3, 4, 6, 8.
            [1.0, 1.5, 2.0, 3.0, 4.0]
                .into_iter()
                .map(|mult| {
                    let mut cfg = base.clone();
                    cfg.b0 = (mult * base.b_final * 2.0).round() / 2.0;
                    (format!("b0={}", cfg.b0), cfg)
                })
                .collect()
        }
        Suite::UniformVsAdaptive => {
            let mut dora = base.clone();
            dora.adapter = AdapterKind::Dora;
            let mut lora = base.clone();
            lora.adapter = AdapterKind::Lora;
            lora.lora_rank = base.b_final.round().max(1.0) as usize;
            vec![
                ("dora_adaptive".to_string(), dora),
                (format!("lora_uniform_r={}", lora.lora_rank), lora),
            ]
        }
    }
}

/// Mean entry variance of surviving (active) components' factors.
pub fn surviving_component_variance(model: &Model) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for site in model.dora_sites() {
        for comp in &site.components {
            if comp.active {
                total += comp.a.value.population_variance() + comp.b.value.population_variance();
                count += 1;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Runs every arm over `num_seeds` consecutive seeds starting at the
/// base config's seed.
pub fn run_suite(suite: Suite, base: &TrainConfig, num_seeds: u64) -> Result<SuiteSummary> {
    let arms = arm_configs(suite, base);
    let mut runs = Vec::new();
    for (name, arm_cfg) in &arms {
        for offset in 0..num_seeds {
            let mut cfg = arm_cfg.clone();
            cfg.seed = base.seed + offset;
            let task = build_task(&cfg)?;
            let outcome = fit(&cfg, &task)?;
            let metrics = evaluate(&outcome.model, &task.data.valid, cfg.batch_size)?;
            let mut entries = vec![("final_valid_loss".to_string(), metrics.loss)];
            if let Some(acc) = metrics.accuracy {
                entries.push(("final_valid_accuracy".to_string(), acc));
            }
            if let Some(var) = surviving_component_variance(&outcome.model) {
                entries.push(("surviving_variance".to_string(), var));
            }
            if cfg.task == TaskKind::Teacher {
                entries.push((
                    "final_active_components".to_string(),
                    outcome.model.active_components() as f64,
                ));
            }
            runs.push(ArmRun {
                arm: name.clone(),
                seed: cfg.seed,
                metrics: entries,
            });
        }
    }
    Ok(SuiteSummary {
        suite,
        runs,
        arms: arms.into_iter().map(|(n, _)| n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dem_suite_has_exactly_two_arms() {
        let base = TrainConfig::for_steps(100);
        let arms = arm_configs(Suite::Dem, &base);
        assert_eq!(arms.len(), 2);
        assert!(arms[0].1.eta > 0.0);
        assert_eq!(arms[1].1.eta, 0.0);
    }

    #[test]
    fn initial_budget_arms_scale_the_final_budget() {
        let base = TrainConfig::for_steps(100); // b_final = 2
        let arms = arm_configs(Suite::InitialBudget, &base);
        let budgets: Vec<f64> = arms.iter().map(|(_, c)| c.b0).collect();
        assert_eq!(budgets, vec![2.0, 3.0, 4.0, 6.0, 8.0]);
        assert!(arms.iter().all(|(_, c)| c.b_final == 2.0));
    }

    #[test]
    fn uniform_arm_uses_fixed_rank_equal_to_final_budget() {
        let base = TrainConfig::for_steps(100);
        let arms = arm_configs(Suite::UniformVsAdaptive, &base);
        assert_eq!(arms.len(), 2);
        assert_eq!(arms[0].1.adapter, AdapterKind::Dora);
        assert_eq!(arms[1].1.adapter, AdapterKind::Lora);
        assert_eq!(arms[1].1.lora_rank, 2);
    }

    #[test]
    fn suite_names_round_trip() {
        for suite in [Suite::Dem, Suite::InitialBudget, Suite::UniformVsAdaptive] {
            assert_eq!(Suite::parse(suite.as_str()).unwrap(), suite);
        }
        assert!(Suite::parse("nope").is_err());
    }
}

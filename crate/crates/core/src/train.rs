//! The end-to-end training loop: minibatch loss, backprop, optimizer
//! update, importance scoring, budget scheduling, pruning.
//!
//! Step order within one step is fixed: forward and losses, backward,
//! optimizer update, restore checks, scoring and EMA update, then (on
//! prune events) budget enforcement, and finally gradient zeroing. Scores
//! therefore always describe the post-update state.
//!
//! Pruning events fire every `prune_interval` steps once the warm-up has
//! ended, with one forced event at `T - t_f` that pins the final
//! distribution: from there on, gates of inactive components are held at
//! zero so the active set cannot change during the last phase.

use serde::{Deserialize, Serialize};

use crate::allocator::{allocation_report, enforce_budget, AllocationReport, PruneDecision};
use crate::dem::{combined_loss, dem_loss};
use crate::dora::MatrixKind;
use crate::error::{Error, Result};
use crate::model::{Model, ModelNodes, TrainScope, TransformerConfig};
use crate::numerics::{Matrix, Node, Tape};
use crate::rng::Rng;
use crate::schedule::{BudgetSchedule, ScheduleMode};
use crate::scoring::score_and_smooth;
use crate::tasks::{Dataset, Targets, Task, TaskKind};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!(
                "optimizer must be `adam` or `sgd`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterKind {
    /// Gated rank-1 components with budget pruning.
    Dora,
    /// Uniform fixed-rank control arm.
    Lora,
    /// No adapters; base model only (evaluation or full fine-tuning).
    None,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Dora => "dora",
            AdapterKind::Lora => "lora",
            AdapterKind::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dora" => Ok(AdapterKind::Dora),
            "lora" => Ok(AdapterKind::Lora),
            "none" => Ok(AdapterKind::None),
            other => Err(Error::Config(format!(
                "adapter must be `dora`, `lora`, or `none`, got `{other}`"
            ))),
        }
    }
}

/// Every knob of a run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    // Model dimensions.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub base_seed: u64,

    // Task selection.
    pub task: TaskKind,
    pub train_examples: usize,
    pub valid_examples: usize,
    pub teacher_default_rank: usize,
    pub teacher_high_rank: usize,
    pub teacher_high_layer: usize,
    pub teacher_high_kind: MatrixKind,
    pub teacher_magnitude: f64,
    pub label_noise: f64,
    pub classes: usize,
    pub difficulty: f64,

    // Adapter choice.
    pub adapter: AdapterKind,
    pub lora_rank: usize,

    // Budget schedule.
    pub b0: f64,
    pub b_final: f64,
    pub t_i: usize,
    pub t_f: usize,
    pub prune_interval: usize,
    pub schedule_mode: ScheduleMode,

    // Optimization.
    pub gamma: f64,
    pub eta: f64,
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub pretrain_steps: usize,
}

impl TrainConfig {
    /// Defaults sized so a full run takes seconds on one core. Derived
    /// fields follow the fixed ratios: t_i = 15% and t_f = 50% of steps,
    /// b0 = 1.5 x b_final.
    pub fn for_steps(steps: usize) -> Self {
        let b_final = 2.0;
        TrainConfig {
            d: 16,
            heads: 2,
            layers: 3,
            d_ff: 32,
            seq_len: 8,
            input_dim: 16,
            output_dim: 8,
            base_seed: 7,
            task: TaskKind::Teacher,
            train_examples: 256,
            valid_examples: 64,
            teacher_default_rank: 1,
            teacher_high_rank: 6,
            teacher_high_layer: 1,
            teacher_high_kind: MatrixKind::Query,
            teacher_magnitude: 1.0,
            label_noise: 0.01,
            classes: 2,
            difficulty: 0.5,
            adapter: AdapterKind::Dora,
            lora_rank: b_final as usize,
            b0: 1.5 * b_final,
            b_final,
            t_i: (steps * 15).div_ceil(100),
            t_f: (steps * 50).div_ceil(100),
            prune_interval: 10,
            schedule_mode: ScheduleMode::Canonical,
            gamma: 2e-3,
            eta: 0.3,
            beta: 0.9,
            steps,
            batch_size: 8,
            seed: 1,
            optimizer: OptimizerKind::Adam,
            pretrain_steps: 0,
        }
    }

    pub fn model_config(&self) -> TransformerConfig {
        TransformerConfig {
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff,
            n_max: self.seq_len,
            input_dim: self.input_dim,
            output_dim: match self.task {
                TaskKind::Classification => self.classes,
                TaskKind::Teacher => self.output_dim,
            },
        }
    }

    /// Initial components per site.
    pub fn r_prime(&self) -> usize {
        self.b0.ceil() as usize
    }

    pub fn schedule(&self) -> Result<BudgetSchedule> {
        BudgetSchedule::new(
            self.b0,
            self.b_final,
            self.t_i,
            self.t_f,
            self.steps,
            self.schedule_mode,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "beta must lie in [0, 1), got {}",
                self.beta
            )));
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.prune_interval == 0 {
            return Err(Error::Config("prune_interval must be >= 1".into()));
        }
        if self.train_examples == 0 || self.valid_examples == 0 {
            return Err(Error::Config(
                "train_examples and valid_examples must be >= 1".into(),
            ));
        }
        if self.adapter == AdapterKind::Dora && self.r_prime() == 0 {
            return Err(Error::Config("b0 must be >= 1 for dora runs".into()));
        }
        if self.adapter == AdapterKind::Lora && self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be >= 1 for lora runs".into()));
        }
        if self.task == TaskKind::Classification && self.classes < 2 {
            return Err(Error::Config(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.pretrain_steps > 0 && self.task != TaskKind::Classification {
            return Err(Error::Config(
                "pretrain_steps requires task = classification".into(),
            ));
        }
        self.schedule()?;
        if self.task == TaskKind::Teacher {
            let mc = self.model_config();
            for (name, rank) in [
                ("teacher_default_rank", self.teacher_default_rank),
                ("teacher_high_rank", self.teacher_high_rank),
            ] {
                let (d_in, d_out) = self.teacher_high_kind.dims(mc.d, mc.d_ff);
                let max = d_in.min(d_out).min(mc.d);
                if rank > max {
                    return Err(Error::Config(format!(
                        "{name} ({rank}) exceeds the maximum site rank ({max})"
                    )));
                }
            }
            if self.teacher_high_layer >= self.layers {
                return Err(Error::Config(format!(
                    "teacher_high_layer ({}) out of range for {} layers",
                    self.teacher_high_layer, self.layers
                )));
            }
        }
        Ok(())
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_true: f64,
    pub l_reg: f64,
    pub l_combined: f64,
    pub active: usize,
    pub cap: usize,
}

/// Everything a run leaves behind besides the trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub decisions: Vec<PruneDecision>,
    pub final_report: AllocationReport,
}

pub struct FitResult {
    pub model: Model,
    pub log: RunLog,
}

/// Owns one run's mutable state; `fit` drives it start to finish.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub model: Model,
    data: &'a Dataset,
    sched: BudgetSchedule,
    batch_rng: Rng,
    pub step: usize,
    pub decisions: Vec<PruneDecision>,
    pub records: Vec<StepRecord>,
}

impl<'a> Trainer<'a> {
    /// Clones the task's frozen base, attaches adapters, optionally runs
    /// the full-training warm start first.
    pub fn new(cfg: &'a TrainConfig, task: &'a Task) -> Result<Self> {
        cfg.validate()?;
        let mut model = task.base.clone();
        if cfg.pretrain_steps > 0 {
            let pretrain = task.pretrain.as_ref().ok_or_else(|| {
                Error::Config("pretrain_steps set but the task has no pretrain split".into())
            })?;
            fit_full_base(
                &mut model,
                pretrain,
                cfg.pretrain_steps,
                cfg.gamma,
                cfg.batch_size,
                cfg.optimizer,
                Rng::stream(cfg.seed, 0x9129),
            )?;
        }
        match cfg.adapter {
            AdapterKind::Dora => model.attach_dora(cfg.r_prime(), cfg.seed),
            AdapterKind::Lora => model.attach_lora(cfg.lora_rank, cfg.seed),
            AdapterKind::None => {}
        }
        Ok(Trainer {
            cfg,
            model,
            data: &task.data.train,
            sched: cfg.schedule()?,
            batch_rng: Rng::stream(cfg.seed, 0xBA7C),
            step: 0,
            decisions: Vec::new(),
            records: Vec::new(),
        })
    }

    /// First step of the fixed-distribution phase.
    fn freeze_step(&self) -> usize {
        self.sched.freeze_step()
    }

    fn is_prune_event(&self, t: usize) -> bool {
        if self.cfg.adapter != AdapterKind::Dora {
            return false;
        }
        let freeze = self.freeze_step();
        (t >= self.cfg.t_i && t < freeze && t % self.cfg.prune_interval == 0) || t == freeze
    }

    /// Runs one full training step and appends its record.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        self.step += 1;
        let t = self.step;
        let ids = self.batch_rng.indices(self.data.inputs.len(), self.cfg.batch_size);

        let tape = Tape::new();
        let nodes = self.model.bind(&tape, TrainScope::Adapters);
        let (l_true, l_reg, l_combined) =
            batch_losses(&self.model, &tape, &nodes, self.data, &ids, self.cfg.eta)?;

        let record_losses = (l_true.item(), l_reg.item(), l_combined.item());
        if !record_losses.2.is_finite() {
            return Err(self.non_finite_diagnostic(t));
        }

        tape.backward(&l_combined)?;
        self.model.absorb_grads(&nodes);

        let in_final_phase = t > self.freeze_step();
        apply_updates(
            &mut self.model,
            self.cfg.optimizer,
            self.cfg.gamma,
            TrainScope::Adapters,
            in_final_phase,
        );

        for site in self.model.dora_sites_mut() {
            for comp in &mut site.components {
                comp.restore_check();
            }
        }

        if self.cfg.adapter == AdapterKind::Dora {
            let mut sites = self.model.dora_sites_mut();
            score_and_smooth(&mut sites, self.cfg.beta, t)?;
        }

        let cap = self.sched.allowed_total(t.min(self.cfg.steps), self.model.num_sites())?;
        if self.is_prune_event(t) {
            let mut sites = self.model.dora_sites_mut();
            let decision = enforce_budget(&mut sites, cap, t);
            self.decisions.push(decision);
        }

        self.model.zero_grads();

        let record = StepRecord {
            step: t,
            l_true: record_losses.0,
            l_reg: record_losses.1,
            l_combined: record_losses.2,
            active: self.model.active_components(),
            cap,
        };
        self.records.push(record.clone());
        Ok(record)
    }

    fn non_finite_diagnostic(&self, step: usize) -> Error {
        for site in self.model.dora_sites() {
            for (i, comp) in site.components.iter().enumerate() {
                if !(comp.a.value.is_finite()
                    && comp.b.value.is_finite()
                    && comp.c.value.is_finite())
                {
                    return Error::NonFinite {
                        step,
                        what: format!("component {i} of {}", site.layer_id),
                    };
                }
            }
        }
        Error::NonFinite {
            step,
            what: "combined loss".into(),
        }
    }

    pub fn run(mut self) -> Result<FitResult> {
        for _ in 0..self.cfg.steps {
            self.step_once()?;
        }
        let sites = self.model.dora_sites();
        let final_report = allocation_report(&sites, self.step);
        Ok(FitResult {
            model: self.model,
            log: RunLog {
                records: self.records,
                decisions: self.decisions,
                final_report,
            },
        })
    }
}

/// Runs the whole schedule and returns the adapted model plus its log.
pub fn fit(cfg: &TrainConfig, task: &Task) -> Result<FitResult> {
    Trainer::new(cfg, task)?.run()
}

/// Task loss, regularizer, and combined loss for one minibatch.
fn batch_losses(
    model: &Model,
    tape: &Tape,
    nodes: &ModelNodes,
    data: &Dataset,
    ids: &[usize],
    eta: f64,
) -> Result<(Node, Node, Node)> {
    let inputs: Vec<&Matrix> = ids.iter().map(|&i| &data.inputs[i]).collect();
    let preds = model.forward_batch(tape, nodes, &inputs)?;
    let l_true = match &data.targets {
        Targets::Regression(rows) => {
            let picked: Vec<&Matrix> = ids.iter().map(|&i| &rows[i]).collect();
            let stacked = Matrix::stack_rows(&picked)?;
            preds.mean_sq_error(&stacked)?
        }
        Targets::Classes(labels) => {
            let picked: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            preds.cross_entropy(&picked)?
        }
    };
    let factors = Model::component_factors(nodes);
    let l_reg = if factors.is_empty() {
        tape.constant(Matrix::scalar(0.0))
    } else {
        dem_loss(tape, &factors)?
    };
    let l_combined = combined_loss(&l_true, &l_reg, eta)?;
    Ok((l_true, l_reg, l_combined))
}

/// Optimizer update honoring the scope and the fixed final distribution:
/// in the last phase, gates of inactive components are pinned at zero.
fn apply_updates(
    model: &mut Model,
    optimizer: OptimizerKind,
    gamma: f64,
    scope: TrainScope,
    in_final_phase: bool,
) {
    let step_param = |p: &mut crate::params::Param| match optimizer {
        OptimizerKind::Adam => p.adam_step(gamma, ADAM_BETA1, ADAM_BETA2, ADAM_EPS),
        OptimizerKind::Sgd => p.sgd_step(gamma),
    };
    for block in &mut model.blocks {
        for site in &mut block.sites {
            match scope {
                TrainScope::Adapters => {
                    for comp in &mut site.components {
                        step_param(&mut comp.a);
                        step_param(&mut comp.b);
                        if !(in_final_phase && !comp.active) {
                            step_param(&mut comp.c);
                        }
                    }
                    if let Some(pair) = &mut site.lora {
                        step_param(&mut pair.a);
                        step_param(&mut pair.b);
                    }
                }
                TrainScope::FullBase => {
                    step_param(&mut site.w0);
                }
            }
        }
        if scope == TrainScope::FullBase {
            step_param(&mut block.b1);
            step_param(&mut block.b2);
        }
    }
    step_param(&mut model.head_w);
    step_param(&mut model.head_b);
}

/// Plain full training of the base weights (oracle arm and warm starts):
/// no adapters, no regularizer, no pruning.
pub fn fit_full_base(
    model: &mut Model,
    data: &Dataset,
    steps: usize,
    gamma: f64,
    batch_size: usize,
    optimizer: OptimizerKind,
    mut batch_rng: Rng,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let ids = batch_rng.indices(data.inputs.len(), batch_size);
        let tape = Tape::new();
        let nodes = model.bind(&tape, TrainScope::FullBase);
        let (l_true, _, _) = batch_losses(model, &tape, &nodes, data, &ids, 0.0)?;
        let value = l_true.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "full fine-tuning loss".into(),
            });
        }
        tape.backward(&l_true)?;
        model.absorb_grads(&nodes);
        apply_updates(model, optimizer, gamma, TrainScope::FullBase, false);
        model.zero_grads();
        losses.push(value);
    }
    Ok(losses)
}

//! Dynamic low-rank adaptation of a frozen toy transformer.
//!
//! The crate trains a frozen encoder by attaching gated rank-1 update
//! components to each projection matrix, scoring every component's share
//! of its layer's update, and pruning low scorers on a cubic budget
//! schedule, with a variance penalty keeping factor entries balanced.
//!
//! Layout follows the pipeline:
//! - [`numerics`]: dense matrices and the reverse-mode tape.
//! - [`dora`]: frozen base + gated rank-1 components, plus the
//!   uniform-rank control adapter.
//! - [`scoring`], [`schedule`], [`allocator`]: importance scores,
//!   the budget timetable, and global prune/keep decisions.
//! - [`dem`]: the variance regularizer.
//! - [`model`]: the toy transformer host.
//! - [`train`], [`tasks`]: the training loop and synthetic tasks.
//! - [`config`], [`checkpoint`], [`runlog`], [`report`], [`ablate`]:
//!   run artifacts and experiment suites.

pub mod ablate;
pub mod allocator;
pub mod checkpoint;
pub mod config;
pub mod dem;
pub mod dora;
pub mod error;
pub mod model;
pub mod numerics;
pub mod params;
pub mod report;
pub mod rng;
pub mod runlog;
pub mod schedule;
pub mod scoring;
pub mod tasks;
pub mod train;

pub use allocator::{AllocationReport, AllocationRow, PruneDecision};
pub use dora::{DoraLinear, LayerId, LoraComponent, LoraPair, MatrixKind};
pub use error::{Error, Result};
pub use model::{Model, TransformerConfig};
pub use numerics::{Matrix, Node, Tape};
pub use params::Param;
pub use schedule::{BudgetSchedule, ScheduleMode};
pub use train::{AdapterKind, OptimizerKind, RunLog, StepRecord, TrainConfig};

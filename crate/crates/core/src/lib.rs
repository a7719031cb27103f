//! In-context steered policy optimization on a micro autoregressive policy.
//!
//! Mixed-policy GRPO where the off-policy rollout of each group comes from
//! the policy itself conditioned on expert demonstrations, filtered by
//! expert-region reject sampling and rewarded with an annealed bonus. The
//! policy is a one-layer transformer trained with a small reverse-mode tape
//! on synthetic rule-inference tasks with exact verifiers.

// Validation uses `!(x > 0.0)` on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod shaping;
pub mod tape;
pub mod task;
pub mod telemetry;
pub mod trainer;

pub use config::{Mode, TrainConfig};
pub use error::{IcpoError, Result};
pub use objective::{AdvantageSet, LossDiagnostics, ObjectiveConfig, OffPolicyContext};
pub use policy::{Arch, PolicyCheckpoint, TokenDistribution};
pub use rollout::{ConditioningMode, RolloutGroup, RolloutRecord, Trajectory};
pub use shaping::ShapingConfig;
pub use task::{DemoBank, Demonstration, TaskFamily, TaskInstance, Token, Vocab};
pub use telemetry::{EvalConfig, EvalReport, MetricsSink, StepMetrics};
pub use trainer::{Experiment, RunOutcome, TrainerState, WarmStartOutcome};

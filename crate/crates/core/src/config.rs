//! Flat, versioned training configuration.
//!
//! Every key has a default, so an empty document is a valid configuration.
//! Unknown keys and schema mismatches are errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io, IcpoError, Result};
use crate::objective::{ObjectiveConfig, OffPolicyContext};
use crate::optim::AdamConfig;
use crate::policy::Arch;
use crate::rollout::RolloutConfig;
use crate::shaping::{AcceptRule, ShapingConfig};
use crate::task::RuleFamilyConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Which mechanisms a run enables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "grpo")]
    Grpo,
    #[serde(rename = "icpo")]
    Icpo,
    #[default]
    #[serde(rename = "icpo-rs")]
    IcpoRs,
}

impl Mode {
    pub fn uses_ief(self) -> bool {
        !matches!(self, Mode::Grpo)
    }

    pub fn shapes_reward(self) -> bool {
        matches!(self, Mode::IcpoRs)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Grpo => "grpo",
            Mode::Icpo => "icpo",
            Mode::IcpoRs => "icpo-rs",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = IcpoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Mode::Grpo),
            "icpo" => Ok(Mode::Icpo),
            "icpo-rs" | "icpo_rs" => Ok(Mode::IcpoRs),
            _ => Err(IcpoError::Config(format!(
                "unknown mode {s:?}; expected grpo, icpo or icpo-rs"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,

    // task family
    pub vocab_size: usize,
    pub query_len: usize,
    pub answer_len: usize,
    pub rules: Vec<String>,
    pub query_window: usize,
    pub bank_per_rule: usize,
    pub bank_percent: u64,
    pub eval_percent: u64,

    // policy
    pub d_model: usize,
    pub max_context: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,

    // rollouts
    pub batch_prompts: usize,
    pub group_size: usize,
    pub n_off: usize,
    pub k_demos: usize,
    pub temperature: f64,
    pub ief_temperature: f64,
    pub max_gen_len: usize,

    // shaping
    pub delta: f64,
    pub alpha: f64,
    pub total_steps: u64,

    // objective
    pub epsilon_clip: f64,
    pub lambda_shape: f64,
    pub beta_kl: f64,
    pub entropy_coef: f64,
    pub eps_std: f64,
    pub shape_off_policy: bool,
    pub off_policy_context: OffPolicyContext,

    // optimizer
    /// Reinforcement-learning step size; the warm start uses `warm_start_lr`.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub updates_per_batch: usize,

    // warm start
    pub warm_start_steps: u64,
    pub warm_start_batch: usize,
    pub warm_start_lr: f64,
    pub warm_start_min_steps: u64,
    pub warm_start_eval_every: u64,
    pub warm_start_eval_tasks: usize,
    pub warm_start_margin: f64,
    pub warm_start_zero_shot_frac: f64,

    // evaluation
    pub eval_every: u64,
    pub eval_tasks: usize,
    pub eval_temperature: f64,
    pub eval_baseline_temperature: f64,

    /// Trainer state is written every this many steps and at the end; 0
    /// writes only at the end.
    pub checkpoint_every: u64,
    pub dump_rollouts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: Mode::IcpoRs,
            seed: 0,

            vocab_size: 32,
            query_len: 4,
            answer_len: 4,
            rules: [
                "reverse", "rotate:1", "add:1", "add:5", "perm:1", "perm:2", "perm:3", "perm:4",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            query_window: 10,
            bank_per_rule: 16,
            bank_percent: 20,
            eval_percent: 20,

            d_model: 32,
            max_context: 64,
            n_layers: 1,
            n_heads: 2,
            d_ff: 128,

            batch_prompts: 16,
            group_size: 8,
            n_off: 1,
            k_demos: 1,
            temperature: 1.0,
            ief_temperature: 1.0,
            max_gen_len: 8,

            delta: 1.0,
            alpha: 1.0,
            total_steps: 400,

            epsilon_clip: 0.2,
            lambda_shape: 0.01,
            beta_kl: 1e-3,
            entropy_coef: 0.0,
            eps_std: 1e-6,
            shape_off_policy: true,
            off_policy_context: OffPolicyContext::Query,

            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            updates_per_batch: 1,

            warm_start_steps: 2000,
            warm_start_batch: 32,
            warm_start_lr: 3e-3,
            warm_start_min_steps: 1000,
            warm_start_eval_every: 250,
            warm_start_eval_tasks: 500,
            warm_start_margin: 0.10,
            warm_start_zero_shot_frac: 0.25,

            eval_every: 0,
            eval_tasks: 200,
            eval_temperature: 0.6,
            eval_baseline_temperature: 0.6,

            checkpoint_every: 50,
            dump_rollouts: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| IcpoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            IcpoError::Config(m) => IcpoError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| IcpoError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(IcpoError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.arch().validate()?;
        crate::task::TaskFamily::new(&self.rule_family())?;
        if self.group_size < 2 {
            return Err(IcpoError::Config("group_size must be at least 2".into()));
        }
        if self.n_off > 1 || self.n_off >= self.group_size {
            return Err(IcpoError::Config(format!(
                "n_off must be 0 or 1 and below group_size, got {}",
                self.n_off
            )));
        }
        if self.batch_prompts == 0 || self.updates_per_batch == 0 {
            return Err(IcpoError::Config(
                "batch_prompts and updates_per_batch must be positive".into(),
            ));
        }
        if self.updates_per_batch > self.batch_prompts {
            return Err(IcpoError::Config(
                "updates_per_batch cannot exceed batch_prompts".into(),
            ));
        }
        if self.k_demos == 0 || self.max_gen_len == 0 {
            return Err(IcpoError::Config(
                "k_demos and max_gen_len must be positive".into(),
            ));
        }
        if self.bank_per_rule <= self.k_demos {
            return Err(IcpoError::Config(format!(
                "bank_per_rule ({}) must exceed k_demos ({})",
                self.bank_per_rule, self.k_demos
            )));
        }
        let expert_len = self.k_demos * (self.query_len + self.answer_len + 3) + self.query_len + 2;
        if expert_len + self.max_gen_len > self.max_context {
            return Err(IcpoError::Config(format!(
                "a {}-shot context plus {} generated tokens exceeds max_context {}",
                self.k_demos, self.max_gen_len, self.max_context
            )));
        }
        for (name, t) in [
            ("temperature", self.temperature),
            ("ief_temperature", self.ief_temperature),
            ("eval_temperature", self.eval_temperature),
            ("eval_baseline_temperature", self.eval_baseline_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(IcpoError::Config(format!(
                    "{name} must be positive, got {t}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.warm_start_zero_shot_frac) {
            return Err(IcpoError::Config(
                "warm_start_zero_shot_frac must lie in [0, 1]".into(),
            ));
        }
        if self.warm_start_batch == 0
            || self.warm_start_eval_every == 0
            || self.warm_start_eval_tasks == 0
        {
            return Err(IcpoError::Config(
                "warm-start batch, eval interval and eval task count must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.warm_start_lr > 0.0) {
            return Err(IcpoError::Config("learning rates must be positive".into()));
        }
        self.shaping().validate()?;
        self.objective().validate()?;
        Ok(())
    }

    pub fn rule_family(&self) -> RuleFamilyConfig {
        RuleFamilyConfig {
            vocab_size: self.vocab_size,
            query_len: self.query_len,
            answer_len: self.answer_len,
            rules: self.rules.clone(),
            query_window: self.query_window,
            bank_per_rule: self.bank_per_rule,
            bank_percent: self.bank_percent,
            eval_percent: self.eval_percent,
        }
    }

    pub fn arch(&self) -> Arch {
        Arch {
            vocab: self.vocab_size,
            d_model: self.d_model,
            max_context: self.max_context,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
        }
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            group_size: self.group_size,
            n_off: if self.mode.uses_ief() { self.n_off } else { 0 },
            k_demos: self.k_demos,
            temperature: self.temperature,
            ief_temperature: self.ief_temperature,
            max_gen_len: self.max_gen_len,
        }
    }

    pub fn shaping(&self) -> ShapingConfig {
        ShapingConfig {
            delta: self.delta,
            alpha: self.alpha,
            total_steps: self.total_steps.max(1),
            rs_enabled: self.mode.shapes_reward(),
            accept_rule: AcceptRule::Geq,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            epsilon_clip: self.epsilon_clip,
            lambda_shape: self.lambda_shape,
            beta_kl: self.beta_kl,
            entropy_coef: self.entropy_coef,
            eps_std: self.eps_std,
            shape_off_policy: self.shape_off_policy,
            off_policy_context: self.off_policy_context,
            temperature: self.temperature,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            grad_clip: self.grad_clip,
        }
    }

    pub fn eval(&self) -> crate::telemetry::EvalConfig {
        crate::telemetry::EvalConfig {
            k: self.k_demos,
            temperature: self.eval_temperature,
            baseline_temperature: self.eval_baseline_temperature,
            max_gen_len: self.max_gen_len,
        }
    }

    pub fn warm_start_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.warm_start_lr,
            ..self.adam()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.group_size, 8);
        assert_eq!(cfg.n_off, 1);
        assert_eq!(cfg.total_steps, 400);
        assert_eq!(cfg.lambda_shape, 0.01);
        assert_eq!(cfg.entropy_coef, 0.0);
        assert_eq!((cfg.alpha, cfg.delta), (1.0, 1.0));
        assert_eq!(cfg.eval_temperature, 0.6);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = TrainConfig::from_toml_str("learning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, IcpoError::Config(m) if m.contains("learning_rate")));
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        assert!(TrainConfig::from_toml_str("schema_version = 2\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = TrainConfig {
            mode: Mode::Grpo,
            seed: 17,
            off_policy_context: OffPolicyContext::Expert,
            ..Default::default()
        };
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("mode = \"grpo\""));
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn mode_gates_mechanisms() {
        let mut cfg = TrainConfig {
            mode: Mode::Grpo,
            ..Default::default()
        };
        assert_eq!(cfg.rollout().n_off, 0);
        assert!(!cfg.shaping().rs_enabled);
        cfg.mode = Mode::Icpo;
        assert_eq!(cfg.rollout().n_off, 1);
        assert!(!cfg.shaping().rs_enabled);
        cfg.mode = Mode::IcpoRs;
        assert!(cfg.shaping().rs_enabled);
        assert_eq!("icpo-rs".parse::<Mode>().unwrap(), Mode::IcpoRs);
        assert!("ppo".parse::<Mode>().is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            "group_size = 1",
            "n_off = 2",
            "epsilon_clip = 1.5",
            "lambda_shape = 0.0",
            "rules = []",
            "max_context = 20",
            "delta = 0.0",
        ] {
            assert!(TrainConfig::from_toml_str(doc).is_err(), "{doc}");
        }
    }
}

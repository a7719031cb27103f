//! Trajectory sampling from frozen policy snapshots.
//!
//! Every group holds `N` on-policy rollouts of the bare prompt and, in the
//! in-context modes, one candidate generated by the same frozen policy
//! conditioned on expert demonstrations. Behavior log-probabilities are
//! recorded under the context each trajectory was actually sampled from.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{IcpoError, Result};
use crate::policy::{next_token_logprobs, PolicyCheckpoint};
use crate::rng::{derive_seed, rng_from, stream};
use crate::task::{
    build_expert_context, build_query_context, sample_demonstrations, verify, DemoBank,
    Demonstration, TaskInstance, Token, Vocab,
};

/// How a trajectory's context was formed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditioningMode {
    OnPolicy,
    Ief { demos: Vec<Demonstration> },
}

impl ConditioningMode {
    pub fn is_ief(&self) -> bool {
        matches!(self, ConditioningMode::Ief { .. })
    }
}

/// One sampled completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub mode: ConditioningMode,
    /// Bare prompt for on-policy rollouts, the expert context for IEF ones.
    pub context: Vec<Token>,
    pub generated: Vec<Token>,
    pub behavior_logprobs: Vec<f64>,
    /// Entropy of each sampling distribution, for diagnostics.
    pub entropies: Vec<f64>,
    pub raw_reward: f64,
    pub shaped_reward: f64,
    pub advantage: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generated.is_empty()
    }
}

/// Mean and population standard deviation of a group's training rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
}

/// The rollouts for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task: TaskInstance,
    pub trajectories: Vec<Trajectory>,
    /// Expert-conditioned candidate, not yet mixed into `trajectories`.
    pub ief_candidate: Option<Trajectory>,
    /// The on-policy rollout an accepted candidate replaced.
    pub displaced: Option<Trajectory>,
    pub n_on: usize,
    pub n_off: usize,
    /// `None` whenever the reward multiset changed since the last refresh.
    pub stats: Option<GroupStats>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Raw rewards of every on-policy rollout sampled for this prompt,
    /// including one displaced by mixing.
    pub fn on_policy_raw_rewards(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .filter(|t| !t.mode.is_ief())
            .chain(self.displaced.as_ref())
            .map(|t| t.raw_reward)
            .collect()
    }

    pub fn shaped_rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.shaped_reward).collect()
    }

    pub fn refresh_stats(&mut self) {
        let r = self.shaped_rewards();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        self.stats = Some(GroupStats {
            mean,
            std: var.sqrt(),
        });
    }
}

/// The rollout-related subset of the training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub group_size: usize,
    /// 1 generates an IEF candidate per group, 0 disables it.
    pub n_off: usize,
    pub k_demos: usize,
    pub temperature: f64,
    pub ief_temperature: f64,
    pub max_gen_len: usize,
}

/// Autoregressive sampling until EOS or `max_gen_len` tokens. Rewards are
/// left at zero.
pub fn sample_trajectory(
    frozen: &PolicyCheckpoint,
    context: &[Token],
    temperature: f64,
    max_gen_len: usize,
    eos: Token,
    rng_seed: u64,
) -> Result<Trajectory> {
    if max_gen_len == 0 {
        return Err(IcpoError::Precondition(
            "max_gen_len must be at least 1".into(),
        ));
    }
    let needed = context.len() + max_gen_len;
    if needed > frozen.arch.max_context {
        return Err(IcpoError::ContextOverflow {
            len: needed,
            max: frozen.arch.max_context,
        });
    }
    let mut rng = rng_from(rng_seed);
    let mut tokens = context.to_vec();
    let mut generated = Vec::with_capacity(max_gen_len);
    let mut behavior_logprobs = Vec::with_capacity(max_gen_len);
    let mut entropies = Vec::with_capacity(max_gen_len);
    for _ in 0..max_gen_len {
        let lp = next_token_logprobs(frozen, &tokens, temperature)?;
        let tok = sample_index(&lp, rng.gen::<f64>());
        entropies.push(
            -lp.iter()
                .map(|l| l.exp() * l)
                .filter(|v| v.is_finite())
                .sum::<f64>(),
        );
        behavior_logprobs.push(lp[tok]);
        generated.push(tok);
        tokens.push(tok);
        if tok == eos {
            break;
        }
    }
    if let Some(bad) = behavior_logprobs.iter().find(|l| !l.is_finite()) {
        return Err(IcpoError::Numerical(format!(
            "non-finite behavior logprob {bad}"
        )));
    }
    Ok(Trajectory {
        mode: ConditioningMode::OnPolicy,
        context: context.to_vec(),
        generated,
        behavior_logprobs,
        entropies,
        raw_reward: 0.0,
        shaped_reward: 0.0,
        advantage: 0.0,
    })
}

/// Inverse-CDF draw from log-probabilities.
fn sample_index(logprobs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, l) in logprobs.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the accumulated mass
    logprobs
        .iter()
        .enumerate()
        .rev()
        .find(|(_, l)| l.is_finite() && **l > f64::NEG_INFINITY)
        .map(|(i, _)| i)
        .unwrap_or(logprobs.len() - 1)
}

fn score(traj: &mut Trajectory, task: &TaskInstance, vocab: &Vocab) {
    let r = if verify(task, &traj.generated, vocab) {
        1.0
    } else {
        0.0
    };
    traj.raw_reward = r;
    traj.shaped_reward = r;
}

/// `N` on-policy rollouts of the bare prompt plus, when `n_off > 0` and the
/// bank holds demonstrations for the task's rule, one IEF candidate. All
/// trajectories are scored with the verifier.
pub fn generate_group(
    frozen: &PolicyCheckpoint,
    task: &TaskInstance,
    bank: &DemoBank,
    cfg: &RolloutConfig,
    vocab: &Vocab,
    rng_seed: u64,
) -> Result<RolloutGroup> {
    if cfg.group_size < 2 {
        return Err(IcpoError::Precondition(
            "group size must be at least 2".into(),
        ));
    }
    let prompt = build_query_context(&task.query, vocab);
    let trajectories = (0..cfg.group_size)
        .map(|j| {
            let seed = derive_seed(rng_seed, &[stream::ON_POLICY, j as u64]);
            let mut t = sample_trajectory(
                frozen,
                &prompt,
                cfg.temperature,
                cfg.max_gen_len,
                vocab.eos(),
                seed,
            )?;
            score(&mut t, task, vocab);
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;

    let ief_candidate = if cfg.n_off > 0 && !bank.for_rule(task.rule_id).is_empty() {
        let demos = sample_demonstrations(
            bank,
            task.rule_id,
            cfg.k_demos,
            derive_seed(rng_seed, &[stream::IEF_DEMOS]),
            Some(&task.query),
        )?;
        let ctx = build_expert_context(&demos, &task.query, vocab, frozen.arch.max_context)?;
        let mut t = sample_trajectory(
            frozen,
            &ctx,
            cfg.ief_temperature,
            cfg.max_gen_len,
            vocab.eos(),
            derive_seed(rng_seed, &[stream::IEF_ROLLOUT]),
        )?;
        t.mode = ConditioningMode::Ief { demos };
        score(&mut t, task, vocab);
        Some(t)
    } else {
        None
    };

    let mut group = RolloutGroup {
        task: task.clone(),
        trajectories,
        ief_candidate,
        displaced: None,
        n_on: cfg.group_size,
        n_off: 0,
        stats: None,
    };
    group.refresh_stats();
    Ok(group)
}

/// One line of a rollout dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: u64,
    pub prompt_index: usize,
    pub rule_id: usize,
    /// `"on_policy"` or `"ief"`.
    pub mode: String,
    /// Whether the trajectory is part of the post-mix training group.
    pub in_group: bool,
    pub context: Vec<Token>,
    pub generated: Vec<Token>,
    pub behavior_logprobs: Vec<f64>,
    pub raw_reward: f64,
    pub shaped_reward: f64,
    pub gold_answer: Vec<Token>,
}

impl RolloutRecord {
    /// Records for every trajectory of a (mixed) group, candidates and
    /// displaced rollouts included.
    pub fn from_group(step: u64, prompt_index: usize, group: &RolloutGroup) -> Vec<Self> {
        let rec = |t: &Trajectory, in_group: bool| RolloutRecord {
            step,
            prompt_index,
            rule_id: group.task.rule_id,
            mode: if t.mode.is_ief() { "ief" } else { "on_policy" }.to_string(),
            in_group,
            context: t.context.clone(),
            generated: t.generated.clone(),
            behavior_logprobs: t.behavior_logprobs.clone(),
            raw_reward: t.raw_reward,
            shaped_reward: t.shaped_reward,
            gold_answer: group.task.gold_answer.clone(),
        };
        let mut out: Vec<Self> = group.trajectories.iter().map(|t| rec(t, true)).collect();
        // a candidate still attached here was rejected (or never offered)
        if let Some(c) = &group.ief_candidate {
            out.push(rec(c, false));
        }
        if let Some(d) = &group.displaced {
            out.push(rec(d, false));
        }
        out
    }
}
